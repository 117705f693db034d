"""Interleaved SM/PM timeline: per-minute secondary clearings against held
primary setpoints, five-minute primary clearings on aggregated bids, budget
and commitment bookkeeping, and the with/without-SMO comparison loops.

Within a timestep every SMO is cleared before the PM clears; the PM's
setpoints and d-LMPs then apply to the following secondary steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import commitment as cm
from . import convex_engine as ce
from . import primary_market as pm
from . import secondary_market as sm
from .grid_model import RadialNetwork


class OrchestratorError(Exception):
    pass


class MissingProfiles(OrchestratorError):
    pass


@dataclass(frozen=True)
class Timeline:
    """Market clocks in minutes; the WEM period is locked to the PM period."""

    dt_s_min: int = 1
    dt_p_min: int = 5
    horizon_min: int = 1440
    dt_wem_min: int | None = None

    def __post_init__(self):
        if self.dt_wem_min is None:
            object.__setattr__(self, "dt_wem_min", self.dt_p_min)
        if self.dt_s_min > self.dt_p_min:
            raise OrchestratorError("dt_s must be <= dt_p")
        if self.dt_p_min % self.dt_s_min != 0:
            raise OrchestratorError("dt_p must be a multiple of dt_s")
        if self.horizon_min % self.dt_p_min != 0:
            raise OrchestratorError("horizon must be a multiple of dt_p")
        if self.dt_wem_min != self.dt_p_min:
            raise OrchestratorError("dt_wem is locked to dt_p")

    @property
    def n_s(self) -> int:
        return self.dt_p_min // self.dt_s_min

    @property
    def n_p(self) -> int:
        return self.horizon_min // self.dt_p_min

    @property
    def n_steps(self) -> int:
        return self.horizon_min // self.dt_s_min

    @property
    def dt_s_hours(self) -> float:
        return self.dt_s_min / 60.0

    @property
    def dt_p_hours(self) -> float:
        return self.dt_p_min / 60.0

    def is_pm_boundary(self, step: int) -> bool:
        return (step * self.dt_s_min) % self.dt_p_min == 0

    def pm_index(self, step: int) -> int:
        return (step * self.dt_s_min) // self.dt_p_min


@dataclass(frozen=True)
class DCASpec:
    """Per-DCA personality fixed at scenario generation."""

    dca_id: str
    node: int
    kind: str  # "gen" | "load"
    flex_dn_p: float
    flex_up_p: float
    flex_dn_q: float
    flex_up_q: float
    beta_p: float
    beta_q: float
    follow_prob: float


@dataclass
class Scenario:
    """Everything a run needs, fully determined by (config, seed)."""

    net: RadialNetwork
    timeline: Timeline
    dca_specs: dict[int, list[DCASpec]]  # node -> DCAs
    dca_baselines: dict[str, np.ndarray]  # dca_id -> (n_steps, 2) kW / kvar
    node_baselines: dict[int, np.ndarray]  # node -> (n_steps, 2) kW / kvar
    lmp: np.ndarray  # (n_p,) $/kWh
    seed: int
    caps: tuple[float, float] = (0.2, 0.2)
    epsilon: float = 0.05
    xi: float = 100.0
    budget_mode: str = "quasi_multiperiod"
    q_lmp_ratio: float = 0.1
    beta_pu_scale: float = 4.0  # node disutility scaling onto pu quantities
    alpha_fixed: dict[int, float] = field(default_factory=dict)
    response_overshoot: float = 0.5
    response_noise: float = 0.5
    without_flex_fraction: float = 0.5
    without_gen_share: float = 0.25  # PMO's assumed behind-the-meter gen/load gross-up
    flat_rate: float = 0.129

    def lam(self, p_idx: int) -> tuple[float, float]:
        lp = float(self.lmp[min(p_idx, len(self.lmp) - 1)])
        return lp, self.q_lmp_ratio * lp


@dataclass
class SMRow:
    t: int
    smo: int
    dca: str
    p_star: float
    dp: float
    q_star: float
    dq: float
    mu_p: float
    mu_q: float
    score: float


@dataclass
class PMRow:
    t: int
    node: int
    p_net: float
    q_net: float
    v_sq: float
    dlmp_p: float
    dlmp_q: float


@dataclass
class LineRow:
    t: int
    from_node: int
    to_node: int
    p: float
    q: float
    l: float
    socp_gap: float


@dataclass
class RangeRow:
    """Aggregate flexibility range offered for one (node, t_p)."""

    t: int
    node: int
    lo: float
    hi: float


@dataclass
class RunResults:
    mode: str
    sm_rows: list[SMRow] = field(default_factory=list)
    pm_rows: list[PMRow] = field(default_factory=list)
    line_rows: list[LineRow] = field(default_factory=list)
    range_rows: list[RangeRow] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    clearings: list = field(default_factory=list)  # (t, node, SMClearing)
    pm_clearings: list = field(default_factory=list)  # (t, PMClearing)
    pcc_energy_kwh: float = 0.0
    loss_energy_kwh: float = 0.0
    metadata: dict = field(default_factory=dict)


def aggregate_smo_bid(
    clearing: sm.SMClearing,
    dca_kinds: dict[str, str],
    betas: tuple[float, float],
    alphas: tuple[float, float],
    node: int,
    s_base_kw: float,
    baseline_refs: tuple[float, float] | None = None,
) -> pm.SMOBid:
    """Aggregate one SMO's cleared DCAs into its primary-market bid (pu).

    Net baseline is the cleared total; each side's flexibility is the sum of
    its members' half-widths; generator/load sides split by DCA tag.
    baseline_refs carries the aggregated true baseline loads (kW) used as
    the disutility reference.
    """
    if not clearing.dcas:
        raise OrchestratorError("empty clearing")
    gp = gq = lp_ = lq = 0.0
    gdp = gdq = ldp = ldq = 0.0
    for d in clearing.dcas:
        if dca_kinds[d.dca_id] == "gen":
            gp += d.p_star
            gq += d.q_star
            gdp += d.dp
            gdq += d.dq
        else:
            lp_ -= d.p_star
            lq -= d.q_star
            ldp += d.dp
            ldq += d.dq
    k = 1.0 / s_base_kw
    pg0 = max(gp, 0.0) * k
    pl0 = max(lp_, 0.0) * k
    qg0 = max(gq, 0.0) * k
    ql0 = max(lq, 0.0) * k
    refs = (pl0 / k, ql0 / k) if baseline_refs is None else baseline_refs
    return pm.SMOBid(
        node=node,
        pg0=pg0,
        qg0=qg0,
        pl0=pl0,
        ql0=ql0,
        pg_lo=max(pg0 - gdp * k, 0.0),
        pg_hi=pg0 + gdp * k,
        pl_lo=max(pl0 - ldp * k, 0.0),
        pl_hi=pl0 + ldp * k,
        qg_lo=max(qg0 - gdq * k, 0.0),
        qg_hi=qg0 + gdq * k,
        ql_lo=max(ql0 - ldq * k, 0.0),
        ql_hi=ql0 + ldq * k,
        beta_p=betas[0],
        beta_q=betas[1],
        alpha_p=alphas[0],
        alpha_q=alphas[1],
        pl_ref=max(refs[0], 0.0) * k,
        ql_ref=max(refs[1], 0.0) * k,
    )


def _step_bids(scn: Scenario, node: int, step: int) -> list[sm.DCABid]:
    bids = []
    for spec in scn.dca_specs[node]:
        p0, q0 = scn.dca_baselines[spec.dca_id][step]
        p_lo, p_hi = _flex_interval(p0, spec.flex_dn_p, spec.flex_up_p)
        q_lo, q_hi = _flex_interval(q0, spec.flex_dn_q, spec.flex_up_q)
        bids.append(
            sm.DCABid(
                dca_id=spec.dca_id,
                p0=p0,
                q0=q0,
                p_lo=p_lo,
                p_hi=p_hi,
                q_lo=q_lo,
                q_hi=q_hi,
                beta_p=spec.beta_p,
                beta_q=spec.beta_q,
            )
        )
    return bids


def _flex_interval(x0: float, dn: float, up: float) -> tuple[float, float]:
    lo = x0 * (1.0 - dn)
    hi = x0 * (1.0 + up)
    return (lo, hi) if lo <= hi else (hi, lo)


@dataclass
class ScenarioState:
    """Mutable run state owned by the orchestrator."""

    scenario: Scenario
    mode: str = "with_sm"
    setpoints: dict[int, tuple[float, float]] = field(default_factory=dict)  # kW
    dlmps: dict[int, tuple[float, float]] = field(default_factory=dict)  # $/kWh
    tariff_anchors: dict[int, dict[str, tuple[float, float]]] = field(default_factory=dict)
    ledgers: dict[int, sm.BudgetLedger] = field(default_factory=dict)
    commitment: cm.CommitmentLedger | None = None
    response: cm.ResponseModel | None = None
    alpha: pm.AlphaState | None = None
    tariff_window: dict[int, list[list[tuple[float, float]]]] = field(default_factory=dict)


def bootstrap(state: ScenarioState) -> None:
    """Initial setpoints from first bid snapshot, prices from the first WEM
    LMP, unit scores, ledgers credited one primary period at bootstrap prices."""
    scn = state.scenario
    tl = scn.timeline
    nodes = scn.net.smo_nodes()
    for node in nodes:
        if node not in scn.dca_specs or not scn.dca_specs[node]:
            raise MissingProfiles(f"node {node}: no DCAs")
        for spec in scn.dca_specs[node]:
            if spec.dca_id not in scn.dca_baselines or len(scn.dca_baselines[spec.dca_id]) == 0:
                raise MissingProfiles(f"{spec.dca_id}: empty profile")
    if len(scn.lmp) == 0:
        raise MissingProfiles("empty LMP series")

    lam = scn.lam(0)
    all_ids = []
    for node in nodes:
        p0 = sum(scn.dca_baselines[s.dca_id][0][0] for s in scn.dca_specs[node])
        q0 = sum(scn.dca_baselines[s.dca_id][0][1] for s in scn.dca_specs[node])
        state.setpoints[node] = (p0, q0)
        state.dlmps[node] = lam
        ledger = sm.BudgetLedger(
            mode=scn.budget_mode,
            n_s=tl.n_s,
            horizon_clearings=tl.n_steps,
            dt_s_hours=tl.dt_s_hours,
        )
        # one primary period of credit at bootstrap prices, redistributed at
        # the usual per-clearing rate (only step 0 precedes the first PM)
        ledger.start_period(
            credit_p=lam[0] * p0 * tl.dt_p_hours,
            credit_q=lam[1] * q0 * tl.dt_p_hours,
            n_clearings=tl.n_s,
        )
        state.ledgers[node] = ledger
        state.tariff_anchors[node] = {s.dca_id: lam for s in scn.dca_specs[node]}
        state.tariff_window[node] = []
        all_ids.extend(s.dca_id for s in scn.dca_specs[node])

    state.commitment = cm.CommitmentLedger.fresh(all_ids, s_base_kw=scn.net.s_base_kw)
    state.response = cm.ResponseModel(
        dca_ids=tuple(all_ids),
        follow_prob={s.dca_id: s.follow_prob for n in nodes for s in scn.dca_specs[n]},
        overshoot_scale=scn.response_overshoot,
        noise_scale=scn.response_noise,
        rng_seed=scn.seed,
    )
    state.alpha = pm.AlphaState(alpha_fixed=dict(scn.alpha_fixed))


def _node_betas(scn: Scenario, node: int) -> tuple[float, float]:
    specs = scn.dca_specs[node]
    bp = sum(s.beta_p for s in specs) / len(specs)
    bq = sum(s.beta_q for s in specs) / len(specs)
    return bp * scn.beta_pu_scale, bq * scn.beta_pu_scale


def run_timeline(state: ScenarioState) -> RunResults:
    """Execute the with-SMO loop over the scenario horizon."""
    scn = state.scenario
    tl = scn.timeline
    net = scn.net
    nodes = net.smo_nodes()
    cfg = ce.LexiConfig(epsilon=scn.epsilon)
    res = RunResults(mode="with_sm")
    bootstrap(state)
    s_base_kw = net.s_base_kw

    for step in range(tl.n_steps):
        t_min = step * tl.dt_s_min
        step_clearings: dict[int, sm.SMClearing] = {}
        for node in nodes:
            bids = _step_bids(scn, node, step)
            setpoint = state.setpoints[node]
            feas = sm.feasibility_check(bids, setpoint)
            if not feas.ok:
                setpoint = sm.nearest_feasible_setpoint(bids, setpoint)
                res.events.append(
                    f"t={t_min} node={node} nearest_feasible gapP={feas.gap_p:.6g} gapQ={feas.gap_q:.6g}"
                )
            clr = sm.clear_sm(
                bids,
                state.commitment.scores,
                setpoint,
                state.dlmps[node],
                state.ledgers[node],
                scn.caps,
                cfg,
                anchors=state.tariff_anchors[node],
            )
            if clr.deficit_p or clr.deficit_q:
                res.events.append(f"t={t_min} node={node} budget_deficit")
            state.ledgers[node].record_payout(clr.payout_p, clr.payout_q)
            state.tariff_anchors[node] = {d.dca_id: (d.mu_p, d.mu_q) for d in clr.dcas}
            state.tariff_window[node].append([(d.mu_p, d.p_star) for d in clr.dcas])
            step_clearings[node] = clr
            res.clearings.append((t_min, node, clr))

        # DCA responses and commitment update, per SMO
        for node in nodes:
            clr = step_clearings[node]
            bands = {
                d.dca_id: cm.ClearedBand(d.p_star, d.dp, d.q_star, d.dq) for d in clr.dcas
            }
            actuals = cm.simulate_response(state.response, bands, step)
            cm.update_scores(state.commitment, bands, actuals)
            for d in clr.dcas:
                res.sm_rows.append(
                    SMRow(
                        t=t_min,
                        smo=node,
                        dca=d.dca_id,
                        p_star=d.p_star,
                        dp=d.dp,
                        q_star=d.q_star,
                        dq=d.dq,
                        mu_p=d.mu_p,
                        mu_q=d.mu_q,
                        score=state.commitment.scores[d.dca_id],
                    )
                )

        if tl.is_pm_boundary(step):
            p_idx = tl.pm_index(step)
            lam = scn.lam(p_idx)
            bids_pm: dict[int, pm.SMOBid] = {}
            for node in nodes:
                window = state.tariff_window[node][-tl.n_s :]
                pm.update_alpha(state.alpha, node, window)
                kinds = {s.dca_id: s.kind for s in scn.dca_specs[node]}
                # disutility reference: the DCAs' true baseline loads now
                ref_p = sum(
                    -scn.dca_baselines[s.dca_id][step][0]
                    for s in scn.dca_specs[node]
                    if s.kind == "load"
                )
                ref_q = sum(
                    -scn.dca_baselines[s.dca_id][step][1]
                    for s in scn.dca_specs[node]
                    if s.kind == "load"
                )
                bid = aggregate_smo_bid(
                    step_clearings[node],
                    kinds,
                    _node_betas(scn, node),
                    (state.alpha.alpha_p(node), state.alpha.alpha_q(node)),
                    node,
                    s_base_kw,
                    baseline_refs=(ref_p, ref_q),
                )
                bids_pm[node] = bid
                res.range_rows.append(
                    RangeRow(
                        t=t_min,
                        node=node,
                        lo=(bid.pg_lo - bid.pl_hi) * s_base_kw,
                        hi=(bid.pg_hi - bid.pl_lo) * s_base_kw,
                    )
                )
            clearing = pm.clear_pm(net, bids_pm, lam, scn.xi)
            _record_pm(res, clearing, net, t_min, tl.dt_p_hours, s_base_kw)
            for node in nodes:
                sp = clearing.p_net[node] * s_base_kw
                sq = clearing.q_net[node] * s_base_kw
                state.setpoints[node] = (sp, sq)
                state.dlmps[node] = (clearing.dlmp_p[node], clearing.dlmp_q[node])
                state.ledgers[node].start_period(
                    credit_p=clearing.dlmp_p[node] * sp * tl.dt_p_hours,
                    credit_q=clearing.dlmp_q[node] * sq * tl.dt_p_hours,
                    n_clearings=min(tl.n_s, tl.n_steps - 1 - step),
                )
                state.tariff_window[node] = []
    res.metadata = _metadata(scn, "with_sm")
    return res


def run_without_smo(state: ScenarioState) -> RunResults:
    """PM-only loop: the PMO directly assumes node flexibility as +/- a flat
    fraction around an ad-hoc generation/load decomposition of the raw node
    baselines (behind-the-meter generation grossed up by without_gen_share,
    load grossed up to keep the metered net). Reported retail tariff equals
    the nodal d-LMP in this mode."""
    scn = state.scenario
    tl = scn.timeline
    net = scn.net
    nodes = net.smo_nodes()
    res = RunResults(mode="without_sm")
    s_base_kw = net.s_base_kw
    fr = scn.without_flex_fraction
    g = scn.without_gen_share
    alpha = pm.AlphaState(alpha_fixed=dict(scn.alpha_fixed))

    for p_idx in range(tl.n_p):
        t_min = p_idx * tl.dt_p_min
        step = t_min // tl.dt_s_min
        lam = scn.lam(p_idx)
        bids_pm: dict[int, pm.SMOBid] = {}
        for node in nodes:
            p0, q0 = scn.node_baselines[node][step]
            lg_p = max(-p0, 0.0) / s_base_kw
            lg_q = max(-q0, 0.0) / s_base_kw
            pg0 = max(p0, 0.0) / s_base_kw + g * lg_p
            pl0 = lg_p * (1.0 + g)
            qg0 = max(q0, 0.0) / s_base_kw + g * lg_q
            ql0 = lg_q * (1.0 + g)
            bp, bq = _node_betas(scn, node)
            bids_pm[node] = pm.SMOBid(
                node=node,
                pg0=pg0,
                qg0=qg0,
                pl0=pl0,
                ql0=ql0,
                pg_lo=pg0 * (1 - fr),
                pg_hi=pg0 * (1 + fr),
                pl_lo=pl0 * (1 - fr),
                pl_hi=pl0 * (1 + fr),
                qg_lo=qg0 * (1 - fr),
                qg_hi=qg0 * (1 + fr),
                ql_lo=ql0 * (1 - fr),
                ql_hi=ql0 * (1 + fr),
                beta_p=bp,
                beta_q=bq,
                alpha_p=alpha.alpha_p(node),
                alpha_q=alpha.alpha_q(node),
            )
            lo = (pg0 * (1 - fr) - pl0 * (1 + fr)) * s_base_kw
            hi = (pg0 * (1 + fr) - pl0 * (1 - fr)) * s_base_kw
            res.range_rows.append(RangeRow(t=t_min, node=node, lo=lo, hi=hi))
        clearing = pm.clear_pm(net, bids_pm, lam, scn.xi)
        _record_pm(res, clearing, net, t_min, tl.dt_p_hours, s_base_kw)
    res.metadata = _metadata(scn, "without_sm")
    return res


def _record_pm(
    res: RunResults,
    clearing: pm.PMClearing,
    net: RadialNetwork,
    t_min: int,
    dt_p_hours: float,
    s_base_kw: float,
) -> None:
    for node in sorted(net.nodes):
        res.pm_rows.append(
            PMRow(
                t=t_min,
                node=node,
                p_net=clearing.p_net[node],
                q_net=clearing.q_net[node],
                v_sq=clearing.v_sq[node],
                dlmp_p=clearing.dlmp_p[node],
                dlmp_q=clearing.dlmp_q[node],
            )
        )
    for ln in clearing.lines:
        res.line_rows.append(
            LineRow(
                t=t_min,
                from_node=ln.from_node,
                to_node=ln.to_node,
                p=ln.p,
                q=ln.q,
                l=ln.l,
                socp_gap=ln.socp_gap,
            )
        )
    res.pm_clearings.append((t_min, clearing))
    res.pcc_energy_kwh += clearing.p_pcc * s_base_kw * dt_p_hours
    res.loss_energy_kwh += clearing.total_loss_p * s_base_kw * dt_p_hours


def _metadata(scn: Scenario, mode: str) -> dict:
    import clarabel

    from . import __version__

    return {
        "mode": mode,
        "versions": {"lemsim": __version__, "clarabel": clarabel.__version__},
        "seed": scn.seed,
        "epsilon": scn.epsilon,
        "xi": scn.xi,
        "budget_mode": scn.budget_mode,
        "caps": list(scn.caps),
        "dt_s_min": scn.timeline.dt_s_min,
        "dt_p_min": scn.timeline.dt_p_min,
        "horizon_min": scn.timeline.horizon_min,
        "s_base_mva": scn.net.s_base_mva,
        "dlmp_unit_conversion": "duals are $/kWh directly (prices in $/kWh against pu powers; factor 1.0)",
        "solver": "clarabel",
        "tol_feas": 1e-8,
        "tol_gap": 1e-8,
    }
