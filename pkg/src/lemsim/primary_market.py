"""Primary-market clearing: SOCP-relaxed DistFlow OPF over the radial
feeder, social-welfare-plus-losses objective, d-LMP extraction from
nodal-balance duals, and the SMO generation-cost coefficient update.

Powers in pu; prices in $/kWh against pu quantities, so nodal-balance duals
are d-LMPs in $/kWh with no further conversion (the identity conversion is
recorded in run metadata).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import convex_engine as ce
from .grid_model import RadialNetwork


class PMError(Exception):
    pass


class MissingBid(PMError):
    pass


class InconsistentBase(PMError):
    pass


class Infeasible(PMError):
    def __init__(self, detail: str):
        super().__init__(f"primary market infeasible: {detail}")
        self.detail = detail


class PMSolverFailure(PMError):
    pass


class EmptyWindow(PMError):
    pass


PCC_LIMIT_PU = 10.0


@dataclass(frozen=True)
class SMOBid:
    """Aggregated node-level bid: separate generation and load baselines
    with flexibility bounds (pu), disutility and generation-cost coefficients.

    pl_ref/ql_ref are the disutility reference levels (the aggregated true
    baseline loads); they default to the bid baselines and may fall outside
    the offered bounds when the cleared schedule has drifted from forecasts.
    """

    node: int
    pg0: float
    qg0: float
    pl0: float
    ql0: float
    pg_lo: float
    pg_hi: float
    pl_lo: float
    pl_hi: float
    qg_lo: float
    qg_hi: float
    ql_lo: float
    ql_hi: float
    beta_p: float
    beta_q: float
    alpha_p: float
    alpha_q: float
    pl_ref: float | None = None
    ql_ref: float | None = None

    def __post_init__(self):
        for lo, hi, x, nm in (
            (self.pg_lo, self.pg_hi, self.pg0, "PG"),
            (self.pl_lo, self.pl_hi, self.pl0, "PL"),
            (self.qg_lo, self.qg_hi, self.qg0, "QG"),
            (self.ql_lo, self.ql_hi, self.ql0, "QL"),
        ):
            if not (lo <= x <= hi):
                raise PMError(f"node {self.node}: {nm} baseline outside bounds")
        if self.alpha_p <= 0 or self.alpha_q <= 0 or self.beta_p <= 0 or self.beta_q <= 0:
            raise PMError(f"node {self.node}: cost coefficients must be > 0")
        if self.pl_ref is None:
            object.__setattr__(self, "pl_ref", self.pl0)
        if self.ql_ref is None:
            object.__setattr__(self, "ql_ref", self.ql0)


@dataclass
class LineFlow:
    from_node: int
    to_node: int
    p: float
    q: float
    l: float  # squared current magnitude
    socp_gap: float  # v_parent * l - (p^2 + q^2)


@dataclass
class PMClearing:
    p_net: dict[int, float]  # net injection per node (pu), slack = PCC import
    q_net: dict[int, float]
    pg: dict[int, float]
    pl: dict[int, float]
    qg: dict[int, float]
    ql: dict[int, float]
    v_sq: dict[int, float]
    dlmp_p: dict[int, float]  # $/kWh
    dlmp_q: dict[int, float]
    lines: list[LineFlow]
    p_pcc: float
    q_pcc: float
    total_loss_p: float  # sum R*l (pu)
    objective: float
    kkt_residual: float = 0.0


def assemble_opf(
    net: RadialNetwork,
    bids: dict[int, SMOBid],
    lam: tuple[float, float],
    xi: float = 100.0,
) -> ce.ConvexProgram:
    """Build the relaxed branch-flow OPF as a ConvexProgram with named
    constraints (balance_P[i], balance_Q[i], vdrop[i], cone[i], thermal[i])."""
    if xi < 0:
        raise PMError("xi must be >= 0")
    slack = net.slack
    for i in net.nodes:
        if i != slack and i not in bids:
            raise MissingBid(f"node {i}")

    prog = ce.ConvexProgram()
    quad: list[tuple[float, str, float]] = []
    linear: dict[str, float] = {}

    for i, node in sorted(net.nodes.items()):
        prog.add_variable(f"v[{i}]", lb=1.0 if i == slack else node.v_min_sq, ub=1.0 if i == slack else node.v_max_sq)
        if i == slack:
            prog.add_variable(f"PG[{i}]", lb=-PCC_LIMIT_PU, ub=PCC_LIMIT_PU)
            prog.add_variable(f"QG[{i}]", lb=-PCC_LIMIT_PU, ub=PCC_LIMIT_PU)
            linear[f"PG[{i}]"] = lam[0]
            linear[f"QG[{i}]"] = lam[1]
        else:
            b = bids[i]
            prog.add_variable(f"PG[{i}]", lb=b.pg_lo, ub=b.pg_hi)
            prog.add_variable(f"QG[{i}]", lb=b.qg_lo, ub=b.qg_hi)
            prog.add_variable(f"PL[{i}]", lb=b.pl_lo, ub=b.pl_hi)
            prog.add_variable(f"QL[{i}]", lb=b.ql_lo, ub=b.ql_hi)
            quad.append((b.alpha_p, f"PG[{i}]", 0.0))
            quad.append((b.alpha_q, f"QG[{i}]", 0.0))
            quad.append((b.beta_p, f"PL[{i}]", b.pl_ref))
            quad.append((b.beta_q, f"QL[{i}]", b.ql_ref))

    for ln in net.lines:
        t = ln.to_node
        prog.add_variable(f"fP[{t}]")
        prog.add_variable(f"fQ[{t}]")
        prog.add_variable(f"l[{t}]", lb=0.0)
        linear[f"l[{t}]"] = linear.get(f"l[{t}]", 0.0) + xi * ln.r

    for i in sorted(net.nodes):
        coeffs_p: dict[str, float] = {f"PG[{i}]": 1.0}
        coeffs_q: dict[str, float] = {f"QG[{i}]": 1.0}
        if i != slack:
            coeffs_p[f"PL[{i}]"] = -1.0
            coeffs_q[f"QL[{i}]"] = -1.0
            ln = net.parent_line(i)
            coeffs_p[f"fP[{i}]"] = 1.0
            coeffs_p[f"l[{i}]"] = -ln.r
            coeffs_q[f"fQ[{i}]"] = 1.0
            coeffs_q[f"l[{i}]"] = -ln.x
        for k in net.children(i):
            coeffs_p[f"fP[{k}]"] = -1.0
            coeffs_q[f"fQ[{k}]"] = -1.0
        prog.add_equality(f"balance_P[{i}]", coeffs_p, 0.0)
        prog.add_equality(f"balance_Q[{i}]", coeffs_q, 0.0)

    for ln in net.lines:
        f, t = ln.from_node, ln.to_node
        z2 = ln.r**2 + ln.x**2
        prog.add_equality(
            f"vdrop[{t}]",
            {
                f"v[{t}]": 1.0,
                f"v[{f}]": -1.0,
                f"l[{t}]": -z2,
                f"fP[{t}]": 2.0 * ln.r,
                f"fQ[{t}]": 2.0 * ln.x,
            },
            0.0,
        )
        # relaxation of l = (P^2+Q^2)/v at the sending end
        prog.add_rotated_cone(
            f"cone[{t}]",
            [({f"fP[{t}]": 1.0}, 0.0), ({f"fQ[{t}]": 1.0}, 0.0)],
            ({f"v[{f}]": 1.0}, 0.0),
            ({f"l[{t}]": 1.0}, 0.0),
        )
        prog.add_rotated_cone(
            f"thermal[{t}]",
            [({f"fP[{t}]": 1.0}, 0.0), ({f"fQ[{t}]": 1.0}, 0.0)],
            ({}, ln.s_max),
            ({}, ln.s_max),
        )

    prog.set_objective(ce.Objective(quad=quad, linear=linear))
    return prog


def clear_pm(
    net: RadialNetwork,
    bids: dict[int, SMOBid],
    lam: tuple[float, float],
    xi: float = 100.0,
    tol: ce.Tolerances | None = None,
) -> PMClearing:
    """Solve the OPF and extract clearing quantities and d-LMPs."""
    prog = assemble_opf(net, bids, lam, xi)
    sol = ce.solve(prog, tol=tol)
    if sol.status == "infeasible":
        raise Infeasible(sol.diagnostics.get("most_violated", "unknown binding set"))
    if sol.status != "optimal":
        raise PMSolverFailure(f"solver status {sol.status}: {sol.diagnostics}")

    slack = net.slack
    p_net, q_net, pg, pl, qg, ql, v_sq, dp, dq = {}, {}, {}, {}, {}, {}, {}, {}, {}
    for i in sorted(net.nodes):
        v_sq[i] = sol.primal[f"v[{i}]"]
        gi = sol.primal[f"PG[{i}]"]
        gqi = sol.primal[f"QG[{i}]"]
        li = sol.primal.get(f"PL[{i}]", 0.0)
        lqi = sol.primal.get(f"QL[{i}]", 0.0)
        pg[i], pl[i], qg[i], ql[i] = gi, li, gqi, lqi
        p_net[i] = gi - li
        q_net[i] = gqi - lqi
        dp[i] = sol.duals[f"balance_P[{i}]"]
        dq[i] = sol.duals[f"balance_Q[{i}]"]

    lines = []
    loss = 0.0
    for ln in net.lines:
        t = ln.to_node
        fp = sol.primal[f"fP[{t}]"]
        fq = sol.primal[f"fQ[{t}]"]
        lcur = sol.primal[f"l[{t}]"]
        vpar = sol.primal[f"v[{ln.from_node}]"]
        lines.append(
            LineFlow(
                from_node=ln.from_node,
                to_node=t,
                p=fp,
                q=fq,
                l=lcur,
                socp_gap=vpar * lcur - (fp**2 + fq**2),
            )
        )
        loss += ln.r * lcur
    return PMClearing(
        p_net=p_net,
        q_net=q_net,
        pg=pg,
        pl=pl,
        qg=qg,
        ql=ql,
        v_sq=v_sq,
        dlmp_p=dp,
        dlmp_q=dq,
        lines=lines,
        p_pcc=pg[slack],
        q_pcc=qg[slack],
        total_loss_p=loss,
        objective=sol.objective,
        kkt_residual=sol.kkt_residual,
    )


@dataclass
class GapReport:
    from_node: int
    to_node: int
    gap: float
    flagged: bool


def check_socp_exactness(clearing: PMClearing, flag_tol: float = 1e-5) -> list[GapReport]:
    """Per-line relaxation gap v*l - (P^2+Q^2), recomputed from the clearing
    quantities; flags lines above flag_tol."""
    out = []
    for ln in clearing.lines:
        gap = clearing.v_sq[ln.from_node] * ln.l - (ln.p**2 + ln.q**2)
        out.append(GapReport(ln.from_node, ln.to_node, gap, gap > flag_tol))
    return out


@dataclass
class AlphaState:
    """Per-SMO generation cost coefficients: a fixed component drawn once
    and a variable component tracking the injection-weighted mean retail
    tariff over the last SM window."""

    alpha_fixed: dict[int, float]
    q_ratio: float = 0.1  # alpha_Q = q_ratio * alpha_P
    alpha_var: dict[int, float] = field(default_factory=dict)
    history: dict[int, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for i, a in self.alpha_fixed.items():
            if not (4.0 <= a <= 8.0):
                raise PMError(f"alpha_fixed[{i}] outside [4,8]")
        for i in self.alpha_fixed:
            self.alpha_var.setdefault(i, 0.0)
            self.history.setdefault(i, [])

    def alpha_p(self, node: int) -> float:
        return self.alpha_fixed[node] + self.alpha_var[node]

    def alpha_q(self, node: int) -> float:
        return self.q_ratio * self.alpha_p(node)


def update_alpha(
    state: AlphaState,
    node: int,
    tariff_window: list[list[tuple[float, float]]],
) -> float:
    """Injection-magnitude-weighted mean tariff over the window.

    tariff_window holds, per SM clearing in [t_p - n_s*dt_s, t_p], the
    (mu_P, P_star) pairs of the SMO's DCAs. All-zero windows carry the
    previous variable component over.
    """
    num = 0.0
    den = 0.0
    for clearing in tariff_window:
        for mu, p in clearing:
            num += mu * abs(p)
            den += abs(p)
    if den <= 0.0:
        if not tariff_window:
            raise EmptyWindow(f"node {node}: no SM clearings in window")
    else:
        state.alpha_var[node] = num / den
    state.history[node].append(state.alpha_var[node])
    return state.alpha_p(node)
