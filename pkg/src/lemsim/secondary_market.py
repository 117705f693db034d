"""Secondary-market clearing: four-stage lexicographic dispatch of DCA
flexibility bids with budget, ceiling, and power-balance constraints.

Quantities are in kW/kvar, tariffs in $/kWh, payments in $ (mu * P * dt with
dt in hours). The commitment stage uses a linear surrogate (signed,
score-weighted injections) and the net-cost stage a McCormick relaxation of
mu*P; after the last stage quantities are frozen and tariffs re-priced
exactly, with the relaxation gap reported per clearing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

import clarabel

from . import convex_engine as ce


class SMError(Exception):
    pass


class InfeasibleSetpoint(SMError):
    def __init__(self, gap_p: float, gap_q: float):
        super().__init__(f"setpoint outside aggregate bid range (gap P={gap_p:g} kW, Q={gap_q:g} kvar)")
        self.gap_p = gap_p
        self.gap_q = gap_q


class SolverFailure(SMError):
    def __init__(self, stage: int, status: str):
        super().__init__(f"stage {stage} solve ended {status}")
        self.stage = stage
        self.status = status


class PriceInfeasible(SMError):
    pass


class ZeroRemainingClearings(SMError):
    pass


@dataclass(frozen=True)
class DCABid:
    """Baseline net injection plus flexibility interval bid (generation
    positive, load negative)."""

    dca_id: str
    p0: float
    q0: float
    p_lo: float
    p_hi: float
    q_lo: float
    q_hi: float
    beta_p: float
    beta_q: float

    def __post_init__(self):
        if not (self.p_lo <= self.p0 <= self.p_hi):
            raise SMError(f"{self.dca_id}: P0 outside [P_lo, P_hi]")
        if not (self.q_lo <= self.q0 <= self.q_hi):
            raise SMError(f"{self.dca_id}: Q0 outside [Q_lo, Q_hi]")
        if self.beta_p <= 0 or self.beta_q <= 0:
            raise SMError(f"{self.dca_id}: beta must be > 0")


@dataclass
class DCAClearing:
    dca_id: str
    p_star: float
    dp: float
    q_star: float
    dq: float
    mu_p: float
    mu_q: float


@dataclass
class SMClearing:
    dcas: list[DCAClearing]
    stage_optima: list[float]  # F1*..F4* from each stage solve
    stage_final: list[float]  # F1..F4 evaluated at the returned point (F2 via w)
    relax_gap: float  # |f2(recovered tariffs) - f2(relaxed w)| in $/h
    payout_p: float  # sum mu_p * P * dt, $
    payout_q: float
    budget_rhs_p: float  # per-clearing budget share enforced, $
    budget_rhs_q: float
    setpoint_p: float = 0.0  # the balance target actually enforced, kW
    setpoint_q: float = 0.0
    status: str = "optimal"
    deficit_p: bool = False
    deficit_q: bool = False

    def total(self, attr: str) -> float:
        return sum(getattr(d, attr) for d in self.dcas)


@dataclass
class BudgetLedger:
    """Signed revenue/payout accounting for one SMO.

    Credits are PM payments mu* x P* x dt_p (negative when the SMO is a net
    load and pays the PMO). Payouts are SM payments to DCAs (negative when
    the SMO collects from net loads).
    """

    mode: str = "quasi_multiperiod"  # strict | relaxed | quasi_multiperiod
    n_s: int = 5
    horizon_clearings: int = 1440
    dt_s_hours: float = 1.0 / 60.0
    revenue_received_p: float = 0.0
    revenue_received_q: float = 0.0
    paid_out_p: float = 0.0
    paid_out_q: float = 0.0
    period_revenue_p: float = 0.0
    period_revenue_q: float = 0.0
    period_paid_p: float = 0.0
    period_paid_q: float = 0.0
    remaining_in_period: int = 0
    remaining_in_horizon: int = 0

    def __post_init__(self):
        if self.mode not in ("strict", "relaxed", "quasi_multiperiod"):
            raise SMError(f"bad budget mode {self.mode!r}")
        if self.remaining_in_horizon == 0:
            self.remaining_in_horizon = self.horizon_clearings

    def start_period(self, credit_p: float, credit_q: float, n_clearings: int | None = None):
        self.revenue_received_p += credit_p
        self.revenue_received_q += credit_q
        self.period_revenue_p = credit_p
        self.period_revenue_q = credit_q
        self.period_paid_p = 0.0
        self.period_paid_q = 0.0
        self.remaining_in_period = self.n_s if n_clearings is None else n_clearings

    def per_clearing_rhs(self) -> tuple[float, float]:
        """Evenly redistribute the mode's available budget over the remaining
        clearings in the mode's scope."""
        if self.mode == "strict":
            remaining = self.remaining_in_period
            avail_p = self.period_revenue_p - self.period_paid_p
            avail_q = self.period_revenue_q - self.period_paid_q
        elif self.mode == "quasi_multiperiod":
            remaining = self.remaining_in_period
            avail_p = self.revenue_received_p - self.paid_out_p
            avail_q = self.revenue_received_q - self.paid_out_q
        else:  # relaxed
            remaining = self.remaining_in_horizon
            avail_p = self.revenue_received_p - self.paid_out_p
            avail_q = self.revenue_received_q - self.paid_out_q
        if remaining < 1:
            raise ZeroRemainingClearings(f"mode {self.mode}: no clearings left in scope")
        return avail_p / remaining, avail_q / remaining

    def record_payout(self, payout_p: float, payout_q: float):
        self.paid_out_p += payout_p
        self.paid_out_q += payout_q
        self.period_paid_p += payout_p
        self.period_paid_q += payout_q
        self.remaining_in_period = max(self.remaining_in_period - 1, 0)
        self.remaining_in_horizon = max(self.remaining_in_horizon - 1, 0)


def budget_rhs(ledger: BudgetLedger, mode: str | None = None) -> tuple[float, float]:
    """Mode-level budget right-hand sides in $.

    strict: this primary period's PM credit (shared by the period's
    clearings jointly); relaxed: cumulative horizon revenue;
    quasi_multiperiod: the per-clearing share of leftover net revenue.
    """
    mode = mode or ledger.mode
    if mode == "strict":
        return ledger.period_revenue_p, ledger.period_revenue_q
    if mode == "relaxed":
        return ledger.revenue_received_p, ledger.revenue_received_q
    if mode == "quasi_multiperiod":
        if ledger.remaining_in_period < 1:
            raise ZeroRemainingClearings("no clearings left in period")
        return (
            (ledger.revenue_received_p - ledger.paid_out_p) / ledger.remaining_in_period,
            (ledger.revenue_received_q - ledger.paid_out_q) / ledger.remaining_in_period,
        )
    raise SMError(f"bad budget mode {mode!r}")


@dataclass
class FeasibilityResult:
    ok: bool
    gap_p: float = 0.0
    gap_q: float = 0.0


def feasibility_check(bids: list[DCABid], setpoint: tuple[float, float]) -> FeasibilityResult:
    """ok iff the setpoint lies within the aggregate bid range (total function)."""
    p_lo = sum(b.p_lo for b in bids)
    p_hi = sum(b.p_hi for b in bids)
    q_lo = sum(b.q_lo for b in bids)
    q_hi = sum(b.q_hi for b in bids)
    sp, sq = setpoint
    gap_p = max(p_lo - sp, 0.0) + max(sp - p_hi, 0.0)
    gap_q = max(q_lo - sq, 0.0) + max(sq - q_hi, 0.0)
    return FeasibilityResult(ok=(gap_p == 0.0 and gap_q == 0.0), gap_p=gap_p, gap_q=gap_q)


def nearest_feasible_setpoint(bids: list[DCABid], setpoint: tuple[float, float]) -> tuple[float, float]:
    """Clip the setpoint into the aggregate bid range (the relax-to-nearest
    fallback; the caller logs the shortfall as an unmet-commitment event)."""
    sp = min(max(setpoint[0], sum(b.p_lo for b in bids)), sum(b.p_hi for b in bids))
    sq = min(max(setpoint[1], sum(b.q_lo for b in bids)), sum(b.q_hi for b in bids))
    return sp, sq


# ---------------------------------------------------------------------------
# compiled stage solver: fixed sparsity per DCA count, data refilled per
# clearing, Clarabel instance reused via in-place updates


class _SMPattern:
    """Fixed problem structure for one DCA cardinality.

    Variable columns, per side (P then Q): [x_j, d_j, mu_j, w_j] * n.
    Rows: 2 balance equalities; per side per j: band lo/hi, 4 McCormick
    envelopes, d >= 0, mu in [0, cap]; 2 budget rows; 3 degradation rows.
    """

    def __init__(self, n: int):
        self.n = n
        nv = 8 * n
        self.nv = nv
        # column indices
        self.col = {}
        for side, off in (("P", 0), ("Q", 4 * n)):
            self.col[f"x{side}"] = np.arange(n) + off
            self.col[f"d{side}"] = np.arange(n) + off + n
            self.col[f"mu{side}"] = np.arange(n) + off + 2 * n
            self.col[f"w{side}"] = np.arange(n) + off + 3 * n

        entries = []  # (row, col, slot_name, j)
        row = 0
        self.row_of = {}

        def add_row(name, cols_slots):
            nonlocal row
            self.row_of[name] = row
            for c, slot in cols_slots:
                entries.append((row, c, slot))
            row += 1

        # equalities first
        add_row("balance_P", [(self.col["xP"][j], "one") for j in range(n)])
        add_row("balance_Q", [(self.col["xQ"][j], "one") for j in range(n)])
        self.n_eq = row

        for side in ("P", "Q"):
            x, d, mu, w = (self.col[f"x{side}"], self.col[f"d{side}"], self.col[f"mu{side}"], self.col[f"w{side}"])
            for j in range(n):
                add_row(f"bandlo{side}[{j}]", [(x[j], "neg_one"), (d[j], "one")])
                add_row(f"bandhi{side}[{j}]", [(x[j], "one"), (d[j], "one")])
                add_row(f"env1{side}[{j}]", [(w[j], "neg_one"), (mu[j], f"lo{side}{j}")])
                add_row(f"env2{side}[{j}]", [(w[j], "neg_one"), (x[j], f"cap{side}"), (mu[j], f"hi{side}{j}")])
                add_row(f"env3{side}[{j}]", [(w[j], "one"), (x[j], f"ncap{side}"), (mu[j], f"nlo{side}{j}")])
                add_row(f"env4{side}[{j}]", [(w[j], "one"), (mu[j], f"nhi{side}{j}")])
                add_row(f"dlo{side}[{j}]", [(d[j], "neg_one")])
                add_row(f"mulo{side}[{j}]", [(mu[j], "neg_one")])
                add_row(f"muhi{side}[{j}]", [(mu[j], "one")])
        for side in ("P", "Q"):
            add_row(f"budget_{side}", [(self.col[f"w{side}"][j], "one") for j in range(n)])
        for k, slots in (
            (1, [(self.col["xP"][j], f"deg1P{j}") for j in range(self.n)] + [(self.col["xQ"][j], f"deg1Q{j}") for j in range(self.n)]),
            (2, [(self.col["wP"][j], "deg2on") for j in range(self.n)] + [(self.col["wQ"][j], "deg2on") for j in range(self.n)]),
            (3, [(self.col["dP"][j], "deg3on") for j in range(self.n)] + [(self.col["dQ"][j], "deg3on") for j in range(self.n)]),
        ):
            add_row(f"deg{k}", slots)
        self.n_rows = row

        # build csc pattern; track each entry's slot in csc data order
        rows = np.array([e[0] for e in entries])
        cols = np.array([e[1] for e in entries])
        ids = np.arange(len(entries), dtype=float)
        A = sparse.csc_matrix((ids, (rows, cols)), shape=(self.n_rows, nv))
        order = A.data.astype(int)  # csc slot -> entry index
        self.A_pattern = A
        self.slot_names = [entries[k][2] for k in order]
        # constant entries prefilled
        self.base_data = np.zeros(len(order))
        self.const_mask = np.zeros(len(order), dtype=bool)
        for s, name in enumerate(self.slot_names):
            if name == "one":
                self.base_data[s] = 1.0
                self.const_mask[s] = True
            elif name == "neg_one":
                self.base_data[s] = -1.0
                self.const_mask[s] = True
        self.slot_index: dict[str, list[int]] = {}
        for s, name in enumerate(self.slot_names):
            if not self.const_mask[s]:
                self.slot_index.setdefault(name, []).append(s)

        self.Pq_cols = np.concatenate([self.col["xP"], self.col["xQ"]])
        self.P_pattern = sparse.csc_matrix(
            (np.zeros(2 * n), (self.Pq_cols, self.Pq_cols)), shape=(nv, nv)
        )
        self.cones = [clarabel.ZeroConeT(self.n_eq), clarabel.NonnegativeConeT(self.n_rows - self.n_eq)]
        self.settings = clarabel.DefaultSettings()
        self.settings.verbose = False
        self.settings.presolve_enable = False  # required for in-place updates
        self.solver: clarabel.DefaultSolver | None = None

    def _set(self, data: np.ndarray, slot: str, values):
        data[self.slot_index[slot]] = values

    def fill(self, bids, caps) -> np.ndarray:
        data = self.base_data.copy()
        cap_p, cap_q = caps
        lo_p = [b.p_lo for b in bids]
        hi_p = [b.p_hi for b in bids]
        lo_q = [b.q_lo for b in bids]
        hi_q = [b.q_hi for b in bids]
        for j in range(self.n):
            self._set(data, f"loP{j}", lo_p[j])
            self._set(data, f"hiP{j}", hi_p[j])
            self._set(data, f"nloP{j}", -lo_p[j])
            self._set(data, f"nhiP{j}", -hi_p[j])
            self._set(data, f"loQ{j}", lo_q[j])
            self._set(data, f"hiQ{j}", hi_q[j])
            self._set(data, f"nloQ{j}", -lo_q[j])
            self._set(data, f"nhiQ{j}", -hi_q[j])
            self._set(data, f"deg1P{j}", 0.0)
            self._set(data, f"deg1Q{j}", 0.0)
        self._set(data, "capP", cap_p)
        self._set(data, "ncapP", -cap_p)
        self._set(data, "capQ", cap_q)
        self._set(data, "ncapQ", -cap_q)
        self._set(data, "deg2on", 0.0)
        self._set(data, "deg3on", 0.0)
        return data

    def rhs(self, bids, setpoint, caps, budget_rate) -> np.ndarray:
        b = np.zeros(self.n_rows)
        b[self.row_of["balance_P"]] = setpoint[0]
        b[self.row_of["balance_Q"]] = setpoint[1]
        cap = {"P": caps[0], "Q": caps[1]}
        lo = {"P": [x.p_lo for x in bids], "Q": [x.q_lo for x in bids]}
        hi = {"P": [x.p_hi for x in bids], "Q": [x.q_hi for x in bids]}
        for side in ("P", "Q"):
            for j in range(self.n):
                b[self.row_of[f"bandlo{side}[{j}]"]] = -lo[side][j]
                b[self.row_of[f"bandhi{side}[{j}]"]] = hi[side][j]
                b[self.row_of[f"env1{side}[{j}]"]] = 0.0
                b[self.row_of[f"env2{side}[{j}]"]] = cap[side] * hi[side][j]
                b[self.row_of[f"env3{side}[{j}]"]] = -cap[side] * lo[side][j]
                b[self.row_of[f"env4{side}[{j}]"]] = 0.0
                b[self.row_of[f"dlo{side}[{j}]"]] = 0.0
                b[self.row_of[f"mulo{side}[{j}]"]] = 0.0
                b[self.row_of[f"muhi{side}[{j}]"]] = cap[side]
        b[self.row_of["budget_P"]] = budget_rate[0]
        b[self.row_of["budget_Q"]] = budget_rate[1]
        for k in (1, 2, 3):
            b[self.row_of[f"deg{k}"]] = 1.0  # inactive 0-row
        return b

    def solve_stages(self, bids, scores, setpoint, caps, budget_rate, cfg):
        """Run the four lexicographic stages; returns (x per stage, F*)."""
        n = self.n
        data = self.fill(bids, caps)
        b = self.rhs(bids, setpoint, caps, budget_rate)
        q = np.zeros(self.nv)
        pdata = np.zeros(2 * n)

        sgn_p = np.sign([bd.p0 for bd in bids])
        sgn_q = np.sign([bd.q0 for bd in bids])
        c = np.array([scores[bd.dca_id] for bd in bids])
        beta_p = np.array([bd.beta_p for bd in bids])
        beta_q = np.array([bd.beta_q for bd in bids])
        p0 = np.array([bd.p0 for bd in bids])
        q0 = np.array([bd.q0 for bd in bids])

        A = self.A_pattern.copy()
        A.data = data
        P = self.P_pattern.copy()
        P.data = pdata

        stage1_coef_p = -c * sgn_p
        stage1_coef_q = -c * sgn_q

        def q_for_stage(k):
            qv = np.zeros(self.nv)
            if k == 1:
                qv[self.col["xP"]] = stage1_coef_p
                qv[self.col["xQ"]] = stage1_coef_q
            elif k == 2:
                qv[self.col["wP"]] = 1.0
                qv[self.col["wQ"]] = 1.0
            elif k == 3:
                qv[self.col["dP"]] = -1.0
                qv[self.col["dQ"]] = -1.0
            else:
                qv[self.col["xP"]] = -2.0 * beta_p * p0
                qv[self.col["xQ"]] = -2.0 * beta_q * q0
            return qv

        obj_consts = [0.0, 0.0, 0.0, float(beta_p @ p0**2 + beta_q @ q0**2)]

        if self.solver is None:
            self.solver = clarabel.DefaultSolver(P, q_for_stage(1), A, b, self.cones, self.settings)
            self.solver.update(P=P)  # ensure pattern registered before later updates
        self.solver.update(A=A, b=b, q=q_for_stage(1), P=P)

        xs, fstars = [], []
        for k in (1, 2, 3, 4):
            if k > 1:
                if k == 2:
                    for j in range(n):
                        self._set(data, f"deg1P{j}", stage1_coef_p[j])
                        self._set(data, f"deg1Q{j}", stage1_coef_q[j])
                    b[self.row_of["deg1"]] = ce.degradation_bound(fstars[0], cfg)
                elif k == 3:
                    self._set(data, "deg2on", 1.0)
                    b[self.row_of["deg2"]] = ce.degradation_bound(fstars[1], cfg)
                else:
                    self._set(data, "deg3on", -1.0)
                    b[self.row_of["deg3"]] = ce.degradation_bound(fstars[2], cfg)
                    pdata[:] = np.concatenate([2.0 * beta_p, 2.0 * beta_q])
                A.data = data
                P.data = pdata
                self.solver.update(A=A, b=b, q=q_for_stage(k), P=P)
            res = self.solver.solve()
            status = str(res.status)
            if status not in ("Solved", "AlmostSolved"):
                raise SolverFailure(k, status)
            x = np.asarray(res.x)
            xs.append(x)
            fstars.append(float(res.obj_val) + obj_consts[k - 1])
        return xs, fstars


_PATTERNS: dict[int, _SMPattern] = {}


def _pattern(n: int) -> _SMPattern:
    if n not in _PATTERNS:
        _PATTERNS[n] = _SMPattern(n)
    return _PATTERNS[n]


# ---------------------------------------------------------------------------
# exact pricing pass


def _waterfill_prices(quantities, anchors, cap, target, dt) -> list[float]:
    """min sum (mu - anchor)^2 s.t. sum mu_j * quantities_j * dt = target,
    mu in [0, cap]; exact breakpoint search on the monotone payout curve."""
    coef = [p * dt for p in quantities]
    lo_pay = sum(min(c * 0.0, c * cap) for c in coef)
    hi_pay = sum(max(c * 0.0, c * cap) for c in coef)
    target = min(max(target, lo_pay), hi_pay)

    def pay(nu):
        return sum(c * min(max(a + nu * c, 0.0), cap) for a, c in zip(anchors, coef))

    base = pay(0.0)
    if abs(base - target) <= 1e-15:
        return [min(max(a, 0.0), cap) for a in anchors]
    # breakpoints where any mu_j(nu) hits 0 or cap
    bps = sorted(
        {(lim - a) / c for a, c in zip(anchors, coef) if c != 0.0 for lim in (0.0, cap)}
    )
    lo_nu, hi_nu = (bps[0] - 1.0 if bps else -1.0), (bps[-1] + 1.0 if bps else 1.0)
    grid = [lo_nu, *bps, hi_nu]
    nu = None
    for a_nu, b_nu in zip(grid[:-1], grid[1:]):
        pa, pb = pay(a_nu), pay(b_nu)
        if min(pa, pb) - 1e-12 <= target <= max(pa, pb) + 1e-12:
            slope = sum(c * c for a, c in zip(anchors, coef) if 0.0 < a + 0.5 * (a_nu + b_nu) * c < cap)
            if slope <= 1e-18:
                nu = a_nu
            else:
                nu = a_nu + (target - pa) / slope
            nu = min(max(nu, a_nu), b_nu)
            break
    if nu is None:
        nu = hi_nu if target > pay(hi_nu) else lo_nu
    return [min(max(a + nu * c, 0.0), cap) for a, c in zip(anchors, coef)]


def recover_prices(
    quantities: list[float],
    budget_rhs_usd: float,
    cap: float,
    dt_hours: float,
    anchors: list[float],
) -> list[float]:
    """Exact tariff pass once quantities are fixed.

    Pays out (or collects) exactly the per-clearing budget share when the
    ceilings allow, never exceeding it, allocating tariffs by anchored
    projection (previous tariff / d-LMP anchors); zero-injection DCAs hold
    their anchor. Raises PriceInfeasible when even maximal collection cannot
    meet a deficit share (caller logs and applies the ceiling).
    """
    tiny = 1e-9
    min_pay = sum(min(0.0, p) * cap * dt_hours for p in quantities)
    if budget_rhs_usd < min_pay - 1e-9:
        raise PriceInfeasible(
            f"budget {budget_rhs_usd:g} below best achievable {min_pay:g}"
        )
    active = [abs(p) > tiny for p in quantities]
    mus = [min(max(a, 0.0), cap) for a in anchors]
    act_q = [p for p, a in zip(quantities, active) if a]
    if not act_q:
        return mus
    act_a = [x for x, a in zip(anchors, active) if a]
    act_mu = _waterfill_prices(act_q, act_a, cap, budget_rhs_usd, dt_hours)
    it = iter(act_mu)
    return [next(it) if a else m for m, a in zip(mus, active)]


def greedy_ceiling_prices(quantities: list[float], cap: float) -> list[float]:
    """Revenue-maximal tariffs: ceiling for net loads, zero for net
    generators (the deficit fallback)."""
    return [cap if p < 0 else 0.0 for p in quantities]


# ---------------------------------------------------------------------------


def clear_sm(
    bids: list[DCABid],
    scores: dict[str, float],
    setpoint: tuple[float, float],
    prices: tuple[float, float],
    ledger: BudgetLedger,
    caps: tuple[float, float],
    cfg: ce.LexiConfig | None = None,
    anchors: dict[str, tuple[float, float]] | None = None,
) -> SMClearing:
    """Clear one SMO's secondary market for one timestep.

    `prices` are the latest d-LMPs (mu_P*, mu_Q*), used as tariff anchors
    when no per-DCA previous tariff is supplied.
    """
    cfg = cfg or ce.LexiConfig()
    if not bids:
        raise SMError("empty bid list")
    for b in bids:
        if not (0.0 <= scores[b.dca_id] <= 1.0):
            raise SMError(f"score for {b.dca_id} outside [0,1]")
    feas = feasibility_check(bids, setpoint)
    if not feas.ok:
        raise InfeasibleSetpoint(feas.gap_p, feas.gap_q)

    dt = ledger.dt_s_hours
    rhs_p, rhs_q = ledger.per_clearing_rhs()
    pat = _pattern(len(bids))
    budget_relaxed = False
    try:
        xs, fstars = pat.solve_stages(
            bids, scores, setpoint, caps, (rhs_p / dt, rhs_q / dt), cfg
        )
    except SolverFailure as exc:
        if exc.stage != 1:
            raise
        # deficit share no tariff vector can meet: slacken the budget rows
        # for the quantity stages; the pricing pass flags the deficit
        budget_relaxed = True
        slack_rate = 1e6  # $/h, far above any achievable payout rate
        xs, fstars = pat.solve_stages(bids, scores, setpoint, caps, (slack_rate, slack_rate), cfg)
    x = xs[-1]
    p_star = x[pat.col["xP"]]
    q_star = x[pat.col["xQ"]]
    w_p = x[pat.col["wP"]]
    w_q = x[pat.col["wQ"]]

    # The disutility stage is indifferent to the band widths, so widen each
    # band to the maximal symmetric interval around the final setpoint: a
    # Pareto improvement on the flexibility stage (delta enters no other
    # constraint), and it pins band containment exactly.
    lo_p = np.array([b.p_lo for b in bids])
    hi_p = np.array([b.p_hi for b in bids])
    lo_q = np.array([b.q_lo for b in bids])
    hi_q = np.array([b.q_hi for b in bids])
    p_star = np.clip(p_star, lo_p, hi_p)
    q_star = np.clip(q_star, lo_q, hi_q)
    dp = np.minimum(p_star - lo_p, hi_p - p_star)
    dq = np.minimum(q_star - lo_q, hi_q - q_star)

    anc_p = [anchors[b.dca_id][0] if anchors and b.dca_id in anchors else prices[0] for b in bids]
    anc_q = [anchors[b.dca_id][1] if anchors and b.dca_id in anchors else prices[1] for b in bids]

    deficit_p = deficit_q = False
    try:
        mu_p = recover_prices(list(p_star), rhs_p, caps[0], dt, anc_p)
    except PriceInfeasible:
        mu_p = greedy_ceiling_prices(list(p_star), caps[0])
        deficit_p = True
    try:
        mu_q = recover_prices(list(q_star), rhs_q, caps[1], dt, anc_q)
    except PriceInfeasible:
        mu_q = greedy_ceiling_prices(list(q_star), caps[1])
        deficit_q = True

    sgn_p = np.sign([b.p0 for b in bids])
    sgn_q = np.sign([b.q0 for b in bids])
    c = np.array([scores[b.dca_id] for b in bids])
    beta_p = np.array([b.beta_p for b in bids])
    beta_q = np.array([b.beta_q for b in bids])
    p0 = np.array([b.p0 for b in bids])
    q0 = np.array([b.q0 for b in bids])
    f1 = float(-(c * (sgn_p * p_star + sgn_q * q_star)).sum())
    f2_w = float(w_p.sum() + w_q.sum())
    f3 = float(-(dp.sum() + dq.sum()))
    f4 = float((beta_p * (p_star - p0) ** 2).sum() + (beta_q * (q_star - q0) ** 2).sum())
    f2_exact = float(np.dot(mu_p, p_star) + np.dot(mu_q, q_star))

    dcas = [
        DCAClearing(
            dca_id=b.dca_id,
            p_star=float(p_star[j]),
            dp=float(dp[j]),
            q_star=float(q_star[j]),
            dq=float(dq[j]),
            mu_p=float(mu_p[j]),
            mu_q=float(mu_q[j]),
        )
        for j, b in enumerate(bids)
    ]
    return SMClearing(
        dcas=dcas,
        stage_optima=fstars,
        stage_final=[f1, f2_w, f3, f4],
        relax_gap=abs(f2_exact - f2_w),
        payout_p=float(np.dot(mu_p, p_star)) * dt,
        payout_q=float(np.dot(mu_q, q_star)) * dt,
        budget_rhs_p=rhs_p,
        budget_rhs_q=rhs_q,
        setpoint_p=setpoint[0],
        setpoint_q=setpoint[1],
        status="optimal_budget_relaxed" if budget_relaxed else "optimal",
        deficit_p=deficit_p,
        deficit_q=deficit_q,
    )


# ---------------------------------------------------------------------------
# reference path on the generic engine (used by tests to cross-check the
# compiled path and by the brute-force oracles)


def build_ir_program(
    bids: list[DCABid],
    setpoint: tuple[float, float],
    caps: tuple[float, float],
    budget_rate: tuple[float, float],
) -> ce.ConvexProgram:
    prog = ce.ConvexProgram()
    for side, lo_k, hi_k, cap, sp, rate in (
        ("P", "p_lo", "p_hi", caps[0], setpoint[0], budget_rate[0]),
        ("Q", "q_lo", "q_hi", caps[1], setpoint[1], budget_rate[1]),
    ):
        for j, b in enumerate(bids):
            lo, hi = getattr(b, lo_k), getattr(b, hi_k)
            prog.add_variable(f"x{side}{j}")
            prog.add_variable(f"d{side}{j}", lb=0.0)
            prog.add_variable(f"mu{side}{j}", lb=0.0, ub=cap)
            prog.add_variable(f"w{side}{j}")
            prog.add_inequality(f"bandlo{side}{j}", {f"x{side}{j}": -1.0, f"d{side}{j}": 1.0}, -lo)
            prog.add_inequality(f"bandhi{side}{j}", {f"x{side}{j}": 1.0, f"d{side}{j}": 1.0}, hi)
            prog.add_inequality(f"env1{side}{j}", {f"w{side}{j}": -1.0, f"mu{side}{j}": lo}, 0.0)
            prog.add_inequality(
                f"env2{side}{j}", {f"w{side}{j}": -1.0, f"x{side}{j}": cap, f"mu{side}{j}": hi}, cap * hi
            )
            prog.add_inequality(
                f"env3{side}{j}", {f"w{side}{j}": 1.0, f"x{side}{j}": -cap, f"mu{side}{j}": -lo}, -cap * lo
            )
            prog.add_inequality(f"env4{side}{j}", {f"w{side}{j}": 1.0, f"mu{side}{j}": -hi}, 0.0)
        prog.add_equality(f"balance_{side}", {f"x{side}{j}": 1.0 for j in range(len(bids))}, sp)
        prog.add_inequality(f"budget_{side}", {f"w{side}{j}": 1.0 for j in range(len(bids))}, rate)
    return prog


def build_stage_objectives(bids: list[DCABid], scores: dict[str, float]) -> list[ce.Objective]:
    n = len(bids)
    sgn_p = [math.copysign(1.0, b.p0) if b.p0 != 0 else 0.0 for b in bids]
    sgn_q = [math.copysign(1.0, b.q0) if b.q0 != 0 else 0.0 for b in bids]
    c = [scores[b.dca_id] for b in bids]
    lin1 = {f"xP{j}": -c[j] * sgn_p[j] for j in range(n)}
    lin1.update({f"xQ{j}": -c[j] * sgn_q[j] for j in range(n)})
    lin2 = {f"wP{j}": 1.0 for j in range(n)}
    lin2.update({f"wQ{j}": 1.0 for j in range(n)})
    lin3 = {f"dP{j}": -1.0 for j in range(n)}
    lin3.update({f"dQ{j}": -1.0 for j in range(n)})
    quad4 = [(b.beta_p, f"xP{j}", b.p0) for j, b in enumerate(bids)]
    quad4 += [(b.beta_q, f"xQ{j}", b.q0) for j, b in enumerate(bids)]
    return [
        ce.Objective(linear=lin1),
        ce.Objective(linear=lin2),
        ce.Objective(linear=lin3),
        ce.Objective(quad=quad4),
    ]
