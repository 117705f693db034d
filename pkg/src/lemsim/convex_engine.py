"""Linear/quadratic/second-order-cone programs with duals, plus a lexicographic driver.

Backed by the Clarabel interior-point solver. Dual sign conventions exposed
to callers:

* equality constraints: dual = d(objective)/d(rhs), signed;
* inequality constraints (lhs <= rhs, including box-bound rows ``lb[v]`` /
  ``ub[v]``): dual = Lagrange multiplier >= 0, the marginal value of
  relaxing the rhs by one unit.

Both conventions are verified against finite-difference perturbation in the
test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

import clarabel

INF = math.inf

# affine expression: ({var: coeff}, constant)
Affine = tuple[dict[str, float], float]


class EngineError(ValueError):
    pass


class UnknownConstraint(EngineError):
    pass


class StageInfeasible(EngineError):
    def __init__(self, stage: int, status: str):
        super().__init__(f"lexicographic stage {stage} ended {status}")
        self.stage = stage
        self.status = status


@dataclass
class Tolerances:
    feas: float = 1e-7
    gap: float = 1e-7
    max_iter: int = 200


@dataclass
class Objective:
    """min sum(coef*(x-center)^2) + sum(linear*x) + const."""

    quad: list[tuple[float, str, float]] = field(default_factory=list)  # (coef, var, center)
    linear: dict[str, float] = field(default_factory=dict)
    const: float = 0.0

    def evaluate(self, primal: dict[str, float]) -> float:
        val = self.const
        for coef, var, center in self.quad:
            val += coef * (primal[var] - center) ** 2
        for var, c in self.linear.items():
            val += c * primal[var]
        return val


@dataclass
class Solution:
    status: str  # optimal | infeasible | unbounded | numerical_failure
    primal: dict[str, float]
    duals: dict[str, float]
    objective: float
    kkt_residual: float
    diagnostics: dict = field(default_factory=dict)

    def dual_of(self, constraint_id: str) -> float:
        if self.status != "optimal":
            raise EngineError(f"no duals: status={self.status}")
        if constraint_id not in self.duals:
            raise UnknownConstraint(constraint_id)
        return self.duals[constraint_id]


def dual_of(sol: Solution, constraint_id: str) -> float:
    """Marginal value of relaxing the named constraint's rhs by one unit."""
    return sol.dual_of(constraint_id)


@dataclass
class LexiConfig:
    epsilon: float = 0.05
    epsilon_abs: float = 1e-9
    stage_order: tuple[str, ...] | None = None  # optional objective ids, in rank order

    def __post_init__(self):
        if self.epsilon < 0:
            raise EngineError("epsilon must be >= 0")
        if self.stage_order is not None and len(set(self.stage_order)) != len(self.stage_order):
            raise EngineError("stage order has duplicates")


def degradation_bound(f_star: float, cfg: LexiConfig) -> float:
    """Sign-aware cap on a previously optimized objective.

    F(x) <= F* + eps*|F*|, with the absolute floor eps_abs when F* == 0;
    keeps the allowance a *degradation* for negative-valued objectives.
    """
    if f_star == 0.0:
        return cfg.epsilon_abs
    return f_star + cfg.epsilon * abs(f_star)


class ConvexProgram:
    """Variables with box bounds, linear rows, convex quadratic objective,
    rotated-cone rows ||u||^2 <= c*d."""

    def __init__(self):
        self.var_names: list[str] = []
        self.var_index: dict[str, int] = {}
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.equalities: dict[str, tuple[dict[str, float], float]] = {}
        self.inequalities: dict[str, tuple[dict[str, float], float]] = {}
        # name -> (list of affine u entries, affine c, affine d)
        self.cones: dict[str, tuple[list[Affine], Affine, Affine]] = {}
        self.objective = Objective()

    # -- construction ----------------------------------------------------

    def add_variable(self, name: str, lb: float = -INF, ub: float = INF) -> str:
        if name in self.var_index:
            raise EngineError(f"duplicate variable {name}")
        if lb > ub:
            raise EngineError(f"variable {name}: lb > ub")
        self.var_index[name] = len(self.var_names)
        self.var_names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        return name

    def _check_vars(self, coeffs: dict[str, float], where: str):
        for v in coeffs:
            if v not in self.var_index:
                raise EngineError(f"{where}: undeclared variable {v}")

    def add_equality(self, name: str, coeffs: dict[str, float], rhs: float):
        if name in self.equalities or name in self.inequalities or name in self.cones:
            raise EngineError(f"duplicate constraint {name}")
        self._check_vars(coeffs, name)
        self.equalities[name] = (dict(coeffs), rhs)

    def add_inequality(self, name: str, coeffs: dict[str, float], rhs: float):
        """sum(coeffs*x) <= rhs."""
        if name in self.equalities or name in self.inequalities or name in self.cones:
            raise EngineError(f"duplicate constraint {name}")
        self._check_vars(coeffs, name)
        self.inequalities[name] = (dict(coeffs), rhs)

    def add_rotated_cone(self, name: str, u: list[Affine], c: Affine, d: Affine):
        """||u||^2 <= c*d with c, d >= 0 implied."""
        if name in self.equalities or name in self.inequalities or name in self.cones:
            raise EngineError(f"duplicate constraint {name}")
        for coeffs, _ in [*u, c, d]:
            self._check_vars(coeffs, name)
        self.cones[name] = ([(dict(cf), k) for cf, k in u], (dict(c[0]), c[1]), (dict(d[0]), d[1]))

    def set_objective(self, obj: Objective):
        for coef, var, _ in obj.quad:
            if coef < 0:
                raise EngineError("objective quadratic coefficients must be >= 0")
            if var not in self.var_index:
                raise EngineError(f"objective: undeclared variable {var}")
        self._check_vars(obj.linear, "objective")
        self.objective = obj

    def copy(self) -> "ConvexProgram":
        p = ConvexProgram()
        p.var_names = list(self.var_names)
        p.var_index = dict(self.var_index)
        p.lb = list(self.lb)
        p.ub = list(self.ub)
        p.equalities = {k: (dict(c), r) for k, (c, r) in self.equalities.items()}
        p.inequalities = {k: (dict(c), r) for k, (c, r) in self.inequalities.items()}
        p.cones = {
            k: ([(dict(cf), kk) for cf, kk in u], (dict(c[0]), c[1]), (dict(d[0]), d[1]))
            for k, (u, c, d) in self.cones.items()
        }
        p.objective = Objective(
            quad=list(self.objective.quad),
            linear=dict(self.objective.linear),
            const=self.objective.const,
        )
        return p

    # -- debug dump -------------------------------------------------------

    def dump(self) -> str:
        """Plain-text LP-style listing for external cross-checking."""

        def aff(coeffs: dict[str, float], const: float = 0.0) -> str:
            terms = [f"{c:+g} {v}" for v, c in sorted(coeffs.items())]
            if const:
                terms.append(f"{const:+g}")
            return " ".join(terms) if terms else "0"

        out = ["minimize"]
        obj_terms = [f"{c:+g} ({v} - {ctr:g})^2" for c, v, ctr in self.objective.quad]
        obj_terms += [f"{c:+g} {v}" for v, c in sorted(self.objective.linear.items())]
        if self.objective.const:
            obj_terms.append(f"{self.objective.const:+g}")
        out.append("  " + (" ".join(obj_terms) if obj_terms else "0"))
        out.append("subject to")
        for name, (coeffs, rhs) in self.equalities.items():
            out.append(f"  {name}: {aff(coeffs)} = {rhs:g}")
        for name, (coeffs, rhs) in self.inequalities.items():
            out.append(f"  {name}: {aff(coeffs)} <= {rhs:g}")
        for name, (u, c, d) in self.cones.items():
            us = ", ".join(aff(cf, k) for cf, k in u)
            out.append(f"  {name}: ||({us})||^2 <= ({aff(*c)}) * ({aff(*d)})")
        out.append("bounds")
        for i, v in enumerate(self.var_names):
            out.append(f"  {self.lb[i]:g} <= {v} <= {self.ub[i]:g}")
        return "\n".join(out) + "\n"


def solve(
    program: ConvexProgram,
    tol: Tolerances | None = None,
    debug_dump: str | None = None,
) -> Solution:
    """Solve the program; returns a non-optimal status rather than raising."""
    tol = tol or Tolerances()
    if debug_dump:
        with open(debug_dump, "w") as fh:
            fh.write(program.dump())

    n = len(program.var_names)
    vidx = program.var_index

    # objective: min 0.5 x'Px + q'x + const
    q = np.zeros(n)
    obj_const = program.objective.const
    pdiag = np.zeros(n)
    for coef, var, center in program.objective.quad:
        i = vidx[var]
        pdiag[i] += 2.0 * coef
        q[i] += -2.0 * coef * center
        obj_const += coef * center**2
    for var, c in program.objective.linear.items():
        q[vidx[var]] += c
    P = sparse.diags(pdiag, format="csc")

    rows: list[dict[str, float]] = []
    rhs: list[float] = []
    row_names: list[str] = []  # per scalar row; cones get vector slots

    eq_names = list(program.equalities)
    for name in eq_names:
        coeffs, b = program.equalities[name]
        rows.append(coeffs)
        rhs.append(b)
        row_names.append(name)
    n_eq = len(eq_names)

    ineq_names = []
    for name, (coeffs, b) in program.inequalities.items():
        rows.append(coeffs)
        rhs.append(b)
        row_names.append(name)
        ineq_names.append(name)
    for i, v in enumerate(program.var_names):
        if program.lb[i] > -INF:
            rows.append({v: -1.0})
            rhs.append(-program.lb[i])
            row_names.append(f"lb[{v}]")
            ineq_names.append(f"lb[{v}]")
        if program.ub[i] < INF:
            rows.append({v: 1.0})
            rhs.append(program.ub[i])
            row_names.append(f"ub[{v}]")
            ineq_names.append(f"ub[{v}]")
    n_in = len(rows) - n_eq

    # rotated cones as SOC blocks: ||(c-d, 2u)|| <= c+d
    cone_names = list(program.cones)
    cone_sizes = []
    for name in cone_names:
        u, c, d = program.cones[name]
        c_coeffs, c_const = c
        d_coeffs, d_const = d
        plus = dict(c_coeffs)
        for v, cf in d_coeffs.items():
            plus[v] = plus.get(v, 0.0) + cf
        minus = dict(c_coeffs)
        for v, cf in d_coeffs.items():
            minus[v] = minus.get(v, 0.0) - cf
        block = [(plus, c_const + d_const), (minus, c_const - d_const)]
        for coeffs, k in u:
            block.append(({v: 2.0 * cf for v, cf in coeffs.items()}, 2.0 * k))
        # SOC rows hold s = b - Ax: row expr with coeffs negated
        for coeffs, k in block:
            rows.append({v: -cf for v, cf in coeffs.items()})
            rhs.append(k)
            row_names.append(name)
        cone_sizes.append(len(block))

    data, ri, ci = [], [], []
    for r, coeffs in enumerate(rows):
        for v, cf in coeffs.items():
            if cf != 0.0:
                data.append(float(cf))
                ri.append(r)
                ci.append(vidx[v])
    A = sparse.csc_matrix((data, (ri, ci)), shape=(len(rows), n))
    b = np.asarray(rhs, dtype=float)

    cones: list = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_in:
        cones.append(clarabel.NonnegativeConeT(n_in))
    cones += [clarabel.SecondOrderConeT(sz) for sz in cone_sizes]

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = tol.max_iter
    settings.tol_feas = min(tol.feas, 1e-8)
    settings.tol_gap_abs = min(tol.gap, 1e-8)
    settings.tol_gap_rel = min(tol.gap, 1e-8)

    solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
    res = solver.solve()
    status_name = str(res.status)

    if status_name in ("Solved", "AlmostSolved"):
        status = "optimal"
    elif status_name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        status = "infeasible"
    elif status_name in ("DualInfeasible", "AlmostDualInfeasible"):
        status = "unbounded"
    else:
        status = "numerical_failure"

    x = np.asarray(res.x, dtype=float)
    z = np.asarray(res.z, dtype=float)
    diagnostics: dict = {"solver_status": status_name, "iterations": res.iterations}

    if status != "optimal":
        if z.size:
            worst = int(np.argmax(np.abs(z)))
            diagnostics["most_violated"] = row_names[worst]
        return Solution(
            status=status,
            primal={},
            duals={},
            objective=math.nan,
            kkt_residual=math.inf,
            diagnostics=diagnostics,
        )

    primal = {v: float(x[i]) for v, i in vidx.items()}
    duals: dict[str, float] = {}
    for r in range(n_eq):
        duals[row_names[r]] = float(-z[r])  # d(obj)/d(rhs)
    for r in range(n_eq, n_eq + n_in):
        duals[row_names[r]] = float(z[r])  # multiplier >= 0

    # stationarity from the sign-normalized duals; validates the mapping
    Ax = A @ x
    grad = P @ x + q
    grad_res = grad.copy()
    if n_eq:
        grad_res -= A[:n_eq].T @ np.array([duals[row_names[r]] for r in range(n_eq)])
    if n_in:
        lam = np.array([duals[row_names[r]] for r in range(n_eq, n_eq + n_in)])
        grad_res += A[n_eq : n_eq + n_in].T @ lam
    if cone_sizes:
        grad_res += A[n_eq + n_in :].T @ z[n_eq + n_in :]
    feas_eq = float(np.max(np.abs(Ax[:n_eq] - b[:n_eq]))) if n_eq else 0.0
    feas_in = float(np.max((Ax - b)[n_eq : n_eq + n_in])) if n_in else 0.0
    kkt = max(float(np.max(np.abs(grad_res))), feas_eq, max(feas_in, 0.0))

    objective = float(0.5 * x @ (P @ x) + q @ x + obj_const)
    return Solution(
        status=status,
        primal=primal,
        duals=duals,
        objective=objective,
        kkt_residual=kkt,
        diagnostics=diagnostics,
    )


@dataclass
class StagedSolution:
    solutions: list[Solution]
    stage_values: list[float]
    stage_bounds: list[float]  # degradation rhs added after each stage

    @property
    def final(self) -> Solution:
        return self.solutions[-1]


def lexicographic_solve(
    stages: list[tuple[Objective, list]],
    base: ConvexProgram,
    cfg: LexiConfig | None = None,
    tol: Tolerances | None = None,
) -> StagedSolution:
    """Sequentially optimize stage objectives in order, capping earlier
    objectives by the sign-aware degradation bound after each stage.

    Each stage's extra constraints (name, coeffs, rhs, kind) with kind in
    {"eq", "ineq"} are added when the stage is reached and kept thereafter.
    """
    cfg = cfg or LexiConfig()
    prog = base.copy()
    solutions: list[Solution] = []
    values: list[float] = []
    bounds: list[float] = []
    for k, (obj, extras) in enumerate(stages):
        for name, coeffs, rhs, kind in extras:
            if kind == "eq":
                prog.add_equality(name, coeffs, rhs)
            else:
                prog.add_inequality(name, coeffs, rhs)
        prog.set_objective(obj)
        sol = solve(prog, tol=tol)
        if sol.status != "optimal":
            raise StageInfeasible(k, sol.status)
        solutions.append(sol)
        values.append(sol.objective)
        if k < len(stages) - 1:
            bound = degradation_bound(sol.objective, cfg)
            bounds.append(bound)
            if obj.quad:
                u = [({var: math.sqrt(coef)}, -math.sqrt(coef) * center) for coef, var, center in obj.quad]
                lin_rhs = bound - obj.const
                if obj.linear:
                    # quad + linear mix: ||u||^2 <= t with t = rhs - linear part
                    tname = f"_lexi_t[{k}]"
                    prog.add_variable(tname, lb=0.0)
                    prog.add_equality(
                        f"_lexi_tdef[{k}]",
                        {**{v: c for v, c in obj.linear.items()}, tname: 1.0},
                        lin_rhs,
                    )
                    prog.add_rotated_cone(f"_lexi_deg[{k}]", u, ({tname: 1.0}, 0.0), ({}, 1.0))
                else:
                    prog.add_rotated_cone(f"_lexi_deg[{k}]", u, ({}, lin_rhs), ({}, 1.0))
            else:
                prog.add_inequality(f"_lexi_deg[{k}]", dict(obj.linear), bound - obj.const)
    return StagedSolution(solutions=solutions, stage_values=values, stage_bounds=bounds)
