import numpy as np
import pytest

from lemsim import convex_engine as ce
from lemsim import grid_model as gm
from lemsim import primary_market as pm

from oracles import physical_objective, sweep_power_flow


def two_bus(r=0.01, x=0.02, s_max=5.0):
    return gm.RadialNetwork(
        nodes={0: gm.Node(0, "slack"), 1: gm.Node(1, "smo")},
        lines=[gm.Line(0, 1, r, x, s_max)],
        s_base_mva=1.0,
        v_base_kv=4.16,
    )


def fixed_load_bid(node, pl, ql, alpha=6.0, beta=2.0, pg_hi=0.0):
    return pm.SMOBid(
        node=node,
        pg0=0.0,
        qg0=0.0,
        pl0=pl,
        ql0=ql,
        pg_lo=0.0,
        pg_hi=pg_hi,
        pl_lo=pl,
        pl_hi=pl,
        qg_lo=0.0,
        qg_hi=0.0,
        ql_lo=ql,
        ql_hi=ql,
        beta_p=beta,
        beta_q=beta,
        alpha_p=alpha,
        alpha_q=0.1 * alpha,
    )


def test_assemble_counts_two_bus():
    net = two_bus()
    prog = pm.assemble_opf(net, {1: fixed_load_bid(1, 1.0, 0.3)}, (0.05, 0.005))
    assert "balance_P[0]" in prog.equalities and "balance_P[1]" in prog.equalities
    assert "balance_Q[0]" in prog.equalities and "balance_Q[1]" in prog.equalities
    assert "vdrop[1]" in prog.equalities
    assert "cone[1]" in prog.cones and "thermal[1]" in prog.cones
    # v x2, slack PG/QG, node PG/QG/PL/QL, line fP/fQ/l
    assert len(prog.var_names) == 2 + 2 + 4 + 3


def test_xi_zero_no_loss_terms():
    net = two_bus()
    prog = pm.assemble_opf(net, {1: fixed_load_bid(1, 1.0, 0.3)}, (0.05, 0.005), xi=0.0)
    assert prog.objective.linear.get("l[1]", 0.0) == 0.0


def test_pcc_linear_others_quadratic():
    net = two_bus()
    prog = pm.assemble_opf(net, {1: fixed_load_bid(1, 1.0, 0.3)}, (0.05, 0.005))
    assert prog.objective.linear["PG[0]"] == 0.05
    assert any(v == "PG[1]" for _, v, _ in prog.objective.quad)
    assert not any(v == "PG[0]" for _, v, _ in prog.objective.quad)


def test_missing_bid():
    net = two_bus()
    with pytest.raises(pm.MissingBid):
        pm.assemble_opf(net, {}, (0.05, 0.005))


def test_lossless_uniform_price():
    net = two_bus(r=0.0, x=0.0)
    clr = pm.clear_pm(net, {1: fixed_load_bid(1, 1.0, 0.3)}, (0.05, 0.005))
    assert clr.dlmp_p[0] == pytest.approx(0.05, abs=1e-6)
    assert clr.dlmp_p[1] == pytest.approx(0.05, abs=1e-5)
    assert clr.p_pcc == pytest.approx(1.0, abs=1e-6)


def test_lossy_dlmp_above_lambda_and_finite_difference():
    net = two_bus(r=0.002, x=0.003)
    bids = {1: fixed_load_bid(1, 1.0, 0.3)}
    lam = (0.05, 0.005)
    clr = pm.clear_pm(net, bids, lam, xi=100.0)
    assert clr.dlmp_p[1] > lam[0]
    # rhs-perturbation oracle at h=1e-4 on the load node's real balance
    h = 1e-4
    vals = []
    for sign in (+1, -1):
        prog = pm.assemble_opf(net, bids, lam, xi=100.0)
        coeffs, rhs = prog.equalities["balance_P[1]"]
        prog.equalities["balance_P[1]"] = (coeffs, rhs + sign * h)
        vals.append(ce.solve(prog).objective)
    fd = (vals[0] - vals[1]) / (2 * h)
    assert clr.dlmp_p[1] == pytest.approx(fd, abs=max(1e-3, 0.01 * abs(fd)))


def test_thermal_infeasible_named():
    net = two_bus(r=0.001, x=0.002, s_max=0.5)
    with pytest.raises(pm.Infeasible):
        pm.clear_pm(net, {1: fixed_load_bid(1, 1.0, 0.3)}, (0.05, 0.005))


def test_power_conservation():
    rng = np.random.default_rng(6)
    net = chain_feeder(5)
    bids = random_bids(net, rng)
    clr = pm.clear_pm(net, bids, (0.04, 0.004))
    for side, flows, loss_coef in (
        ("p", "p", "r"),
        ("q", "q", "x"),
    ):
        net_inj = sum(getattr(clr, f"{side}_net")[i] for i in net.nodes if i != net.slack)
        pcc = clr.p_pcc if side == "p" else clr.q_pcc
        loss = sum(
            getattr(net.parent_line(ln.to_node), loss_coef) * ln.l for ln in clr.lines
        )
        assert pcc + net_inj - loss == pytest.approx(0.0, abs=1e-6)


def chain_feeder(n, r=0.0004, x=0.0006):
    nodes = {0: gm.Node(0, "slack")}
    lines = []
    for i in range(1, n):
        nodes[i] = gm.Node(i, "smo")
        lines.append(gm.Line(i - 1, i, r, x, 5.0))
    return gm.RadialNetwork(nodes=nodes, lines=lines, s_base_mva=1.0, v_base_kv=4.16)


def random_bids(net, rng, flex=0.3):
    bids = {}
    for i in net.smo_nodes():
        pl = float(rng.uniform(0.01, 0.06))
        ql = 0.3 * pl
        pg_hi = float(rng.uniform(0.0, 0.02))
        bids[i] = pm.SMOBid(
            node=i,
            pg0=0.0,
            qg0=0.0,
            pl0=pl,
            ql0=ql,
            pg_lo=0.0,
            pg_hi=pg_hi,
            pl_lo=pl * (1 - flex),
            pl_hi=pl * (1 + flex),
            qg_lo=0.0,
            qg_hi=0.0,
            ql_lo=ql * (1 - flex),
            ql_hi=ql * (1 + flex),
            beta_p=float(rng.uniform(1.0, 4.0)),
            beta_q=float(rng.uniform(1.0, 4.0)),
            alpha_p=float(rng.uniform(4.0, 8.0)),
            alpha_q=float(rng.uniform(0.4, 0.8)),
        )
    return bids


def test_dlmp_finite_difference_five_nodes():
    rng = np.random.default_rng(17)
    net = chain_feeder(5)
    bids = random_bids(net, rng)
    lam = (0.045, 0.0045)
    clr = pm.clear_pm(net, bids, lam)
    h = 1e-4
    for node in (1, 3, 4):
        vals = []
        for sign in (+1, -1):
            prog = pm.assemble_opf(net, bids, lam)
            coeffs, rhs = prog.equalities[f"balance_P[{node}]"]
            prog.equalities[f"balance_P[{node}]"] = (coeffs, rhs + sign * h)
            vals.append(ce.solve(prog).objective)
        fd = (vals[0] - vals[1]) / (2 * h)
        assert clr.dlmp_p[node] == pytest.approx(fd, abs=max(1e-3, 0.01 * abs(fd)))


def test_slack_price_anchor_random_uncongested():
    rng = np.random.default_rng(29)
    for k in range(20):
        n = int(rng.integers(2, 7))
        net = chain_feeder(n)
        bids = random_bids(net, rng)
        lam = (float(rng.uniform(0.02, 0.08)), 0.005)
        clr = pm.clear_pm(net, bids, lam)
        # PCC import sits strictly inside its wide box; no binding at slack
        assert abs(clr.p_pcc) < pm.PCC_LIMIT_PU - 1.0
        assert clr.dlmp_p[net.slack] == pytest.approx(lam[0], abs=1e-6)


def test_monotone_loss_pricing():
    lam = (0.05, 0.005)
    prev = -1.0
    for r in (0.0, 0.005, 0.01, 0.02):
        net = two_bus(r=r, x=1.5 * r)
        clr = pm.clear_pm(net, {1: fixed_load_bid(1, 0.5, 0.15)}, lam)
        assert clr.dlmp_p[1] >= prev - 1e-9
        prev = clr.dlmp_p[1]


def test_socp_gap_zero_flow_line():
    # a stub branch with no downstream injection carries no flow; with
    # xi > 0 the current variable is driven to zero and the gap vanishes
    nodes = {0: gm.Node(0, "slack"), 1: gm.Node(1, "smo"), 2: gm.Node(2, "smo")}
    lines = [gm.Line(0, 1, 0.001, 0.0015, 5.0), gm.Line(0, 2, 0.001, 0.0015, 5.0)]
    net = gm.RadialNetwork(nodes=nodes, lines=lines, s_base_mva=1.0, v_base_kv=4.16)
    bids = {
        1: fixed_load_bid(1, 0.5, 0.15),
        2: fixed_load_bid(2, 0.0, 0.0),
    }
    clr = pm.clear_pm(net, bids, (0.05, 0.005))
    gaps = {g.to_node: g.gap for g in pm.check_socp_exactness(clr)}
    assert abs(gaps[2]) <= 1e-7


def test_socp_gap_inflated_current():
    net = two_bus(r=0.001, x=0.002)
    clr = pm.clear_pm(net, {1: fixed_load_bid(1, 0.5, 0.15)}, (0.05, 0.005))
    ln = clr.lines[0]
    base_gap = pm.check_socp_exactness(clr)[0].gap
    ln.l += 0.1
    inflated = pm.check_socp_exactness(clr)[0].gap
    assert inflated - base_gap == pytest.approx(0.1 * clr.v_sq[0], rel=1e-9)


def test_socp_exactness_flagging():
    net = two_bus(r=0.001, x=0.002)
    clr = pm.clear_pm(net, {1: fixed_load_bid(1, 0.5, 0.15)}, (0.05, 0.005))
    reports = pm.check_socp_exactness(clr, flag_tol=1e-5)
    assert all(r.gap >= -1e-7 for r in reports)
    assert not any(r.flagged for r in reports)


# -- alpha updates -----------------------------------------------------------


def alpha_state():
    return pm.AlphaState(alpha_fixed={1: 6.0})


def test_update_alpha_constant_tariffs():
    st = alpha_state()
    window = [[(0.1, 5.0)], [(0.1, 8.0)], [(0.1, 2.0)]]
    pm.update_alpha(st, 1, window)
    assert st.alpha_var[1] == pytest.approx(0.1)
    assert st.alpha_p(1) == pytest.approx(6.1)


def test_update_alpha_weighted():
    st = alpha_state()
    window = [[(0.1, 10.0), (0.2, 30.0)]]
    pm.update_alpha(st, 1, window)
    assert st.alpha_var[1] == pytest.approx(0.175)


def test_update_alpha_carry_over_on_zero_weights():
    st = alpha_state()
    pm.update_alpha(st, 1, [[(0.15, 20.0)]])
    pm.update_alpha(st, 1, [[(0.4, 0.0)]])
    assert st.alpha_var[1] == pytest.approx(0.15)
    assert st.alpha_q(1) == pytest.approx(0.1 * (6.0 + 0.15))


def test_update_alpha_empty_window_raises():
    with pytest.raises(pm.EmptyWindow):
        pm.update_alpha(alpha_state(), 1, [])


def test_alpha_fixed_range_enforced():
    with pytest.raises(pm.PMError):
        pm.AlphaState(alpha_fixed={1: 9.0})


# -- tiny-instance brute-force oracle ----------------------------------------


def test_three_node_grid_oracle():
    # 3-node chain; the free variables are PL at node 1 and PG at node 2,
    # gridded at 41 points each; every other variable is pinned by bounds.
    # The SOCP relaxes the physical equations, so its optimum cannot exceed
    # the best physically feasible grid point.
    net = chain_feeder(3, r=0.0008, x=0.0012)
    lam = (0.05, 0.005)
    xi = 100.0
    pl1_range = (0.02, 0.06)
    pg2_range = (0.0, 0.03)
    bids = {
        1: pm.SMOBid(
            node=1, pg0=0.0, qg0=0.0, pl0=0.04, ql0=0.012,
            pg_lo=0.0, pg_hi=0.0, pl_lo=pl1_range[0], pl_hi=pl1_range[1],
            qg_lo=0.0, qg_hi=0.0, ql_lo=0.012, ql_hi=0.012,
            beta_p=2.0, beta_q=2.0, alpha_p=6.0, alpha_q=0.6,
        ),
        2: pm.SMOBid(
            node=2, pg0=0.0, qg0=0.0, pl0=0.05, ql0=0.015,
            pg_lo=pg2_range[0], pg_hi=pg2_range[1], pl_lo=0.05, pl_hi=0.05,
            qg_lo=0.0, qg_hi=0.0, ql_lo=0.015, ql_hi=0.015,
            beta_p=2.0, beta_q=2.0, alpha_p=5.0, alpha_q=0.5,
        ),
    }
    clr = pm.clear_pm(net, bids, lam, xi)

    best = np.inf
    for pl1 in np.linspace(*pl1_range, 41):
        for pg2 in np.linspace(*pg2_range, 41):
            pg = {1: 0.0, 2: pg2}
            pl = {1: pl1, 2: 0.05}
            qg = {1: 0.0, 2: 0.0}
            ql = {1: 0.012, 2: 0.015}
            obj = physical_objective(net, bids, lam, xi, pg, pl, qg, ql)
            if obj is not None:
                best = min(best, obj)
    assert np.isfinite(best)
    assert clr.objective <= best + 1e-6 * max(1.0, abs(best))


def test_sweep_oracle_matches_socp_when_tight():
    # at the SOCP optimum the relaxation is tight here; pushing the cleared
    # injections through the independent sweep reproduces flows and losses
    net = chain_feeder(4, r=0.0006, x=0.0009)
    rng = np.random.default_rng(3)
    bids = random_bids(net, rng)
    clr = pm.clear_pm(net, bids, (0.05, 0.005))
    inj = {i: (clr.p_net[i], clr.q_net[i]) for i in net.smo_nodes()}
    fp, fq, l, v, p_slack, q_slack = sweep_power_flow(net, inj)
    assert p_slack == pytest.approx(clr.p_pcc, abs=5e-6)
    for i in l:
        assert l[i] == pytest.approx(dict((ln.to_node, ln.l) for ln in clr.lines)[i], abs=5e-6)
        assert v[i] == pytest.approx(clr.v_sq[i], abs=5e-6)
