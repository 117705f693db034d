"""Scenario ingestion and synthesis, results export, metrics, and the CLI.

Synthetic scenarios mirror the reference use-case: a radial feeder with a
configurable SMO node count, double-peak daily load shaped to a target
feeder peak, clear-sky PV at fixed nodes scaled to a total nameplate, DCA
disaggregation with generator/load tags, and uniform flexibility-fraction
draws. Everything is deterministic given (config, seed).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import grid_model as gm
from . import orchestrator as orch
from .orchestrator import DCASpec, RunResults, Scenario, ScenarioState, Timeline


class DataError(Exception):
    pass


class SchemaMismatch(DataError):
    pass


class NonMonotoneTimestamps(DataError):
    pass


class GapInSeries(DataError):
    pass


class IoFailure(DataError):
    pass


class IncompatibleHorizons(DataError):
    pass


EPOCH_MIN = 0  # timestamps are rendered from this simulated day
EPOCH_DAY = "2021-08-28"

PROFILE_HEADER = ["node_id", "timestamp_iso8601", "P_kW", "Q_kvar"]
LMP_HEADER = ["timestamp_iso8601", "lmp_usd_per_kwh"]


def minute_iso(minute: int) -> str:
    return f"{EPOCH_DAY}T{(minute // 60) % 24:02d}:{minute % 60:02d}:00"


def iso_minute(ts: str) -> int:
    hh, mm = int(ts[11:13]), int(ts[14:16])
    return hh * 60 + mm


@dataclass
class ScenarioConfig:
    """Defaults mirror the reference use-case parameters."""

    n_nodes: int = 79
    s_base_mva: float = 1.0
    v_base_kv: float = 4.16
    peak_load_mw: float = 3.6
    pv_nameplate_kw: float = 510.3
    pv_nodes: tuple[int, ...] = (5, 20, 50, 63, 94)
    dca_count_range: tuple[int, int] = (3, 5)
    flex_cap: float = 0.5
    beta_range: tuple[float, float] = (0.1, 1.0)
    alpha_fixed_range: tuple[float, float] = (4.0, 8.0)
    caps: tuple[float, float] = (0.2, 0.2)
    epsilon: float = 0.05
    xi: float = 100.0
    budget_mode: str = "quasi_multiperiod"
    seed: int = 0
    horizon_min: int = 1440
    dt_s_min: int = 1
    dt_p_min: int = 5
    gen_dca_prob: float = 0.35
    gen_headroom: float = 0.25
    q_lmp_ratio: float = 0.1
    beta_pu_scale: float = 4.0
    load_power_factor: float = 0.95
    follow_mix: tuple[float, ...] | None = None  # cycled per DCA when set
    follow_range: tuple[float, float] = (0.85, 1.0)
    response_overshoot: float = 0.5
    response_noise: float = 0.5
    without_flex_fraction: float = 0.5
    without_gen_share: float = 0.25
    flat_rate: float = 0.129
    feeder_path: str | None = None
    profiles_path: str | None = None
    lmp_path: str | None = None

    @classmethod
    def from_json(cls, path: str) -> "ScenarioConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        for key in ("dca_count_range", "flex_cap", "beta_range", "alpha_fixed_range", "caps", "pv_nodes", "follow_mix", "follow_range"):
            if key in raw and isinstance(raw[key], list):
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic generation


def _daily_load_shape(minutes: np.ndarray) -> np.ndarray:
    h = minutes / 60.0
    return (
        0.45
        + 0.22 * np.exp(-(((h - 8.0) / 2.2) ** 2))
        + 0.38 * np.exp(-(((h - 19.0) / 2.6) ** 2))
    )


def _pv_shape(minutes: np.ndarray) -> np.ndarray:
    h = minutes / 60.0
    up = np.clip(np.sin(math.pi * (h - 6.0) / 12.0), 0.0, None)
    return up**1.5


def gen_synthetic_feeder(cfg: ScenarioConfig):
    """Radial feeder plus per-node 1-min profiles hitting the configured
    scale targets exactly (feeder peak load; total PV nameplate)."""
    rng = np.random.default_rng([cfg.seed, 101])
    n = cfg.n_nodes
    nodes = [(0, "slack")] + [(i, "smo") for i in range(1, n + 1)]

    parents = {}
    depth = {0: 0}
    for i in range(1, n + 1):
        candidates = list(range(i))
        weights = np.array([1.0 / (1.0 + depth[c]) ** 2 for c in candidates])
        parent = int(rng.choice(candidates, p=weights / weights.sum()))
        parents[i] = parent
        depth[i] = depth[parent] + 1

    minutes = np.arange(cfg.horizon_min)
    shape = _daily_load_shape(minutes)
    weights_node = rng.uniform(0.4, 1.6, size=n)
    jitter = np.stack(
        [
            1.0
            + 0.04 * np.sin(2 * math.pi * (minutes / 1440.0) * rng.uniform(2, 5) + rng.uniform(0, 6.28))
            for _ in range(n)
        ]
    )
    load = weights_node[:, None] * shape[None, :] * jitter  # (n, T) unscaled
    total = load.sum(axis=0)
    scale = cfg.peak_load_mw * 1000.0 / float(total.max())
    load *= scale  # feeder peak == target exactly at the argmax minute

    pv_nodes = [p for p in cfg.pv_nodes if 1 <= p <= n]
    pv = np.zeros((n, len(minutes)))
    if pv_nodes and cfg.pv_nameplate_kw > 0:
        w = rng.uniform(0.5, 1.5, size=len(pv_nodes))
        w *= cfg.pv_nameplate_kw / w.sum()  # nameplates sum exactly
        bell = _pv_shape(minutes)
        for k, node in enumerate(pv_nodes):
            pv[node - 1] = w[k] * bell

    tan_phi = math.tan(math.acos(cfg.load_power_factor))
    profiles: dict[int, np.ndarray] = {}
    gross: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(1, n + 1):
        p_net = pv[i - 1] - load[i - 1]
        q_net = -load[i - 1] * tan_phi
        profiles[i] = np.stack([p_net, q_net], axis=1)
        gross[i] = (load[i - 1].copy(), pv[i - 1].copy())

    # impedances: drawn per line, trunk lines softened by downstream count,
    # then rescaled so the estimated worst-case voltage drop stays in band
    n_desc = {i: 0 for i in range(n + 1)}
    for i in range(1, n + 1):
        j = parents[i]
        while True:
            n_desc[j] += 1
            if j == 0:
                break
            j = parents[j]
    r_draw = {i: rng.uniform(1.0, 3.0) / (1.0 + 0.5 * n_desc[i]) for i in range(1, n + 1)}
    xr = 1.5

    # peak apparent flow per line from downstream peak loads (lossless estimate)
    peak_node = load.max(axis=1)  # kW
    down_kw = {i: peak_node[i - 1] for i in range(1, n + 1)}
    for i in sorted(range(1, n + 1), key=lambda k: -depth[k]):
        down_kw[parents[i]] = down_kw.get(parents[i], 0.0) + down_kw[i]
    # Scale impedances against two criteria: the worst-path marginal-loss
    # price component (2*xi*R*flow) must stay a modest fraction of the
    # tariff ceiling (d-LMPs above the ceiling make SM budgets
    # uncollectable), and the worst-path voltage swing must leave headroom
    # for reverse PV flows with bid/headroom amplification.
    s_base_kw = cfg.s_base_mva * 1000.0
    down_pv = {i: pv[i - 1].max() for i in range(1, n + 1)}
    for i in sorted(range(1, n + 1), key=lambda k: -depth[k]):
        down_pv[parents[i]] = down_pv.get(parents[i], 0.0) + down_pv[i]
    margin = 0.0
    drop = 0.0
    amp = (1.0 + cfg.flex_cap) * (1.0 + cfg.gen_headroom)
    for i in range(1, n + 1):
        path = _path(i, parents)
        margin = max(
            margin,
            sum(2.0 * cfg.xi * r_draw[j] * down_kw[j] / s_base_kw for j in path),
        )
        f_rev = [amp * (down_pv[j] + cfg.gen_headroom * down_kw[j]) / s_base_kw for j in path]
        drop = max(
            drop,
            sum(
                2.0 * r_draw[j] * (1 + xr * tan_phi) * max(down_kw[j] / s_base_kw, fr)
                for j, fr in zip(path, f_rev)
            ),
        )
    target_margin = 0.25 * min(cfg.caps)  # $/kWh of loss adder at peak
    target_drop = 0.03  # squared-voltage swing headroom
    r_scale = min(
        target_margin / margin if margin > 0 else 1.0,
        target_drop / drop if drop > 0 else 1.0,
    )
    z_base = gm.z_base_ohm(cfg.v_base_kv, cfg.s_base_mva)

    lines = []
    for i in range(1, n + 1):
        r_pu = r_draw[i] * r_scale
        x_pu = xr * r_pu
        # twice the peak baseline flow in either direction (load or reverse PV)
        fwd = down_kw[i] * math.sqrt(1 + tan_phi**2)
        rev = amp * (down_pv[i] + cfg.gen_headroom * down_kw[i])
        s_max_pu = max(2.0 * max(fwd, rev) / s_base_kw, 0.05)
        lines.append((parents[i], i, r_pu * z_base, x_pu * z_base, s_max_pu * cfg.s_base_mva))

    spec = gm.FeederSpec(
        s_base_mva=cfg.s_base_mva, v_base_kv=cfg.v_base_kv, nodes=nodes, lines=lines
    )
    return spec, profiles, gross


def _path(i, parents):
    out = []
    while i != 0:
        out.append(i)
        i = parents[i]
    return out


def gen_synthetic_lmp(cfg: ScenarioConfig) -> np.ndarray:
    """5-min wholesale LMP series, $/kWh, smooth daily shape with seeded noise."""
    rng = np.random.default_rng([cfg.seed, 202])
    n_p = cfg.horizon_min // cfg.dt_p_min
    t = np.arange(n_p) * cfg.dt_p_min
    h = t / 60.0
    lam = (
        0.028
        + 0.009 * np.exp(-(((h - 8.5) / 2.0) ** 2))
        + 0.024 * np.exp(-(((h - 18.5) / 2.8) ** 2))
        + 0.003 * np.sin(2 * math.pi * h / 24.0 * rng.uniform(3, 6) + rng.uniform(0, 6.28))
    )
    return np.maximum(lam, 0.005)


@dataclass(frozen=True)
class DCAPersonality:
    kind: str  # "gen" | "load"
    weight: float


def draw_personalities(n_dca: int, rng, gen_prob: float, force_gen: bool) -> list[DCAPersonality]:
    kinds = ["gen" if rng.uniform() < gen_prob else "load" for _ in range(n_dca)]
    if all(k == "gen" for k in kinds):
        kinds[int(rng.integers(n_dca))] = "load"
    if force_gen and all(k == "load" for k in kinds):
        kinds[int(rng.integers(n_dca))] = "gen"
    weights = rng.uniform(0.5, 1.5, size=n_dca)
    return [DCAPersonality(kind=k, weight=float(w)) for k, w in zip(kinds, weights)]


def split_node(p_kw: float, q_kvar: float, pers: list[DCAPersonality], headroom: float) -> list[tuple[float, float]]:
    """Split a node injection among DCA personalities; sums are exact."""
    gens = [i for i, c in enumerate(pers) if c.kind == "gen"]
    loads = [i for i, c in enumerate(pers) if c.kind == "load"]
    load_gross = max(-p_kw, 0.0)
    g_total = max(p_kw, 0.0) + (headroom * load_gross if gens else 0.0)
    out = [(0.0, 0.0)] * len(pers)
    if gens:
        gw = sum(pers[i].weight for i in gens)
        acc = 0.0
        for k, i in enumerate(gens):
            share = g_total - acc if k == len(gens) - 1 else g_total * pers[i].weight / gw
            out[i] = (share, 0.0)
            acc += share
    if not loads:
        # all-generator node: the last DCA absorbs the residual so sums are exact
        i = gens[-1]
        out[i] = (out[i][0] + (p_kw - g_total), out[i][1] + q_kvar)
        return out
    l_total_p = p_kw - g_total
    l_total_q = q_kvar
    lw = sum(pers[i].weight for i in loads)
    acc_p = acc_q = 0.0
    for k, i in enumerate(loads):
        if k == len(loads) - 1:
            sp, sq = l_total_p - acc_p, l_total_q - acc_q
        else:
            sp = l_total_p * pers[i].weight / lw
            sq = l_total_q * pers[i].weight / lw
        out[i] = (sp, sq)
        acc_p += sp
        acc_q += sq
    return out


def split_node_gross(
    load_kw: float,
    pv_kw: float,
    q_kvar: float,
    pers: list[DCAPersonality],
    headroom: float,
) -> list[tuple[float, float]]:
    """Split a node with known gross load/PV: generator DCAs carry the PV
    plus headroom DERs, load DCAs carry the load grossed up by the same
    headroom; sums equal the net injection exactly."""
    gens = [i for i, c in enumerate(pers) if c.kind == "gen"]
    loads = [i for i, c in enumerate(pers) if c.kind == "load"]
    if not loads or (pv_kw > 0 and not gens):
        return split_node(pv_kw - load_kw, q_kvar, pers, headroom)
    g_total = pv_kw + (headroom * load_kw if gens else 0.0)
    l_total = (pv_kw - load_kw) - g_total
    out = [(0.0, 0.0)] * len(pers)
    if gens:
        gw = sum(pers[i].weight for i in gens)
        acc = 0.0
        for k, i in enumerate(gens):
            share = g_total - acc if k == len(gens) - 1 else g_total * pers[i].weight / gw
            out[i] = (share, 0.0)
            acc += share
    lw = sum(pers[i].weight for i in loads)
    acc_p = acc_q = 0.0
    for k, i in enumerate(loads):
        if k == len(loads) - 1:
            sp, sq = l_total - acc_p, q_kvar - acc_q
        else:
            sp = l_total * pers[i].weight / lw
            sq = q_kvar * pers[i].weight / lw
        out[i] = (sp, sq)
        acc_p += sp
        acc_q += sq
    return out


def disaggregate_node(
    p_kw: float,
    q_kvar: float,
    n_dca: int,
    rng,
    gen_prob: float = 0.35,
    headroom: float = 0.25,
) -> list[tuple[float, float]]:
    """Split one node injection into n_dca baselines summing exactly to the
    node totals, each DCA tagged net load or net generator by construction."""
    if n_dca < 1:
        raise DataError("n_dca must be >= 1")
    pers = draw_personalities(n_dca, rng, gen_prob, force_gen=p_kw > 0)
    return split_node(p_kw, q_kvar, pers, headroom)


def gen_flexibility_bids(
    p0: float, q0: float, rng, cap: float = 0.5
) -> tuple[float, float, float, float]:
    """Uniform flexibility-fraction draws; endpoints reordered so the
    baseline sits inside the interval for negative baselines too."""
    if not (0.0 <= cap <= 1.0):
        raise DataError("flex cap must be in [0,1]")
    dn_p, up_p = rng.uniform(0.0, cap, size=2)
    dn_q, up_q = rng.uniform(0.0, cap, size=2)
    p_lo, p_hi = flex_interval(p0, dn_p, up_p)
    q_lo, q_hi = flex_interval(q0, dn_q, up_q)
    return p_lo, p_hi, q_lo, q_hi


def flex_interval(x0: float, dn: float, up: float) -> tuple[float, float]:
    lo = x0 * (1.0 - dn)
    hi = x0 * (1.0 + up)
    return (lo, hi) if lo <= hi else (hi, lo)


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    """Assemble a Scenario from files when paths are given, otherwise from
    the synthetic generators."""
    tl = Timeline(dt_s_min=cfg.dt_s_min, dt_p_min=cfg.dt_p_min, horizon_min=cfg.horizon_min)
    gross = None
    if cfg.feeder_path:
        spec = gm.read_feeder_file(cfg.feeder_path)
        if cfg.profiles_path is None:
            raise DataError("feeder_path given without profiles_path")
        profiles = load_profiles(cfg.profiles_path, expected_rows=tl.n_steps)
    else:
        spec, profiles, gross = gen_synthetic_feeder(cfg)
    net = gm.build_feeder(spec)
    if cfg.lmp_path:
        lmp = load_lmp(cfg.lmp_path, expected_rows=tl.n_p, dt_min=cfg.dt_p_min)
    else:
        lmp = gen_synthetic_lmp(cfg)

    rng = np.random.default_rng([cfg.seed, 303])
    dca_specs: dict[int, list[DCASpec]] = {}
    dca_baselines: dict[str, np.ndarray] = {}
    follow_cycle = list(cfg.follow_mix) if cfg.follow_mix else None
    cyc = 0
    for node in net.smo_nodes():
        if node not in profiles:
            raise DataError(f"no profile for node {node}")
        series = profiles[node]
        lo, hi = cfg.dca_count_range
        n_dca = int(rng.integers(lo, hi + 1))
        force_gen = bool((series[:, 0] > 0).any())
        pers = draw_personalities(n_dca, rng, cfg.gen_dca_prob, force_gen)
        specs = []
        splits_t = np.zeros((tl.n_steps, n_dca, 2))
        for t in range(tl.n_steps):
            if gross is not None:
                load_t, pv_t = gross[node][0][t], gross[node][1][t]
                parts = split_node_gross(
                    float(load_t), float(pv_t), float(series[t, 1]), pers, cfg.gen_headroom
                )
            else:
                # file-ingested profiles carry only the net injection
                parts = split_node(float(series[t, 0]), float(series[t, 1]), pers, cfg.gen_headroom)
            splits_t[t] = parts
        for j, per in enumerate(pers):
            dca_id = f"n{node}_d{j}"
            dn_p, up_p = rng.uniform(0.0, cfg.flex_cap, size=2)
            dn_q, up_q = rng.uniform(0.0, cfg.flex_cap, size=2)
            beta_p = float(rng.uniform(*cfg.beta_range))
            beta_q = float(rng.uniform(*cfg.beta_range))
            if follow_cycle:
                fp = follow_cycle[cyc % len(follow_cycle)]
                cyc += 1
            else:
                fp = float(rng.uniform(*cfg.follow_range))
            specs.append(
                DCASpec(
                    dca_id=dca_id,
                    node=node,
                    kind=per.kind,
                    flex_dn_p=float(dn_p),
                    flex_up_p=float(up_p),
                    flex_dn_q=float(dn_q),
                    flex_up_q=float(up_q),
                    beta_p=beta_p,
                    beta_q=beta_q,
                    follow_prob=fp,
                )
            )
            dca_baselines[dca_id] = splits_t[:, j, :].copy()
        dca_specs[node] = specs

    alpha_fixed = {
        node: float(rng.uniform(*cfg.alpha_fixed_range)) for node in net.smo_nodes()
    }
    return Scenario(
        net=net,
        timeline=tl,
        dca_specs=dca_specs,
        dca_baselines=dca_baselines,
        node_baselines=profiles,
        lmp=lmp,
        seed=cfg.seed,
        caps=cfg.caps,
        epsilon=cfg.epsilon,
        xi=cfg.xi,
        budget_mode=cfg.budget_mode,
        q_lmp_ratio=cfg.q_lmp_ratio,
        beta_pu_scale=cfg.beta_pu_scale,
        alpha_fixed=alpha_fixed,
        response_overshoot=cfg.response_overshoot,
        response_noise=cfg.response_noise,
        without_flex_fraction=cfg.without_flex_fraction,
        without_gen_share=cfg.without_gen_share,
        flat_rate=cfg.flat_rate,
    )


# ---------------------------------------------------------------------------
# profile / LMP files


def write_profiles(profiles: dict[int, np.ndarray], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_HEADER)
        for node in sorted(profiles):
            for t, (p, q) in enumerate(profiles[node]):
                w.writerow([node, minute_iso(t), repr(float(p)), repr(float(q))])


def load_profiles(path: str, expected_rows: int | None = None) -> dict[int, np.ndarray]:
    """Validated ingestion: schema, strictly increasing timestamps, uniform
    1-min cadence without gaps."""
    if not os.path.exists(path):
        raise IoFailure(f"no such file: {path}")
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != PROFILE_HEADER:
            missing = [c for c in PROFILE_HEADER if not header or c not in header]
            raise SchemaMismatch(f"profile header {header} (missing {missing})")
        series: dict[int, list[tuple[int, float, float]]] = {}
        for row in r:
            node = int(row[0])
            series.setdefault(node, []).append((iso_minute(row[1]), float(row[2]), float(row[3])))
    out: dict[int, np.ndarray] = {}
    for node, rows in series.items():
        minutes = [m for m, _, _ in rows]
        for a, b in zip(minutes[:-1], minutes[1:]):
            if b <= a:
                raise NonMonotoneTimestamps(f"node {node} at {minute_iso(b)}")
            if b - a != 1:
                raise GapInSeries(f"node {node} missing {minute_iso(a + 1)}")
        if expected_rows is not None and len(rows) < expected_rows:
            raise GapInSeries(f"node {node}: {len(rows)} rows < {expected_rows}")
        out[node] = np.array([[p, q] for _, p, q in rows])
    return out


def write_lmp(lmp: np.ndarray, path: str, dt_min: int = 5) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LMP_HEADER)
        for k, lam in enumerate(lmp):
            w.writerow([minute_iso(k * dt_min), repr(float(lam))])


def load_lmp(path: str, expected_rows: int | None = None, dt_min: int = 5) -> np.ndarray:
    if not os.path.exists(path):
        raise IoFailure(f"no such file: {path}")
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != LMP_HEADER:
            raise SchemaMismatch(f"lmp header {header}")
        rows = [(iso_minute(row[0]), float(row[1])) for row in r]
    for (a, _), (b, _) in zip(rows[:-1], rows[1:]):
        if b <= a:
            raise NonMonotoneTimestamps(minute_iso(b))
        if b - a != dt_min:
            raise GapInSeries(minute_iso(a + dt_min))
    vals = np.array([v for _, v in rows])
    if not np.isfinite(vals).all():
        raise DataError("non-finite LMP")
    if expected_rows is not None and len(vals) < expected_rows:
        raise GapInSeries(f"lmp: {len(vals)} rows < {expected_rows}")
    return vals


# ---------------------------------------------------------------------------
# results export / metrics


def export_results(res: RunResults, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    try:
        with open(os.path.join(out_dir, "sm_clearings.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "smo", "dca", "P_star", "dP", "Q_star", "dQ", "mu_P", "mu_Q", "score"])
            for r in res.sm_rows:
                w.writerow(
                    [r.t, r.smo, r.dca]
                    + [repr(float(v)) for v in (r.p_star, r.dp, r.q_star, r.dq, r.mu_p, r.mu_q, r.score)]
                )
        with open(os.path.join(out_dir, "pm_clearings.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "node", "P_net", "Q_net", "v_sq", "dlmp_P", "dlmp_Q"])
            for r in res.pm_rows:
                w.writerow(
                    [r.t, r.node]
                    + [repr(float(v)) for v in (r.p_net, r.q_net, r.v_sq, r.dlmp_p, r.dlmp_q)]
                )
        with open(os.path.join(out_dir, "lines.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "from", "to", "P", "Q", "l", "socp_gap"])
            for r in res.line_rows:
                w.writerow(
                    [r.t, r.from_node, r.to_node]
                    + [repr(float(v)) for v in (r.p, r.q, r.l, r.socp_gap)]
                )
        with open(os.path.join(out_dir, "ranges.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "node", "lo", "hi"])
            for r in res.range_rows:
                w.writerow([r.t, r.node, repr(float(r.lo)), repr(float(r.hi))])
        with open(os.path.join(out_dir, "events.log"), "w") as fh:
            for e in res.events:
                fh.write(e + "\n")
        with open(os.path.join(out_dir, "run_meta.json"), "w") as fh:
            json.dump(res.metadata, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def parse_results(out_dir: str) -> RunResults:
    """Re-ingest exported CSVs (round-trips bit-exactly with export)."""
    res = RunResults(mode="parsed")
    with open(os.path.join(out_dir, "sm_clearings.csv"), newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            res.sm_rows.append(
                orch.SMRow(int(row[0]), int(row[1]), row[2], *[float(v) for v in row[3:]])
            )
    with open(os.path.join(out_dir, "pm_clearings.csv"), newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            res.pm_rows.append(orch.PMRow(int(row[0]), int(row[1]), *[float(v) for v in row[2:]]))
    with open(os.path.join(out_dir, "lines.csv"), newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            res.line_rows.append(
                orch.LineRow(int(row[0]), int(row[1]), int(row[2]), *[float(v) for v in row[3:]])
            )
    with open(os.path.join(out_dir, "ranges.csv"), newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            res.range_rows.append(orch.RangeRow(int(row[0]), int(row[1]), float(row[2]), float(row[3])))
    meta_path = os.path.join(out_dir, "run_meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            res.metadata = json.load(fh)
    return res


def _weighted_avg(pairs) -> float:
    pairs = list(pairs)
    num = sum(w * v for w, v in pairs)
    den = sum(w for w, _ in pairs)
    return num / den if den > 0 else 0.0


@dataclass
class Metrics:
    avg_dlmp_with: float
    avg_dlmp_without: float
    avg_tariff_with: float
    avg_tariff_without: float
    flat_rate: float
    loss_kwh_with: float
    loss_kwh_without: float
    import_kwh_with: float
    import_kwh_without: float
    max_socp_gap_with: float
    max_socp_gap_without: float
    paper_reference: dict = field(
        default_factory=lambda: {
            "avg_dlmp": {"SM+PM": 0.064, "PM only": 0.116},
            "avg_tariff": {"SM+PM": 0.082, "PM only": 0.116, "No LEM": 0.129},
        }
    )


def report_metrics(with_res: RunResults, without_res: RunResults, flat_rate: float = 0.129) -> Metrics:
    """Injection-weighted prices per mode plus losses and slack import energy."""
    t_with = {r.t for r in with_res.pm_rows}
    t_without = {r.t for r in without_res.pm_rows}
    if t_with != t_without:
        raise IncompatibleHorizons(
            f"{len(t_with)} vs {len(t_without)} primary clearings"
        )
    slack_w = min(r.node for r in with_res.pm_rows)

    def dlmp_avg(res):
        return _weighted_avg(
            (abs(r.p_net), r.dlmp_p) for r in res.pm_rows if r.node != slack_w
        )

    avg_dlmp_with = dlmp_avg(with_res)
    avg_dlmp_without = dlmp_avg(without_res)
    avg_tariff_with = _weighted_avg((abs(r.p_star), r.mu_p) for r in with_res.sm_rows)
    return Metrics(
        avg_dlmp_with=avg_dlmp_with,
        avg_dlmp_without=avg_dlmp_without,
        avg_tariff_with=avg_tariff_with,
        avg_tariff_without=avg_dlmp_without,  # PM-only retail equals nodal d-LMP
        flat_rate=flat_rate,
        loss_kwh_with=with_res.loss_energy_kwh,
        loss_kwh_without=without_res.loss_energy_kwh,
        import_kwh_with=with_res.pcc_energy_kwh,
        import_kwh_without=without_res.pcc_energy_kwh,
        max_socp_gap_with=max((r.socp_gap for r in with_res.line_rows), default=0.0),
        max_socp_gap_without=max((r.socp_gap for r in without_res.line_rows), default=0.0),
    )


def metrics_table(m: Metrics) -> str:
    ref = m.paper_reference
    lines = [
        f"{'metric':34s} {'SM+PM':>10s} {'PM only':>10s} {'No LEM':>8s}",
        f"{'avg P d-LMP [$/kWh]':34s} {m.avg_dlmp_with:10.4f} {m.avg_dlmp_without:10.4f} {'n/a':>8s}",
        f"{'avg retail tariff [$/kWh]':34s} {m.avg_tariff_with:10.4f} {m.avg_tariff_without:10.4f} {m.flat_rate:8.3f}",
        f"{'paper avg d-LMP (reference)':34s} {ref['avg_dlmp']['SM+PM']:10.3f} {ref['avg_dlmp']['PM only']:10.3f} {'n/a':>8s}",
        f"{'paper avg tariff (reference)':34s} {ref['avg_tariff']['SM+PM']:10.3f} {ref['avg_tariff']['PM only']:10.3f} {ref['avg_tariff']['No LEM']:8.3f}",
        f"{'line losses [kWh]':34s} {m.loss_kwh_with:10.2f} {m.loss_kwh_without:10.2f}",
        f"{'slack import [kWh]':34s} {m.import_kwh_with:10.2f} {m.import_kwh_without:10.2f}",
        f"{'max SOCP gap [pu^2]':34s} {m.max_socp_gap_with:10.3e} {m.max_socp_gap_without:10.3e}",
    ]
    return "\n".join(lines) + "\n"


def results_digest(out_dir: str) -> str:
    h = hashlib.sha256()
    for name in ("sm_clearings.csv", "pm_clearings.csv", "lines.csv", "ranges.csv"):
        p = os.path.join(out_dir, name)
        if os.path.exists(p):
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# validation of finished runs


def validate_run(out_dir: str, caps: tuple[float, float] = (0.2, 0.2)) -> list[str]:
    """Row-level invariant checks on exported results; returns failures."""
    res = parse_results(out_dir)
    failures: list[str] = []
    for r in res.sm_rows:
        if not (-1e-9 <= r.mu_p <= caps[0] + 1e-9 and -1e-9 <= r.mu_q <= caps[1] + 1e-9):
            failures.append(f"tariff outside ceiling at t={r.t} {r.dca}")
        if not (0.0 <= r.score <= 1.0):
            failures.append(f"score outside [0,1] at t={r.t} {r.dca}")
        if r.dp < -1e-9 or r.dq < -1e-9:
            failures.append(f"negative band width at t={r.t} {r.dca}")
    for r in res.line_rows:
        if r.socp_gap < -1e-7:
            failures.append(f"negative SOCP gap at t={r.t} line {r.from_node}->{r.to_node}")
    events_path = os.path.join(out_dir, "events.log")
    relaxed_steps = set()
    if os.path.exists(events_path):
        with open(events_path) as fh:
            for line in fh:
                if "nearest_feasible" in line:
                    parts = dict(p.split("=") for p in line.split() if "=" in p)
                    relaxed_steps.add((int(parts["t"]), int(parts["node"])))
    if res.sm_rows and res.pm_rows:
        meta = res.metadata or {}
        s_base_kw = float(meta.get("s_base_mva", 1.0)) * 1000.0
        dt_p = int(meta.get("dt_p_min", 5))
        setp = {(r.t, r.node): r.p_net * s_base_kw for r in res.pm_rows}
        sums: dict[tuple[int, int], float] = {}
        for r in res.sm_rows:
            sums[(r.t, r.smo)] = sums.get((r.t, r.smo), 0.0) + r.p_star
        for (t, node), total in sums.items():
            t_hat = (t // dt_p) * dt_p if t % dt_p else t - dt_p
            if t_hat < 0 or (t, node) in relaxed_steps:
                continue
            key = (t_hat, node)
            if key in setp and abs(total - setp[key]) > 1e-3:
                failures.append(f"balance mismatch t={t} node={node}: {total} vs {setp[key]}")
    return failures


# ---------------------------------------------------------------------------
# CLI


def _scenario_paths(out_dir: str) -> dict[str, str]:
    return {
        "feeder": os.path.join(out_dir, "feeder.txt"),
        "profiles": os.path.join(out_dir, "profiles.csv"),
        "lmp": os.path.join(out_dir, "lmp.csv"),
        "config": os.path.join(out_dir, "config.json"),
    }


def cmd_gen(cfg: ScenarioConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    paths = _scenario_paths(out_dir)
    spec, profiles, _ = gen_synthetic_feeder(cfg)
    gm.write_feeder_file(spec, paths["feeder"])
    write_profiles(profiles, paths["profiles"])
    write_lmp(gen_synthetic_lmp(cfg), paths["lmp"], dt_min=cfg.dt_p_min)
    cfg.to_json(paths["config"])
    print(f"scenario written to {out_dir}")


def _run_mode(cfg: ScenarioConfig, mode: str) -> RunResults:
    scenario = build_scenario(cfg)
    state = ScenarioState(scenario=scenario, mode=mode)
    if mode == "with_sm":
        return orch.run_timeline(state)
    return orch.run_without_smo(state)


def cmd_run(cfg: ScenarioConfig, out_dir: str) -> None:
    res = _run_mode(cfg, "with_sm")
    export_results(res, out_dir)
    print(f"with-SM run exported to {out_dir} ({len(res.sm_rows)} SM rows, {len(res.pm_rows)} PM rows)")


def cmd_baseline(cfg: ScenarioConfig, out_dir: str) -> None:
    res = _run_mode(cfg, "without_sm")
    export_results(res, out_dir)
    print(f"PM-only run exported to {out_dir} ({len(res.pm_rows)} PM rows)")


def cmd_compare(cfg: ScenarioConfig, out_dir: str) -> None:
    with_res = _run_mode(cfg, "with_sm")
    without_res = _run_mode(cfg, "without_sm")
    export_results(with_res, os.path.join(out_dir, "with_sm"))
    export_results(without_res, os.path.join(out_dir, "without_sm"))
    m = report_metrics(with_res, without_res, flat_rate=cfg.flat_rate)
    table = metrics_table(m)
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")


def cmd_validate(cfg: ScenarioConfig, out_dir: str) -> int:
    failures = []
    for sub in ("with_sm", "without_sm", "."):
        d = os.path.join(out_dir, sub) if sub != "." else out_dir
        if os.path.exists(os.path.join(d, "pm_clearings.csv")):
            failures += [f"{d}: {f}" for f in validate_run(d, caps=cfg.caps)]
            break
    if failures:
        for f in failures:
            print(f"FAIL {f}")
        return 1
    print("all run invariants hold")
    return 0


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="lemsim", description="two-tier local electricity market simulator")
    ap.add_argument("command", choices=["gen", "run", "baseline", "compare", "validate"])
    ap.add_argument("--config", default=None, help="scenario config JSON")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default="out")
    ap.add_argument("--budget-mode", choices=["strict", "relaxed", "quasi"], default=None)
    ap.add_argument("--horizon-minutes", type=int, default=None)
    args = ap.parse_args(argv)

    cfg = ScenarioConfig.from_json(args.config) if args.config else ScenarioConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.budget_mode is not None:
        mode = {"strict": "strict", "relaxed": "relaxed", "quasi": "quasi_multiperiod"}[args.budget_mode]
        cfg = dataclasses.replace(cfg, budget_mode=mode)
    if args.horizon_minutes is not None:
        cfg = dataclasses.replace(cfg, horizon_min=args.horizon_minutes)

    if args.command == "gen":
        cmd_gen(cfg, args.out)
    elif args.command == "run":
        cmd_run(cfg, args.out)
    elif args.command == "baseline":
        cmd_baseline(cfg, args.out)
    elif args.command == "compare":
        cmd_compare(cfg, args.out)
    else:
        return cmd_validate(cfg, args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
