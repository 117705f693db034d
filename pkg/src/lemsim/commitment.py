"""Per-DCA commitment scores from normalized band-tracking errors, and a
stochastic model of DCA responses to cleared schedules.

Raw errors are positive outside the cleared band (by the violation
distance) and negative inside (a reward, largest at band center). Errors
are normalized by setpoint magnitude, then L2-normalized across the SMO's
DCAs, and the score update subtracts the mean of the P- and Q-side
normalized errors, clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# guards for the setpoint normalization, stated in pu and converted with
# s_base; at 1 MVA: 1e-3 kW zero threshold, 1 kW denominator floor
ZERO_SETPOINT_PU = 1e-6
DENOM_FLOOR_PU = 1e-3
ZERO_NORM = 1e-12


@dataclass(frozen=True)
class ClearedBand:
    """One DCA's cleared setpoint and symmetric half-widths (kW/kvar)."""

    p_star: float
    dp: float
    q_star: float
    dq: float


def raw_error(actual: float, setpoint: float, half_width: float) -> float:
    """Band-tracking error: +distance outside the band, max(P-Pbar, Plo-P)
    inside (non-positive, most negative at band center)."""
    if half_width < 0:
        raise ValueError("half_width must be >= 0")
    hi = setpoint + half_width
    lo = setpoint - half_width
    if actual > hi:
        return actual - hi
    if actual < lo:
        return lo - actual
    return max(actual - hi, lo - actual)


@dataclass
class CommitmentLedger:
    """Scores in [0, 1] with the per-step error history."""

    scores: dict[str, float]
    s_base_kw: float = 1000.0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, dca_ids: list[str], s_base_kw: float = 1000.0) -> "CommitmentLedger":
        return cls(scores={d: 1.0 for d in dca_ids}, s_base_kw=s_base_kw)


def _normalized_errors(raw: np.ndarray, setpoints: np.ndarray, s_base_kw: float) -> np.ndarray:
    zero_kw = ZERO_SETPOINT_PU * s_base_kw
    floor_kw = DENOM_FLOOR_PU * s_base_kw
    denom = np.abs(setpoints)
    denom = np.where(denom < zero_kw, np.maximum(denom, floor_kw), denom)
    e = raw / denom
    norm = float(np.linalg.norm(e))
    if norm < ZERO_NORM:
        return np.zeros_like(e)
    return e / norm


def update_scores(
    ledger: CommitmentLedger,
    clearings: dict[str, ClearedBand],
    actuals: dict[str, tuple[float, float]],
) -> CommitmentLedger:
    """Apply one step of the recursive score update; returns the same ledger."""
    ids = sorted(clearings)
    for d in ids:
        if d not in actuals:
            raise KeyError(f"no actual for {d}")
    raw_p = np.array([raw_error(actuals[d][0], clearings[d].p_star, clearings[d].dp) for d in ids])
    raw_q = np.array([raw_error(actuals[d][1], clearings[d].q_star, clearings[d].dq) for d in ids])
    sp = np.array([clearings[d].p_star for d in ids])
    sq = np.array([clearings[d].q_star for d in ids])
    en_p = _normalized_errors(raw_p, sp, ledger.s_base_kw)
    en_q = _normalized_errors(raw_q, sq, ledger.s_base_kw)
    for i, d in enumerate(ids):
        c = ledger.scores[d] - (en_p[i] + en_q[i]) / 2.0
        ledger.scores[d] = float(min(max(c, 0.0), 1.0))
    ledger.history.append(
        {
            "ids": ids,
            "raw_p": raw_p.tolist(),
            "raw_q": raw_q.tolist(),
            "norm_p": en_p.tolist(),
            "norm_q": en_q.tolist(),
        }
    )
    return ledger


@dataclass(frozen=True)
class ResponseModel:
    """Stochastic DCA behavior: stay in band with probability follow_prob
    (jittered by noise_scale), otherwise overshoot a band edge by
    overshoot_scale x half-width. Deterministic given (seed, step, dca)."""

    dca_ids: tuple[str, ...]
    follow_prob: dict[str, float]
    overshoot_scale: float = 0.5
    noise_scale: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        for d, p in self.follow_prob.items():
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"follow_prob[{d}] outside [0,1]")
        if self.overshoot_scale < 0 or self.noise_scale < 0:
            raise ValueError("scales must be >= 0")


def simulate_response(
    model: ResponseModel,
    clearings: dict[str, ClearedBand],
    step: int,
) -> dict[str, tuple[float, float]]:
    """Actual (P, Q) injections for each cleared DCA at this step."""
    out: dict[str, tuple[float, float]] = {}
    for idx, dca in enumerate(model.dca_ids):
        if dca not in clearings:
            continue
        band = clearings[dca]
        rng = np.random.default_rng([model.rng_seed, step, idx])
        vals = []
        for setpoint, half in ((band.p_star, band.dp), (band.q_star, band.dq)):
            follows = rng.uniform() < model.follow_prob[dca]
            if follows:
                vals.append(setpoint + model.noise_scale * half * rng.uniform(-1.0, 1.0))
            else:
                side = 1.0 if rng.uniform() < 0.5 else -1.0
                vals.append(setpoint + side * half * (1.0 + model.overshoot_scale))
        out[dca] = (vals[0], vals[1])
    return out
