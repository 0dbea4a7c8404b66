"""Empirical verification harness: per-level variance and cost profiles,
decay-rate regression, and tail/moment diagnostics for the importance
weights.

Cost is counted in latent draws (the only quantity that doubles per level);
wall clock is not asserted on anywhere.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import rng as _rng
from .errors import ContractViolation
from .estimator import EstimatorConfig, antithetic_difference, draw_level_samples
from .gradients import grad_theta_level
from .logspace import StreamingMoments, log_mean_exp, softmax_weights
from .models import Dataset, LatentVariableModel

log = logging.getLogger(__name__)


@dataclass
class LevelStats:
    """Replication moments of the level value and its theta-gradient."""

    level: int
    mean_z: float
    var_z: float
    var_grad_theta_max: float  # max over gradient components
    mean_cost: float
    replications: int


def naive_difference(draws) -> float:
    """Level value without the antithetic half-average: full log-mean minus
    the first-half log-mean only. Decays one order slower in variance; kept
    as the contrast case the profile can instrument."""
    p_full = log_mean_exp(draws.log_f)
    if draws.level == 0:
        return p_full
    half = draws.n // 2
    return p_full - log_mean_exp(draws.log_f[:half])


def naive_grad_theta(draws) -> np.ndarray:
    full = softmax_weights(draws.log_f) @ draws.grad_theta_log_f
    if draws.level == 0:
        return full
    half = draws.n // 2
    return full - softmax_weights(draws.log_f[:half]) @ draws.grad_theta_log_f[:half]


def variance_profile(
    model: LatentVariableModel,
    data: Dataset,
    theta,
    phi,
    levels: Iterable[int],
    replications: int,
    cfg: EstimatorConfig,
    rng: np.random.Generator,
    antithetic: bool = True,
) -> list[LevelStats]:
    """Replicate independent level estimates and accumulate their moments.

    The draw schedule depends only on the generator state, never on the
    `antithetic` flag, so profiling both variants from identically
    constructed generators compares them on the same latent draws.
    """
    if replications < 100:
        raise ContractViolation(f"need at least 100 replications, got {replications}")
    levels = list(levels)
    if any(l > cfg.level_cap for l in levels):
        raise ContractViolation(f"levels {levels} exceed level cap {cfg.level_cap}")
    level_streams = _rng.spawn(rng, len(levels))

    stats = []
    for lvl, stream in zip(levels, level_streams):
        idx_rng = stream.spawn(1)[0]
        indices = idx_rng.integers(0, data.n_total, size=replications)
        rep_streams = stream.spawn(replications)
        z_mom = StreamingMoments()
        g_mom = StreamingMoments()
        cost = 0
        for r in range(replications):
            draws = draw_level_samples(
                model, data.x[indices[r]], theta, phi, lvl, cfg, rep_streams[r]
            )
            if antithetic:
                z_mom.push(antithetic_difference(draws))
                g_mom.push(grad_theta_level(draws))
            else:
                z_mom.push(naive_difference(draws))
                g_mom.push(naive_grad_theta(draws))
            cost += draws.n
        stats.append(
            LevelStats(
                level=lvl,
                mean_z=float(z_mom.mean),
                var_z=float(z_mom.variance()),
                var_grad_theta_max=float(np.max(g_mom.variance())),
                mean_cost=cost / replications,
                replications=replications,
            )
        )
    return stats


class DecayFit(NamedTuple):
    slope: float
    intercept: float
    r2: float


def fit_decay_rate(stats: list[LevelStats], field: str = "var_z") -> DecayFit:
    """Least-squares line through (level, log2 of the selected field).

    Levels with a nonpositive value cannot be log-transformed; they are
    reported and dropped, and the fit runs over the remainder (at least
    three points required).
    """
    pairs = [(s.level, getattr(s, field)) for s in stats]
    kept = [(lvl, v) for lvl, v in pairs if v > 0.0]
    dropped = [lvl for lvl, v in pairs if v <= 0.0]
    if dropped:
        log.warning("fit_decay_rate(%s): dropped nonpositive levels %s", field, dropped)
    if len(kept) < 3:
        raise ContractViolation(
            f"decay fit needs >= 3 positive values, have {len(kept)} for field {field!r}"
        )
    x = np.array([lvl for lvl, _ in kept], dtype=np.float64)
    y = np.log2([v for _, v in kept])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return DecayFit(float(slope), float(intercept), r2)


@dataclass
class MomentDiagnostic:
    """Monte Carlo estimates of the normalized-weight tail moments.

    s_moment estimates E_q[(f/p)^s], t_moment estimates E_q[|log(f/p)|^t]
    for the given data point. tail_warning trips when the top 0.1% of draws
    carries more than half of the s-moment sum, a heuristic flag for a
    non-integrable tail (a finite sample can never certify finiteness).
    """

    s_exponent: float
    t_exponent: float
    s_moment_estimate: float
    t_moment_estimate: float
    tail_warning: bool


def estimate_moments(
    model: LatentVariableModel,
    x,
    theta,
    phi,
    s_exponent: float,
    t_exponent: float,
    n_draws: int,
    rng: np.random.Generator,
) -> MomentDiagnostic:
    """Estimate both tail moments of f/p from n_draws importance samples."""
    if s_exponent <= 0.0 or t_exponent <= 0.0:
        raise ContractViolation("moment exponents must be positive")
    if n_draws < 10_000:
        raise ContractViolation(f"need at least 1e4 draws, got {n_draws}")
    log_p = model.oracle_log_evidence(x, theta)  # raises if no oracle
    z = model.sample_q(x, phi, rng, n_draws)
    lam = model.log_weight_batch(x, z, theta, phi).log_f - log_p

    scaled = s_exponent * lam
    m = scaled.max()
    s_moment = float(math.exp(m) * np.exp(scaled - m).mean()) if m < 700 else math.inf
    t_moment = float(np.mean(np.abs(lam) ** t_exponent))

    top = max(1, n_draws // 1000)
    order = np.sort(scaled)
    lse_all = m + math.log(np.exp(order - m).sum())
    lse_top = m + math.log(np.exp(order[-top:] - m).sum())
    tail_share = math.exp(lse_top - lse_all)

    return MomentDiagnostic(
        s_exponent=float(s_exponent),
        t_exponent=float(t_exponent),
        s_moment_estimate=s_moment,
        t_moment_estimate=t_moment,
        tail_warning=tail_share > 0.5,
    )


def write_level_stats_csv(stats: list[LevelStats], path) -> None:
    """One row per level: level, replications, mean_z, var_z,
    var_grad_theta_max, mean_cost. Reals at 17 significant digits."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["level", "replications", "mean_z", "var_z", "var_grad_theta_max", "mean_cost"]
        )
        for s in stats:
            writer.writerow(
                [
                    s.level,
                    s.replications,
                    format(s.mean_z, ".17g"),
                    format(s.var_z, ".17g"),
                    format(s.var_grad_theta_max, ".17g"),
                    format(s.mean_cost, ".17g"),
                ]
            )


def read_level_stats_csv(path) -> list[LevelStats]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LevelStats(
            level=int(r["level"]),
            replications=int(r["replications"]),
            mean_z=float(r["mean_z"]),
            var_z=float(r["var_z"]),
            var_grad_theta_max=float(r["var_grad_theta_max"]),
            mean_cost=float(r["mean_cost"]),
        )
        for r in rows
    ]
