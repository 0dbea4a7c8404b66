"""Training loop: ascend the unbiased evidence gradient in theta while
ascending the lower-bound gradient in phi, one shared sample batch per step.

The optimizer is plain SGD with optional momentum so that the estimator,
not the optimizer, stays the object under test. Updates use the
per-observation gradients (the batch estimates divided by the dataset
size): the optima are unchanged and step sizes stay meaningful across
dataset sizes, where the summed-objective scale makes any fixed learning
rate divergent once N is large.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as _rng
from .errors import ContractViolation, DivergenceError, UnsupportedOperation
from .estimator import EstimatorConfig, estimate_log_evidence
from .gradients import estimate_gradients
from .models import Dataset, LatentVariableModel


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    lr_theta: float = 1e-3
    lr_phi: float = 1e-3
    momentum: float = 0.9
    eval_every: int = 100
    eval_replications: int = 8
    estimator: EstimatorConfig = EstimatorConfig()

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation(f"steps must be >= 1, got {self.steps}")
        # Learning rates of exactly 0 are allowed so one side can be frozen.
        if self.lr_theta < 0 or self.lr_phi < 0:
            raise ContractViolation("learning rates must be nonnegative")
        if not (0.0 <= self.momentum < 1.0):
            raise ContractViolation(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.eval_every < 1 or self.eval_replications < 1:
            raise ContractViolation("eval_every and eval_replications must be >= 1")


@dataclass
class RunRecord:
    """Per-evaluation snapshot of a training run."""

    step: int
    theta: np.ndarray
    phi: np.ndarray
    evidence_estimate: float
    evidence_oracle: float | None
    kl_oracle: float | None
    grad_norms: tuple[float, float]
    cumulative_cost: int


def _oracle_metrics(model, data, theta, phi):
    try:
        evidence = sum(model.oracle_log_evidence(x, theta) for x in data.x)
    except UnsupportedOperation:
        return None, None
    try:
        kl = float(np.mean([model.oracle_posterior_kl(x, theta, phi) for x in data.x]))
    except UnsupportedOperation:
        kl = None
    return float(evidence), kl


def train(
    model: LatentVariableModel,
    data: Dataset,
    theta0,
    phi0,
    cfg: TrainConfig,
    rng: np.random.Generator,
    workers: int = 1,
) -> list[RunRecord]:
    """Run the two-objective ascent and return the evaluation records.

    Each step consumes one gradient batch (theta and phi gradients computed
    from the same draws). Evaluations run on a generator branch spawned
    before training starts, so metric noise never perturbs the training
    stream. Records are written at step 0, every `eval_every` steps, and at
    the final step. A non-finite parameter aborts with a divergence error
    rather than clamping: heavy-tailed weights are a failure mode that must
    surface.
    """
    theta = np.array(theta0, dtype=np.float64)
    phi = np.array(phi0, dtype=np.float64)
    if theta.shape != (model.theta_dim,) or phi.shape != (model.phi_dim,):
        raise ContractViolation("initial parameters have wrong dimensions")
    if not (np.isfinite(theta).all() and np.isfinite(phi).all()):
        raise ContractViolation("initial parameters must be finite")

    train_rng, eval_rng = _rng.spawn(rng, 2)
    vel_theta = np.zeros_like(theta)
    vel_phi = np.zeros_like(phi)
    cumulative_cost = 0
    last_norms = (0.0, 0.0)

    def evaluate(step: int) -> RunRecord:
        values = [
            estimate_log_evidence(model, data, theta, phi, cfg.estimator, stream, workers=workers).value
            for stream in _rng.spawn(eval_rng, cfg.eval_replications)
        ]
        evidence_oracle, kl_oracle = _oracle_metrics(model, data, theta, phi)
        return RunRecord(
            step=step,
            theta=theta.copy(),
            phi=phi.copy(),
            evidence_estimate=float(np.mean(values)),
            evidence_oracle=evidence_oracle,
            kl_oracle=kl_oracle,
            grad_norms=last_norms,
            cumulative_cost=cumulative_cost,
        )

    records = [evaluate(0)]
    step_streams = _rng.spawn(train_rng, cfg.steps)
    for step in range(1, cfg.steps + 1):
        try:
            grads = estimate_gradients(
                model, data, theta, phi, cfg.estimator, step_streams[step - 1],
                workers=workers,
            )
        except ContractViolation as exc:
            # inputs were validated up front, so a non-finite weight
            # mid-training means the parameters ran away
            raise DivergenceError(step, *last_norms) from exc
        cumulative_cost += grads.total_cost
        g_theta = grads.grad_theta / data.n_total
        g_phi = grads.grad_phi / data.n_total
        last_norms = (float(np.linalg.norm(g_theta)), float(np.linalg.norm(g_phi)))
        vel_theta = cfg.momentum * vel_theta + g_theta
        vel_phi = cfg.momentum * vel_phi + g_phi
        theta = theta + cfg.lr_theta * vel_theta
        phi = phi + cfg.lr_phi * vel_phi
        if not (np.isfinite(theta).all() and np.isfinite(phi).all()):
            raise DivergenceError(step, *last_norms)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            records.append(evaluate(step))
    return records


def write_run_records_csv(records: list[RunRecord], path) -> None:
    """One CSV row per record; parameter vectors inline, 17 digits."""
    if not records:
        raise ContractViolation("no records to write")
    d_theta = records[0].theta.shape[0]
    d_phi = records[0].phi.shape[0]
    header = (
        ["step", "evidence_estimate", "evidence_oracle", "kl_oracle",
         "grad_norm_theta", "grad_norm_phi", "cumulative_cost"]
        + [f"theta_{i}" for i in range(d_theta)]
        + [f"phi_{i}" for i in range(d_phi)]
    )

    def fmt(v):
        return "" if v is None else format(float(v), ".17g")

    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in records:
            writer.writerow(
                [r.step, fmt(r.evidence_estimate), fmt(r.evidence_oracle), fmt(r.kl_oracle),
                 fmt(r.grad_norms[0]), fmt(r.grad_norms[1]), r.cumulative_cost]
                + [fmt(v) for v in r.theta]
                + [fmt(v) for v in r.phi]
            )


def write_summary_json(records: list[RunRecord], path, seed: int) -> None:
    if not records:
        raise ContractViolation("no records to summarize")
    final = records[-1]
    summary = {
        "final_theta": [float(v) for v in final.theta],
        "final_phi": [float(v) for v in final.phi],
        "final_evidence": final.evidence_estimate,
        "total_cost": final.cumulative_cost,
        "seed": int(seed),
    }
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")
