"""Command-line front end: estimation, diagnostics, gradient checks and
training as reproducible runs with file outputs.

Every run writes ``manifest.json`` holding the fully resolved semantic
configuration (command, model, parameter vectors, numeric knobs, seed).
``rerun --manifest`` replays it bit-exactly. Worker count and output
location are execution details and deliberately stay out of the manifest,
so replays are byte-identical for any ``--workers`` value.

Exit codes: 0 success, 1 usage or contract error, 2 divergence or resource
guard.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import rng as _rng
from .diagnostics import (
    estimate_moments,
    fit_decay_rate,
    variance_profile,
    write_level_stats_csv,
)
from .errors import (
    ContractViolation,
    DivergenceError,
    ResourceGuardExceeded,
    UnsupportedOperation,
)
from .estimator import EstimatorConfig, estimate_log_evidence
from .gradients import estimate_gradients
from .logspace import StreamingMoments
from .models import (
    BernoulliGaussianModel,
    Dataset,
    GaussianConjugateModel,
    load_dataset,
    save_dataset,
)
from .trainer import TrainConfig, train, write_run_records_csv, write_summary_json


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def parse_vector(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ContractViolation(f"cannot parse vector {text!r}: {exc}") from None


def parse_level_range(text: str) -> list[int]:
    """Inclusive 'a..b' range, or a single level."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        levels = list(range(int(lo), int(hi) + 1))
    else:
        levels = [int(text)]
    if not levels or levels[0] < 0:
        raise ContractViolation(f"bad level range {text!r}")
    return levels


def build_model(name: str, dim: int):
    if name == "gaussian":
        return GaussianConjugateModel(dim=dim)
    if name == "bernoulli":
        return BernoulliGaussianModel()
    raise ContractViolation(f"unknown model {name!r}")


def default_true_theta(name: str, dim: int) -> list[float]:
    if name == "gaussian":
        # mu0 = 1, sigma0 = 1, sigmax = 0.5 per coordinate
        return [1.0] * dim + [0.0] * dim + [math.log(0.5)] * dim
    return [1.0, 0.0]


def _resolve_model_params(params: dict):
    model = build_model(params["model"], params.get("dim", 1))
    theta = np.asarray(
        params.get("theta") or [0.0] * model.theta_dim, dtype=np.float64
    )
    phi = np.asarray(params.get("phi") or [0.0] * model.phi_dim, dtype=np.float64)
    return model, theta, phi


def _resolve_data(params: dict, model) -> Dataset:
    if params.get("data"):
        data, _header = load_dataset(params["data"])
        if data.x.shape[1] != model.x_dim:
            raise ContractViolation(
                f"dataset dim {data.x.shape[1]} does not match model dim {model.x_dim}"
            )
        return data
    true_theta = params.get("true_theta") or default_true_theta(
        params["model"], params.get("dim", 1)
    )
    gen = _rng.substream(params["seed"], _rng.STREAM_DATA)
    return model.generate_data(np.asarray(true_theta), params.get("n", 50), gen)


def _estimator_config(params: dict) -> EstimatorConfig:
    return EstimatorConfig(
        n0=params.get("n0", 8),
        batch_size=params.get("batch", 8),
        level_ratio_log2=params.get("ratio_log2", -1.5),
        level_cap=params.get("level_cap", 40),
        seed=params["seed"],
    )


def _write_manifest(out: Path, command: str, params: dict) -> None:
    # one flat object: the command plus every resolved semantic parameter
    manifest = {"command": command, **params}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# Command runners. Each takes the resolved manifest params plus execution
# details, writes its artifacts, and returns a one-line summary.


def run_gen_data(params: dict, out: Path, workers: int) -> str:
    model = build_model(params["model"], params.get("dim", 1))
    theta = params.get("theta") or default_true_theta(params["model"], params.get("dim", 1))
    gen = _rng.substream(params["seed"], _rng.STREAM_DATA)
    data = model.generate_data(np.asarray(theta), params["n"], gen)
    path = out / "dataset.txt"
    save_dataset(path, data, params["seed"], theta)
    return f"wrote {data.n_total} observations to {path}"


def run_estimate(params: dict, out: Path, workers: int) -> str:
    model, theta, phi = _resolve_model_params(params)
    data = _resolve_data(params, model)
    cfg = _estimator_config(params)
    rng = _rng.substream(params["seed"], _rng.STREAM_BATCH)
    result = estimate_log_evidence(model, data, theta, phi, cfg, rng, workers=workers)
    levels = sorted(result.per_level_counts)
    _write_json(
        out / "estimate.json",
        {
            "value": result.value,
            "std_error": result.std_error,
            "total_cost": result.total_cost,
            "levels": levels,
            "level_counts": [result.per_level_counts[l] for l in levels],
        },
    )
    return f"log-evidence estimate {_fmt(result.value)} +/- {_fmt(result.std_error)} (cost {result.total_cost} draws)"


def run_variance_profile(params: dict, out: Path, workers: int) -> str:
    model, theta, phi = _resolve_model_params(params)
    data = _resolve_data(params, model)
    cfg = _estimator_config(params)
    levels = params["levels"]
    rng = _rng.substream(params["seed"], _rng.STREAM_DIAG)
    stats = variance_profile(
        model, data, theta, phi, levels, params["reps"], cfg, rng,
        antithetic=not params.get("naive", False),
    )
    write_level_stats_csv(stats, out / "profile.csv")
    fit = fit_decay_rate(stats, "var_z")
    fit_grad = fit_decay_rate(stats, "var_grad_theta_max")
    _write_json(
        out / "fit.json",
        {
            "slope_var_z": fit.slope,
            "intercept_var_z": fit.intercept,
            "r2_var_z": fit.r2,
            "slope_var_grad_theta_max": fit_grad.slope,
            "r2_var_grad_theta_max": fit_grad.r2,
        },
    )
    return f"variance decay slope {_fmt(fit.slope)} (r2 {_fmt(fit.r2)}) over levels {levels[0]}..{levels[-1]}"


def run_moments(params: dict, out: Path, workers: int) -> str:
    model, theta, phi = _resolve_model_params(params)
    data = _resolve_data(params, model)
    x = data.x[params.get("x_index", 0)]
    rng = _rng.substream(params["seed"], _rng.STREAM_DIAG)
    diag = estimate_moments(
        model, x, theta, phi, params["s"], params["t"], params["draws"], rng
    )
    _write_json(
        out / "moments.json",
        {
            "s_exponent": diag.s_exponent,
            "t_exponent": diag.t_exponent,
            "s_moment_estimate": diag.s_moment_estimate,
            "t_moment_estimate": diag.t_moment_estimate,
            "tail_warning": diag.tail_warning,
        },
    )
    flag = "TAIL-WARNING" if diag.tail_warning else "ok"
    return (
        f"s-moment {_fmt(diag.s_moment_estimate)} t-moment {_fmt(diag.t_moment_estimate)} [{flag}]"
    )


def run_grad_check(params: dict, out: Path, workers: int) -> str:
    model, theta, phi = _resolve_model_params(params)
    data = _resolve_data(params, model)
    cfg = _estimator_config(params)
    step = params.get("fd_step", 1e-5)
    tol = params.get("fd_tol", 1e-6)
    rng = _rng.substream(params["seed"], _rng.STREAM_CHECK)

    fd_max = finite_difference_check(model, data, params.get("points", 100), step, rng)

    reps = params.get("reps", 2000)
    z_theta, z_phi = estimator_mean_check(
        model, data, theta, phi, cfg, reps,
        _rng.substream(params["seed"], _rng.STREAM_BATCH), workers,
    )
    ok = fd_max <= tol and z_theta <= 4.0 and z_phi <= 4.0
    _write_json(
        out / "gradcheck.json",
        {
            "fd_max_rel_err": fd_max,
            "fd_tolerance": tol,
            "max_zscore_grad_theta": z_theta,
            "max_zscore_grad_phi": z_phi,
            "passed": ok,
        },
    )
    status = "PASS" if ok else "FAIL"
    line = (
        f"{status} fd-max-err {_fmt(fd_max)} | z-theta {_fmt(z_theta)} | z-phi {_fmt(z_phi)}"
    )
    if not ok:
        raise ContractViolation(f"gradient check failed: {line}")
    return line


def finite_difference_check(model, data: Dataset, points: int, step: float, rng) -> float:
    """Worst guarded relative error between closed-form and central-difference
    gradients of log f (theta side) and log q (phi side, via -dlog f/dphi)."""
    worst = 0.0
    for _ in range(points):
        x = data.x[rng.integers(data.n_total)]
        theta = 0.5 * rng.standard_normal(model.theta_dim)
        phi = 0.5 * rng.standard_normal(model.phi_dim)
        z = model.sample_q(x, phi, rng, 1)
        sample = model.log_weight(x, z, theta, phi)

        def log_f_at(theta_v, phi_v):
            return model.log_weight(x, z, theta_v, phi_v).log_f

        for j in range(model.theta_dim):
            e = np.zeros(model.theta_dim)
            e[j] = step
            fd = (log_f_at(theta + e, phi) - log_f_at(theta - e, phi)) / (2 * step)
            g = sample.grad_theta_log_f[j]
            worst = max(worst, abs(fd - g) / max(1.0, abs(g)))
        for j in range(model.phi_dim):
            e = np.zeros(model.phi_dim)
            e[j] = step
            # f depends on phi only through the q denominator
            fd = -(log_f_at(theta, phi + e) - log_f_at(theta, phi - e)) / (2 * step)
            g = sample.grad_phi_log_q[j]
            worst = max(worst, abs(fd - g) / max(1.0, abs(g)))
    return worst


def estimator_mean_check(model, data, theta, phi, cfg, reps, rng, workers) -> tuple[float, float]:
    """Replication z-scores of both gradient estimators against the oracles."""
    oracle_theta = sum(model.oracle_evidence_grad_theta(x, theta) for x in data.x)
    oracle_phi = sum(model.oracle_elbo_grad_phi(x, theta, phi) for x in data.x)
    mom_t = StreamingMoments()
    mom_p = StreamingMoments()
    for stream in _rng.spawn(rng, reps):
        est = estimate_gradients(model, data, theta, phi, cfg, stream, workers=workers)
        mom_t.push(est.grad_theta)
        mom_p.push(est.grad_phi)
    se_t = np.sqrt(mom_t.variance() / reps)
    se_p = np.sqrt(mom_p.variance() / reps)
    z_t = float(np.max(np.abs(mom_t.mean - oracle_theta) / se_t))
    z_p = float(np.max(np.abs(mom_p.mean - oracle_phi) / se_p))
    return z_t, z_p


def run_train(params: dict, out: Path, workers: int) -> str:
    model, theta0, phi0 = _resolve_model_params(params)
    data = _resolve_data(params, model)
    cfg = TrainConfig(
        steps=params["steps"],
        lr_theta=params["lr_theta"],
        lr_phi=params["lr_phi"],
        momentum=params.get("momentum", 0.9),
        eval_every=params.get("eval_every", 100),
        eval_replications=params.get("eval_reps", 8),
        estimator=_estimator_config(params),
    )
    rng = _rng.substream(params["seed"], _rng.STREAM_BATCH)
    records = train(model, data, theta0, phi0, cfg, rng, workers=workers)
    write_run_records_csv(records, out / "records.csv")
    write_summary_json(records, out / "summary.json", params["seed"])
    final = records[-1]
    oracle = "" if final.evidence_oracle is None else f" oracle {_fmt(final.evidence_oracle)}"
    kl = "" if final.kl_oracle is None else f" kl {_fmt(final.kl_oracle)}"
    return (
        f"trained {params['steps']} steps: evidence {_fmt(final.evidence_estimate)}"
        f"{oracle}{kl} (cost {final.cumulative_cost} draws)"
    )


_RUNNERS = {
    "gen-data": run_gen_data,
    "estimate": run_estimate,
    "variance-profile": run_variance_profile,
    "grad-check": run_grad_check,
    "moments": run_moments,
    "train": run_train,
}


def dispatch(command: str, params: dict, out: Path, workers: int) -> str:
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, command, params)
    return _RUNNERS[command](params, out, workers)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract here is exit 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_flags(p, data_flags=True):
    p.add_argument("--model", choices=["gaussian", "bernoulli"], default="gaussian")
    p.add_argument("--dim", type=int, default=1, help="latent dimension (gaussian only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--theta", type=parse_vector, default=None)
    p.add_argument("--phi", type=parse_vector, default=None)
    if data_flags:
        p.add_argument("--data", default=None, help="dataset file (with sidecar header)")
        p.add_argument("--n", type=int, default=50, help="synthetic dataset size")
        p.add_argument("--true-theta", type=parse_vector, default=None,
                       help="generating parameters for synthetic data")


def _estimator_flags(p):
    p.add_argument("--n0", type=int, default=8)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--ratio-log2", type=float, default=-1.5)
    p.add_argument("--level-cap", type=int, default=40)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlmc-evidence", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset with sidecar header")
    p.add_argument("--model", choices=["gaussian", "bernoulli"], default="gaussian")
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--theta", type=parse_vector, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("estimate", help="unbiased log-evidence estimate")
    _common_flags(p)
    _estimator_flags(p)

    p = sub.add_parser("variance-profile", help="per-level variance/cost profile and decay fit")
    _common_flags(p)
    _estimator_flags(p)
    p.add_argument("--levels", type=parse_level_range, default=list(range(1, 8)),
                   help="inclusive range a..b")
    p.add_argument("--reps", type=int, default=10_000)
    p.add_argument("--naive", action="store_true",
                   help="profile the non-antithetic difference instead")

    p = sub.add_parser("grad-check", help="finite-difference and estimator-mean validation")
    _common_flags(p)
    _estimator_flags(p)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--fd-tol", type=float, default=1e-6)
    p.add_argument("--reps", type=int, default=2000)

    p = sub.add_parser("moments", help="importance-weight tail moment diagnostics")
    _common_flags(p)
    p.add_argument("--s", type=float, default=4.5)
    p.add_argument("--t", type=float, default=3.0)
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--x-index", type=int, default=0)

    p = sub.add_parser("train", help="two-objective ascent with shared sample batches")
    _common_flags(p)
    _estimator_flags(p)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr-theta", type=float, default=1e-3)
    p.add_argument("--lr-phi", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--eval-reps", type=int, default=8)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    return parser


_PARAM_KEYS = {
    "gen-data": ["model", "dim", "n", "theta", "seed"],
    "estimate": ["model", "dim", "seed", "theta", "phi", "data", "n", "true_theta",
                 "n0", "batch", "ratio_log2", "level_cap"],
    "variance-profile": ["model", "dim", "seed", "theta", "phi", "data", "n", "true_theta",
                         "n0", "batch", "ratio_log2", "level_cap", "levels", "reps", "naive"],
    "grad-check": ["model", "dim", "seed", "theta", "phi", "data", "n", "true_theta",
                   "n0", "batch", "ratio_log2", "level_cap", "points", "fd_step",
                   "fd_tol", "reps"],
    "moments": ["model", "dim", "seed", "theta", "phi", "data", "n", "true_theta",
                "s", "t", "draws", "x_index"],
    "train": ["model", "dim", "seed", "theta", "phi", "data", "n", "true_theta",
              "n0", "batch", "ratio_log2", "level_cap", "steps", "lr_theta", "lr_phi",
              "momentum", "eval_every", "eval_reps"],
}


def _params_from_args(args: argparse.Namespace) -> dict:
    return {key: getattr(args, key) for key in _PARAM_KEYS[args.command]}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rerun":
            manifest = json.loads(Path(args.manifest).read_text())
            command = manifest.pop("command", None)
            params = manifest
            if command not in _RUNNERS:
                raise ContractViolation(f"manifest names unknown command {command!r}")
        else:
            command, params = args.command, _params_from_args(args)
        summary = dispatch(command, params, Path(args.out), args.workers)
    except (ContractViolation, UnsupportedOperation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, ResourceGuardExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
