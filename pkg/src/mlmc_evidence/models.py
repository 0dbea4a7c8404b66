"""Latent-variable models: log densities, posterior-approximation samplers,
closed-form gradients of the log importance weight, and ground-truth oracles.

A model packages three densities,

    prior  p(z | theta),  likelihood  p(x | z, theta),  sampler  q(z | x, phi),

and reports, for a batch of latent draws, the log importance weight

    log f(x, z) = log p(x|z) + log p(z) - log q(z|x)

together with d(log f)/d(theta) and d(log q)/d(phi) per draw. Everything is
parameterized so that theta and phi are unconstrained real vectors: standard
deviations enter as their logarithms and gradients are taken with respect to
the log-parameters.

Two concrete models are provided. The conjugate Gaussian model has closed
forms for the evidence, the posterior and the KL term, which makes it the
ground-truth vehicle for statistical verification. The Bernoulli-Gaussian
model is deliberately non-conjugate; its evidence oracle integrates the
likelihood against the prior by Gauss-Hermite quadrature.
"""
from __future__ import annotations

import abc
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, UnsupportedOperation

_LOG_2PI = math.log(2.0 * math.pi)


class WeightBatch(NamedTuple):
    """Per-draw log weights and gradients for one (x, theta, phi)."""

    log_f: np.ndarray  # (n,)
    grad_theta_log_f: np.ndarray  # (n, theta_dim)
    grad_phi_log_q: np.ndarray  # (n, phi_dim)


@dataclass
class LogWeightSample:
    """One latent draw's log weight plus its parameter gradients."""

    z: np.ndarray
    log_f: float
    grad_theta_log_f: np.ndarray
    grad_phi_log_q: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Observations stacked row-wise, (n_total, x_dim)."""

    x: np.ndarray
    n_total: int

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_2d(np.asarray(self.x, dtype=np.float64)))
        if self.n_total != self.x.shape[0]:
            raise ContractViolation(
                f"n_total={self.n_total} but dataset has {self.x.shape[0]} rows"
            )
        if not np.isfinite(self.x).all():
            raise ContractViolation("dataset contains non-finite entries")

    @classmethod
    def from_rows(cls, x) -> "Dataset":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return cls(x=x, n_total=x.shape[0])


class LatentVariableModel(abc.ABC):
    """Interface every model implements.

    Implementations are immutable after construction; all operations are
    pure given an explicit generator, so concurrent calls with independent
    streams are safe.
    """

    x_dim: int
    z_dim: int
    theta_dim: int
    phi_dim: int

    @abc.abstractmethod
    def sample_q(self, x, phi, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n latents from q(z|x, phi); returns (n, z_dim)."""

    @abc.abstractmethod
    def log_weight_batch(self, x, z, theta, phi) -> WeightBatch:
        """log f and its gradients for every row of z, shape (n, z_dim)."""

    def log_weight(self, x, z, theta, phi) -> LogWeightSample:
        """Single-draw convenience wrapper around log_weight_batch."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        batch = self.log_weight_batch(x, z, theta, phi)
        return LogWeightSample(
            z=z[0],
            log_f=float(batch.log_f[0]),
            grad_theta_log_f=batch.grad_theta_log_f[0],
            grad_phi_log_q=batch.grad_phi_log_q[0],
        )

    @abc.abstractmethod
    def generate_data(self, theta, n: int, rng: np.random.Generator) -> Dataset:
        """Synthesize n observations from the model at parameters theta."""

    # Optional oracles. Models with closed forms override these.

    def oracle_log_evidence(self, x, theta) -> float:
        raise UnsupportedOperation(f"{type(self).__name__} has no evidence oracle")

    def oracle_evidence_grad_theta(self, x, theta) -> np.ndarray:
        raise UnsupportedOperation(f"{type(self).__name__} has no evidence-gradient oracle")

    def oracle_elbo_grad_phi(self, x, theta, phi) -> np.ndarray:
        raise UnsupportedOperation(f"{type(self).__name__} has no analytic lower-bound gradient")

    def oracle_posterior_kl(self, x, theta, phi) -> float:
        raise UnsupportedOperation(f"{type(self).__name__} has no analytic posterior")


def _check_vector(name: str, v, length: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != length:
        raise ContractViolation(f"{name} must have length {length}, got {v.shape[0]}")
    if not np.isfinite(v).all():
        raise ContractViolation(f"{name} contains non-finite entries")
    return v


class GaussianConjugateModel(LatentVariableModel):
    """Fully conjugate diagonal Gaussian model with analytic everything.

    Structure (dim d, elementwise across coordinates):

        z ~ Normal(mu0, diag(s0^2))         theta = (mu0, log s0, log sx)
        x | z ~ Normal(z, diag(sx^2))
        q(z|x) = Normal(a*x + b, diag(s^2))  phi = (a, b, log s)

    Evidence:  p(x) = Normal(x; mu0, diag(s0^2 + sx^2)).
    Posterior: Normal with variance (1/s0^2 + 1/sx^2)^-1, mean affine in x,
    so a single phi reproduces the exact posterior for every x at once.
    """

    def __init__(self, dim: int = 1):
        if dim < 1:
            raise ContractViolation(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.x_dim = dim
        self.z_dim = dim
        self.theta_dim = 3 * dim
        self.phi_dim = 3 * dim

    def split_theta(self, theta):
        theta = _check_vector("theta", theta, self.theta_dim)
        d = self.dim
        return theta[:d], theta[d : 2 * d], theta[2 * d :]

    def split_phi(self, phi):
        phi = _check_vector("phi", phi, self.phi_dim)
        d = self.dim
        return phi[:d], phi[d : 2 * d], phi[2 * d :]

    def sample_q(self, x, phi, rng, n):
        a, b, log_s = self.split_phi(phi)
        x = _check_vector("x", x, self.x_dim)
        mean = a * x + b
        return mean + np.exp(log_s) * rng.standard_normal((n, self.dim))

    def log_weight_batch(self, x, z, theta, phi):
        mu0, log_s0, log_sx = self.split_theta(theta)
        a, b, log_s = self.split_phi(phi)
        x = _check_vector("x", x, self.x_dim)
        z = np.asarray(z, dtype=np.float64)

        v0 = np.exp(2.0 * log_s0)
        vx = np.exp(2.0 * log_sx)
        vq = np.exp(2.0 * log_s)
        m = a * x + b

        dz0 = z - mu0  # (n, d)
        dxz = x - z
        dzq = z - m

        q0 = dz0 * dz0 / v0
        qx = dxz * dxz / vx
        qq = dzq * dzq / vq

        log_f = (
            -0.5 * (q0 + qx - qq).sum(axis=1)
            - (log_s0.sum() + log_sx.sum() - log_s.sum())
            - 0.5 * self.dim * _LOG_2PI
        )

        n = z.shape[0]
        gt = np.empty((n, self.theta_dim))
        d = self.dim
        gt[:, :d] = dz0 / v0
        gt[:, d : 2 * d] = q0 - 1.0
        gt[:, 2 * d :] = qx - 1.0

        gq = np.empty((n, self.phi_dim))
        dm = dzq / vq
        gq[:, :d] = dm * x
        gq[:, d : 2 * d] = dm
        gq[:, 2 * d :] = qq - 1.0

        return WeightBatch(log_f, gt, gq)

    def generate_data(self, theta, n, rng):
        mu0, log_s0, log_sx = self.split_theta(theta)
        z = mu0 + np.exp(log_s0) * rng.standard_normal((n, self.dim))
        x = z + np.exp(log_sx) * rng.standard_normal((n, self.dim))
        return Dataset.from_rows(x)

    # Closed-form oracles.

    def oracle_log_evidence(self, x, theta):
        mu0, log_s0, log_sx = self.split_theta(theta)
        x = _check_vector("x", x, self.x_dim)
        v = np.exp(2.0 * log_s0) + np.exp(2.0 * log_sx)
        return float(-0.5 * (self.dim * _LOG_2PI + np.log(v).sum() + ((x - mu0) ** 2 / v).sum()))

    def oracle_evidence_grad_theta(self, x, theta):
        mu0, log_s0, log_sx = self.split_theta(theta)
        x = _check_vector("x", x, self.x_dim)
        v0 = np.exp(2.0 * log_s0)
        vx = np.exp(2.0 * log_sx)
        v = v0 + vx
        dx = x - mu0
        dv = -1.0 / v + dx * dx / (v * v)  # d/dv of log evidence, times 2
        return np.concatenate([dx / v, v0 * dv, vx * dv])

    def posterior_params(self, x, theta):
        """Mean and variance vectors of the exact posterior p(z|x)."""
        mu0, log_s0, log_sx = self.split_theta(theta)
        x = _check_vector("x", x, self.x_dim)
        v0 = np.exp(2.0 * log_s0)
        vx = np.exp(2.0 * log_sx)
        var_p = v0 * vx / (v0 + vx)
        mean_p = var_p * (mu0 / v0 + x / vx)
        return mean_p, var_p

    def posterior_phi(self, theta) -> np.ndarray:
        """The phi for which q(z|x) equals the exact posterior for all x."""
        mu0, log_s0, log_sx = self.split_theta(theta)
        v0 = np.exp(2.0 * log_s0)
        vx = np.exp(2.0 * log_sx)
        var_p = v0 * vx / (v0 + vx)
        return np.concatenate([var_p / vx, var_p * mu0 / v0, 0.5 * np.log(var_p)])

    def oracle_posterior_kl(self, x, theta, phi):
        """KL(q(.|x) || p(.|x)) between two diagonal Gaussians; >= 0."""
        a, b, log_s = self.split_phi(phi)
        x = _check_vector("x", x, self.x_dim)
        mean_p, var_p = self.posterior_params(x, theta)
        m = a * x + b
        vq = np.exp(2.0 * log_s)
        kl = 0.5 * np.log(var_p) - log_s + (vq + (m - mean_p) ** 2) / (2.0 * var_p) - 0.5
        return float(kl.sum())

    def oracle_elbo_grad_phi(self, x, theta, phi):
        """Gradient of log p(x) - KL(q||posterior) in phi (= -grad KL)."""
        a, b, log_s = self.split_phi(phi)
        x = _check_vector("x", x, self.x_dim)
        mean_p, var_p = self.posterior_params(x, theta)
        m = a * x + b
        vq = np.exp(2.0 * log_s)
        dkl_dm = (m - mean_p) / var_p
        dkl_dlogs = vq / var_p - 1.0
        return -np.concatenate([dkl_dm * x, dkl_dm, dkl_dlogs])


@lru_cache(maxsize=8)
def _hermgauss(n_nodes: int):
    t, w = np.polynomial.hermite.hermgauss(n_nodes)
    # nodes/log-weights for integrating against a standard normal
    return math.sqrt(2.0) * t, np.log(w) - 0.5 * math.log(math.pi)


def _log_sigmoid(eta: np.ndarray) -> np.ndarray:
    return np.minimum(eta, 0.0) - np.log1p(np.exp(-np.abs(eta)))


class BernoulliGaussianModel(LatentVariableModel):
    """Non-conjugate scalar model: logistic observation of a Gaussian latent.

        z ~ Normal(0, 1)                       (fixed prior, no parameters)
        x | z ~ Bernoulli(sigmoid(w z + c))    theta = (w, c)
        q(z|x) = Normal(m_x, s_x^2)            phi = (m_0, log s_0, m_1, log s_1)

    The variational family keeps an independent Gaussian per observed class.
    The evidence oracle integrates the likelihood against the prior with
    Gauss-Hermite quadrature (64 nodes by default; agreement with 128 nodes
    is checked in the test suite).
    """

    x_dim = 1
    z_dim = 1
    theta_dim = 2
    phi_dim = 4

    def _q_params(self, x, phi):
        phi = _check_vector("phi", phi, self.phi_dim)
        x = _check_vector("x", x, self.x_dim)
        k = int(x[0] != 0.0)
        return float(x[0]), phi[2 * k], phi[2 * k + 1], k

    def sample_q(self, x, phi, rng, n):
        _, m, log_s, _ = self._q_params(x, phi)
        return m + math.exp(log_s) * rng.standard_normal((n, 1))

    def log_weight_batch(self, x, z, theta, phi):
        theta = _check_vector("theta", theta, self.theta_dim)
        xv, m, log_s, k = self._q_params(x, phi)
        if xv not in (0.0, 1.0):
            raise ContractViolation(f"observation must be 0 or 1, got {xv}")
        z = np.asarray(z, dtype=np.float64)
        zs = z[:, 0]
        w, c = theta
        eta = w * zs + c
        sign = 2.0 * xv - 1.0

        log_lik = _log_sigmoid(sign * eta)
        log_prior = -0.5 * (_LOG_2PI + zs * zs)
        vq = math.exp(2.0 * log_s)
        dzq = zs - m
        log_q = -0.5 * (_LOG_2PI + dzq * dzq / vq) - log_s

        n = z.shape[0]
        resid = xv - 1.0 / (1.0 + np.exp(-eta))  # x - sigmoid(eta)
        gt = np.empty((n, 2))
        gt[:, 0] = zs * resid
        gt[:, 1] = resid

        gq = np.zeros((n, 4))
        gq[:, 2 * k] = dzq / vq
        gq[:, 2 * k + 1] = dzq * dzq / vq - 1.0

        return WeightBatch(log_lik + log_prior - log_q, gt, gq)

    def generate_data(self, theta, n, rng):
        theta = _check_vector("theta", theta, self.theta_dim)
        z = rng.standard_normal(n)
        p1 = 1.0 / (1.0 + np.exp(-(theta[0] * z + theta[1])))
        x = (rng.random(n) < p1).astype(np.float64)
        return Dataset.from_rows(x.reshape(-1, 1))

    def oracle_log_evidence(self, x, theta, n_nodes: int = 64):
        theta = _check_vector("theta", theta, self.theta_dim)
        x = _check_vector("x", x, self.x_dim)
        if n_nodes < 64:
            raise ContractViolation("evidence quadrature needs at least 64 nodes")
        nodes, log_wts = _hermgauss(n_nodes)
        sign = 2.0 * x[0] - 1.0
        log_lik = _log_sigmoid(sign * (theta[0] * nodes + theta[1]))
        v = log_wts + log_lik
        m = v.max()
        return float(m + np.log(np.exp(v - m).sum()))

    def oracle_evidence_grad_theta(self, x, theta, n_nodes: int = 64):
        """Posterior expectation of the likelihood score, by quadrature:
        grad log p(x) = E[ grad log p(x|z) | x ]."""
        theta = _check_vector("theta", theta, self.theta_dim)
        x = _check_vector("x", x, self.x_dim)
        nodes, log_wts = _hermgauss(n_nodes)
        sign = 2.0 * x[0] - 1.0
        eta = theta[0] * nodes + theta[1]
        v = log_wts + _log_sigmoid(sign * eta)
        post = np.exp(v - v.max())
        post /= post.sum()
        resid = x[0] - 1.0 / (1.0 + np.exp(-eta))
        return np.array([post @ (nodes * resid), post @ resid])

    def oracle_elbo_grad_phi(self, x, theta, phi, n_nodes: int = 64):
        """Quadrature of E_q[log f * dlog q/dphi], the lower-bound gradient.

        Independent of the sampling path: nodes come from Gauss-Hermite
        against q's Gaussian, not from Monte Carlo draws.
        """
        theta = _check_vector("theta", theta, self.theta_dim)
        xv, m, log_s, k = self._q_params(x, phi)
        nodes, log_wts = _hermgauss(n_nodes)
        s = math.exp(log_s)
        z = (m + s * nodes).reshape(-1, 1)
        batch = self.log_weight_batch(x, z, theta, phi)
        wts = np.exp(log_wts)
        grad = np.zeros(self.phi_dim)
        grad[2 * k] = wts @ (batch.log_f * batch.grad_phi_log_q[:, 2 * k])
        grad[2 * k + 1] = wts @ (batch.log_f * batch.grad_phi_log_q[:, 2 * k + 1])
        return grad


def save_dataset(path, dataset: Dataset, seed: int, true_theta) -> None:
    """Write observations one per line plus a sidecar JSON header.

    The sidecar lives at `<path>.json` and records dim, n_total, the
    generation seed and the true parameter vector. Reals are formatted at
    17 significant digits so a reload reproduces the array bit-exactly.
    """
    path = Path(path)
    lines = [" ".join(format(v, ".17g") for v in row) for row in dataset.x]
    path.write_text("\n".join(lines) + "\n")
    header = {
        "dim": int(dataset.x.shape[1]),
        "n_total": int(dataset.n_total),
        "seed": int(seed),
        "true_theta": [float(v) for v in np.asarray(true_theta, dtype=np.float64)],
    }
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2) + "\n")


def load_dataset(path) -> tuple[Dataset, dict]:
    """Inverse of save_dataset; returns the data and the sidecar header."""
    path = Path(path)
    rows = [
        [float(tok) for tok in line.split()]
        for line in path.read_text().splitlines()
        if line.strip()
    ]
    header = json.loads(Path(str(path) + ".json").read_text())
    data = Dataset.from_rows(np.asarray(rows, dtype=np.float64))
    if data.n_total != header["n_total"] or data.x.shape[1] != header["dim"]:
        raise ContractViolation(f"dataset file {path} does not match its sidecar header")
    return data, header
