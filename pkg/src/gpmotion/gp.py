"""Gaussian-process temporal prior over the latent motion matrix.

The prior on the flattened motion matrix (dimension-major, time-minor) is
block diagonal with one temporal kernel block ``K`` per latent dimension.
The posterior shares ``K`` and scales block ``i`` by ``s_i``::

    Sigma* = Diag(s_1 K, ..., s_D K),    L* = Diag(sqrt(s_i) L_K)

so that the KL divergence to the prior has the closed form::

    KL = 1/2 sum_i [ s_i T + mu_i^T K^-1 mu_i - T - T ln s_i ]
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import autodiff as ad

KERNEL_KINDS = ("cauchy", "rbf", "identity")
MAX_JITTER = 1e-4


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Stationary temporal kernel; ``identity`` gives the independent (No-GP) prior."""

    kind: str = "cauchy"
    length_scale: float = 7.0
    sigma_k: float = 1.005
    jitter: float = 1e-8

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"kernel kind must be one of {KERNEL_KINDS}")
        if self.length_scale <= 0 or self.sigma_k <= 0 or self.jitter < 0:
            raise ValueError("kernel needs length_scale > 0, sigma_k > 0, jitter >= 0")


def kernel_eval(spec: KernelSpec, tau, tau_prime):
    """Covariance between latent time steps ``tau`` and ``tau_prime``.

    The Cauchy form is sigma_k^2 / (1 + d^2 / l^2).
    """
    d2 = (np.asarray(tau, dtype=float) - np.asarray(tau_prime, dtype=float)) ** 2
    amp = spec.sigma_k ** 2
    if spec.kind == "cauchy":
        return amp / (1.0 + d2 / spec.length_scale ** 2)
    if spec.kind == "rbf":
        return amp * np.exp(-d2 / (2.0 * spec.length_scale ** 2))
    return np.where(d2 == 0, 1.0, 0.0)


def cholesky_banachiewicz(x):
    """Lower-triangular ``L`` with ``L @ L.T == x``, computed row by row."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if x.shape != (n, n):
        raise ValueError("matrix must be square")
    L = np.zeros_like(x)
    for i in range(n):
        for j in range(i + 1):
            acc = x[i, j] - np.dot(L[i, :j], L[j, :j])
            if i == j:
                if not acc > 0.0:
                    raise NotPositiveDefiniteError(f"non-positive pivot {acc:.3e} at row {i}")
                L[i, i] = np.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    return L


@dataclass(frozen=True)
class TemporalKernel:
    spec: KernelSpec
    K: np.ndarray
    L: np.ndarray
    K_inv: np.ndarray
    jitter: float

    @property
    def length(self):
        return self.K.shape[0]

    @property
    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.L)))


def build_kernel_matrix(spec: KernelSpec, t_lat: int) -> TemporalKernel:
    """Kernel matrix, its Cholesky factor and inverse for ``t_lat`` steps.

    Jitter is added to the diagonal and doubled on factorization failure up
    to 1e-4.  The returned ``K`` includes the jitter actually used.
    """
    if t_lat < 1:
        raise ValueError("t_lat must be >= 1")
    idx = np.arange(t_lat)
    base = kernel_eval(spec, idx[:, None], idx[None, :])
    jitter = spec.jitter
    while True:
        K = base + jitter * np.eye(t_lat)
        try:
            L = cholesky_banachiewicz(K)
            break
        except NotPositiveDefiniteError:
            jitter = max(2.0 * jitter, 1e-8)
            if jitter > MAX_JITTER:
                raise NotPositiveDefiniteError(
                    f"kernel {spec} is not positive definite at T={t_lat}") from None
    # two triangular solves against I; more accurate than forming L^-T L^-1
    K_inv = cho_solve((L, True), np.eye(t_lat))
    return TemporalKernel(spec, K, L, K_inv, jitter)


@dataclass
class PosteriorParams:
    """Posterior mean ``mu`` (D*T, dimension-major) and variance multipliers ``s`` (D,)."""

    mu: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).ravel()
        self.s = np.asarray(self.s, dtype=np.float64).ravel()
        if np.any(self.s <= 0) or not np.all(np.isfinite(self.s)):
            raise ValueError("variance multipliers must be finite and positive")
        if self.mu.size % self.s.size:
            raise ValueError("mu length must be a multiple of D")

    @property
    def dims(self):
        return self.s.size

    @property
    def length(self):
        return self.mu.size // self.s.size

    def segments(self):
        return self.mu.reshape(self.dims, self.length)


@dataclass
class MotionMatrix:
    z: np.ndarray
    provenance: str = "sampled"

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ValueError("motion matrix must be D x T")
        if self.provenance not in ("sampled", "mean", "transported"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def shape(self):
        return self.z.shape


def block_cholesky(s, L_K):
    """Dense block-diagonal factor ``Diag(sqrt(s_i) * L_K)``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("variance multipliers must be positive")
    t = L_K.shape[0]
    out = np.zeros((s.size * t, s.size * t))
    for i, si in enumerate(s):
        out[i * t:(i + 1) * t, i * t:(i + 1) * t] = np.sqrt(si) * L_K
    return out


def assemble_covariance(s, K):
    """Dense ``Diag(s_i * K)``."""
    s = np.asarray(s, dtype=np.float64)
    t = K.shape[0]
    out = np.zeros((s.size * t, s.size * t))
    for i, si in enumerate(s):
        out[i * t:(i + 1) * t, i * t:(i + 1) * t] = si * K
    return out


def sample_posterior(mu, s, L_K, eps):
    """Reparameterised sample ``z = mu + L* eps`` reshaped to (D, T).

    ``mu`` (D*T or D x T) and ``s`` (D,) may be tensors on a tape; the
    gradient flows into both.  ``eps`` is a standard-normal array of D*T.
    """
    mu, s = ad.as_tensor(mu), ad.as_tensor(s)
    d = s.size
    t = L_K.shape[0]
    noise = np.asarray(eps, dtype=np.float64).reshape(d, t) @ L_K.T
    scale = ad.reshape(ad.sqrt(s), (d, 1))
    return ad.add(ad.reshape(mu, (d, t)), ad.mul(scale, noise))


def kl_gp(mu, s, kernel: TemporalKernel):
    """Closed-form KL(posterior || GP prior); differentiable in ``mu`` and ``s``."""
    mu, s = ad.as_tensor(mu), ad.as_tensor(s)
    d = s.size
    t = kernel.length
    m = ad.reshape(mu, (d, t))
    quad = ad.sum_all(ad.mul(ad.matmul(m, kernel.K_inv), m))
    per_dim = ad.sub(ad.mul(s, float(t)), ad.mul(ad.log(s), float(t)))
    return ad.mul(ad.add(ad.sub(ad.sum_all(per_dim), float(d * t)), quad), 0.5)


def kl_gp_value(params: PosteriorParams, kernel: TemporalKernel) -> float:
    return float(kl_gp(params.mu, params.s, kernel).data)


def kl_dense(mu_q, cov_q, mu_p, cov_p):
    """KL(N(mu_q, cov_q) || N(mu_p, cov_p)) from dense matrices."""
    mu_q, mu_p = np.atleast_1d(mu_q).astype(float), np.atleast_1d(mu_p).astype(float)
    cov_q, cov_p = np.atleast_2d(cov_q).astype(float), np.atleast_2d(cov_p).astype(float)
    try:
        lq = np.linalg.cholesky(cov_q)
        lp = np.linalg.cholesky(cov_p)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("covariances must be positive definite") from exc
    n = mu_q.size
    diff = mu_p - mu_q
    a = solve_triangular(lp, lq, lower=True)
    b = solve_triangular(lp, diff, lower=True)
    logdet_p = 2 * np.sum(np.log(np.diag(lp)))
    logdet_q = 2 * np.sum(np.log(np.diag(lq)))
    return 0.5 * (np.sum(a * a) + b @ b - n + logdet_p - logdet_q)
