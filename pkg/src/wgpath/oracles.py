"""Independent reference solutions and validation metrics.

Nothing here feeds the training path: these are closed-form evolutions,
transport distances, SDE references, and steady-state geometry checks used
to validate trained models.  Gaussian transport distances use the standard
closed form between Gaussian measures; empirical distances use either an
exact assignment solve (small batches) or a sliced estimate (large batches,
always labeled as such).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import kstwobign

from .energy import Potential

EIG_FLOOR = 1e-12
EXACT_ASSIGNMENT_CAP = 2000


@dataclass
class GaussianState:
    """Gaussian law summarized by mean and SPD covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        if not np.allclose(self.covariance, self.covariance.T):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.covariance).min() <= EIG_FLOOR:
            raise ValueError("covariance must be positive definite")

    @property
    def dim(self):
        return len(self.mean)


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, EIG_FLOOR, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def ou_exact(t: float, initial: GaussianState, target: GaussianState) -> GaussianState:
    """Law at time t of the linear relaxation toward a Gaussian equilibrium.

    For the quadratic confinement 1/2 (x-mu)^T S^{-1} (x-mu) with unit
    diffusion, the Gaussian law evolves as

        mu(t)    = mu - exp(-S^{-1} t) (mu - mu_0)
        Sigma(t) = E Sigma_0 E^T + S - E S E^T,   E = exp(-S^{-1} t).
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    prec = np.linalg.inv(target.covariance)
    decay = expm(-prec * t)
    mean = target.mean - decay @ (target.mean - initial.mean)
    cov = (
        decay @ initial.covariance @ decay.T
        + target.covariance
        - decay @ target.covariance @ decay.T
    )
    cov = 0.5 * (cov + cov.T)
    return GaussianState(mean=mean, covariance=cov)


def ou_exact_blockdiag(
    t: float, initial: GaussianState, target: GaussianState, blocks: Sequence[int]
) -> GaussianState:
    """Block-diagonal route for ou_exact; cross-check for structured covariances."""
    mean = np.empty_like(target.mean)
    cov = np.zeros_like(target.covariance)
    start = 0
    for size in blocks:
        sl = slice(start, start + size)
        sub = ou_exact(
            t,
            GaussianState(initial.mean[sl], initial.covariance[sl, sl]),
            GaussianState(target.mean[sl], target.covariance[sl, sl]),
        )
        mean[sl] = sub.mean
        cov[sl, sl] = sub.covariance
        start += size
    if start != len(mean):
        raise ValueError("block sizes do not cover the dimension")
    return GaussianState(mean=mean, covariance=cov)


def gaussian_w2(a: GaussianState, b: GaussianState) -> float:
    """Closed-form Wasserstein-2 distance between Gaussian laws."""
    root_b = _psd_sqrt(b.covariance)
    cross = _psd_sqrt(root_b @ a.covariance @ root_b)
    w2sq = float(
        np.sum((a.mean - b.mean) ** 2)
        + np.trace(a.covariance + b.covariance - 2.0 * cross)
    )
    return math.sqrt(max(w2sq, 0.0))


def empirical_w2(a: np.ndarray, b: np.ndarray) -> float:
    """Exact empirical Wasserstein-2 distance via optimal assignment.

    Restricted to equal-size sets of at most 2000 points; larger inputs must
    use :func:`sliced_w2`, which is a different, explicitly labeled estimate.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError("point sets must have equal shapes for the exact route")
    if a.shape[0] > EXACT_ASSIGNMENT_CAP:
        raise ValueError(
            f"exact assignment capped at {EXACT_ASSIGNMENT_CAP} points; use sliced_w2"
        )
    cost = cdist(a, b, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return math.sqrt(cost[rows, cols].mean())


def sliced_w2(a, b, n_projections=128, seed=0) -> float:
    """Sliced Wasserstein-2 estimate: averaged 1-D quantile couplings."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    d = a.shape[1]
    if d == 1:
        proj = np.ones((1, 1))
    else:
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((n_projections, d))
        proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    total = 0.0
    for u in proj:
        pa = np.sort(a @ u)
        pb = np.sort(b @ u)
        if len(pa) == len(pb):
            total += np.mean((pa - pb) ** 2)
        else:
            n = min(len(pa), len(pb))
            qa = np.quantile(pa, (np.arange(n) + 0.5) / n)
            qb = np.quantile(pb, (np.arange(n) + 0.5) / n)
            total += np.mean((qa - qb) ** 2)
    return math.sqrt(total / len(proj))


def w1_1d(a, b) -> float:
    """1-D Wasserstein-1 distance between equal-size samples (sorted coupling)."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    n = min(len(a), len(b))
    qa = np.quantile(a, (np.arange(n) + 0.5) / n)
    qb = np.quantile(b, (np.arange(n) + 0.5) / n)
    return float(np.mean(np.abs(qa - qb)))


def fit_gaussian(samples: np.ndarray) -> GaussianState:
    """Sample mean/covariance summary (no shrinkage)."""
    samples = np.asarray(samples, dtype=float)
    mean = samples.mean(axis=0)
    cov = np.cov(samples.T, bias=False)
    cov = np.atleast_2d(cov)
    return GaussianState(mean=np.atleast_1d(mean), covariance=cov)


# ---------------------------------------------------------------------------
# 1-D Euler-Maruyama reference
# ---------------------------------------------------------------------------


def euler_maruyama_1d(
    potential: Potential,
    n_paths: int,
    dt: float,
    t_end: float,
    seed: int,
    record_times: Optional[Sequence[float]] = None,
    initial_sampler: Optional[Callable] = None,
):
    """Simulate dX = -V'(X) dt + sqrt(2) dB and return recorded marginals.

    Returns (times, marginals) where marginals[j] is the (n_paths,) sample of
    X at times[j].  Initial condition defaults to the standard normal.
    """
    import torch

    if dt <= 0:
        raise ValueError("time step must be positive")
    rng = np.random.default_rng(seed)
    if initial_sampler is None:
        x = rng.standard_normal(n_paths)
    else:
        x = np.asarray(initial_sampler(rng, n_paths), dtype=float)
    if record_times is None:
        record_times = [t_end]
    record_times = sorted(float(t) for t in record_times)
    if record_times and record_times[-1] > t_end + 1e-12:
        raise ValueError("record times must lie within [0, t_end]")

    marginals = []
    times_out = []
    next_idx = 0
    n_steps = int(round(t_end / dt))
    sqrt2dt = math.sqrt(2.0 * dt)
    t = 0.0
    while next_idx < len(record_times) and record_times[next_idx] <= 1e-12:
        marginals.append(x.copy())
        times_out.append(record_times[next_idx])
        next_idx += 1
    for step in range(n_steps):
        xt = torch.from_numpy(x).unsqueeze(-1)
        drift = -potential.gradient(xt).squeeze(-1).numpy()
        if not np.isfinite(drift).all():
            raise RuntimeError(f"non-finite drift at step {step}")
        x = x + drift * dt + sqrt2dt * rng.standard_normal(n_paths)
        t = (step + 1) * dt
        while next_idx < len(record_times) and record_times[next_idx] <= t + 0.5 * dt:
            marginals.append(x.copy())
            times_out.append(record_times[next_idx])
            next_idx += 1
    return np.array(times_out), marginals


# ---------------------------------------------------------------------------
# steady-state geometry checks
# ---------------------------------------------------------------------------


@dataclass
class SteadyStateSpec:
    """Radially symmetric uniform steady state: unit disk or annulus."""

    kind: str  # "unit_disk" or "annulus"
    r_inner: float = 0.0
    r_outer: float = 1.0

    def __post_init__(self):
        if self.kind not in ("unit_disk", "annulus"):
            raise ValueError("kind must be 'unit_disk' or 'annulus'")
        if self.kind == "annulus" and not (0.0 < self.r_inner < self.r_outer):
            raise ValueError("annulus needs 0 < r_inner < r_outer")
        if self.kind == "unit_disk":
            self.r_inner, self.r_outer = 0.0, 1.0

    def radial_cdf(self, r):
        r = np.clip(r, self.r_inner, self.r_outer)
        return (r**2 - self.r_inner**2) / (self.r_outer**2 - self.r_inner**2)


@dataclass
class SteadyStateReport:
    max_radius: float
    radius_quantiles: dict
    ks_statistic: float
    ks_critical_1pct: float

    @property
    def ks_rejects_at_1pct(self):
        return self.ks_statistic > self.ks_critical_1pct


def steady_state_check(particles: np.ndarray, spec: SteadyStateSpec) -> SteadyStateReport:
    """Radial statistics of 2-D particles against a uniform disk/annulus law."""
    particles = np.asarray(particles, dtype=float)
    if particles.ndim != 2 or particles.shape[1] != 2:
        raise ValueError("steady-state check expects 2-D particles")
    r = np.linalg.norm(particles, axis=1)
    n = len(r)
    sorted_r = np.sort(r)
    cdf_vals = spec.radial_cdf(sorted_r)
    empirical_hi = np.arange(1, n + 1) / n
    empirical_lo = np.arange(0, n) / n
    ks = float(
        max(np.max(empirical_hi - cdf_vals), np.max(cdf_vals - empirical_lo))
    )
    critical = float(kstwobign.ppf(0.99) / math.sqrt(n))
    quantiles = {
        q: float(np.quantile(r, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95, 0.99)
    }
    return SteadyStateReport(
        max_radius=float(r.max()),
        radius_quantiles=quantiles,
        ks_statistic=ks,
        ks_critical_1pct=critical,
    )


def sample_disk_uniform(n, seed=0, radius=1.0):
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0, 2 * math.pi, size=n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def sample_annulus_uniform(n, r_inner, r_outer, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=n)
    r = np.sqrt(r_inner**2 + u * (r_outer**2 - r_inner**2))
    theta = rng.uniform(0, 2 * math.pi, size=n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
