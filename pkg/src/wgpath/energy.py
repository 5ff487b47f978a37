"""Free-energy functionals: internal energy, external potentials, interaction kernels.

A free energy is the sum of up to three parts,

    F(rho) = int beta^{-1} U_m(rho) dx + int V rho dx
             + 1/2 iint W(x - y) rho(x) rho(y) dx dy,

and the particle velocity field driving the steepest descent is
-grad(beta^{-1} U'_m(rho) + V + W * rho).  This module holds the analytic
building blocks (values and gradients of U, V, W) together with the Monte
Carlo estimator of F on a particle batch.

All evaluation routines accept and return ``torch`` tensors and are fully
differentiable, so they can sit inside a training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import torch

# Singular kernels/potentials (log-repulsion) have 1/||x|| factors; norms in
# denominators are clamped to this radius so that coincident Monte Carlo
# particles do not produce infinities.
R_SINGULAR = 1e-6


class EnergyEvaluationError(RuntimeError):
    """Non-finite value met while evaluating an energy term."""

    def __init__(self, message, layer=None, particle=None):
        if layer is not None:
            message = f"{message} (layer {layer})"
        if particle is not None:
            message = f"{message} (particle {particle})"
        super().__init__(message)
        self.layer = layer
        self.particle = particle


# ---------------------------------------------------------------------------
# internal energy
# ---------------------------------------------------------------------------


class InternalEnergyKind(Enum):
    ENTROPY = "entropy"
    POWER_LAW = "power_law"


@dataclass(frozen=True)
class InternalEnergySpec:
    """Density-dependent internal energy beta^{-1} U_m(rho).

    ``ENTROPY`` is U(rho) = rho log rho (the exponent is ignored);
    ``POWER_LAW`` is U_m(rho) = rho^m / (m - 1) with m > 0, m != 1.
    """

    kind: InternalEnergyKind
    beta: float = 1.0
    exponent: Optional[float] = None

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("inverse temperature beta must be positive")
        if self.kind is InternalEnergyKind.POWER_LAW:
            m = self.exponent
            if m is None or m <= 0 or m == 1:
                raise ValueError("power-law internal energy needs exponent m > 0, m != 1")


def entropy_energy(beta: float = 1.0) -> InternalEnergySpec:
    return InternalEnergySpec(InternalEnergyKind.ENTROPY, beta=beta)


def power_law_energy(exponent: float, beta: float = 1.0) -> InternalEnergySpec:
    return InternalEnergySpec(InternalEnergyKind.POWER_LAW, beta=beta, exponent=exponent)


def internal_velocity_term(log_p, score, spec: Optional[InternalEnergySpec]):
    """Internal-energy contribution to the driving velocity field.

    Parameters
    ----------
    log_p : (N,) tensor
        Log-density of the (mass-weighted) density at the particles.
    score : (N, d) tensor
        Spatial gradient of log p at the particles.
    spec : InternalEnergySpec or None

    Returns
    -------
    (N, d) tensor, ``-beta^{-1} grad U'_m(p)`` rewritten through the score:
    entropy gives -beta^{-1} * score, power law -beta^{-1} m p^{m-1} * score.
    """
    if spec is None:
        return torch.zeros_like(score)
    if not (torch.isfinite(log_p).all() and torch.isfinite(score).all()):
        bad = (~torch.isfinite(log_p)).nonzero()
        idx = int(bad[0]) if bad.numel() else None
        raise EnergyEvaluationError("non-finite log density or score", particle=idx)
    if spec.kind is InternalEnergyKind.ENTROPY:
        return -score / spec.beta
    m = spec.exponent
    # p^{m-1} through the log keeps extreme densities finite in float64
    factor = m * torch.exp((m - 1.0) * log_p)
    return -(factor / spec.beta).unsqueeze(-1) * score


def internal_energy_per_particle(log_p, spec: InternalEnergySpec):
    """beta^{-1} U(p)/p evaluated at particle densities (the plug-in integrand)."""
    if spec.kind is InternalEnergyKind.ENTROPY:
        return log_p / spec.beta
    m = spec.exponent
    val = torch.exp((m - 1.0) * log_p) / (m - 1.0)
    if not torch.isfinite(val).all():
        raise EnergyEvaluationError("non-finite power-law internal energy U(p)/p")
    return val / spec.beta


# ---------------------------------------------------------------------------
# external potentials
# ---------------------------------------------------------------------------


class Potential:
    """External potential V(x) with analytic value and gradient."""

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError


class QuadraticGaussianTarget(Potential):
    """V(x) = 1/2 (x - mu)^T Sigma^{-1} (x - mu); equilibrium N(mu, Sigma) under entropy."""

    def __init__(self, mean, covariance):
        mean = torch.as_tensor(mean, dtype=torch.float64)
        covariance = torch.as_tensor(covariance, dtype=torch.float64)
        if covariance.ndim == 0:
            covariance = covariance * torch.eye(mean.numel(), dtype=torch.float64)
        if not torch.allclose(covariance, covariance.T):
            raise ValueError("covariance must be symmetric")
        eigvals = torch.linalg.eigvalsh(covariance)
        if eigvals.min() <= 0:
            raise ValueError("covariance must be positive definite")
        self.mean = mean
        self.covariance = covariance
        self.precision = torch.linalg.inv(covariance)

    def value(self, x):
        dx = x - self.mean
        return 0.5 * torch.einsum("...i,ij,...j->...", dx, self.precision, dx)

    def gradient(self, x):
        return (x - self.mean) @ self.precision.T


class StyblinskiTang(Potential):
    """Separable quartic double-well potential scale * sum_i (x_i^4 - 16 x_i^2 + 5 x_i)."""

    def __init__(self, scale=3.0 / 50.0):
        self.scale = float(scale)

    def value(self, x):
        return self.scale * (x**4 - 16.0 * x**2 + 5.0 * x).sum(dim=-1)

    def gradient(self, x):
        return self.scale * (4.0 * x**3 - 32.0 * x + 5.0)


class LogConfinement(Potential):
    """V(x) = -(a1/a2) log ||x||, singular at the origin (regularized)."""

    def __init__(self, alpha1: float, alpha2: float):
        if alpha1 <= 0 or alpha2 <= 0:
            raise ValueError("log-confinement coefficients must be positive")
        self.alpha1 = float(alpha1)
        self.alpha2 = float(alpha2)
        self.ratio = alpha1 / alpha2

    def value(self, x):
        r = x.norm(dim=-1).clamp_min(R_SINGULAR)
        return -self.ratio * torch.log(r)

    def gradient(self, x):
        r2 = (x**2).sum(dim=-1).clamp_min(R_SINGULAR**2)
        return -self.ratio * x / r2.unsqueeze(-1)


class CustomPotential(Potential):
    """Potential from user-supplied value/gradient closures."""

    def __init__(self, value_fn: Callable, gradient_fn: Callable):
        self._value = value_fn
        self._gradient = gradient_fn

    def value(self, x):
        return self._value(x)

    def gradient(self, x):
        return self._gradient(x)


def potential_gradient(x, potential: Optional[Potential]):
    """grad V at points ``x``; zero when no potential is configured."""
    if potential is None:
        return torch.zeros_like(x)
    if not torch.isfinite(x).all():
        raise EnergyEvaluationError("non-finite point passed to potential gradient")
    return potential.gradient(x)


# ---------------------------------------------------------------------------
# interaction kernels
# ---------------------------------------------------------------------------


class Kernel:
    """Pairwise interaction kernel W(x) with analytic value and gradient."""

    singular = False

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError


class QuadraticLogKernel(Kernel):
    """Quadratic attraction with log (Newtonian, d=2) repulsion: W = ||x||^2/2 - log ||x||."""

    singular = True

    def value(self, x):
        r = x.norm(dim=-1).clamp_min(R_SINGULAR)
        return 0.5 * r**2 - torch.log(r)

    def gradient(self, x):
        r2 = (x**2).sum(dim=-1).clamp_min(R_SINGULAR**2)
        return x - x / r2.unsqueeze(-1)


class GaussianAttractionKernel(Kernel):
    """Smooth short-range attraction W(x) = -amplitude * exp(-||x||^2 / width)."""

    def __init__(self, amplitude=1.0 / math.pi, width=1.0):
        if width <= 0:
            raise ValueError("kernel width must be positive")
        self.amplitude = float(amplitude)
        self.width = float(width)

    def value(self, x):
        return -self.amplitude * torch.exp(-(x**2).sum(dim=-1) / self.width)

    def gradient(self, x):
        v = torch.exp(-(x**2).sum(dim=-1) / self.width)
        return (2.0 * self.amplitude / self.width) * v.unsqueeze(-1) * x


class CustomKernel(Kernel):
    def __init__(self, value_fn: Callable, gradient_fn: Callable, singular=False):
        self._value = value_fn
        self._gradient = gradient_fn
        self.singular = singular

    def value(self, x):
        return self._value(x)

    def gradient(self, x):
        return self._gradient(x)


def kernel_gradient(x, kernel: Optional[Kernel]):
    """grad W at displacement vectors ``x``; zero when no kernel is configured."""
    if kernel is None:
        return torch.zeros_like(x)
    return kernel.gradient(x)


# ---------------------------------------------------------------------------
# full free energy
# ---------------------------------------------------------------------------


@dataclass
class FreeEnergySpec:
    """Declarative free energy: internal + potential + interaction, with total mass.

    When ``mass != 1`` the modeled density is mass * (probability density);
    interaction sums carry weight mass/N and the internal term sees the
    mass-weighted density.
    """

    internal: Optional[InternalEnergySpec] = None
    potential: Optional[Potential] = None
    kernel: Optional[Kernel] = None
    mass: float = 1.0

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("total mass must be positive")
        if self.internal is None and self.potential is None and self.kernel is None:
            raise ValueError("free energy needs at least one non-trivial term")

    @property
    def needs_score(self) -> bool:
        return self.internal is not None

    def log_mass(self) -> float:
        return math.log(self.mass)


def pairwise_displacements(x):
    """(N, N, d) tensor of x_i - x_j."""
    return x.unsqueeze(1) - x.unsqueeze(0)


def free_energy_estimate(positions, log_densities, spec: FreeEnergySpec):
    """Plug-in Monte Carlo estimate of the free energy at one path layer.

    Parameters
    ----------
    positions : (N, d) tensor
        Particle positions sampled from the layer's probability density.
    log_densities : (N,) tensor
        Log of the *probability* density at the particles (mass handling is
        internal).
    spec : FreeEnergySpec

    Returns a differentiable scalar tensor
    M * mean_i [ beta^{-1} U(p_i)/p_i + V(x_i) ] + M^2/2 * mean_{i != j} W(x_i - x_j),
    with p = M * probability density and the interaction diagonal excluded.
    """
    n = positions.shape[0]
    total = positions.new_zeros(())
    m_tot = spec.mass
    if spec.internal is not None:
        log_p = log_densities + spec.log_mass()
        total = total + m_tot * internal_energy_per_particle(log_p, spec.internal).mean()
    if spec.potential is not None:
        total = total + m_tot * spec.potential.value(positions).mean()
    if spec.kernel is not None:
        if n < 2:
            raise ValueError("interaction energy needs a batch of at least 2 particles")
        w = spec.kernel.value(pairwise_displacements(positions))
        off_diag = w.sum() - w.diagonal().sum()
        total = total + 0.5 * m_tot**2 * off_diag / (n * (n - 1))
    return total
