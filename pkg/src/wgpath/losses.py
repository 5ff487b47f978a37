"""Trainable path objectives.

Two families of objectives are provided:

* the physical-time loss -- a Crank-Nicolson pairing of segment increments
  against endpoint velocity fields on a (possibly non-uniform) time mesh;
* the geometric loss -- a trapezoidal weighted arc length, optionally
  regularized by a parametrization penalty (equal segment lengths or equal
  free-energy drops) and a terminal free-energy penalty.

All functions are pure and differentiable given tensor inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import torch

from .flow import PathBatch


class MeshKind(Enum):
    UNIFORM = "uniform"
    EXPLICIT = "explicit"


@dataclass
class PhysicalTimeConfig:
    """Time horizon and mesh for the physical-time loss."""

    horizon: float
    steps: int
    mesh: MeshKind = MeshKind.UNIFORM
    timestamps: Optional[Sequence[float]] = None  # explicit mesh t_0..t_K
    weights: Optional[Sequence[float]] = None  # omega_k, default all ones

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("time horizon must be positive")
        if self.steps < 1:
            raise ValueError("need at least one time step")
        if self.mesh is MeshKind.EXPLICIT:
            t = list(self.timestamps or [])
            if len(t) != self.steps + 1:
                raise ValueError("explicit mesh must have steps+1 timestamps")
            if t[0] != 0.0:
                raise ValueError("explicit mesh must start at t=0")
            if any(b <= a for a, b in zip(t, t[1:])):
                raise ValueError("explicit mesh must be strictly increasing")
            if abs(t[-1] - self.horizon) > 1e-12 * max(1.0, self.horizon):
                raise ValueError("explicit mesh must end at the horizon")
        if self.weights is not None:
            if len(self.weights) != self.steps:
                raise ValueError("need one weight per segment")
            if any(w <= 0 for w in self.weights):
                raise ValueError("segment weights must be positive")

    def segment_durations(self) -> torch.Tensor:
        if self.mesh is MeshKind.UNIFORM:
            return torch.full(
                (self.steps,), self.horizon / self.steps, dtype=torch.float64
            )
        t = torch.tensor(self.timestamps, dtype=torch.float64)
        return t[1:] - t[:-1]

    def segment_weights(self) -> torch.Tensor:
        if self.weights is None:
            return torch.ones(self.steps, dtype=torch.float64)
        return torch.tensor(self.weights, dtype=torch.float64)


class ParametrizationPenalty(Enum):
    ARC_LENGTH = "arc_length"
    ARC_ACTION = "arc_action"


@dataclass
class GeometricConfig:
    """Penalty weights for the geometric objective.

    The terminal weight defaults to 2: with a weight of 1 the arc cost and
    the terminal energy exactly cancel along any aligned descent path (the
    objective ties at the initial free energy for every stopping point), so
    a weight above 1 is needed to actually pull the endpoint to equilibrium.
    """

    alpha_terminal: float = 2.0
    alpha_arc: float = 1.0
    penalty: ParametrizationPenalty = ParametrizationPenalty.ARC_LENGTH

    def __post_init__(self):
        if self.alpha_terminal < 0 or self.alpha_arc < 0:
            raise ValueError("penalty weights must be nonnegative")


def physical_time_loss(
    batch: PathBatch, fields: List[torch.Tensor], cfg: PhysicalTimeConfig
):
    """Crank-Nicolson defect of the path against the driving force.

    sum_k w_k dt_k mean_i || (x_k - x_{k-1})/dt_k
                            - (V_k(x_k) + V_{k-1}(x_{k-1}))/2 ||^2.
    """
    if batch.n_segments != cfg.steps:
        raise ValueError("mesh step count does not match the path batch")
    dts = cfg.segment_durations()
    weights = cfg.segment_weights()
    total = batch.positions.new_zeros(())
    for k in range(1, cfg.steps + 1):
        dt = dts[k - 1]
        incr = (batch.positions[k] - batch.positions[k - 1]) / dt
        force = 0.5 * (fields[k] + fields[k - 1])
        defect = (incr - force).pow(2).sum(dim=-1).mean()
        total = total + weights[k - 1] * dt * defect
    return total


def cumulative_physical_time_loss(
    batch: PathBatch, fields: List[torch.Tensor], cfg: PhysicalTimeConfig
):
    """Per-layer running sums of the Crank-Nicolson loss (for mesh comparisons)."""
    dts = cfg.segment_durations()
    weights = cfg.segment_weights()
    parts = []
    for k in range(1, cfg.steps + 1):
        dt = dts[k - 1]
        incr = (batch.positions[k] - batch.positions[k - 1]) / dt
        force = 0.5 * (fields[k] + fields[k - 1])
        parts.append(float(weights[k - 1] * dt * (incr - force).pow(2).sum(dim=-1).mean()))
    out = []
    run = 0.0
    for p in parts:
        run += p
        out.append(run)
    return out


def geometric_loss(d: torch.Tensor, v: torch.Tensor):
    """Trapezoidal weighted arc length sum_k d_k (v_{k-1} + v_k) / 2."""
    return (d * 0.5 * (v[:-1] + v[1:])).sum()


def arc_length_penalty(d: torch.Tensor):
    """Var(d)/Mean(d) over segment lengths (population variance); 0 iff equal."""
    mean = d.mean()
    if float(mean.detach()) <= 0.0:
        # degenerate path: every image coincides, nothing to equalize
        return d.new_zeros(())
    var = ((d - mean) ** 2).mean()
    return var / mean


def arc_action_penalty(free_energy: torch.Tensor):
    """Var/|Mean| of the per-segment free-energy drops; 0 iff drops are equal."""
    drops = free_energy[1:] - free_energy[:-1]
    mean = drops.mean()
    if float(mean.detach().abs()) == 0.0:
        return free_energy.new_zeros(())
    var = ((drops - mean) ** 2).mean()
    return var / mean.abs()


@dataclass
class GeometricLossParts:
    arc: torch.Tensor
    terminal: torch.Tensor
    penalty: torch.Tensor
    total: torch.Tensor


def total_geometric_loss(
    d: torch.Tensor,
    v: torch.Tensor,
    terminal_energy: torch.Tensor,
    cfg: GeometricConfig,
    free_energy_profile: Optional[torch.Tensor] = None,
) -> GeometricLossParts:
    """Arc cost + alpha_term * F(p_K) + alpha_arc * parametrization penalty."""
    arc = geometric_loss(d, v)
    if cfg.penalty is ParametrizationPenalty.ARC_LENGTH:
        pen = arc_length_penalty(d)
    else:
        if free_energy_profile is None:
            raise ValueError("arc-action penalty needs the per-layer free energies")
        pen = arc_action_penalty(free_energy_profile)
    total = arc + cfg.alpha_terminal * terminal_energy + cfg.alpha_arc * pen
    return GeometricLossParts(arc=arc, terminal=terminal_energy, penalty=pen, total=total)
