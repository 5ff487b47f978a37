"""Driving velocity fields and geometric path diagnostics.

The empirical velocity at a path layer combines the internal-energy term
(through the score), the external potential gradient, and the pairwise
interaction sum over the same particle batch.  From per-layer velocities the
module derives the batch diagnostics used by both losses: RMS segment lengths
d_k, RMS velocity norms v_k, cosine alignments between segment increments and
the (trapezoid-averaged) driving force, and per-layer free energies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from .energy import (
    EnergyEvaluationError,
    FreeEnergySpec,
    free_energy_estimate,
    internal_velocity_term,
)
from .flow import FlowModel, PathBatch

# below this RMS speed a cosine alignment is reported as undefined
V_DEGENERATE = 1e-12


def empirical_velocity(positions, log_densities, scores, spec: FreeEnergySpec):
    """Empirical driving velocity at one layer's particles.

    Parameters
    ----------
    positions : (N, d) tensor
    log_densities : (N,) tensor
        Log *probability* densities at the particles.
    scores : (N, d) tensor or None
        Spatial gradient of the log-density; required iff the spec has an
        internal-energy term.
    spec : FreeEnergySpec

    Returns the (N, d) field
    ``-grad(beta^{-1} U'_m) - grad V - (M/N) sum_{j != i} grad W(x_i - x_j)``.
    """
    n = positions.shape[0]
    v = torch.zeros_like(positions)
    if spec.internal is not None:
        if scores is None:
            raise ValueError("internal-energy term needs particle scores")
        log_p = log_densities + spec.log_mass()
        v = v + internal_velocity_term(log_p, scores, spec.internal)
    if spec.potential is not None:
        v = v - spec.potential.gradient(positions)
    if spec.kernel is not None:
        if n < 2:
            raise ValueError("interaction velocity needs a batch of at least 2 particles")
        disp = positions.unsqueeze(1) - positions.unsqueeze(0)  # (N, N, d)
        grads = spec.kernel.gradient(disp)
        self_pair = torch.eye(n, dtype=torch.bool).unsqueeze(-1)
        grads = grads.masked_fill(self_pair, 0.0)
        v = v - (spec.mass / n) * grads.sum(dim=1)
    if not torch.isfinite(v).all():
        bad = int((~torch.isfinite(v).all(dim=-1)).nonzero()[0])
        raise EnergyEvaluationError("non-finite velocity field", particle=bad)
    return v


def path_velocities(
    model: FlowModel,
    batch: PathBatch,
    spec: FreeEnergySpec,
    create_graph: bool = False,
    detach: bool = False,
) -> List[torch.Tensor]:
    """Velocity fields at every layer of a path batch.

    Scores for layer 0 come from the base distribution exactly; deeper layers
    differentiate the flow's log-density.  With ``detach`` the returned fields
    carry no parameter gradient (the "frozen force" training mode).
    """
    fields = []
    for k in range(batch.n_segments + 1):
        x = batch.positions[k]
        scores = None
        if spec.needs_score:
            if detach:
                scores = model.score(k, x.detach(), create_graph=False).detach()
            else:
                scores = model.score(k, x, create_graph=create_graph)
        v = empirical_velocity(
            x.detach() if detach else x, batch.log_densities[k].detach() if detach else batch.log_densities[k], scores, spec
        )
        fields.append(v.detach() if detach else v)
    return fields


@dataclass
class PathDiagnostics:
    """Per-layer geometric summaries of one sampled path."""

    segment_lengths: np.ndarray  # (K,)   d_k
    velocity_norms: np.ndarray  # (K+1,) v_k
    cosines: np.ndarray  # (K,)   nan marks undefined entries
    cosine_defined: np.ndarray  # (K,)   bool
    free_energy: np.ndarray  # (K+1,)
    times: Optional[np.ndarray] = None  # (K+1,) physical timestamps, if recovered

    @property
    def n_segments(self):
        return len(self.segment_lengths)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "d_k", "v_k", "cosine_k", "free_energy_k", "t_k"])
            for k in range(self.n_segments + 1):
                d = "" if k == 0 else repr(float(self.segment_lengths[k - 1]))
                cos = ""
                if k > 0 and self.cosine_defined[k - 1]:
                    cos = repr(float(self.cosines[k - 1]))
                t = "" if self.times is None else repr(float(self.times[k]))
                writer.writerow(
                    [k, d, repr(float(self.velocity_norms[k])), cos,
                     repr(float(self.free_energy[k])), t]
                )


def segment_and_velocity_norms(batch: PathBatch, fields: List[torch.Tensor]):
    """Differentiable RMS segment lengths d_k and velocity norms v_k.

    Returns (d, v) tensors of shapes (K,) and (K+1,).
    """
    diffs = batch.positions[1:] - batch.positions[:-1]  # (K, N, d)
    # clamp under the root: sqrt has an unbounded slope at zero, so a
    # degenerate segment (identity-initialized path) would poison gradients
    d = diffs.pow(2).sum(dim=-1).mean(dim=-1).clamp_min(V_DEGENERATE**2).sqrt()
    v = torch.stack(
        [
            f.pow(2).sum(dim=-1).mean(dim=-1).clamp_min(V_DEGENERATE**2).sqrt()
            for f in fields
        ]
    )
    return d, v


def compute_diagnostics(
    batch: PathBatch, fields: List[torch.Tensor], spec: FreeEnergySpec
) -> PathDiagnostics:
    """Full per-layer diagnostics (non-differentiable summary arrays)."""
    with torch.no_grad():
        d, v = segment_and_velocity_norms(batch, fields)
        k_segments = batch.n_segments
        cosines = np.full(k_segments, np.nan)
        defined = np.zeros(k_segments, dtype=bool)
        for k in range(1, k_segments + 1):
            incr = batch.positions[k] - batch.positions[k - 1]
            avg_field = 0.5 * (fields[k] + fields[k - 1])
            v_bar = 0.5 * (v[k] + v[k - 1])
            if d[k - 1] > V_DEGENERATE and v_bar > V_DEGENERATE:
                num = (incr * avg_field).sum(dim=-1).mean()
                cosines[k - 1] = float(num / (d[k - 1] * v_bar))
                defined[k - 1] = True
        free_energy = np.array(
            [
                float(free_energy_estimate(batch.positions[k], batch.log_densities[k], spec))
                for k in range(k_segments + 1)
            ]
        )
    return PathDiagnostics(
        segment_lengths=d.numpy(),
        velocity_norms=v.numpy(),
        cosines=cosines,
        cosine_defined=defined,
        free_energy=free_energy,
    )
