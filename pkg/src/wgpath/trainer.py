"""Stochastic training of the stacked transport map.

One "epoch" is one batch iteration: sample a fresh base batch, push it
through the path, evaluate the configured objective, and take an Adam step
with exponentially decaying learning rate.  Exact parameter gradients flow
through the velocity fields (including the score term) unless the frozen
force mode is requested, in which case the fields are treated as constants
within each iteration.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import torch

from .energy import FreeEnergySpec, free_energy_estimate
from .flow import FlowModel
from .losses import (
    GeometricConfig,
    ParametrizationPenalty,
    PhysicalTimeConfig,
    physical_time_loss,
    total_geometric_loss,
)
from .velocity import (
    PathDiagnostics,
    compute_diagnostics,
    path_velocities,
    segment_and_velocity_norms,
)

log = logging.getLogger(__name__)

GRAD_CLIP_DEFAULT = 10.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    lr0: float = 8e-4
    decay: float = 0.9999
    seed: int = 0
    mode: str = "geometric"  # or "physical_time"
    physical: Optional[PhysicalTimeConfig] = None
    geometric: Optional[GeometricConfig] = None
    detach_velocity: bool = False
    grad_clip: float = GRAD_CLIP_DEFAULT
    checkpoint_every: Optional[int] = None
    deterministic: bool = True
    eval_batch_size: Optional[int] = None  # diagnostics batch, defaults to batch_size

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay factor must lie in (0, 1]")
        if self.mode == "physical_time":
            if self.physical is None:
                raise ValueError("physical-time mode needs a PhysicalTimeConfig")
        elif self.mode == "geometric":
            if self.geometric is None:
                self.geometric = GeometricConfig()
        else:
            raise ValueError(f"unknown training mode: {self.mode}")


@dataclass
class TrainReport:
    loss_history: List[dict]
    wall_time: float
    final_diagnostics: Optional[PathDiagnostics]
    checkpoint_path: Optional[str]
    clipped_iterations: int = 0
    aborted: bool = False

    def history_to_csv(self, path):
        if not self.loss_history:
            return
        keys = list(self.loss_history[0].keys())
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys)
            for row in self.loss_history:
                writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])


def _loss_and_parts(model, batch, spec, cfg: TrainConfig):
    fields = path_velocities(
        model,
        batch,
        spec,
        create_graph=not cfg.detach_velocity,
        detach=cfg.detach_velocity,
    )
    if cfg.mode == "physical_time":
        total = physical_time_loss(batch, fields, cfg.physical)
        parts = {"J": float(total.detach())}
        return total, parts
    d, v = segment_and_velocity_norms(batch, fields)
    k = batch.n_segments
    terminal = free_energy_estimate(batch.positions[k], batch.log_densities[k], spec)
    profile = None
    if cfg.geometric.penalty is ParametrizationPenalty.ARC_ACTION:
        profile = torch.stack(
            [
                free_energy_estimate(batch.positions[j], batch.log_densities[j], spec)
                for j in range(k + 1)
            ]
        )
    loss_parts = total_geometric_loss(d, v, terminal, cfg.geometric, profile)
    parts = {
        "J": float(loss_parts.arc.detach()),
        "F_terminal": float(loss_parts.terminal.detach()),
        "arc_penalty": float(loss_parts.penalty.detach()),
    }
    return loss_parts.total, parts


def train(
    model: FlowModel,
    spec: FreeEnergySpec,
    cfg: TrainConfig,
    output_dir: Optional[str] = None,
) -> TrainReport:
    """Optimize the model parameters against the configured path objective."""
    if spec.kernel is not None and cfg.batch_size < 2:
        raise ValueError("interaction energies need a batch of at least 2 particles")
    if cfg.deterministic:
        torch.set_num_threads(1)

    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr0, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=cfg.decay)

    out_dir = Path(output_dir) if output_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = None

    history: List[dict] = []
    clipped = 0
    aborted = False
    last_good = model.flat_parameters().clone()
    start = time.perf_counter()

    for it in range(cfg.epochs):
        z = model.base.sample(cfg.batch_size, generator=generator)
        batch = model.push_forward(z)
        total, parts = _loss_and_parts(model, batch, spec, cfg)
        if not torch.isfinite(total):
            log.error("non-finite loss at iteration %d; restoring last parameters", it)
            model.set_flat_parameters(last_good)
            aborted = True
            break

        optimizer.zero_grad()
        total.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        if not torch.isfinite(grad_norm):
            log.error("non-finite gradient at iteration %d; restoring last parameters", it)
            model.set_flat_parameters(last_good)
            aborted = True
            break
        if grad_norm > cfg.grad_clip:
            clipped += 1
            log.warning(
                "gradient norm %.3g clipped to %.3g at iteration %d",
                float(grad_norm), cfg.grad_clip, it,
            )
        last_good = model.flat_parameters().clone()
        optimizer.step()
        scheduler.step()

        row = {"iter": it, **parts, "total": float(total.detach())}
        history.append(row)

        if (
            out_dir is not None
            and cfg.checkpoint_every
            and (it + 1) % cfg.checkpoint_every == 0
        ):
            checkpoint_path = str(out_dir / "checkpoint.json")
            model.save_checkpoint(checkpoint_path, metadata={"iteration": it + 1})

    wall = time.perf_counter() - start

    final_diag = None
    if not aborted:
        n_eval = cfg.eval_batch_size or cfg.batch_size
        z_eval = model.base.sample(n_eval, generator=generator)
        with torch.no_grad():
            batch = model.push_forward(z_eval)
        fields = path_velocities(model, batch, spec, detach=True)
        final_diag = compute_diagnostics(batch, fields, spec)

    if out_dir is not None:
        checkpoint_path = str(out_dir / "checkpoint.json")
        model.save_checkpoint(
            checkpoint_path, metadata={"iteration": len(history), "mode": cfg.mode}
        )
        report_csv = out_dir / "training_log.csv"
        report = TrainReport(
            loss_history=history,
            wall_time=wall,
            final_diagnostics=final_diag,
            checkpoint_path=checkpoint_path,
            clipped_iterations=clipped,
            aborted=aborted,
        )
        report.history_to_csv(report_csv)
        return report

    return TrainReport(
        loss_history=history,
        wall_time=wall,
        final_diagnostics=final_diag,
        checkpoint_path=checkpoint_path,
        clipped_iterations=clipped,
        aborted=aborted,
    )
