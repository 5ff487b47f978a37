"""Command-line experiment runner.

``wgpath run`` executes a full pipeline (train, diagnose, recover time,
validate) from a YAML config or a built-in preset name and writes all
artifacts into a self-contained run directory.  The other subcommands
operate on such a directory after the fact.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .config import ExperimentConfig, canonical_dump, parse_config, resolve_config
from .flow import FlowModel
from .losses import (
    MeshKind,
    PhysicalTimeConfig,
    cumulative_physical_time_loss,
)
from .timeline import export_mesh, recover_time
from .trainer import TrainConfig, train
from .validate import run_validations
from .velocity import compute_diagnostics, path_velocities

EVAL_SEED = 123


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _apply_thread_env():
    threads = os.environ.get("WGPATH_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))


def _diagnose(model: FlowModel, spec, n: int, seed: int = EVAL_SEED):
    gen = torch.Generator().manual_seed(seed)
    z = model.base.sample(n, generator=gen)
    with torch.no_grad():
        batch = model.push_forward(z)
    fields = path_velocities(model, batch, spec, detach=True)
    return batch, fields, compute_diagnostics(batch, fields, spec)


def _write_layer_scatter(path, batch, n_keep: int = 2000):
    positions = batch.positions
    n = min(n_keep, positions.shape[1])
    dim = positions.shape[-1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "particle"] + [f"x{j}" for j in range(dim)])
        for k in range(positions.shape[0]):
            block = positions[k, :n].numpy()
            for i in range(n):
                writer.writerow([k, i] + [_fmt(v) for v in block[i]])


def _write_density_grid(path, model, n_grid: int = 80, half_width: float = 4.0):
    axis = torch.linspace(-half_width, half_width, n_grid, dtype=torch.float64)
    gx, gy = torch.meshgrid(axis, axis, indexing="ij")
    pts = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
    with torch.no_grad():
        log_p = model.log_density(len(model.layers), pts)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x0", "x1", "log_density"])
        for (x0, x1), lp in zip(pts.numpy(), log_p.numpy()):
            writer.writerow([_fmt(x0), _fmt(x1), _fmt(lp)])


def _write_energy_curve(path, diag, times):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "time", "free_energy"])
        for k, f in enumerate(diag.free_energy):
            t = times[k] if k < len(times) else float("nan")
            writer.writerow([k, _fmt(t), _fmt(f)])


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def _load_run_dir(run_dir: str):
    run_dir = Path(run_dir)
    cfg = parse_config(run_dir / "config.yaml")
    model, meta = FlowModel.load_checkpoint(str(run_dir / "checkpoint.json"))
    return run_dir, cfg, model, meta


def _eval_batch_size(cfg: ExperimentConfig) -> int:
    return int(cfg.raw["train"]["batch_size"])


def run_experiment(cfg: ExperimentConfig, seed=None, out=None) -> int:
    """Train, diagnose, recover time, validate; return the exit status."""
    _apply_thread_env()
    out_dir = Path(out or cfg.output_dir or f"runs/{cfg.name}")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.yaml", "w") as fh:
        fh.write(canonical_dump(cfg))

    spec = cfg.build_energy()
    train_cfg = cfg.build_train_config(seed=seed)
    torch.manual_seed(train_cfg.seed)
    model = cfg.build_model()

    try:
        report = train(model, spec, train_cfg, output_dir=str(out_dir))
    except Exception as err:
        click.echo(f"training aborted: {err}", err=True)
        return 2
    if report.aborted:
        click.echo("training aborted; last good checkpoint kept", err=True)
        return 2

    batch, fields, diag = _diagnose(model, spec, _eval_batch_size(cfg))
    diag.to_csv(out_dir / "diagnostics.csv")
    _write_layer_scatter(out_dir / "layer_scatter.csv", batch)
    if cfg.dim == 2:
        _write_density_grid(out_dir / "density_grid.csv", model)

    try:
        tl = recover_time(diag, diag.free_energy[0], diag.free_energy[-1])
        tl.to_json(out_dir / "timeline.json")
        times = tl.t
    except ValueError as err:
        # flat or ascending energy profile: no physical clock exists
        _write_json(out_dir / "timeline.json", {"error": str(err)})
        times = []
    _write_energy_curve(out_dir / "energy_curve.csv", diag, times)

    validation = run_validations(cfg.validations, model=model, diag=diag)
    _write_json(out_dir / "validation_report.json", validation)

    status = "passed" if validation["passed"] else "FAILED"
    click.echo(f"run {cfg.name}: validation {status}, artifacts in {out_dir}")
    return 0 if validation["passed"] else 1


@click.group()
def main():
    """Mesh-free Wasserstein gradient-flow path solver."""


@main.command("run")
@click.argument("config")
@click.option("--seed", type=int, default=None, help="Override the training seed.")
@click.option("--out", type=click.Path(), default=None, help="Artifact directory.")
def run_cmd(config, seed, out):
    """Run an experiment from a config file or built-in preset name."""
    cfg = resolve_config(config)
    sys.exit(run_experiment(cfg, seed=seed, out=out))


@main.command("validate-only")
@click.argument("run_dir", type=click.Path(exists=True))
def validate_only_cmd(run_dir):
    """Re-run the validation checks of a completed run without training."""
    _apply_thread_env()
    run_dir, cfg, model, _ = _load_run_dir(run_dir)
    spec = cfg.build_energy()
    _, _, diag = _diagnose(model, spec, _eval_batch_size(cfg))
    validation = run_validations(cfg.validations, model=model, diag=diag)
    _write_json(run_dir / "validation_report.json", validation)
    click.echo(
        f"validation {'passed' if validation['passed'] else 'FAILED'} "
        f"({validation['n_checks']} checks)"
    )
    sys.exit(0 if validation["passed"] else 1)


@main.command("recover-time")
@click.argument("run_dir", type=click.Path(exists=True))
def recover_time_cmd(run_dir):
    """Recompute the physical timeline of a completed run."""
    _apply_thread_env()
    run_dir, cfg, model, _ = _load_run_dir(run_dir)
    spec = cfg.build_energy()
    _, _, diag = _diagnose(model, spec, _eval_batch_size(cfg))
    tl = recover_time(diag, diag.free_energy[0], diag.free_energy[-1])
    tl.to_json(run_dir / "timeline.json")
    click.echo(f"timeline written: c={_fmt(tl.c)}, censored={tl.censored}")
    sys.exit(0)


def compare_meshes(run_dir) -> dict:
    """Train uniform-mesh vs recovered-mesh physical-time models from one init.

    Both runs share the architecture, initialization seed, and training
    budget of the original geometric run; only the time mesh differs.
    Returns the per-layer cumulative Crank-Nicolson losses of both.
    """
    run_dir, cfg, model, meta = _load_run_dir(run_dir)
    if meta.get("mode") != "geometric":
        raise ValueError("compare-meshes requires a geometric-mode checkpoint")
    spec = cfg.build_energy()
    _, _, diag = _diagnose(model, spec, _eval_batch_size(cfg))
    tl = recover_time(diag, diag.free_energy[0], diag.free_energy[-1])
    recovered = export_mesh(tl)
    uniform = PhysicalTimeConfig(
        horizon=recovered.horizon, steps=recovered.steps, mesh=MeshKind.UNIFORM
    )

    base_train = cfg.raw["train"]
    results = {}
    for label, mesh_cfg in (("uniform", uniform), ("recovered", recovered)):
        torch.manual_seed(int(base_train.get("seed", 0)))
        fresh = cfg.build_model()
        tc = TrainConfig(
            epochs=int(base_train["epochs"]),
            batch_size=int(base_train["batch_size"]),
            lr0=float(base_train.get("lr0", 8e-4)),
            decay=float(base_train.get("decay", 0.9999)),
            seed=int(base_train.get("seed", 0)),
            mode="physical_time",
            physical=mesh_cfg,
        )
        train(fresh, spec, tc)
        gen = torch.Generator().manual_seed(EVAL_SEED)
        z = fresh.base.sample(_eval_batch_size(cfg), generator=gen)
        with torch.no_grad():
            batch = fresh.push_forward(z)
        fields = path_velocities(fresh, batch, spec, detach=True)
        results[label] = cumulative_physical_time_loss(batch, fields, mesh_cfg)

    payload = {
        "horizon": recovered.horizon,
        "steps": recovered.steps,
        "recovered_timestamps": list(recovered.timestamps),
        "cumulative_loss_uniform": results["uniform"],
        "cumulative_loss_recovered": results["recovered"],
    }
    _write_json(run_dir / "mesh_comparison.json", payload)
    return payload


@main.command("compare-meshes")
@click.argument("run_dir", type=click.Path(exists=True))
def compare_meshes_cmd(run_dir):
    """Compare uniform vs recovered time meshes under physical-time training."""
    _apply_thread_env()
    payload = compare_meshes(run_dir)
    u = payload["cumulative_loss_uniform"][-1]
    r = payload["cumulative_loss_recovered"][-1]
    click.echo(f"total CN loss: uniform={_fmt(u)}, recovered={_fmt(r)}")
    sys.exit(0)


if __name__ == "__main__":
    main()
