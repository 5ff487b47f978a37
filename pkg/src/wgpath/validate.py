"""Post-training validation checks.

Each check consumes a trained model (or its saved diagnostics) and produces
a pass/fail record with the measured quantities, collected into a report
that is written alongside the other run artifacts.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np
import torch

from .flow import FlowModel
from .oracles import (
    GaussianState,
    SteadyStateSpec,
    fit_gaussian,
    gaussian_w2,
    steady_state_check,
)
from .velocity import PathDiagnostics


def _terminal_samples(model: FlowModel, n: int, seed: int) -> np.ndarray:
    gen = torch.Generator().manual_seed(seed)
    z = model.base.sample(n, generator=gen)
    with torch.no_grad():
        batch = model.push_forward(z)
    return batch.positions[-1].numpy()


def _cv(values: np.ndarray) -> float:
    mean = float(np.mean(values))
    if mean == 0.0:
        return 0.0
    return float(np.std(values) / abs(mean))


def check_gaussian_target(model, check: dict) -> dict:
    n = int(check.get("n_samples", 20000))
    samples = _terminal_samples(model, n, int(check.get("seed", 123)))
    fitted = fit_gaussian(samples)
    target = GaussianState(
        np.asarray(check["mean"], dtype=float),
        np.asarray(check["covariance"], dtype=float),
    )
    mean_err = float(np.max(np.abs(fitted.mean - target.mean)))
    cov_err = float(np.max(np.abs(fitted.covariance - target.covariance)))
    w2 = gaussian_w2(fitted, target)
    ok = mean_err <= float(check.get("mean_tol", 0.05)) and cov_err <= float(
        check.get("cov_tol", 0.05)
    )
    return {
        "kind": "gaussian_target",
        "passed": bool(ok),
        "mean_error": mean_err,
        "cov_error": cov_err,
        "w2_to_target": w2,
        "fitted_mean": fitted.mean.tolist(),
        "fitted_covariance": fitted.covariance.tolist(),
    }


def check_steady_state(model, check: dict) -> dict:
    n = int(check.get("n_samples", 20000))
    samples = _terminal_samples(model, n, int(check.get("seed", 123)))
    shape = check["shape"]
    if shape == "unit_disk":
        spec = SteadyStateSpec(kind="unit_disk", r_outer=1.0)
    else:
        spec = SteadyStateSpec(
            kind="annulus",
            r_inner=float(check["r_inner"]),
            r_outer=float(check["r_outer"]),
        )
    report = steady_state_check(samples, spec)
    ok = report.ks_statistic <= report.ks_critical_1pct
    rng = check.get("max_radius_range")
    if rng is not None:
        ok = ok and rng[0] <= report.max_radius <= rng[1]
    return {
        "kind": "steady_state",
        "passed": bool(ok),
        "ks_statistic": report.ks_statistic,
        "ks_critical_1pct": report.ks_critical_1pct,
        "max_radius": report.max_radius,
        "radius_quantiles": report.radius_quantiles,
    }


def check_energy_decay(diag: PathDiagnostics, check: dict) -> dict:
    f = np.asarray(diag.free_energy, dtype=float)
    slack = float(check.get("slack", 1e-6)) * max(1.0, float(np.abs(f).max()))
    increases = f[1:] - f[:-1]
    worst = float(increases.max()) if len(increases) else 0.0
    return {
        "kind": "energy_decay",
        "passed": bool(worst <= slack),
        "max_increase": worst,
        "free_energy": f.tolist(),
    }


def check_cosine_alignment(diag: PathDiagnostics, check: dict) -> dict:
    cosines = [
        c for c, ok in zip(diag.cosines, diag.cosine_defined) if ok
    ]
    mean_cos = float(np.mean(cosines)) if cosines else float("nan")
    threshold = float(check.get("min_mean_cosine", 0.95))
    return {
        "kind": "cosine_alignment",
        "passed": bool(cosines) and mean_cos >= threshold,
        "mean_cosine": mean_cos,
        "n_defined": len(cosines),
    }


def check_arc_uniformity(diag: PathDiagnostics, check: dict) -> dict:
    cv = _cv(np.asarray(diag.segment_lengths, dtype=float))
    return {
        "kind": "arc_uniformity",
        "passed": bool(cv <= float(check.get("max_cv", 0.1))),
        "cv_segment_lengths": cv,
    }


def check_arc_action_uniformity(diag: PathDiagnostics, check: dict) -> dict:
    f = np.asarray(diag.free_energy, dtype=float)
    cv = _cv(f[1:] - f[:-1])
    return {
        "kind": "arc_action_uniformity",
        "passed": bool(cv <= float(check.get("max_cv", 0.25))),
        "cv_energy_drops": cv,
    }


def run_validations(
    checks: List[dict],
    model: Optional[FlowModel] = None,
    diag: Optional[PathDiagnostics] = None,
) -> dict:
    """Run every configured check; the report passes iff all checks pass."""
    results = []
    for check in checks:
        kind = check["kind"]
        if kind == "gaussian_target":
            results.append(check_gaussian_target(model, check))
        elif kind == "steady_state":
            results.append(check_steady_state(model, check))
        elif kind == "energy_decay":
            results.append(check_energy_decay(diag, check))
        elif kind == "cosine_alignment":
            results.append(check_cosine_alignment(diag, check))
        elif kind == "arc_uniformity":
            results.append(check_arc_uniformity(diag, check))
        elif kind == "arc_action_uniformity":
            results.append(check_arc_action_uniformity(diag, check))
        else:
            raise ValueError(f"unknown validation kind {kind!r}")
    return {
        "passed": all(r["passed"] for r in results),
        "n_checks": len(results),
        "checks": results,
    }
