"""Experiment configuration: strict schema, presets, canonical serialization.

A config file is YAML with a mandatory ``version`` field.  Unknown keys are
hard errors (reported with their field path) so that typos cannot silently
change an experiment.  Every built-in preset resolves to a complete config
that round-trips through :func:`canonical_dump` / :func:`parse_config`.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .energy import (
    CustomPotential,
    FreeEnergySpec,
    GaussianAttractionKernel,
    LogConfinement,
    QuadraticGaussianTarget,
    QuadraticLogKernel,
    StyblinskiTang,
    entropy_energy,
    power_law_energy,
)
from .flow import FlowModel, base_from_config
from .losses import (
    GeometricConfig,
    MeshKind,
    ParametrizationPenalty,
    PhysicalTimeConfig,
)
from .trainer import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Schema violation, reported with the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _require_mapping(obj, path):
    if not isinstance(obj, dict):
        raise ConfigError(path, f"expected a mapping, got {type(obj).__name__}")
    return obj


def _check_keys(obj: dict, allowed, path):
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(
            f"{path}.{sorted(unknown)[0]}", "unknown key (unknown keys are errors)"
        )


def _get(obj: dict, key, path, required=True, default=None):
    if key not in obj:
        if required:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    return obj[key]


@dataclass
class ExperimentConfig:
    """Parsed, validated experiment description."""

    name: str
    raw: Dict[str, Any]

    @property
    def dim(self) -> int:
        base = self.raw["base"]
        if base["kind"] == "standard_gaussian":
            return int(base["dim"])
        if base["kind"] == "gaussian_mixture":
            return len(base["means"][0])
        return len(base["lo"])

    @property
    def mode(self) -> str:
        return self.raw["train"].get("mode", "geometric")

    @property
    def output_dir(self) -> Optional[str]:
        return self.raw.get("output_dir")

    @property
    def validations(self) -> List[dict]:
        return self.raw.get("validations", [])

    def build_base(self):
        return base_from_config(self.raw["base"])

    def build_energy(self) -> FreeEnergySpec:
        e = self.raw["energy"]
        internal = None
        if e.get("internal") is not None:
            spec = e["internal"]
            beta = float(spec.get("beta", 1.0))
            if spec["kind"] == "entropy":
                internal = entropy_energy(beta)
            else:
                internal = power_law_energy(float(spec["exponent"]), beta)
        potential = None
        if e.get("potential") is not None:
            p = e["potential"]
            kind = p["kind"]
            if kind == "quadratic_gaussian":
                potential = QuadraticGaussianTarget(p["mean"], np.array(p["covariance"]))
            elif kind == "styblinski_tang":
                potential = StyblinskiTang(float(p.get("scale", 3.0 / 50.0)))
            elif kind == "log_confinement":
                potential = LogConfinement(float(p["alpha1"]), float(p["alpha2"]))
            elif kind == "zero":
                import torch

                potential = CustomPotential(
                    value_fn=lambda x: torch.zeros(x.shape[:-1], dtype=x.dtype),
                    gradient_fn=lambda x: torch.zeros_like(x),
                )
        kernel = None
        if e.get("kernel") is not None:
            k = e["kernel"]
            if k["kind"] == "quadratic_log":
                kernel = QuadraticLogKernel()
            else:
                kernel = GaussianAttractionKernel(
                    float(k.get("amplitude", 1.0 / math.pi)),
                    float(k.get("width", 1.0)),
                )
        return FreeEnergySpec(
            internal=internal,
            potential=potential,
            kernel=kernel,
            mass=float(e.get("mass", 1.0)),
        )

    def build_model(self) -> FlowModel:
        f = self.raw["flow"]
        return FlowModel(
            self.build_base(),
            n_layers=int(f["n_layers"]),
            coupling=f.get("coupling", "affine"),
            width=int(f.get("width", 64)),
            depth=int(f.get("depth", 2)),
            scale_cap=float(f.get("scale_cap", 3.0)),
            num_bins=int(f.get("num_bins", 8)),
            bound=float(f.get("bound", 6.0)),
        )

    def build_train_config(self, seed: Optional[int] = None) -> TrainConfig:
        t = self.raw["train"]
        physical = None
        if t.get("physical") is not None:
            p = t["physical"]
            physical = PhysicalTimeConfig(
                horizon=float(p["horizon"]),
                steps=int(p["steps"]),
                mesh=MeshKind(p.get("mesh", "uniform")),
                timestamps=p.get("timestamps"),
                weights=p.get("weights"),
            )
        geometric = None
        if t.get("geometric") is not None:
            g = t["geometric"]
            geometric = GeometricConfig(
                alpha_terminal=float(g.get("alpha_terminal", 2.0)),
                alpha_arc=float(g.get("alpha_arc", 1.0)),
                penalty=ParametrizationPenalty(g.get("penalty", "arc_length")),
            )
        return TrainConfig(
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            lr0=float(t.get("lr0", 8e-4)),
            decay=float(t.get("decay", 0.9999)),
            seed=int(seed if seed is not None else t.get("seed", 0)),
            mode=t.get("mode", "geometric"),
            physical=physical,
            geometric=geometric,
            detach_velocity=bool(t.get("detach_velocity", False)),
            grad_clip=float(t.get("grad_clip", 10.0)),
            checkpoint_every=t.get("checkpoint_every"),
            deterministic=bool(t.get("deterministic", True)),
            eval_batch_size=t.get("eval_batch_size"),
        )


_TOP_KEYS = {"version", "name", "energy", "base", "flow", "train", "validations", "output_dir"}
_ENERGY_KEYS = {"internal", "potential", "kernel", "mass"}
_INTERNAL_KEYS = {"kind", "beta", "exponent"}
_POTENTIAL_KEYS = {"kind", "mean", "covariance", "scale", "alpha1", "alpha2"}
_KERNEL_KEYS = {"kind", "amplitude", "width"}
_BASE_KEYS = {"kind", "dim", "weights", "means", "variance", "lo", "hi", "smoothing"}
_FLOW_KEYS = {"n_layers", "coupling", "width", "depth", "scale_cap", "num_bins", "bound"}
_TRAIN_KEYS = {
    "mode", "epochs", "batch_size", "lr0", "decay", "seed", "detach_velocity",
    "grad_clip", "checkpoint_every", "deterministic", "eval_batch_size",
    "physical", "geometric",
}
_PHYSICAL_KEYS = {"horizon", "steps", "mesh", "timestamps", "weights"}
_GEOMETRIC_KEYS = {"alpha_terminal", "alpha_arc", "penalty"}
_VALIDATION_KEYS = {
    "kind", "mean", "covariance", "mean_tol", "cov_tol", "shape", "r_inner",
    "r_outer", "max_radius_range", "min_mean_cosine", "max_cv", "slack",
    "n_samples", "seed",
}
_VALIDATION_KINDS = {
    "gaussian_target", "steady_state", "energy_decay", "cosine_alignment",
    "arc_uniformity", "arc_action_uniformity",
}


def _validate_schema(raw: dict):
    _require_mapping(raw, "<root>")
    _check_keys(raw, _TOP_KEYS, "<root>")
    version = _get(raw, "version", "<root>")
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {version!r}")
    _get(raw, "name", "<root>")

    energy = _require_mapping(_get(raw, "energy", "<root>"), "energy")
    _check_keys(energy, _ENERGY_KEYS, "energy")
    terms = 0
    if energy.get("internal") is not None:
        spec = _require_mapping(energy["internal"], "energy.internal")
        _check_keys(spec, _INTERNAL_KEYS, "energy.internal")
        kind = _get(spec, "kind", "energy.internal")
        if kind not in ("entropy", "power_law"):
            raise ConfigError("energy.internal.kind", f"unknown kind {kind!r}")
        if kind == "power_law":
            _get(spec, "exponent", "energy.internal")
        terms += 1
    if energy.get("potential") is not None:
        p = _require_mapping(energy["potential"], "energy.potential")
        _check_keys(p, _POTENTIAL_KEYS, "energy.potential")
        kind = _get(p, "kind", "energy.potential")
        if kind not in ("quadratic_gaussian", "styblinski_tang", "log_confinement", "zero"):
            raise ConfigError("energy.potential.kind", f"unknown kind {kind!r}")
        if kind == "quadratic_gaussian":
            _get(p, "mean", "energy.potential")
            _get(p, "covariance", "energy.potential")
        if kind == "log_confinement":
            _get(p, "alpha1", "energy.potential")
            _get(p, "alpha2", "energy.potential")
        terms += 1
    if energy.get("kernel") is not None:
        k = _require_mapping(energy["kernel"], "energy.kernel")
        _check_keys(k, _KERNEL_KEYS, "energy.kernel")
        kind = _get(k, "kind", "energy.kernel")
        if kind not in ("quadratic_log", "gaussian_attraction"):
            raise ConfigError("energy.kernel.kind", f"unknown kind {kind!r}")
        terms += 1
    if terms == 0:
        raise ConfigError("energy", "at least one energy term is required")

    base = _require_mapping(_get(raw, "base", "<root>"), "base")
    _check_keys(base, _BASE_KEYS, "base")
    kind = _get(base, "kind", "base")
    if kind == "standard_gaussian":
        _get(base, "dim", "base")
    elif kind == "gaussian_mixture":
        for key in ("weights", "means", "variance"):
            _get(base, key, "base")
    elif kind == "uniform_box":
        for key in ("lo", "hi"):
            _get(base, key, "base")
    else:
        raise ConfigError("base.kind", f"unknown kind {kind!r}")

    flow = _require_mapping(_get(raw, "flow", "<root>"), "flow")
    _check_keys(flow, _FLOW_KEYS, "flow")
    _get(flow, "n_layers", "flow")

    train = _require_mapping(_get(raw, "train", "<root>"), "train")
    _check_keys(train, _TRAIN_KEYS, "train")
    _get(train, "epochs", "train")
    _get(train, "batch_size", "train")
    mode = train.get("mode", "geometric")
    if mode not in ("geometric", "physical_time"):
        raise ConfigError("train.mode", f"unknown mode {mode!r}")
    if mode == "physical_time":
        p = _require_mapping(_get(train, "physical", "train"), "train.physical")
        _check_keys(p, _PHYSICAL_KEYS, "train.physical")
        _get(p, "horizon", "train.physical")
        _get(p, "steps", "train.physical")
    if train.get("geometric") is not None:
        g = _require_mapping(train["geometric"], "train.geometric")
        _check_keys(g, _GEOMETRIC_KEYS, "train.geometric")
        penalty = g.get("penalty", "arc_length")
        if penalty not in ("arc_length", "arc_action"):
            raise ConfigError("train.geometric.penalty", f"unknown penalty {penalty!r}")

    for i, check in enumerate(raw.get("validations") or []):
        path = f"validations[{i}]"
        _require_mapping(check, path)
        _check_keys(check, _VALIDATION_KEYS, path)
        kind = _get(check, "kind", path)
        if kind not in _VALIDATION_KINDS:
            raise ConfigError(f"{path}.kind", f"unknown validation kind {kind!r}")


def _check_dimensions(cfg: ExperimentConfig):
    """Cross-section dimension consistency, checked before any compute."""
    base = cfg.build_base()
    dim = base.dim
    e = cfg.raw["energy"]
    p = e.get("potential")
    if p and p["kind"] == "quadratic_gaussian" and len(p["mean"]) != dim:
        raise ConfigError(
            "energy.potential.mean", f"dimension {len(p['mean'])} != base dimension {dim}"
        )
    if cfg.mode == "physical_time":
        steps = int(cfg.raw["train"]["physical"]["steps"])
        if steps != int(cfg.raw["flow"]["n_layers"]):
            raise ConfigError(
                "train.physical.steps",
                f"time steps {steps} != flow.n_layers {cfg.raw['flow']['n_layers']}",
            )


def parse_config_dict(raw: dict) -> ExperimentConfig:
    _validate_schema(raw)
    cfg = ExperimentConfig(name=str(raw["name"]), raw=copy.deepcopy(raw))
    _check_dimensions(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return parse_config_dict(raw)


def canonical_dump(cfg: ExperimentConfig) -> str:
    """Byte-stable canonical YAML form (sorted keys, fixed style)."""
    return yaml.safe_dump(cfg.raw, sort_keys=True, default_flow_style=False)


# ---------------------------------------------------------------------------
# built-in presets
# ---------------------------------------------------------------------------


def _ou_preset(name, mean, covariance, dim, validations):
    return {
        "version": 1,
        "name": name,
        "energy": {
            "internal": {"kind": "entropy", "beta": 1.0},
            "potential": {
                "kind": "quadratic_gaussian",
                "mean": mean,
                "covariance": covariance,
            },
        },
        "base": {"kind": "standard_gaussian", "dim": dim},
        "flow": {"n_layers": 9, "coupling": "affine", "width": 128, "depth": 4},
        "train": {
            "mode": "geometric",
            "epochs": 1000,
            "batch_size": 5000,
            "lr0": 8.0e-4,
            "decay": 0.9999,
            "seed": 0,
        },
        "validations": validations,
    }


def _diag(values):
    n = len(values)
    return [[values[i] if i == j else 0.0 for j in range(n)] for i in range(n)]


def _block_cov_10d():
    cov = np.zeros((10, 10))
    cov[0:2, 0:2] = np.array([[5 / 8, -3 / 8], [-3 / 8, 5 / 8]])
    cov[2:4, 2:4] = np.eye(2)
    cov[4:6, 4:6] = np.diag([1.0, 0.25])
    cov[6:8, 6:8] = np.eye(2)
    cov[8:10, 8:10] = 0.25 * np.eye(2)
    return cov.tolist()


def builtin_presets() -> Dict[str, dict]:
    presets = {
        "ou2d-isotropic": _ou_preset(
            "ou2d-isotropic",
            [3.0, 3.0],
            _diag([0.25, 0.25]),
            2,
            [
                {
                    "kind": "gaussian_target",
                    "mean": [3.0, 3.0],
                    "covariance": _diag([0.25, 0.25]),
                    "mean_tol": 0.05,
                    "cov_tol": 0.05,
                },
                {"kind": "cosine_alignment", "min_mean_cosine": 0.95},
                {"kind": "arc_uniformity", "max_cv": 0.1},
                {"kind": "energy_decay"},
            ],
        ),
        "ou2d-anisotropic": _ou_preset(
            "ou2d-anisotropic",
            [3.0, 3.0],
            _diag([1.0, 0.25]),
            2,
            [
                {
                    "kind": "gaussian_target",
                    "mean": [3.0, 3.0],
                    "covariance": _diag([1.0, 0.25]),
                    "mean_tol": 0.05,
                    "cov_tol": 0.05,
                },
                {"kind": "energy_decay"},
            ],
        ),
        "ou10d-block": _ou_preset(
            "ou10d-block",
            [1.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0, 3.0],
            _block_cov_10d(),
            10,
            [
                {
                    "kind": "gaussian_target",
                    "mean": [1.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0, 3.0],
                    "covariance": _block_cov_10d(),
                    "mean_tol": 0.1,
                    "cov_tol": 0.15,
                },
                {"kind": "energy_decay"},
            ],
        ),
        "styblinski10d": {
            "version": 1,
            "name": "styblinski10d",
            "energy": {
                "internal": {"kind": "entropy", "beta": 1.0},
                "potential": {"kind": "styblinski_tang", "scale": 0.06},
            },
            "base": {"kind": "standard_gaussian", "dim": 10},
            "flow": {"n_layers": 9, "coupling": "spline", "width": 128, "depth": 4},
            "train": {
                "mode": "geometric",
                "epochs": 1000,
                "batch_size": 5000,
                "lr0": 8.0e-4,
                "decay": 0.9999,
                "seed": 0,
            },
            "validations": [{"kind": "energy_decay"}],
        },
        "aggregation": {
            "version": 1,
            "name": "aggregation",
            "energy": {"kernel": {"kind": "quadratic_log"}},
            "base": {
                "kind": "gaussian_mixture",
                "weights": [1.0],
                "means": [[0.0, 0.0]],
                "variance": 0.25,
            },
            "flow": {"n_layers": 7, "coupling": "spline", "width": 128, "depth": 4},
            "train": {
                "mode": "geometric",
                "epochs": 1000,
                "batch_size": 5000,
                "lr0": 8.0e-4,
                "decay": 0.9999,
                "seed": 0,
            },
            "validations": [
                {
                    "kind": "steady_state",
                    "shape": "unit_disk",
                    "max_radius_range": [0.95, 1.05],
                },
                {"kind": "energy_decay"},
            ],
        },
        "aggregation-drift": {
            "version": 1,
            "name": "aggregation-drift",
            "energy": {
                "potential": {"kind": "log_confinement", "alpha1": 1.0, "alpha2": 1.0},
                "kernel": {"kind": "quadratic_log"},
            },
            "base": {
                "kind": "gaussian_mixture",
                "weights": [0.2, 0.2, 0.2, 0.2, 0.2],
                "means": [
                    [1.2, 0.0],
                    [0.37, 1.14],
                    [-0.97, 0.71],
                    [-0.97, -0.71],
                    [0.37, -1.14],
                ],
                "variance": 0.04,
            },
            "flow": {"n_layers": 9, "coupling": "spline", "width": 128, "depth": 4},
            "train": {
                "mode": "geometric",
                "epochs": 1000,
                "batch_size": 5000,
                "lr0": 8.0e-4,
                "decay": 0.9999,
                "seed": 0,
            },
            "validations": [
                {
                    "kind": "steady_state",
                    "shape": "annulus",
                    "r_inner": 1.0,
                    "r_outer": 1.4142135623730951,
                },
                {"kind": "energy_decay"},
            ],
        },
        "aggregation-diffusion": {
            "version": 1,
            "name": "aggregation-diffusion",
            "energy": {
                "internal": {"kind": "power_law", "exponent": 2.0, "beta": 1.0},
                "kernel": {
                    "kind": "gaussian_attraction",
                    "amplitude": 0.3183098861837907,
                    "width": 1.0,
                },
                "mass": 9.0,
            },
            "base": {
                "kind": "uniform_box",
                "lo": [-3.0, -3.0],
                "hi": [3.0, 3.0],
                "smoothing": 0.05,
            },
            "flow": {"n_layers": 10, "coupling": "spline", "width": 128, "depth": 4},
            "train": {
                "mode": "geometric",
                "epochs": 1000,
                "batch_size": 5000,
                "lr0": 8.0e-4,
                "decay": 0.9999,
                "seed": 0,
                "geometric": {
                    "alpha_terminal": 2.0,
                    "alpha_arc": 1.0,
                    "penalty": "arc_action",
                },
            },
            "validations": [
                {"kind": "arc_action_uniformity", "max_cv": 0.25},
                {"kind": "energy_decay"},
            ],
        },
        "zero-energy": {
            "version": 1,
            "name": "zero-energy",
            "energy": {"potential": {"kind": "zero"}},
            "base": {"kind": "standard_gaussian", "dim": 2},
            "flow": {"n_layers": 3, "coupling": "affine", "width": 16, "depth": 2},
            "train": {
                "mode": "geometric",
                "epochs": 30,
                "batch_size": 256,
                "lr0": 1.0e-3,
                "decay": 0.9999,
                "seed": 0,
                "geometric": {"alpha_terminal": 0.0, "alpha_arc": 1.0},
            },
            "validations": [{"kind": "energy_decay"}],
        },
    }
    return presets


def resolve_config(name_or_path: str) -> ExperimentConfig:
    """Resolve a built-in preset name or load a config file."""
    presets = builtin_presets()
    if name_or_path in presets:
        return parse_config_dict(presets[name_or_path])
    return parse_config(name_or_path)
