"""Physical-time recovery from a geometrically parameterized path.

A trained geometric path hides the clock.  Along an (approximately)
constant-speed descent the time lapse per unit curve parameter is inversely
proportional to the driving-force magnitude, and the speed constant follows
from the total free-energy drop.  This module turns per-layer velocity norms
and boundary energies into physical timestamps, and exports the resulting
non-uniform mesh for reuse by the physical-time loss.

The terminal segment of a path that truly reaches equilibrium takes infinite
physical time; when the terminal velocity norm falls below a floor the
segment is reported as right-censored rather than as a huge finite number.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .losses import MeshKind, PhysicalTimeConfig
from .velocity import PathDiagnostics

V_FLOOR = 1e-8


@dataclass
class RecoveredTimeline:
    """Physical timestamps recovered from a geometric path."""

    c: float  # Wasserstein path length per unit curve parameter
    t: np.ndarray  # (K+1,) timestamps, t[0] = 0; censored entries are inf
    dt: np.ndarray  # (K,) segment durations; censored entries are inf
    f_initial: float
    f_terminal: float
    censored: bool

    @property
    def n_segments(self):
        return len(self.dt)

    def to_json(self, path):
        payload = {
            "c": self.c,
            "t": [None if math.isinf(v) else v for v in self.t.tolist()],
            "dt": [None if math.isinf(v) else v for v in self.dt.tolist()],
            "f_initial": self.f_initial,
            "f_terminal": self.f_terminal,
            "censored": self.censored,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        t = np.array([math.inf if v is None else v for v in payload["t"]])
        dt = np.array([math.inf if v is None else v for v in payload["dt"]])
        return cls(
            c=payload["c"],
            t=t,
            dt=dt,
            f_initial=payload["f_initial"],
            f_terminal=payload["f_terminal"],
            censored=payload["censored"],
        )


def recover_time(
    diag: PathDiagnostics, f_initial: float, f_terminal: float, v_floor: float = V_FLOOR
) -> RecoveredTimeline:
    """Recover physical timestamps from path diagnostics.

    The speed constant is c = (F_0 - F_K) / sum_k (v_{k-1}+v_k)/2 * dtau with
    dtau = 1/K, and each duration follows the midpoint rule
    dt_k = c dtau / 2 * (1/v_{k-1} + 1/v_k).  Segments touching a velocity
    norm at or below ``v_floor`` are right-censored (duration = inf).
    """
    if f_initial <= f_terminal:
        raise ValueError("not a descent path: initial free energy must exceed terminal")
    v = np.asarray(diag.velocity_norms, dtype=float)
    k_segments = diag.n_segments
    dtau = 1.0 / k_segments
    denom = float(np.sum(0.5 * (v[:-1] + v[1:]) * dtau))
    if denom <= 0:
        raise ValueError("velocity norms are degenerate; cannot recover time")
    c = (f_initial - f_terminal) / denom

    dt = np.empty(k_segments)
    censored = False
    for k in range(1, k_segments + 1):
        if v[k - 1] <= v_floor or v[k] <= v_floor:
            dt[k - 1] = math.inf
            censored = True
        else:
            dt[k - 1] = 0.5 * c * dtau * (1.0 / v[k - 1] + 1.0 / v[k])
    t = np.concatenate([[0.0], np.cumsum(dt)])
    return RecoveredTimeline(
        c=c, t=t, dt=dt, f_initial=f_initial, f_terminal=f_terminal, censored=censored
    )


def export_mesh(tl: RecoveredTimeline) -> PhysicalTimeConfig:
    """Turn a recovered timeline into an explicit time mesh.

    A censored terminal segment is truncated by reusing the last finite
    duration, so the mesh stays strictly increasing and finite.
    """
    dt = tl.dt.copy()
    if np.isinf(dt).any():
        finite = dt[np.isfinite(dt)]
        if finite.size == 0:
            raise ValueError("every segment is censored; no usable mesh")
        dt[np.isinf(dt)] = finite[-1]
    t = np.concatenate([[0.0], np.cumsum(dt)])
    return PhysicalTimeConfig(
        horizon=float(t[-1]),
        steps=tl.n_segments,
        mesh=MeshKind.EXPLICIT,
        timestamps=[float(v) for v in t],
    )
