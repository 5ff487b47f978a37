"""Scikit-learn style facade over the flow model and trainer.

``WassersteinPathTransformer`` wraps model construction, training, and the
forward/inverse transport maps behind the familiar estimator interface
(``fit`` / ``transform`` / ``get_params``), so the solver can sit inside
standard tooling.  The functional API in the other modules remains the
primary surface for research use.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .energy import FreeEnergySpec
from .flow import FlowModel, base_from_config
from .losses import GeometricConfig, ParametrizationPenalty, PhysicalTimeConfig
from .trainer import TrainConfig, train
from .velocity import compute_diagnostics, path_velocities


class WassersteinPathTransformer(TransformerMixin, BaseEstimator):
    """Learn a stacked invertible transport path descending a free energy.

    Parameters
    ----------
    energy : FreeEnergySpec
        The free-energy functional driving the descent.
    base : dict
        Base distribution config (see ``flow.base_from_config``).
    n_layers : int
        Number of stacked invertible layers (path segments).
    coupling : {'affine', 'spline'}
        Coupling-layer family.
    mode : {'geometric', 'physical_time'}
        Training objective.
    horizon, steps : float, int
        Time mesh for physical-time mode; ignored otherwise.
    alpha_terminal, alpha_arc, penalty
        Geometric-objective weights; ignored in physical-time mode.

    Attributes
    ----------
    model_ : FlowModel
        The trained flow (set by ``fit``).
    report_ : TrainReport
        Loss history and final diagnostics.
    """

    def __init__(
        self,
        energy: FreeEnergySpec,
        base: dict,
        n_layers: int = 9,
        coupling: str = "affine",
        width: int = 64,
        depth: int = 2,
        mode: str = "geometric",
        epochs: int = 200,
        batch_size: int = 512,
        lr0: float = 8e-4,
        decay: float = 0.9999,
        seed: int = 0,
        alpha_terminal: float = 2.0,
        alpha_arc: float = 1.0,
        penalty: str = "arc_length",
        horizon: float = 1.0,
        steps: Optional[int] = None,
        detach_velocity: bool = False,
    ):
        self.energy = energy
        self.base = base
        self.n_layers = n_layers
        self.coupling = coupling
        self.width = width
        self.depth = depth
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.decay = decay
        self.seed = seed
        self.alpha_terminal = alpha_terminal
        self.alpha_arc = alpha_arc
        self.penalty = penalty
        self.horizon = horizon
        self.steps = steps
        self.detach_velocity = detach_velocity

    def _train_config(self) -> TrainConfig:
        physical = None
        geometric = None
        if self.mode == "physical_time":
            physical = PhysicalTimeConfig(
                horizon=self.horizon, steps=self.steps or self.n_layers
            )
        else:
            geometric = GeometricConfig(
                alpha_terminal=self.alpha_terminal,
                alpha_arc=self.alpha_arc,
                penalty=ParametrizationPenalty(self.penalty),
            )
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr0=self.lr0,
            decay=self.decay,
            seed=self.seed,
            mode=self.mode,
            physical=physical,
            geometric=geometric,
            detach_velocity=self.detach_velocity,
        )

    def fit(self, X=None, y=None):
        """Train the transport path; ``X`` is ignored (the source is the base)."""
        torch.manual_seed(self.seed)
        self.model_ = FlowModel(
            base_from_config(self.base),
            n_layers=self.n_layers,
            coupling=self.coupling,
            width=self.width,
            depth=self.depth,
        )
        self.report_ = train(self.model_, self.energy, self._train_config())
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before using the transformer")

    def _as_tensor(self, X):
        return torch.as_tensor(np.asarray(X), dtype=torch.float64)

    def transform(self, X) -> np.ndarray:
        """Push samples of the base distribution to the terminal distribution."""
        self._check_fitted()
        with torch.no_grad():
            batch = self.model_.push_forward(self._as_tensor(X))
        return batch.positions[-1].numpy()

    def inverse_transform(self, X) -> np.ndarray:
        """Pull terminal-distribution samples back to the base distribution."""
        self._check_fitted()
        with torch.no_grad():
            z = self.model_.inverse(len(self.model_.layers), self._as_tensor(X))
        return z.numpy()

    def sample(self, n: int, random_state: int = 0) -> np.ndarray:
        """Draw samples from the learned terminal distribution."""
        self._check_fitted()
        gen = torch.Generator().manual_seed(random_state)
        z = self.model_.base.sample(n, generator=gen)
        return self.transform(z)

    def score_samples(self, X) -> np.ndarray:
        """Exact terminal log-densities at the given points."""
        self._check_fitted()
        with torch.no_grad():
            lp = self.model_.log_density(len(self.model_.layers), self._as_tensor(X))
        return lp.numpy()

    def path_diagnostics(self, n: int = 2000, random_state: int = 123):
        """Segment lengths, velocity norms, cosines, and free energies."""
        self._check_fitted()
        gen = torch.Generator().manual_seed(random_state)
        z = self.model_.base.sample(n, generator=gen)
        with torch.no_grad():
            batch = self.model_.push_forward(z)
        fields = path_velocities(self.model_, batch, self.energy, detach=True)
        return compute_diagnostics(batch, fields, self.energy)
