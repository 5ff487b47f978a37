"""Mesh-free computation of Wasserstein gradient-flow paths.

The package trains one stacked invertible transport map against either a
physical-time path loss or a reparametrization-invariant geometric loss,
then recovers the physical-time parametrization as post-processing.
"""

from .energy import (
    CustomKernel,
    CustomPotential,
    FreeEnergySpec,
    GaussianAttractionKernel,
    InternalEnergyKind,
    InternalEnergySpec,
    LogConfinement,
    QuadraticGaussianTarget,
    QuadraticLogKernel,
    StyblinskiTang,
    entropy_energy,
    free_energy_estimate,
    internal_velocity_term,
    kernel_gradient,
    potential_gradient,
    power_law_energy,
)
from .flow import (
    FlowModel,
    GaussianMixture,
    PathBatch,
    StandardGaussian,
    UniformBox,
)
from .losses import (
    GeometricConfig,
    MeshKind,
    ParametrizationPenalty,
    PhysicalTimeConfig,
    arc_action_penalty,
    arc_length_penalty,
    geometric_loss,
    physical_time_loss,
    total_geometric_loss,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    builtin_presets,
    canonical_dump,
    parse_config,
    parse_config_dict,
    resolve_config,
)
from .estimator import WassersteinPathTransformer
from .timeline import RecoveredTimeline, export_mesh, recover_time
from .trainer import TrainConfig, TrainReport, train
from .validate import run_validations
from .velocity import (
    PathDiagnostics,
    compute_diagnostics,
    empirical_velocity,
    path_velocities,
    segment_and_velocity_norms,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
