"""birec: biplanar-guided longitudinal volume recovery.

Recovers a volumetric image at a follow-up time point from two calibrated
projections plus a previously acquired volume of the same subject, by
jointly fitting a population generative prior and a diffeomorphic
deformation of the prior volume. Ships a procedural head-and-neck phantom
suite, evaluation metrics, and a CLI covering cohort generation, prior
fitting, reconstruction, evaluation, and ablations.
"""

__version__ = "0.1.0"

from .deform import (
    DeformationField,
    RegisterConfig,
    VelocityField,
    integrate_velocity,
    jacobian_det,
    register,
    spatial_transform,
    warp,
)
from .errors import BirecError, DataError, GvolError, NumericalError, UsageError
from .generative import (
    GenerativePrior,
    LatentParams,
    fit_prior,
    load_prior,
    sample_latent,
    save_prior,
    synthesize,
)
from .metrics import dice, evaluate_case, psnr, rigid_error, rigid_register, ssim3d
from .phantom import (
    Case,
    LongitudinalChange,
    Phantom,
    PhantomParams,
    apply_longitudinal_change,
    generate_cohort,
    generate_phantom,
    load_case,
    make_case,
    sample_change,
)
from .projector import (
    Projection,
    ProjectionGeometry,
    backproject_average,
    default_biplanar,
    project,
    project_adjoint,
)
from .recon import (
    ReconConfig,
    ReconResult,
    projection_loss,
    reconstruct,
    run_variant,
)
from .volume import Grid3, Volume, normalize_hu, read_gvol, resample, write_gvol

__all__ = [
    "__version__",
    "BirecError",
    "Case",
    "DataError",
    "DeformationField",
    "GenerativePrior",
    "Grid3",
    "GvolError",
    "LatentParams",
    "LongitudinalChange",
    "NumericalError",
    "Phantom",
    "PhantomParams",
    "Projection",
    "ProjectionGeometry",
    "ReconConfig",
    "ReconResult",
    "RegisterConfig",
    "UsageError",
    "VelocityField",
    "Volume",
    "apply_longitudinal_change",
    "backproject_average",
    "default_biplanar",
    "dice",
    "evaluate_case",
    "fit_prior",
    "generate_cohort",
    "generate_phantom",
    "integrate_velocity",
    "jacobian_det",
    "load_case",
    "load_prior",
    "make_case",
    "normalize_hu",
    "project",
    "project_adjoint",
    "projection_loss",
    "psnr",
    "read_gvol",
    "reconstruct",
    "register",
    "resample",
    "rigid_error",
    "rigid_register",
    "run_variant",
    "sample_change",
    "sample_latent",
    "save_prior",
    "spatial_transform",
    "ssim3d",
    "synthesize",
    "warp",
    "write_gvol",
]
