"""Training-data-free deformable registration with a per-pair neural correspondence field."""

from .engine import RegistrationResult, RunConfig, export_field, import_field, register_pair, warp_image
from .estimator import NCFRegistration
from .losses import LossWeights, occupancy_loss, photometric_loss, ssim_loss, total_loss
from .metrics import dice, endpoint_error, gen_synthetic_case, jacobian_folding, tre
from .model import ModelConfig, count_params, init_params, ncf_forward
from .volume import Volume, VectorField, load_volume, make_grid, normalize_intensity, save_volume

__version__ = "0.1.0"

__all__ = [
    "LossWeights",
    "ModelConfig",
    "NCFRegistration",
    "RegistrationResult",
    "RunConfig",
    "Volume",
    "VectorField",
    "count_params",
    "dice",
    "endpoint_error",
    "export_field",
    "gen_synthetic_case",
    "import_field",
    "init_params",
    "jacobian_folding",
    "load_volume",
    "make_grid",
    "ncf_forward",
    "normalize_intensity",
    "occupancy_loss",
    "photometric_loss",
    "register_pair",
    "save_volume",
    "ssim_loss",
    "total_loss",
    "tre",
    "warp_image",
]
