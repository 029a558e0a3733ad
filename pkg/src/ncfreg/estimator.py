from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .engine import RunConfig, register_pair, warp_image
from .metrics import dice
from .validation import check_pair, check_volume


class NCFRegistration(TransformerMixin, BaseEstimator):
    """Deformable registration by fitting a small network to one image pair.

    ``fit(fixed, moving)`` optimizes a fresh coordinate MLP and smoothing CNN
    for that pair alone; no weights carry over between calls. ``transform``
    then resamples any image that lives on the moving grid (the moving image
    itself, a label mask, a dose map) onto the fixed grid.

    Parameters
    ----------
    iterations : int, default=300
        Full-volume optimizer steps.
    lr0, lr1 : float, default=1e-3, 1e-6
        Start and end of the cosine learning-rate schedule.
    alpha, beta, gamma : float, default=1, 1, 0.1
        Weights of the photometric, SSIM and occupancy terms.
    hidden_width : int, default=128
        Width of the four hidden layers of the coordinate MLP.
    sm_channels : int, default=16
        Hidden channels of the smoothing CNN.
    activation_slope : float, default=0.01
        Negative slope of the leaky ReLU activations.
    fourier_features : int, default=0
        Sin/cos frequency bands appended to the input coordinates.
    seed : int, default=0
        Seed of the weight initialization.
    hu_window : tuple of float, default=(-1000, 1000)
        Intensity window for images in Hounsfield units.
    ssim_window : int, default=7
    ssim_sigma : float, default=1.5
    deterministic : bool, default=False
        Pin BLAS to one thread so repeated fits are bit-identical.
    log_every : int, default=50
    precision : {"float32", "float64"}, default="float32"

    Attributes
    ----------
    offset_ : VectorField
        Voxel displacement from each fixed voxel into the moving image.
    warped_ : Volume
        The moving image resampled onto the fixed grid.
    loss_history_ : list of dict
        One record per step with keys step, lr, total, photometric, ssim,
        occupancy.
    n_params_ : int
        Trainable parameter count.
    """

    def __init__(self, iterations=300, lr0=1e-3, lr1=1e-6, alpha=1.0, beta=1.0, gamma=0.1,
                 hidden_width=128, sm_channels=16, activation_slope=0.01, fourier_features=0,
                 seed=0, hu_window=(-1000.0, 1000.0), ssim_window=7, ssim_sigma=1.5,
                 deterministic=False, log_every=50, precision="float32"):
        self.iterations = iterations
        self.lr0 = lr0
        self.lr1 = lr1
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.hidden_width = hidden_width
        self.sm_channels = sm_channels
        self.activation_slope = activation_slope
        self.fourier_features = fourier_features
        self.seed = seed
        self.hu_window = hu_window
        self.ssim_window = ssim_window
        self.ssim_sigma = ssim_sigma
        self.deterministic = deterministic
        self.log_every = log_every
        self.precision = precision

    def run_config(self):
        return RunConfig(**self.get_params())

    def fit(self, X, y):
        """Register moving image ``y`` to fixed image ``X``.

        Both may be :class:`~ncfreg.volume.Volume` objects or 3D arrays of the
        same shape.
        """
        fixed, moving = check_pair(X, y)
        result = register_pair(fixed, moving, self.run_config())
        self.offset_ = result.offset
        self.warped_ = result.warped
        self.loss_history_ = result.loss_history
        self.n_params_ = result.n_params
        self.wall_time_ = result.wall_time
        self.params_ = result.params
        self.fixed_shape_ = fixed.shape
        return self

    def transform(self, X, interp="linear"):
        """Warp an image defined on the moving grid onto the fixed grid."""
        check_is_fitted(self, "offset_")
        vol = check_volume(X, "X")
        out = warp_image(vol, self.offset_, interp)
        return out if X is vol else out.data

    def fit_transform(self, X, y=None, **fit_params):
        if y is None:
            raise ValueError("NCFRegistration.fit_transform needs the moving image as y")
        return self.fit(X, y, **fit_params).transform(y)

    def score(self, X, y):
        """Dice between fixed mask ``X`` and moving mask ``y`` after warping."""
        warped = self.transform(check_volume(y, "y", "label"), interp="nearest")
        return dice(check_volume(X, "X", "label"), warped)
