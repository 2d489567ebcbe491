from ._version import __version__, __version_info__
from .channel import (
    ChannelGrid,
    ChannelRealization,
    apply_channel,
    gen_correlated_grid,
    gen_iid_gaussian,
    gen_kronecker,
    grid_correlation,
    load_grid,
    save_grid,
    sigma2_from_snr,
)
from .constellation import Constellation, hard_decision, make_constellation, sample_symbols, ser
from .denoiser import gaussian_denoise, gaussian_denoise_grad
from .detectors import (
    DetectionResult,
    DetectorProblem,
    amp_detect,
    detect,
    matched_filter_detect,
    ml_bruteforce,
    mmse_detect,
    oamp_detect,
    vblast_detect,
    zf_detect,
)
from .diagnostics import (
    anderson_statistic,
    condition_number,
    gaussian_fraction,
    layer_error_trace,
    multiplication_count,
)
from .exceptions import (
    CapacityError,
    ContractViolation,
    DegenerateSampleError,
    DivergenceError,
    FormatError,
    NumericalError,
    PyMimoException,
    RangeError,
    SingularMatrixError,
)
from .harness import SerReport, SweepConfig, run_sweep, snr_at_target
from .models import (
    FullParams,
    IidParams,
    OampNetParams,
    init_full_params,
    load_params,
    mmnet_forward,
    mmnet_iid_forward,
    oampnet_forward,
    save_params,
)
from .numerics import RngStream
from .storage_sqlitedict import StorageSqliteDict
from .trainer import TrainConfig, online_train_grid, train_offline_iid, train_on_channel


__all__ = [
    "__version__",
    "__version_info__",
    "CapacityError",
    "ChannelGrid",
    "ChannelRealization",
    "Constellation",
    "ContractViolation",
    "DegenerateSampleError",
    "DetectionResult",
    "DetectorProblem",
    "DivergenceError",
    "FormatError",
    "FullParams",
    "IidParams",
    "NumericalError",
    "OampNetParams",
    "PyMimoException",
    "RangeError",
    "RngStream",
    "SerReport",
    "SingularMatrixError",
    "StorageSqliteDict",
    "SweepConfig",
    "TrainConfig",
    "amp_detect",
    "anderson_statistic",
    "apply_channel",
    "condition_number",
    "detect",
    "gaussian_denoise",
    "gaussian_denoise_grad",
    "gaussian_fraction",
    "gen_correlated_grid",
    "gen_iid_gaussian",
    "gen_kronecker",
    "grid_correlation",
    "hard_decision",
    "init_full_params",
    "layer_error_trace",
    "load_grid",
    "load_params",
    "make_constellation",
    "matched_filter_detect",
    "ml_bruteforce",
    "mmnet_forward",
    "mmnet_iid_forward",
    "mmse_detect",
    "multiplication_count",
    "oamp_detect",
    "oampnet_forward",
    "online_train_grid",
    "run_sweep",
    "sample_symbols",
    "save_grid",
    "save_params",
    "ser",
    "sigma2_from_snr",
    "snr_at_target",
    "train_offline_iid",
    "train_on_channel",
    "vblast_detect",
    "zf_detect",
]
