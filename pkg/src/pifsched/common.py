"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

# Smallest cumulative signal kept at the end of a cosine chain
ALPHA_BAR_FLOOR = 1e-12

# Improved-DDPM per-step beta ceiling
BETA_CLIP = 0.999

# Suppression values down to this are measurement noise and clamp to zero
SUPPRESSION_NEGATIVE_TOLERANCE = -1e-6

# Root solver defaults
MORAN_TOLERANCE = 1e-11
BRACKET_CAP = 2.0 ** 16
SUPPRESSED_ROOT_CAP = 500.0
BISECTION_MAX_ITERATIONS = 400

# Power iteration defaults
POWER_TOLERANCE = 1e-9
POWER_MAX_ITERATIONS = 10_000

# Dense spectra are only computed for patches up to this dimension
FULL_SPECTRUM_MAX_DIM = 256

# Exact permutation p-values below this sample size, t approximation above
PERMUTATION_MAX_N = 9

# Significant digits of every number written to disk
FLOAT_DIGITS = 17

# Environment variable capping worker threads
THREADS_ENV = "PIFS_SCHED_THREADS"

CIFAR10_SHAPE = (32, 32, 3)
CIFAR10_RECORD_BYTES = 1 + 32 * 32 * 3

RAW_F32_MAGIC = b"PSPC"
RAW_F32_HEADER_BYTES = 16

GEOMETRY_HEADER = ("t", "alpha_bar_prev", "alpha_bar", "v", "b", "L_star", "snr", "logsnr")
CONTRACTION_HEADER = ("t", "f_at_lambda", "lambda_star", "L_star")
RELEASE_HEADER = ("patch", "lambda", "t_rel", "gamma_min", "gamma_max")
SUPPRESSION_HEADER = ("patch", "t", "S")
GAINS_HEADER = ("mu", "gain", "lyapunov")

# Reference schedules of `compare --presets`, as (name, construction) pairs
REFERENCE_PRESETS = (
    ("linear", {"kind": "linear", "T": 1000, "beta1": 1e-4, "betaT": 0.02}),
    ("cosine", {"kind": "cosine", "T": 1000, "offset": 0.0}),
    ("cosine-improved", {"kind": "cosine", "T": 1000, "offset": 0.008}),
    ("ddim50-cosine", {"kind": "cosine", "T": 1000, "offset": 0.0, "subsample": "stride:20"}),
)

SPECTRUM_PRESETS = (
    ("linear", {"kind": "linear", "T": 1000, "beta1": 1e-4, "betaT": 0.02}),
    ("cosine-improved", {"kind": "cosine", "T": 1000, "offset": 0.008}),
)
