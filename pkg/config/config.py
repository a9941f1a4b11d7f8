"""Configuration settings for geodecomp."""
import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env from config folder (for local overrides)
env_path = Path(__file__).parent / ".env"
load_dotenv(env_path)


def get_setting(key: str, default: str = "") -> str:
    """Get a setting from the environment, falling back to the default."""
    value = os.getenv(key)
    if value is None or value.strip() == "":
        return default
    return value.strip()


# Runtime settings
THREADS = max(1, int(get_setting("GEODECOMP_THREADS", str(os.cpu_count() or 1))))
LOG_LEVEL = get_setting("GEODECOMP_LOG_LEVEL", "WARNING").upper()
DEFAULT_CURVATURE = float(get_setting("GEODECOMP_CURVATURE", "1.0"))

# BLAS pools follow the same cap (only effective before numpy is imported)
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, str(THREADS))

# Geometry tolerances
MEMBERSHIP_TOL = 1e-9
CUT_LOCUS_TOL = 1e-8
LORENTZ_CLOSENESS_RADIUS = 2.0

# Intrinsic mean
MEAN_LEARNING_RATE = 1.0
MEAN_TOLERANCE = 1e-5
MEAN_MAX_ITERS = 1000
WEIGHT_SUM_TOL = 1e-6

# Decomposition
CENTERING_TOL = 1e-6  # per primitive of the factor
RANK_RTOL = 1e-8

# Noise distribution
DEFAULT_TEMPERATURE = 0.01
DEFAULT_TEMPERATURE_GRID = (0.005, 0.01, 0.02, 0.04, 0.07, 0.1, 0.2, 0.5, 1.0)
SIGLIP_LOGIT_BIAS = -16.5

# Evaluation
UNIFORM_BIAS_POINTS = 201

# Synthetic lab
ORACLE_STEP = 0.1
ORACLE_ITERS = 5000
SPARSIFY_MAX_RETRIES = 100

# Reports
REPORT_FLOAT_FORMAT = "%.6f"
