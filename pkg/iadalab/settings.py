"""Process-level settings, read from the environment or a ``.env`` file."""
from decouple import config

LOG_LEVEL = config("IADA_LOG_LEVEL", default="INFO")
RESULTS_DIR = config("IADA_RESULTS_DIR", default="iada_results")
WORKERS = config("IADA_WORKERS", default=1, cast=int)
# 17 significant digits round-trip float64 exactly
FLOAT_FORMAT = config("IADA_FLOAT_FORMAT", default="%.17g")
