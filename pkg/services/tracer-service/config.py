"""
Configuration settings for the tracer toolkit
Numerical defaults, every one overridable from the environment
"""

import os

from dotenv import load_dotenv

load_dotenv()

VERSION = "1.0.0"
SERVICE_NAME = "tracer-service"

# Symbol evaluation
EPS_ZERO = float(os.getenv("TRACER_EPS_ZERO", "1e-12"))
QUAD_RTOL = float(os.getenv("TRACER_QUAD_RTOL", "1e-9"))
QUAD_BUDGET = int(os.getenv("TRACER_QUAD_BUDGET", "1000000"))
COMPENSATION_RADIUS = 1.0  # fixed cut-off of the compensator
FREQUENCY_CONVENTION = os.getenv("TRACER_FREQUENCY_CONVENTION", "per_axis")
STABLE_SMALL_JUMP_EPS = float(os.getenv("TRACER_STABLE_SMALL_JUMP_EPS", "1e-3"))

# Probe grids for structural checks
PROBE_POINTS = 64
PROBE_BOX = 5.0  # half-width of the probe box for non-periodic models

# Simulation
DEFAULT_DT = float(os.getenv("TRACER_DT", "1e-2"))
EXACT_LAW_DT = 1e-3
MAX_RATE_DT = 0.5
MAX_JUMPS_PER_STEP = 8
NOISE_BLOCK_STEPS = 2048  # must stay fixed, per-path draws depend on it
CHUNK_PATHS = 32
DEFAULT_WORKERS = int(os.getenv("TRACER_WORKERS", str(os.cpu_count() or 1)))

# Ergodic estimates
PILOT_HORIZON = float(os.getenv("TRACER_PILOT_HORIZON", "5000"))
PILOT_BURN_IN = 0.1
HISTOGRAM_BINS = 64
QUADRATURE_GRID = 512
TV_BINS = 32
TV_PATHS_PER_START = 10_000
TV_MIN_PATHS = 1000
TV_STARTS_PER_AXIS = 8
PSD_TOL = 1e-10

# Statistical verdicts
TOL_COV = float(os.getenv("TRACER_TOL_COV", "0.10"))
P_MIN = float(os.getenv("TRACER_P_MIN", "0.01"))
DYNKIN_ATOL = float(os.getenv("TRACER_DYNKIN_ATOL", "1e-4"))
MIN_KS_SAMPLES = 8

# Logging
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT = os.getenv("TRACER_LOG_FORMAT", "json")
