"""Project-wide defaults for crossgrain.

Values in the "Layer sizes" section are the published network widths; the
first DBN layer adapts to the input dimension of each dataset.  Everything
here can be overridden from an experiment config file (see
:mod:`crossgrain.config`).
"""

from __future__ import annotations

# ---------------------------------------------------------------------------
# Project identity
# ---------------------------------------------------------------------------
PROJECT_NAME = "crossgrain"

# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------
DETERMINISTIC = True
DEFAULT_SEED = 0

# Central-difference step for gradient checks
FINITE_DIFF_STEP = 1e-5

# Lower bound applied to predicted probabilities before taking logs
LOG_CLAMP = 1e-12

# ---------------------------------------------------------------------------
# Layer sizes
# ---------------------------------------------------------------------------
IMAGE_DBN_DIMS: tuple[int, ...] = (2048, 1024)
TEXT_DBN_DIMS: tuple[int, ...] = (1024, 1024)

CORRNET_HIDDEN_DIMS: tuple[int, ...] = (1024, 1024)
CORRNET_CODE_DIM = 1024

FUSION_PATHWAY_DIM = 1024
FUSION_OUTPUT_DIM = 2048

STAGE2_LAYER_DIMS: tuple[int, ...] = (1024, 1024, 1024)

# ---------------------------------------------------------------------------
# Contrastive divergence
# ---------------------------------------------------------------------------
CD_STEPS = 1
CD_LEARNING_RATE = 0.01
CD_BATCH_SIZE = 32
CD_EPOCHS = 10
CD_MOMENTUM = 0.5
CD_WEIGHT_DECAY = 2e-4
# Learning rate of the instance and patch DBN layers
DBN_LEARNING_RATE = 0.001

# Standard deviation of the normal draw used for fresh RBM weights
RBM_INIT_STD = 0.01

# ---------------------------------------------------------------------------
# Stage 1 correlation network
# ---------------------------------------------------------------------------
CORRNET_LEARNING_RATE = 0.1
CORRNET_EPOCHS = 20
CORRNET_BATCH_SIZE = 32
CORRNET_MOMENTUM = 0.9

# ---------------------------------------------------------------------------
# Stage 2 multi-task network
# ---------------------------------------------------------------------------
STAGE2_LEARNING_RATE = 1e-3
STAGE2_EPOCHS = 30
STAGE2_BATCH_SIZE = 64
STAGE2_MOMENTUM = 0.9
MARGIN_ALPHA = 1.0
BRANCH_WEIGHT_LAMBDA = 1.0
DROPOUT_RATE = 0.5

# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------
MAX_IMAGE_PATCHES = 10
MAX_TAG_PATCHES = 4
PATCH_IOU_THRESHOLD = 0.7

# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
RECALL_KS: tuple[int, ...] = (1, 5, 10)
SCOPE_GRID: tuple[int, ...] = (10, 20, 50, 100, 200, 500, 1000)
EXCLUDE_OWN_PAIR = False

# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------
ALPHA_SWEEP: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5)
LEARNING_RATE_SWEEP: tuple[float, ...] = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)

# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------
CHECKPOINT_MAGIC = b"XGCK"
CHECKPOINT_VERSION = 1
REPORT_DECIMALS = 6
CURVE_SIGNIFICANT_DIGITS = 9
METRICS_FILE = "metrics.txt"
PR_CURVE_FILE = "pr_curve.csv"
SCOPE_CURVE_FILE = "scope_curve.csv"
SUMMARY_FILE = "summary.txt"

# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s [%(name)s] %(levelname)s: %(message)s"
