import os

# Directories
CONFIG_DIR = os.path.dirname(os.path.abspath(__file__))
BASE_DIR = os.path.dirname(CONFIG_DIR)

# Run configuration files
DEFAULT_RUN_FILE = os.path.join(CONFIG_DIR, 'default_run.json')
FULL_SCALE_FILE = os.path.join(CONFIG_DIR, 'full_scale.json')

# Task distribution constants
INPUT_DOMAIN = (-5.0, 5.0)
SIGMA_EPS = 0.05

# Auxiliary dataset used to sketch the FIM when tasks are unlimited
FIM_AUX_TASKS = 100
FIM_AUX_POINTS_CAP = 512

# File formats
CHECKPOINT_VERSION = 1
DATASET_FORMAT = 'unlimitd-dataset'
DATASET_VERSION = 1
REPORT_SCHEMA = 'unlimitd-report'
REPORT_VERSION = 1
MANIFEST_FILE = 'manifest.json'

# Environment
THREADS_ENV_VAR = 'UNLIMITD_THREADS'

# Process exit codes
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
