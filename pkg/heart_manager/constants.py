# --- Constants ---
# Exit codes of the heart-manager CLI.

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4

ACTIVITY_LOGGER_NAME = "HeartRunActivity"
ACTIVITY_LOG_FILE_NAME = "heart_run_activity.log"
DEFAULT_LOG_DIR = "./logs"

# Run directory layout
LOCK_FILE_NAME = ".run.lock"
METRICS_FILE_NAME = "metrics.jsonl"
CHECKPOINT_FILE_NAME = "checkpoint.cvc"
RUN_CONFIG_FILE_NAME = "run_config.json"

SPLIT_NAMES = ["pretrain", "finetune", "test"]
VIEW_SELECTIONS = ["all", "sa", "la"]
VIEW_GROUPS = ["SA", "LA"]
PHANTOM_SIZES = [64, 128]

FINETUNE_TASKS = ["phenotype", "seg"]
EVAL_TASKS = ["recon", "phenotype", "seg"]

EMBEDDING_GROUP_TARGETS = ["rvef", "lvm"]
N_EMBEDDING_GROUPS = 5

RUN_CONFIG_HELPTEXT = "Presets come from run_utils/run_configs.py (tiny, smoke, desk, full); a path to a JSON file with the same fields also works."

# Seed streams derived from the run seed
SEED_STREAM_MODEL = 0
SEED_STREAM_SUBJECTS = 1
SEED_STREAM_PHENOTYPE_HEAD = 2
SEED_STREAM_SEG_HEAD = 3
SEED_STREAM_PLANE_DROP = 4
SEED_STREAM_EVAL_MASK = 5

# Checkpoint tensor prefixes
MODEL_PREFIXES = ("encoder.", "decoder.")
OPTIM_FIRST_MOMENT_PREFIX = "optim.m."
OPTIM_SECOND_MOMENT_PREFIX = "optim.v."

# Phase keys for per-step subject sampling
PHASE_PRETRAIN = 0
PHASE_FINETUNE = 1
