"""Configuration loader."""
import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv(Path(__file__).parent.parent / ".env")

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
OUTPUT_DIR = Path(os.getenv("TASFAR_OUTPUT_DIR", "runs"))
DEFAULT_SEED = int(os.getenv("TASFAR_SEED", "0"))
WORKERS = int(os.getenv("TASFAR_WORKERS", "1"))

ADAPTATION_DEFAULTS = {
    "eta": 0.9,
    "segments_q": 40,
    "samplings_S": 20,
    "dropout_rate": 0.2,
    "finetune_dropout_rate": 0.0,
    "grid_cells": 100,
    "learning_rate": 1e-3,
    "batch_size": 32,
    "max_epochs": 500,
    "early_stop_window": 20,
    "early_stop_ratio": 0.1,
    "hidden_sizes": [64, 64],
    "source_epochs": 200,
}

# label units; keeps sigma strictly positive for negative fitted intercepts
SIGMA_FLOOR = 1e-6
# half-width of the pseudo-label locality window, in sigmas
WINDOW_SIGMAS = 3.0
# aggregate window probability below this falls back to the raw prediction
WINDOW_UNDERFLOW = 1e-300

# published tabular result (housing price), reported next to our own numbers
REFERENCE_MSE_REDUCTION_PCT = 22.0
REFERENCE_RMSLE_REDUCTION_PCT = 28.0
