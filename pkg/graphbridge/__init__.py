from pathlib import Path

from .api import (
    GraphBridgeApplication,
    run_training,
    run_evaluation,
    run_baseline,
    run_assignment,
    run_lambda_sweep,
)

version_file = Path(__file__).parent / "version.txt"
with version_file.open() as f:
    version = f.read().strip()

__all__ = (
    "GraphBridgeApplication",
    "run_training",
    "run_evaluation",
    "run_baseline",
    "run_assignment",
    "run_lambda_sweep",
)
