"""Source-free domain adaptation: source training, per-target teachers, and a MixUp-distilled student."""
from .config import AdaptationConfig, load_config
from .errors import DegenerateClassError, JoinError, NumericError, SFDAError, ValidationError
from .nn_core import Checkpoint, NetworkAssembly
from .pipeline import StageReport, evaluate, predict, run_ablation, run_stage1, run_stage2, run_stage3

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "Checkpoint", "DegenerateClassError", "JoinError", "NetworkAssembly", "NumericError",
    "SFDAError", "StageReport", "ValidationError", "evaluate", "load_config", "predict", "run_ablation",
    "run_stage1", "run_stage2", "run_stage3",
]
