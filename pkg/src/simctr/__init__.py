"""Two-stage search-based modeling of lifelong user behavior for CTR prediction."""

from .behavior_store import UserBehaviorTree, ubt_build, ubt_load, ubt_query, ubt_save
from .domain import Behavior, BehaviorSequence, CandidateItem, TrainingSample, split_short_long
from .model import SimConfig, SimModel, init_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Behavior", "BehaviorSequence", "CandidateItem", "TrainingSample", "split_short_long",
    "UserBehaviorTree", "ubt_build", "ubt_load", "ubt_query", "ubt_save",
    "SimConfig", "SimModel", "init_model", "load_checkpoint", "save_checkpoint",
]
