"""Counterfactual explanations for a latent-factor recommender, with
profile-filtered variants and popularity-bias reporting."""

__version__ = "0.1.0"

from .data import Cohort, Interaction, ItemMeta, PopularityTable, Split
from .influence import CounterfactualResult, UserInfluenceState
from .metrics import BiasReport, PopPositionBin
from .profilefilter import FilterResult, ProfilePrompt, UserProfile
from .providers import ProviderConfig, ProviderHandle
from .recsys import ModelParams, RankedList, TrainConfig

__all__ = [
    "BiasReport", "Cohort", "CounterfactualResult", "FilterResult", "Interaction",
    "ItemMeta", "ModelParams", "PopPositionBin", "PopularityTable", "ProfilePrompt",
    "ProviderConfig", "ProviderHandle", "RankedList", "Split", "TrainConfig",
    "UserInfluenceState", "UserProfile",
]
