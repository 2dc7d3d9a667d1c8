"""Sequential recommendation with relation-aware graph attention on enclosing subgraphs."""
from .config import ModelConfig, RunConfig, TrainConfig
from .recommender import Domain, ParamSet, RetaGNN

__version__ = "0.1.0"
__all__ = ["ModelConfig", "RunConfig", "TrainConfig", "Domain", "ParamSet", "RetaGNN"]
