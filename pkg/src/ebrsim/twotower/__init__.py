"""Two-tower retrieval model: features, networks, training and the listing batch job."""

from .features import FeatureBatch, listing_features, query_features
from .network import (
    Loss,
    Similarity,
    TowerConfig,
    TwoTowerModel,
    listing_tower,
    loss_and_grads,
    query_tower,
    score,
)
from .training import (
    EmbeddingTable,
    TrainingDivergedError,
    TrainingSet,
    TrainResult,
    batch_embed_listings,
    embed_queries,
    load_model,
    load_table,
    save_model,
    save_table,
    train,
)

__all__ = [
    "EmbeddingTable",
    "FeatureBatch",
    "Loss",
    "Similarity",
    "TowerConfig",
    "TrainResult",
    "TrainingDivergedError",
    "TrainingSet",
    "TwoTowerModel",
    "batch_embed_listings",
    "embed_queries",
    "listing_features",
    "listing_tower",
    "load_model",
    "load_table",
    "loss_and_grads",
    "query_features",
    "query_tower",
    "save_model",
    "save_table",
    "score",
    "train",
]
