"""Training loop, daily listing-embedding batch job and checkpoint files."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..domain import InputDomainError, ListingId
from ..io import read_bundle, stable_hash, write_bundle
from ..sampling import TrainingExample
from .features import FeatureBatch, listing_features, query_features
from .network import Batch, Similarity, TowerConfig, TwoTowerModel, loss_and_grads

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainingSet:
    query: FeatureBatch
    positive_rows: np.ndarray
    negative_rows: np.ndarray  # [n, m], -1 pads

    def __len__(self) -> int:
        return self.positive_rows.shape[0]

    @classmethod
    def build(cls, examples: Sequence[TrainingExample], world, location: bool = False
              ) -> TrainingSet:
        if not examples:
            raise InputDomainError("empty training set")
        place_index = {p.id: p.index for p in world.places}
        q = query_features([e.query for e in examples], place_index, location)
        pos = world.index_of([e.positive for e in examples])
        m = max(1, max(len(e.negatives) for e in examples))
        neg = np.full((len(examples), m), -1, dtype=np.int64)
        for i, e in enumerate(examples):
            if e.negatives:
                neg[i, :len(e.negatives)] = world.index_of(e.negatives)
        return cls(q, pos, neg)

    def num_pairs(self) -> int:
        return int((self.negative_rows >= 0).sum())


def make_batch(data: TrainingSet, listings: FeatureBatch, rows: np.ndarray) -> Batch:
    neg = data.negative_rows[rows]
    mask = neg >= 0
    return Batch(
        query=data.query.take(rows),
        positive=listings.take(data.positive_rows[rows]),
        negatives=listings.take(np.where(mask, neg, 0).ravel()),
        neg_mask=mask,
    )


@dataclass
class TrainResult:
    model: TwoTowerModel
    loss_curve: list[float] = field(default_factory=list)


def train(model: TwoTowerModel, examples: Sequence[TrainingExample] | TrainingSet, world,
          config: TowerConfig | None = None) -> TrainResult:
    """Plain minibatch SGD with a fixed learning rate; the input model is not modified."""
    cfg = config or model.config
    if isinstance(examples, TrainingSet):
        data = examples
    else:
        data = TrainingSet.build(examples, world, cfg.location_features)
    if len(data) == 0:
        raise InputDomainError("empty training set")
    listings = listing_features(world, cfg.location_features)
    model = model.copy()
    rng = np.random.default_rng([cfg.seed, 2])
    params = model.parameters()
    curve: list[float] = []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(model, make_batch(data, listings, rows))
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total += loss * rows.shape[0]
            for name, p in params.items():
                p -= cfg.learning_rate * grads[name]
            model.bias -= cfg.learning_rate * float(grads["bias"])
        mean = total / n
        if not np.isfinite(mean):
            raise TrainingDivergedError(epoch, mean)
        curve.append(mean)
        log.debug("epoch %d loss %.5f", epoch, mean)
    model.version += 1
    return TrainResult(model, curve)


def model_fingerprint(model: TwoTowerModel) -> str:
    h = hashlib.sha256(stable_hash(model.config.to_dict()).encode())
    h.update(np.float64(model.bias).tobytes())
    for name, p in sorted(model.parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    ids: np.ndarray
    vectors: np.ndarray
    similarity: Similarity
    model_version: str
    tick: int

    def __post_init__(self) -> None:
        self.ids.setflags(write=False)
        self.vectors.setflags(write=False)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows_of(self, listing_ids) -> np.ndarray:
        ids = np.asarray(listing_ids, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.ids, ids), 0, len(self.ids) - 1)
        if np.any(self.ids[pos] != ids):
            raise KeyError("listing id not in embedding table")
        return pos

    def lookup(self, listing_id: ListingId) -> np.ndarray:
        return self.vectors[int(self.rows_of([listing_id])[0])]

    @property
    def version(self) -> str:
        return f"{self.model_version}@{self.tick}"


def batch_embed_listings(model: TwoTowerModel, world, tick: int = 0,
                         chunk: int = 8192) -> EmbeddingTable:
    """Embed every listing from a snapshot of its features taken now."""
    feats = listing_features(world, model.config.location_features)
    out = np.empty((len(feats), model.config.dim))
    for start in range(0, len(feats), chunk):
        rows = np.arange(start, min(start + chunk, len(feats)))
        out[rows] = model.listing.forward(feats.take(rows))
    return EmbeddingTable(world.ids.copy(), out, model.config.similarity,
                          model_fingerprint(model), tick)


def embed_queries(model: TwoTowerModel, queries, world) -> np.ndarray:
    place_index = {p.id: p.index for p in world.places}
    return model.query.forward(query_features(list(queries), place_index,
                                              model.config.location_features))


# -- persistence -------------------------------------------------------------------------

def save_model(path: str | Path, model: TwoTowerModel) -> None:
    cfg = model.config.to_dict()
    arrays = {k: v for k, v in model.parameters().items()}
    arrays["bias"] = np.array([model.bias])
    write_bundle(path, "tower_model", {
        "config": cfg,
        "config_hash": stable_hash(cfg),
        "dim": model.config.dim,
        "similarity": model.config.similarity.value,
        "model_version": model.version,
    }, arrays)


def load_model(path: str | Path) -> TwoTowerModel:
    header, arrays = read_bundle(path, "tower_model")
    cfg = TowerConfig.from_dict(header["config"])
    model = TwoTowerModel.init(cfg)
    for name, p in model.parameters().items():
        p[...] = arrays[name]
    model.bias = float(arrays["bias"][0])
    model.version = int(header["model_version"])
    return model


def save_table(path: str | Path, table: EmbeddingTable) -> None:
    write_bundle(path, "embedding_table", {
        "dim": table.dim,
        "similarity": table.similarity.value,
        "model_version": table.model_version,
        "tick": table.tick,
    }, {"ids": table.ids, "vectors": table.vectors})


def load_table(path: str | Path) -> EmbeddingTable:
    header, arrays = read_bundle(path, "embedding_table")
    return EmbeddingTable(arrays["ids"], arrays["vectors"], Similarity(header["similarity"]),
                          header["model_version"], int(header["tick"]))
