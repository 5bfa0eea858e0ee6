"""Two feed-forward towers with hand-written backpropagation.

A tower is ``concat(embedding lookups, dense) -> [Linear -> ReLU]* -> Linear``.
Everything runs in float64 so finite-difference checks stay meaningful.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..domain import InputDomainError
from .features import (
    CELL_VOCAB,
    LISTING_DENSE_WIDTH,
    LOCATION_WIDTH,
    QUERY_DENSE_WIDTH,
    FeatureBatch,
)


class Similarity(str, enum.Enum):
    DOT = "dot"
    EUCLIDEAN = "euclidean"


class Loss(str, enum.Enum):
    POINTWISE = "pointwise"
    PAIRWISE = "pairwise"


@dataclass(frozen=True)
class TowerConfig:
    num_places: int
    # Dense widths follow from ``location_features`` when left unset.
    query_dense_width: int | None = None
    listing_dense_width: int | None = None
    place_dim: int = 8
    cell_dim: int = 4
    hidden: tuple[int, ...] = (64, 32)
    dim: int = 16
    similarity: Similarity = Similarity.DOT
    loss: Loss = Loss.POINTWISE
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 128
    seed: int = 7
    v3_scale: bool = False
    location_features: bool = False

    def __post_init__(self) -> None:
        extra = LOCATION_WIDTH if self.location_features else 0
        if self.query_dense_width is None:
            object.__setattr__(self, "query_dense_width", QUERY_DENSE_WIDTH + extra)
        if self.listing_dense_width is None:
            object.__setattr__(self, "listing_dense_width", LISTING_DENSE_WIDTH + extra)
        if self.dim < 2:
            raise InputDomainError("embedding dimension must be at least 2")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise InputDomainError("hidden layer sizes must be positive")
        object.__setattr__(self, "similarity", Similarity(self.similarity))
        object.__setattr__(self, "loss", Loss(self.loss))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        if self.v3_scale:
            return tuple(int(round(h * 1.2)) for h in self.hidden)
        return self.hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["similarity"] = self.similarity.value
        d["loss"] = self.loss.value
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TowerConfig:
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def with_(self, **kw) -> TowerConfig:
        return replace(self, **kw)


@dataclass
class Tower:
    """Parameters of one tower. ``params`` maps names to float64 arrays."""

    vocab: tuple[int, ...]
    emb_dim: int
    dense_width: int
    hidden: tuple[int, ...]
    out_dim: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, rng: np.random.Generator, vocab, emb_dim, dense_width, hidden, out_dim
             ) -> Tower:
        t = cls(tuple(vocab), emb_dim, dense_width, tuple(hidden), out_dim)
        for i, v in enumerate(t.vocab):
            t.params[f"emb{i}"] = rng.normal(scale=0.1, size=(v, emb_dim))
        widths = [len(t.vocab) * emb_dim + dense_width, *t.hidden, out_dim]
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            scale = np.sqrt(2.0 / a) if i < len(widths) - 2 else np.sqrt(1.0 / a)
            t.params[f"W{i}"] = rng.normal(scale=scale, size=(a, b))
            t.params[f"b{i}"] = np.zeros(b)
        return t

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _check(self, batch: FeatureBatch) -> None:
        if batch.dense.ndim != 2 or batch.dense.shape[1] != self.dense_width:
            raise InputDomainError(
                f"dense feature width {batch.dense.shape[-1]} != expected {self.dense_width}")
        if batch.indices.shape[1] != len(self.vocab):
            raise InputDomainError(
                f"{batch.indices.shape[1]} index columns != {len(self.vocab)} embedding tables")

    def forward(self, batch: FeatureBatch, keep: bool = False):
        self._check(batch)
        parts = [self.params[f"emb{i}"][batch.indices[:, i]] for i in range(len(self.vocab))]
        x = np.concatenate(parts + [batch.dense], axis=1)
        acts = [x]
        for i in range(self.num_layers):
            x = x @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.num_layers - 1:
                x = np.maximum(x, 0.0)
            acts.append(x)
        out = acts[-1]
        return (out, (batch, acts)) if keep else out

    def backward(self, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
        batch, acts = cache
        grads: dict[str, np.ndarray] = {}
        g = dout
        for i in reversed(range(self.num_layers)):
            if i < self.num_layers - 1:
                g = g * (acts[i + 1] > 0.0)
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        for i, v in enumerate(self.vocab):
            ge = np.zeros((v, self.emb_dim))
            np.add.at(ge, batch.indices[:, i], g[:, i * self.emb_dim:(i + 1) * self.emb_dim])
            grads[f"emb{i}"] = ge
        return grads


def score(q_emb: np.ndarray, l_emb: np.ndarray, similarity: Similarity | str) -> np.ndarray:
    """Row-wise similarity; larger is better for both metrics.

    Accepts single vectors or equally-shaped stacks. The reduction is an
    explicit elementwise product summed over the last axis, so a row's score
    never depends on which other rows share the call.
    """
    q = np.asarray(q_emb, dtype=np.float64)
    l = np.asarray(l_emb, dtype=np.float64)
    if q.shape[-1] != l.shape[-1]:
        raise InputDomainError(f"embedding dims differ: {q.shape[-1]} vs {l.shape[-1]}")
    if Similarity(similarity) is Similarity.DOT:
        return (q * l).sum(axis=-1)
    diff = q - l
    return -np.sqrt((diff * diff).sum(axis=-1))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class TwoTowerModel:
    config: TowerConfig
    query: Tower
    listing: Tower
    # Logit offset for the pointwise loss; a negated distance is never positive,
    # so pointwise + Euclidean needs it to express probabilities above one half.
    bias: float = 0.0
    version: int = 0

    @classmethod
    def init(cls, config: TowerConfig) -> TwoTowerModel:
        rng = np.random.default_rng(config.seed)
        h = config.hidden_sizes
        q = Tower.init(rng, (config.num_places,), config.place_dim, config.query_dense_width,
                       h, config.dim)
        l = Tower.init(rng, CELL_VOCAB, config.cell_dim, config.listing_dense_width, h,
                       config.dim)
        return cls(config, q, l)

    def num_parameters(self) -> int:
        return self.query.num_parameters() + self.listing.num_parameters()

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"query.{k}": v for k, v in self.query.params.items()}
        out.update({f"listing.{k}": v for k, v in self.listing.params.items()})
        return out

    def copy(self) -> TwoTowerModel:
        q = Tower(self.query.vocab, self.query.emb_dim, self.query.dense_width,
                  self.query.hidden, self.query.out_dim,
                  {k: v.copy() for k, v in self.query.params.items()})
        l = Tower(self.listing.vocab, self.listing.emb_dim, self.listing.dense_width,
                  self.listing.hidden, self.listing.out_dim,
                  {k: v.copy() for k, v in self.listing.params.items()})
        return TwoTowerModel(self.config, q, l, self.bias, self.version)


def query_tower(model: TwoTowerModel, q: FeatureBatch) -> np.ndarray:
    return model.query.forward(q)


def listing_tower(model: TwoTowerModel, l: FeatureBatch) -> np.ndarray:
    return model.listing.forward(l)


@dataclass
class Batch:
    """A minibatch of contrastive examples.

    ``neg_mask[b, j]`` marks real negatives; padded slots are ignored.
    """

    query: FeatureBatch
    positive: FeatureBatch
    negatives: FeatureBatch  # rows laid out as [b * m + j]
    neg_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.neg_mask.shape


def _sim_grads(q: np.ndarray, l: np.ndarray, similarity: Similarity):
    """Scores plus d(score)/dq and d(score)/dl."""
    if similarity is Similarity.DOT:
        return (q * l).sum(-1), l, q
    diff = q - l
    dist = np.sqrt((diff * diff).sum(-1))
    unit = diff / np.maximum(dist, 1e-12)[..., None]
    return -dist, -unit, unit


def loss_and_grads(model: TwoTowerModel, batch: Batch, need_grads: bool = True):
    """Mean loss over the batch and, optionally, gradients for every parameter."""
    cfg = model.config
    b, m = batch.shape
    qe, qcache = model.query.forward(batch.query, keep=True)
    pe, pcache = model.listing.forward(batch.positive, keep=True)
    ne, ncache = model.listing.forward(batch.negatives, keep=True)
    ne = ne.reshape(b, m, -1)
    mask = batch.neg_mask.astype(np.float64)

    s_pos, dq_pos, dl_pos = _sim_grads(qe, pe, cfg.similarity)
    s_neg, dq_neg, dl_neg = _sim_grads(qe[:, None, :], ne, cfg.similarity)

    if cfg.loss is Loss.POINTWISE:
        denom = b + mask.sum()
        z_pos = s_pos + model.bias
        z_neg = s_neg + model.bias
        loss = (_softplus(-z_pos).sum() + (mask * _softplus(z_neg)).sum()) / denom
        g_pos = -_sigmoid(-z_pos) / denom
        g_neg = mask * _sigmoid(z_neg) / denom
        g_bias = g_pos.sum() + g_neg.sum()
    else:
        denom = max(mask.sum(), 1.0)
        margin = s_pos[:, None] - s_neg
        loss = (mask * _softplus(-margin)).sum() / denom
        g_m = -mask * _sigmoid(-margin) / denom
        g_pos = g_m.sum(axis=1)
        g_neg = -g_m
        g_bias = 0.0

    if not need_grads:
        return float(loss), None
    d_q = g_pos[:, None] * dq_pos + (g_neg[..., None] * dq_neg).sum(axis=1)
    d_p = g_pos[:, None] * dl_pos
    d_n = (g_neg[..., None] * dl_neg).reshape(b * m, -1)
    grads = {f"query.{k}": v for k, v in model.query.backward(qcache, d_q).items()}
    gp = model.listing.backward(pcache, d_p)
    gn = model.listing.backward(ncache, d_n)
    grads.update({f"listing.{k}": gp[k] + gn[k] for k in gp})
    grads["bias"] = np.array(g_bias)
    return float(loss), grads
