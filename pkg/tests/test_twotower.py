import math
from dataclasses import replace

import numpy as np
import oracles
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ebrsim.domain import InputDomainError
from ebrsim.evalharness import training_sets, variant_config
from ebrsim.sampling import TrainingExample, TripKey
from ebrsim.twotower import (
    FeatureBatch,
    TowerConfig,
    TrainingDivergedError,
    TwoTowerModel,
    batch_embed_listings,
    embed_queries,
    listing_features,
    listing_tower,
    load_model,
    load_table,
    loss_and_grads,
    query_tower,
    save_model,
    save_table,
    score,
    train,
)
from ebrsim.twotower.features import CELL_VOCAB
from ebrsim.twotower.network import Batch, _softplus

GRAD_TOL = 1e-4
ZERO_GRAD = 1e-8

GOLDEN_QUERY = [
    1.2364188854927787, -0.13991007629062793, -0.3814542796590811, 0.07403024424015324,
    -0.3174201936620739, 0.19535936057105877, -0.02771833041588198, 0.02118180370054845,
    0.28786293708486455, -0.07314637089662884, 0.3520276861990129, 1.0516452892267873,
    0.24948763098337898, 0.06147393759187836, 0.5019391812863687, 0.4521192766641015,
]
GOLDEN_LISTING = [
    0.22270238009709656, 0.5826956507105382, 0.18897303338727794, -0.20190344913795671,
    -0.15832001647730173, 0.2756364724686411, 0.6050999086504004, 0.5273977287446827,
    -0.47276961011883045, 0.3236864549055736, 0.5329609828060354, 0.576974133675098,
    -0.14644221720365205, -0.4426727947889453, 0.20297024716557419, -0.4505003846928396,
]


def fixed_inputs(cfg):
    q = FeatureBatch(np.linspace(-1, 1, cfg.query_dense_width)[None], np.array([[2]]))
    l = FeatureBatch(np.linspace(-1, 1, cfg.listing_dense_width)[None], np.array([[0, 1, 5, 20]]))
    return q, l


def random_batch(cfg, rng, b=6, k=3):
    def fb(n, w, vocab):
        return FeatureBatch(rng.normal(size=(n, w)),
                            np.stack([rng.integers(v, size=n) for v in vocab], 1))
    mask = np.ones((b, k), bool)
    mask[0, 2] = False  # one padded slot
    return Batch(fb(b, cfg.query_dense_width, (cfg.num_places,)),
                 fb(b, cfg.listing_dense_width, CELL_VOCAB),
                 fb(b * k, cfg.listing_dense_width, CELL_VOCAB), mask)


def gradient_errors(cfg, seed=0):
    """Per-tensor relative error of analytic gradients against central differences."""
    rng = np.random.default_rng(seed)
    model = TwoTowerModel.init(cfg)
    model.bias = 0.3
    batch = random_batch(cfg, rng)
    _, grads = loss_and_grads(model, batch)

    def loss():
        return loss_and_grads(model, batch, need_grads=False)[0]

    fd = oracles.finite_difference_grads(loss, model.parameters(), rng=rng)
    old = model.bias
    model.bias = old + 1e-6
    up = loss()
    model.bias = old - 1e-6
    fd["bias"] = {0: (up - loss()) / 2e-6}
    model.bias = old
    out = {}
    for name, entries in fd.items():
        a = np.array([np.reshape(grads[name], -1)[j] for j in entries])
        n = np.array(list(entries.values()))
        na, nn = np.linalg.norm(a), np.linalg.norm(n)
        if na < ZERO_GRAD and nn < ZERO_GRAD:
            out[name] = 0.0  # the loss does not depend on this tensor
        else:
            out[name] = float(np.linalg.norm(a - n) / max(na, nn))
    return out


@pytest.mark.parametrize("loss", ["pointwise", "pairwise"])
@pytest.mark.parametrize("similarity", ["dot", "euclidean"])
@pytest.mark.parametrize("v3_scale", [False, True])
def test_gradient_check(loss, similarity, v3_scale):
    cfg = TowerConfig(num_places=5, hidden=(12, 8), dim=4, similarity=similarity, loss=loss,
                      seed=3, v3_scale=v3_scale)
    errs = gradient_errors(cfg)
    # W and b per layer in both towers, one table per embedding, the pointwise logit offset
    assert len(errs) == 2 * 2 * 3 + 1 + len(CELL_VOCAB) + 1
    assert max(errs.values()) <= GRAD_TOL, errs


def test_score_examples():
    assert score([0.3, -1.0], [0.3, -1.0], "euclidean") == 0.0
    assert score([1, 0], [0, 1], "dot") == 0.0
    assert score([1, 2], [3, 4], "euclidean") == pytest.approx(-math.sqrt(8), abs=1e-15)
    with pytest.raises(InputDomainError):
        score([1, 2], [1, 2, 3], "dot")


def test_self_is_euclidean_maximum(rng):
    q = rng.normal(size=8)
    others = rng.normal(size=(50, 8))
    assert np.all(score(q, others, "euclidean") < score(q, q, "euclidean"))


def test_zero_final_layer_gives_zero_vector():
    cfg = TowerConfig(num_places=4, seed=7)
    m = TwoTowerModel.init(cfg)
    for t in (m.query, m.listing):
        last = t.num_layers - 1
        t.params[f"W{last}"][...] = 0.0
        t.params[f"b{last}"][...] = 0.0
    q, l = fixed_inputs(cfg)
    assert not query_tower(m, q).any() and not listing_tower(m, l).any()


def test_golden_snapshot_and_determinism():
    cfg = TowerConfig(num_places=4, seed=7)
    q, l = fixed_inputs(cfg)
    a, b = TwoTowerModel.init(cfg), TwoTowerModel.init(cfg)
    assert np.array_equal(query_tower(a, q), query_tower(b, q))
    np.testing.assert_allclose(query_tower(a, q)[0], GOLDEN_QUERY, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(listing_tower(a, l)[0], GOLDEN_LISTING, rtol=1e-12, atol=1e-14)


def test_width_mismatch_rejected():
    m = TwoTowerModel.init(TowerConfig(num_places=4))
    with pytest.raises(InputDomainError):
        query_tower(m, FeatureBatch(np.zeros((1, 3)), np.zeros((1, 1), dtype=np.int64)))
    with pytest.raises(InputDomainError):
        listing_tower(m, FeatureBatch(np.zeros((1, m.config.listing_dense_width)),
                                      np.zeros((1, 2), dtype=np.int64)))


def test_config_validation_and_scale():
    with pytest.raises(InputDomainError):
        TowerConfig(num_places=3, dim=1)
    with pytest.raises(InputDomainError):
        TowerConfig(num_places=3, hidden=(8, 0))
    base, big = TowerConfig(num_places=3), TowerConfig(num_places=3, v3_scale=True)
    ratio = TwoTowerModel.init(big).num_parameters() / TwoTowerModel.init(base).num_parameters()
    assert 1.1 < ratio < 1.5
    assert TowerConfig.from_dict(big.to_dict()) == big


vecs = arrays(np.float64, (6, 4), elements=st.floats(-10, 10))


@given(vecs, arrays(np.float64, 4, elements=st.floats(-10, 10)))
def test_euclidean_order_translation_invariant(cands, shift):
    q = cands[0]
    s0 = score(q, cands[1:], "euclidean")
    s1 = score(q + shift, cands[1:] + shift, "euclidean")
    np.testing.assert_allclose(s0, s1, atol=1e-9)
    top = np.flatnonzero(s0 >= s0.max() - 1e-9)
    assert int(np.argmax(s1)) in top.tolist() or np.ptp(s0) < 1e-9


@given(vecs, st.floats(1e-3, 1e3))
def test_dot_argmax_scale_invariant(cands, c):
    q = cands[0]
    s0 = score(q, cands[1:], "dot")
    s1 = score(c * q, cands[1:], "dot")
    top = np.flatnonzero(s0 >= s0.max() - 1e-9 * (1 + abs(s0).max()))
    assert int(np.argmax(s1)) in top.tolist()


@given(st.floats(-50, 50))
def test_pairwise_loss_translation_invariant(c):
    cfg = TowerConfig(num_places=5, hidden=(6,), dim=3, loss="pairwise", similarity="dot")
    m = TwoTowerModel.init(cfg)
    batch = random_batch(cfg, np.random.default_rng(2))
    base = loss_and_grads(m, batch, False)[0]
    # Recompute the loss by hand from shifted scores.
    qe = m.query.forward(batch.query)
    pe = m.listing.forward(batch.positive)
    ne = m.listing.forward(batch.negatives).reshape(6, 3, -1)
    sp = score(qe, pe, "dot")[:, None] + c
    sn = score(qe[:, None, :], ne, "dot") + c
    mask = batch.neg_mask
    shifted = float((mask * _softplus(-(sp - sn))).sum() / mask.sum())
    assert abs(shifted - base) <= 1e-9


def test_separable_singleton(world, journeys):
    s = journeys.searches[0]
    ex = TrainingExample(s.query, s.impressions[0], (s.impressions[1],),
                         (s.actions[1],), TripKey.of(s), s.search_id, s.timestamp)
    cfg = TowerConfig(num_places=len(world.places), loss="pairwise", similarity="euclidean",
                      epochs=50, seed=5)
    res = train(TwoTowerModel.init(cfg), [ex], world)
    m = res.model
    feats = listing_features(world)
    rows = world.index_of([ex.positive, ex.negatives[0]])
    qe = embed_queries(m, [ex.query], world)[0]
    le = m.listing.forward(feats.take(rows))
    assert score(qe, le[0], "euclidean") - score(qe, le[1], "euclidean") > 0
    assert res.loss_curve[-1] < res.loss_curve[0]


def test_training_deterministic_and_decreasing(world, split):
    trip, _ = training_sets(split, seed=11)
    cfg = variant_config("v1", len(world.places), 4, epochs=3)
    a = train(TwoTowerModel.init(cfg), trip[:400], world)
    b = train(TwoTowerModel.init(cfg), trip[:400], world)
    assert a.loss_curve == b.loss_curve
    assert a.loss_curve[-1] < a.loss_curve[0]
    with pytest.raises(InputDomainError):
        train(TwoTowerModel.init(cfg), [], world)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(world, split):
    trip, _ = training_sets(split, seed=11)
    cfg = TowerConfig(num_places=len(world.places), learning_rate=1e200, epochs=3)
    with pytest.raises(TrainingDivergedError) as e:
        train(TwoTowerModel.init(cfg), trip[:200], world)
    assert e.value.epoch in (0, 1, 2)


def test_batch_embed_semantics(model, world, table):
    assert len(table) == len(world.listings)
    assert np.isfinite(table.vectors).all()
    feats = listing_features(world, model.config.location_features)
    assert np.array_equal(table.vectors, listing_tower(model, feats))
    for row in (0, 7, 1999):
        direct = listing_tower(model, feats.take([row]))[0]
        np.testing.assert_allclose(table.lookup(int(world.ids[row])), direct, rtol=1e-12,
                                   atol=1e-13)
    # An engagement change after the tick leaves the already-built table alone.
    before = table.vectors.copy()
    changed = replace(world, listings=tuple(
        replace(l, engagement=replace(l.engagement, views=l.engagement.views + 1000))
        for l in world.listings))
    nxt = batch_embed_listings(model, changed, tick=1)
    assert np.array_equal(table.vectors, before)
    assert not np.array_equal(nxt.vectors, before) and nxt.version != table.version
    with pytest.raises(ValueError):
        table.vectors[0, 0] = 1.0


def test_model_and_table_round_trip(model, table, tmp_path):
    save_model(tmp_path / "m.bin", model)
    back = load_model(tmp_path / "m.bin")
    assert back.config == model.config and back.bias == model.bias
    for k, v in model.parameters().items():
        assert np.array_equal(back.parameters()[k], v)
    save_table(tmp_path / "t.bin", table)
    t = load_table(tmp_path / "t.bin")
    assert np.array_equal(t.ids, table.ids) and np.array_equal(t.vectors, table.vectors)
    assert t.version == table.version
