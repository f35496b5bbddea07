import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viralnet import ranker
from viralnet.numcore import DimensionError, make_rng, sgd_step
from viralnet.ranker import (CategoryNet, ConfigError, NetConfig, ScoringNet, combined_loss_multiscale,
                             combined_loss_single, gated_total, pair_objective, rank_loss,
                             rank_loss_grad, rank_prob)
from viralnet.stn import AffineParams, BoundsReport

scores = st.floats(-50, 50, allow_nan=False)


def small(variant, **kw):
    kw.setdefault("image_size", 32 if variant in ("base", "c", "siamese", "regression") else 64)
    kw.setdefault("roi_size", 16)
    kw.setdefault("feature_dim", 8)
    kw.setdefault("category_dim", 4)
    return NetConfig(variant=variant, **kw)


def make_net(variant, seed=0, **kw):
    cfg = small(variant, **kw)
    cat = CategoryNet(3, cfg.roi_size, cfg.category_dim, 2, make_rng(5)) if cfg.uses_category else None
    return ScoringNet(cfg, seed, category_net=cat)


# -------------------------------------------------------------- rank loss

def test_rank_prob_examples():
    assert rank_prob(0.3, 0.3) == 0.5
    assert rank_prob(2.0, 0.0) == pytest.approx(0.8807970779778823, abs=1e-15)
    assert rank_prob(800, -800) == 1.0
    assert 0.0 <= rank_prob(-700, 700) < 1e-300


@given(scores, scores)
@settings(max_examples=200)
def test_rank_prob_symmetry(a, b):
    assert abs(rank_prob(a, b) + rank_prob(b, a) - 1) <= 1e-12
    # ordering is strict whenever the gap survives the 0.5 + d/4 rounding
    if abs(a - b) > 1e-15:
        assert (a > b) == (rank_prob(a, b) > 0.5)
    else:
        assert rank_prob(a, b) == 0.5 or (a > b) == (rank_prob(a, b) > 0.5)


def test_rank_loss_examples():
    assert rank_loss(1.0, 1.0, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert rank_loss(1.0, 1.0, 0.5) == pytest.approx(math.log(2), abs=1e-12)
    assert rank_loss(2.0, 0.0, 1) == pytest.approx(0.12692801104297263, abs=1e-12)


def test_rank_loss_tie_minimum():
    d = np.linspace(-3, 3, 61)
    losses = rank_loss(d, 0.0, np.full(61, 0.5))
    assert np.argmin(losses) == 30


@given(scores, scores, st.sampled_from([0.0, 0.5, 1.0]))
@settings(max_examples=200)
def test_rank_loss_label_swap(a, b, y):
    assert abs(rank_loss(a, b, y) - rank_loss(b, a, 1 - y)) <= 1e-12
    assert rank_loss(a, b, y) >= 0


def test_rank_loss_monotone_for_positive_label():
    d = np.linspace(-20, 20, 400)
    losses = rank_loss(d, 0.0, np.ones(400))
    assert np.all(np.diff(losses) < 0)


def test_rank_loss_rejects_bad_label():
    with pytest.raises(ValueError):
        rank_loss(0.0, 1.0, 0.3)


def test_rank_loss_grad_matches_finite_differences(rng):
    for _ in range(20):
        a, b = rng.normal(size=2) * 3
        y = rng.choice([0.0, 0.5, 1.0])
        h = 1e-6
        num = (rank_loss(a + h, b, y) - rank_loss(a - h, b, y)) / (2 * h)
        assert rank_loss_grad(a, b, y) == pytest.approx(num, rel=1e-7, abs=1e-9)
    assert rank_loss_grad(0.4, 0.4, 0.5) == 0.0


# -------------------------------------------------------------- gated loss

def _trace(lams, spatial):
    return ranker.ScoreTrace(0.0, [AffineParams(1, 0, 0)] * len(lams),
                             [BoundsReport(l, s) for l, s in zip(lams, spatial)], np.zeros(2))


def test_single_gate_identities():
    rank = rank_loss(0.2, -0.1, 1)
    for l1, l2 in itertools.product((0, 1), repeat=2):
        t1, t2 = _trace([l1], [0.3]), _trace([l2], [0.7])
        t1.v, t2.v = 0.2, -0.1
        b = combined_loss_single(t1, t2, 1)
        expected = (1 - l1) * (1 - l2) * rank + l1 * 0.3 + l2 * 0.7
        assert b.total == pytest.approx(expected, abs=1e-15)
        assert b.total == b.recompute()


def test_multiscale_gate_identities():
    sp1, sp2 = [0.11, 0.22, 0.33], [0.44, 0.55, 0.66]
    rank = rank_loss(0.5, 0.9, 0)
    for lams in itertools.product((0, 1), repeat=6):
        t1, t2 = _trace(lams[:3], sp1), _trace(lams[3:], sp2)
        t1.v, t2.v = 0.5, 0.9
        b = combined_loss_multiscale(t1, t2, 0)
        gate = 1 - max(lams)
        spatial = sum(l * s for l, s in zip(lams, sp1 + sp2))
        assert b.total == pytest.approx(gate * rank + spatial, abs=1e-15)
        assert b.total == b.recompute() and b.total >= 0


def test_gate_level_mismatch():
    with pytest.raises(ConfigError):
        combined_loss_single(_trace([0, 0, 0], [0] * 3), _trace([0, 0, 0], [0] * 3), 1)
    with pytest.raises(ConfigError):
        combined_loss_multiscale(_trace([0], [0]), _trace([0], [0]), 1)


def test_gated_total_closed_gate():
    assert gated_total(5.0, [[1], [0]], [[0.25], [9.0]]) == 0.25


# -------------------------------------------------------------- scoring nets

@pytest.mark.parametrize("variant,views", [("base", 2), ("m", 4), ("siamese", 1), ("regression", 1)])
def test_feature_width(variant, views):
    net = make_net(variant)
    tr = net.score(make_rng(1).random((3, net.config.image_size, net.config.image_size)))
    assert tr.t_r.shape == (views * net.config.feature_dim,)
    assert net.head.weight.shape[1] == tr.t_r.size


def test_category_feature_width():
    net = make_net("mc")
    assert net.head_width == 4 * 8 + 4
    tr = ranker.score_with_category(net, make_rng(1).random((3, 64, 64)))
    assert tr.t_r.size == 36


def test_scoring_is_pure(rng):
    net = make_net("base")
    img = rng.random((3, 32, 32))
    assert ranker.score_single(net, img).v == ranker.score_single(net, img).v


def test_branches_share_weights(rng):
    net = make_net("m")
    img = rng.random((3, 64, 64))
    res = net.forward(np.stack([img, img]))
    assert res.v[0] == res.v[1]


def test_zero_head_returns_bias(rng):
    net = make_net("base")
    net.head.weight[:] = 0
    net.head.bias[:] = 0.42
    for _ in range(3):
        assert net.score(rng.random((3, 32, 32))).v == 0.42


def test_pyramid_init_scales(rng):
    net = make_net("m", base_scale=1.0)
    tr = ranker.score_pyramid(net, rng.random((3, 64, 64)))
    assert [(a.s, a.tx, a.ty) for a in tr.affines] == [(1.0, 0, 0), (0.5, 0, 0), (0.25, 0, 0)]
    assert [b.lam for b in tr.bounds] == [0, 0, 0]


def test_pyramid_scales_follow_base(rng):
    tr = ranker.score_pyramid(make_net("m"), rng.random((3, 64, 64)))
    assert [a.s for a in tr.affines] == [0.5, 0.25, 0.125]


def test_pyramid_constant_image(rng):
    net = make_net("m")
    img = np.full((3, 64, 64), 0.3)
    tr = net.score(img)
    f, _ = net.extractor.forward(np.full((1, 3, 16, 16), 0.3))
    expected = float(net.head.weight[0] @ np.tile(f[0], 4) + net.head.bias[0])
    assert tr.v == pytest.approx(expected, abs=1e-12)


def test_category_columns_decompose(rng):
    net = make_net("c")
    img = rng.random((3, 32, 32))
    F = 2 * net.config.feature_dim
    net.head.weight[0, F:] = 0
    with_cat = net.score(img).v
    expected = float(net.head.weight[0, :F] @ net.score(img).t_r[:F] + net.head.bias[0])
    assert with_cat == pytest.approx(expected, abs=1e-12)


def test_wrong_entry_points():
    with pytest.raises(ConfigError):
        ranker.score_single(make_net("m"), np.zeros((3, 64, 64)))
    with pytest.raises(ConfigError):
        ranker.score_pyramid(make_net("base"), np.zeros((3, 32, 32)))
    with pytest.raises(ConfigError):
        ranker.score_with_category(make_net("base"), np.zeros((3, 32, 32)))


def test_config_errors():
    with pytest.raises(ConfigError):
        NetConfig(variant="vgg")
    with pytest.raises(ConfigError):
        ScoringNet(small("c"))
    with pytest.raises(ConfigError):
        ScoringNet(small("base"), category_net=CategoryNet(3, 16, 4, 2, make_rng(0)))
    with pytest.raises(ConfigError):
        ScoringNet(small("c", category_dim=4), category_net=CategoryNet(3, 16, 6, 2, make_rng(0)))


def test_image_shape_error(rng):
    with pytest.raises(DimensionError):
        make_net("base").score(rng.random((3, 30, 30)))


# -------------------------------------------------------------- backward

def _grads(net):
    return {k: (p.grad_weight.copy(), p.grad_bias.copy()) for k, p in net.named_params().items()}


def test_all_out_of_bounds_leaves_ranker_untouched(rng):
    net = make_net("base")
    net.stns[0].head.bias[:] = [1.0, 0.6, 0.0]
    left, right = rng.random((2, 3, 32, 32)), rng.random((2, 3, 32, 32))
    loss, _ = pair_objective(net, left, right, np.array([1.0, 0.0]))
    assert np.all(loss.lam == 1)
    g = _grads(net)
    for name, (gw, gb) in g.items():
        if name.startswith("stn"):
            continue
        assert not gw.any() and not gb.any(), name
    assert np.any(g["stn1.out"][1])


def test_tie_at_equal_scores_gives_no_rank_gradient(rng):
    net = make_net("siamese")
    img = rng.random((1, 3, 32, 32))
    pair_objective(net, img, img, np.array([0.5]))
    for name, (gw, gb) in _grads(net).items():
        assert not gw.any() and not gb.any(), name


def test_swap_symmetry(rng):
    net = make_net("m")
    left, right = rng.random((3, 3, 64, 64)), rng.random((3, 3, 64, 64))
    y = np.array([1.0, 0.0, 0.5])
    a, _ = pair_objective(net, left, right, y, backward=False)
    b, _ = pair_objective(net, right, left, 1 - y, backward=False)
    np.testing.assert_allclose(a.total, b.total, atol=1e-12)
    assert np.array_equal(a.lam[:, 0], b.lam[:, 1])


def test_pair_loss_matches_breakdown(rng):
    net = make_net("base")
    left, right = rng.random((2, 3, 32, 32)), rng.random((2, 3, 32, 32))
    loss, _ = pair_objective(net, left, right, np.array([1.0, 0.0]), backward=False)
    for i in range(2):
        t1, t2 = net.score(left[i]), net.score(right[i])
        ref = combined_loss_single(t1, t2, [1.0, 0.0][i])
        assert loss.total[i] == pytest.approx(ref.total, abs=1e-12)
        assert loss.breakdown(i).recompute() == pytest.approx(loss.total[i], abs=1e-15)


def test_category_frozen_after_step(rng):
    net = make_net("c")
    before = {p.name: (p.weight.copy(), p.bias.copy()) for p in net.category.params}
    left, right = rng.random((4, 3, 32, 32)), rng.random((4, 3, 32, 32))
    pair_objective(net, left, right, np.array([1.0, 0.0, 1.0, 0.0]))
    sgd_step(net.trainable, 0.1)
    for p in net.category.params:
        assert np.array_equal(p.weight, before[p.name][0]) and np.array_equal(p.bias, before[p.name][1])
        assert not p.grad_weight.any()
    assert all(not p.name.startswith("category") for p in net.trainable)


def test_regression_needs_targets(rng):
    net = make_net("regression")
    x = rng.random((1, 3, 32, 32))
    with pytest.raises(ConfigError):
        pair_objective(net, x, x, np.array([1.0]))
    loss, res = pair_objective(net, x, x, None, targets=np.array([[0.2, 0.7]]))
    v = res.v[0]
    assert loss.total[0] == pytest.approx(0.5 * ((v - 0.2) ** 2 + (v - 0.7) ** 2), abs=1e-14)


def test_random_crops_keep_shape(rng):
    imgs = rng.random((3, 3, 64, 64))
    out = ranker.random_crops(imgs, 0.9, make_rng(0))
    assert out.shape == imgs.shape
    assert ranker.random_crops(imgs, 1.0, make_rng(0)) is imgs
