"""Vision-expert path: pooling, bilinear sampling, deformable layers, ADT, soft router."""

import math
import warnings

import numpy as np
import pytest

from mome import ops
from mome.errors import ConfigError, DimensionError
from mome.gradcheck import grad_check
from mome.move import (ADT, AdtConfig, DeformableCrossAttention, DeformableLayer, FeatureBatch, FeatureMap,
                       MoVE, RouterDecision, SampleLayout, SoftRouter, adaptive_avg_pool2d, adt_forward,
                       bilinear_sample, deform_sample, deformable_cross_attention, deformable_layer,
                       expert_importance, gen_attention_weights, gen_sampling_points, move_aggregate,
                       reference_grid, soft_router)
from mome.nn import Linear
from mome.tensor import Tensor

from conftest import rand_tensor

SEEDS = range(5)


def small_cfg(**kw):
    base = dict(pool_h=2, pool_w=2, layers=2, heads=2, points=2, width=8)
    base.update(kw)
    return AdtConfig(**base)


def jitter(module, rng, names=("proj_p", "proj_w"), scale=0.05):
    """Give zero-initialised projections small random values so gradients are non-trivial."""
    for sub in module_iter(module):
        for n in names:
            lin = getattr(sub, n, None)
            if isinstance(lin, Linear):
                lin.weight.data[:] = rng.normal(scale=scale, size=lin.weight.shape)
                lin.bias.data[:] = rng.normal(scale=scale, size=lin.bias.shape)


def module_iter(m):
    yield m
    for v in vars(m).values():
        if hasattr(v, "named_parameters"):
            yield from module_iter(v)
        elif isinstance(v, list):
            for item in v:
                if hasattr(item, "named_parameters"):
                    yield from module_iter(item)


# --- adaptive pooling ----------------------------------------------------------------

def brute_pool(grid, oh, ow):
    H, W, C = grid.shape
    out = np.zeros((oh, ow, C))
    for i in range(oh):
        r0, r1 = math.floor(i * H / oh), math.ceil((i + 1) * H / oh)
        for j in range(ow):
            c0, c1 = math.floor(j * W / ow), math.ceil((j + 1) * W / ow)
            cells = [grid[r, c] for r in range(r0, r1) for c in range(c0, c1)]
            out[i, j] = np.mean(cells, axis=0)
    return out


def test_pool_matches_brute_force_on_all_small_shapes():
    rng = np.random.default_rng(0)
    for H in range(1, 9):
        for W in range(1, 9):
            grid = rng.integers(-50, 50, size=(H, W, 3)).astype(float)
            for oh in range(1, 5):
                for ow in range(1, 5):
                    got = adaptive_avg_pool2d(Tensor(grid), oh, ow).data
                    assert np.array_equal(got, brute_pool(grid, oh, ow)), (H, W, oh, ow)


def test_pool_real_valued_inputs():
    rng = np.random.default_rng(1)
    for _ in range(50):
        H, W = rng.integers(1, 9, size=2)
        grid = rng.normal(size=(H, W, 2))
        oh, ow = rng.integers(1, 5, size=2)
        np.testing.assert_allclose(adaptive_avg_pool2d(Tensor(grid), oh, ow).data, brute_pool(grid, oh, ow),
                                   rtol=0, atol=1e-12)


def test_pool_examples():
    const = np.full((5, 7, 2), 3.25)
    np.testing.assert_array_equal(adaptive_avg_pool2d(Tensor(const), 3, 2).data, 3.25)
    g = np.arange(1.0, 17.0).reshape(4, 4, 1)
    np.testing.assert_array_equal(adaptive_avg_pool2d(Tensor(g), 2, 2).data[..., 0], [[3.5, 5.5], [11.5, 13.5]])
    g = np.arange(1.0, 10.0).reshape(3, 3, 1)
    # bins [0,2) and [1,3) on both axes
    expected = [[np.mean([1, 2, 4, 5]), np.mean([2, 3, 5, 6])], [np.mean([4, 5, 7, 8]), np.mean([5, 6, 8, 9])]]
    np.testing.assert_array_equal(adaptive_avg_pool2d(Tensor(g), 2, 2).data[..., 0], expected)


def test_pool_zero_target_is_config_error():
    with pytest.raises(ConfigError):
        adaptive_avg_pool2d(Tensor(np.ones((3, 3, 1))), 0, 2)


def test_batched_pool_equals_per_map_pool():
    rng = np.random.default_rng(2)
    maps = [FeatureMap(0, rng.normal(size=(h, w, 3))) for h, w in [(2, 5), (7, 3), (1, 1)]]
    fb = FeatureBatch(maps)
    got = fb.pooled(2, 3).data
    for b, m in enumerate(maps):
        np.testing.assert_allclose(got[b], adaptive_avg_pool2d(m, 2, 3).data.reshape(6, 3), atol=1e-15)


# --- bilinear sampling ----------------------------------------------------------------

def brute_bilinear(grid, x, y):
    """Zero-padded bilinear read, written independently of the vectorised sampler."""
    H, W, C = grid.shape
    px, py = x * (W - 1), y * (H - 1)
    c0, r0 = math.floor(px), math.floor(py)
    out = np.zeros(C)
    for r in (r0, r0 + 1):
        for c in (c0, c0 + 1):
            if 0 <= r < H and 0 <= c < W:
                out += (1 - abs(px - c)) * (1 - abs(py - r)) * grid[r, c]
    return out


def test_bilinear_matches_padded_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        H, W = rng.integers(1, 9, size=2)
        grid = rng.normal(size=(H, W, 3))
        x, y = rng.uniform(-0.6, 1.6, size=2)
        np.testing.assert_allclose(bilinear_sample(grid, (x, y)).data, brute_bilinear(grid, x, y),
                                   rtol=0, atol=1e-12)


def test_bilinear_examples():
    rng = np.random.default_rng(4)
    grid = rng.normal(size=(4, 5, 2))
    for h, w in [(0, 0), (3, 4), (2, 1)]:
        assert np.array_equal(bilinear_sample(grid, (w / 4, h / 3)).data, grid[h, w])
    mid = bilinear_sample(grid, (1.5 / 4, 1 / 3)).data
    np.testing.assert_allclose(mid, (grid[1, 1] + grid[1, 2]) / 2, atol=1e-15)
    g4 = rng.normal(size=(4, 4, 2))
    np.testing.assert_allclose(bilinear_sample(g4, (-0.5, 0.5)).data, brute_bilinear(g4, -0.5, 0.5), atol=1e-15)
    far = bilinear_sample(g4, (3.0, -2.0)).data
    assert np.array_equal(far, np.zeros(2))


def _off_kink(rng, n, H, W):
    """Random normalised points whose pixel coordinates sit away from integer kinks."""
    px = rng.integers(-1, W, size=n) + rng.uniform(0.1, 0.9, size=n)
    py = rng.integers(-1, H, size=n) + rng.uniform(0.1, 0.9, size=n)
    return np.stack([px / max(W - 1, 1), py / max(H - 1, 1)], axis=-1)


@pytest.mark.parametrize("seed", SEEDS)
def test_deform_sample_gradients(seed):
    rng = np.random.default_rng(seed)
    shapes = [(3, 4), (5, 2)]
    T = sum(h * w for h, w in shapes)
    Nh, Np, Ch = 2, 3, 2
    value = rand_tensor(rng, T, Nh * Ch)
    owner = np.array([0, 1, 1])
    pts = np.zeros((3, Nh, Np, 2))
    for q, o in enumerate(owner):
        pts[q] = _off_kink(rng, Nh * Np, *shapes[o]).reshape(Nh, Np, 2)
    points = Tensor(pts, requires_grad=True)
    weights = rand_tensor(rng, 3, Nh, Np)
    layout = SampleLayout(np.array([3, 5]), np.array([4, 2]), np.array([0, 12]), owner)
    w = Tensor(rng.normal(size=(3, Nh * Ch)))

    def loss():
        return ops.sum(ops.mul(deform_sample(value, points, weights, layout), w))

    assert grad_check(loss, [value, points, weights], h=1e-6) < 1e-6


def test_deform_sample_matches_per_point_oracle():
    rng = np.random.default_rng(9)
    H, W, Nh, Np, Ch = 4, 3, 2, 3, 2
    grid = rng.normal(size=(H, W, Nh * Ch))
    pts = rng.uniform(-0.3, 1.3, size=(2, Nh, Np, 2))
    wts = rng.uniform(size=(2, Nh, Np))
    layout = SampleLayout(np.array([H]), np.array([W]), np.array([0]), np.zeros(2, dtype=int))
    got = deform_sample(Tensor(grid.reshape(-1, Nh * Ch)), Tensor(pts), Tensor(wts), layout).data
    for q in range(2):
        for j in range(Nh):
            sl = slice(j * Ch, (j + 1) * Ch)
            ref = sum(wts[q, j, k] * brute_bilinear(grid[..., sl], *pts[q, j, k]) for k in range(Np))
            np.testing.assert_allclose(got[q, sl], ref, atol=1e-12)


# --- sampling points and weights -----------------------------------------------------

def test_zero_proj_p_samples_reference_points():
    rng = np.random.default_rng(0)
    cfg = small_cfg(pool_h=3, pool_w=2, heads=2, points=3)
    att = DeformableCrossAttention(4, cfg, rng)
    q = Tensor(rng.normal(size=(6, 8)))
    p = att.sampling_points(q).data
    R = reference_grid(3, 2)
    assert p.shape == (6, 2, 3, 2)
    np.testing.assert_array_equal(p, np.broadcast_to(R[:, None, None, :], p.shape))


def test_offset_is_additive():
    proj_p = Linear(4, 2 * 1 * 2, np.random.default_rng(0), zero=True)
    proj_p.bias.data[:] = [0.25, 0.0, 0.0, 0.0]  # head 0 moves +0.25 in x
    R = Tensor(np.array([[0.5, 0.5]]))
    p = gen_sampling_points(Tensor(np.zeros((1, 4))), R, proj_p, heads=2, points=1).data
    np.testing.assert_array_equal(p[0, 0, 0], [0.75, 0.5])
    np.testing.assert_array_equal(p[0, 1, 0], [0.5, 0.5])


def test_attention_weights_contract():
    rng = np.random.default_rng(1)
    zero = Linear(8, 2 * 4, rng, zero=True)
    w = gen_attention_weights(Tensor(rng.normal(size=(5, 8))), zero, 2, 4).data
    np.testing.assert_array_equal(w, 0.25)
    rand = Linear(8, 2 * 4, rng)
    w = gen_attention_weights(Tensor(rng.normal(size=(5, 8))), rand, 2, 4).data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    dom = Linear(8, 2 * 4, rng, zero=True)
    dom.bias.data[1] = 50.0
    w = gen_attention_weights(Tensor(np.zeros((1, 8))), dom, 2, 4).data
    assert abs(w[0, 0, 1] - 1.0) < 1e-12 and w[0, 1].tolist() == [0.25] * 4


def test_reference_gradient():
    rng = np.random.default_rng(2)
    H, W = 5, 6
    value = Tensor(rng.normal(size=(H * W, 4)))
    R = Tensor(np.array([[0.31, 0.43], [0.62, 0.17]]), requires_grad=True)
    proj_p = Linear(4, 2 * 2 * 2, rng)
    proj_p.weight.data *= 0.01
    q = Tensor(rng.normal(size=(2, 4)))
    layout = SampleLayout(np.array([H]), np.array([W]), np.array([0]), np.zeros(2, dtype=int))
    wts = Tensor(np.full((2, 2, 2), 0.5))
    tgt = Tensor(rng.normal(size=(2, 4)))

    def loss():
        pts = gen_sampling_points(q, R, proj_p, 2, 2)
        return ops.sum(ops.mul(deform_sample(value, pts, wts, layout), tgt))

    assert grad_check(loss, [R], h=1e-6) < 1e-4


# --- deformable cross-attention and layers -------------------------------------------

def test_constant_field_collapse():
    rng = np.random.default_rng(3)
    cfg = small_cfg(pool_h=2, pool_w=3)
    att = DeformableCrossAttention(5, cfg, rng)
    jitter(att, rng, scale=0.02)
    c = rng.normal(size=5)
    q = Tensor(rng.normal(size=(6, 8)))
    outs = []
    for H, W in [(4, 4), (7, 3), (6, 9)]:
        f = FeatureMap(0, np.broadcast_to(c, (H, W, 5)).copy())
        pts = att.sampling_points(q).data
        assert (pts >= 0).all() and (pts <= 1).all()
        outs.append(deformable_cross_attention(q, f, att).data)
    expected = att.proj_o(att.proj_v(Tensor(c[None]))).data
    for o in outs:
        np.testing.assert_allclose(o, np.broadcast_to(expected, o.shape), atol=1e-10)
    att.proj_p.bias.data[:] += 0.05
    moved = deformable_cross_attention(q, FeatureMap(0, np.broadcast_to(c, (4, 4, 5)).copy()), att).data
    np.testing.assert_allclose(moved, outs[0], atol=1e-10)


def test_single_tap_reads_projected_cell():
    rng = np.random.default_rng(4)
    cfg = AdtConfig(pool_h=1, pool_w=1, layers=1, heads=2, points=1, width=4)
    att = DeformableCrossAttention(3, cfg, rng)
    att.reference.data[:] = [[1 / 3, 2 / 4]]  # grid cell (row 2, col 1) of a 5 x 4 map
    grid = rng.normal(size=(5, 4, 3))
    out = deformable_cross_attention(Tensor(rng.normal(size=(1, 4))), FeatureMap(0, grid), att).data
    expected = att.proj_o(att.proj_v(Tensor(grid[2, 1][None]))).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_cross_attention_divisibility():
    with pytest.raises(ConfigError):
        DeformableCrossAttention(3, AdtConfig(width=10, heads=4), np.random.default_rng(0))


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_attention_grad_check(seed):
    rng = np.random.default_rng(seed)
    cfg = small_cfg()
    att = DeformableCrossAttention(3, cfg, rng)
    jitter(att, rng)
    grid = Tensor(rng.normal(size=(4, 5, 3)), requires_grad=True)
    q = rand_tensor(rng, 4, 8)
    w = Tensor(rng.normal(size=(4, 8)))
    params = [q, grid] + att.parameters()
    assert grad_check(lambda: ops.sum(ops.mul(deformable_cross_attention(q, FeatureMap(0, grid), att), w)),
                      params, h=1e-6) < 1e-4


def test_zero_branches_make_layer_identity():
    rng = np.random.default_rng(5)
    layer = DeformableLayer(3, small_cfg(), rng, zero_out=True)
    q = Tensor(rng.normal(size=(4, 8)))
    out = deformable_layer(q, FeatureMap(0, rng.normal(size=(3, 6, 3))), layer)
    np.testing.assert_array_equal(out.data, q.data)


@pytest.mark.parametrize("seed", SEEDS)
def test_deformable_layer_stack_grad_check(seed):
    rng = np.random.default_rng(seed)
    cfg = small_cfg(layers=2)
    adt = ADT(3, cfg, rng)
    jitter(adt, rng)
    grid = Tensor(rng.normal(size=(5, 4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 8)))
    loss = lambda: ops.sum(ops.mul(adt_forward(FeatureMap(0, grid), cfg, adt), w))  # noqa: E731
    assert grad_check(loss, [grid] + adt.parameters(), h=1e-6) < 1e-4


# --- ADT -------------------------------------------------------------------------------

def test_adt_zero_layers_is_projected_pool():
    rng = np.random.default_rng(6)
    cfg = small_cfg(layers=0, pool_h=2, pool_w=3)
    adt = ADT(4, cfg, rng)
    f = FeatureMap(0, rng.normal(size=(5, 7, 4)))
    expected = adt.proj_in(Tensor(adaptive_avg_pool2d(f, 2, 3).data.reshape(6, 4))).data
    np.testing.assert_allclose(adt_forward(f, cfg, adt).data, expected, atol=1e-14)


def test_adt_unified_length():
    rng = np.random.default_rng(7)
    cfg = small_cfg(pool_h=3, pool_w=3)
    adt = ADT(4, cfg, rng)
    jitter(adt, rng)
    for _ in range(50):
        H, W = rng.integers(1, 13, size=2)
        out = adt_forward(FeatureMap(0, rng.normal(size=(H, W, 4))), cfg, adt)
        assert out.shape == (cfg.L, cfg.width)
        assert np.isfinite(out.data).all()
    a = adt_forward(FeatureMap(0, rng.normal(size=(7, 5, 4))), cfg, adt)
    b = adt_forward(FeatureMap(0, rng.normal(size=(3, 9, 4))), cfg, adt)
    assert a.shape == b.shape == (9, 8)


def test_adt_batch_matches_single_samples():
    rng = np.random.default_rng(8)
    cfg = small_cfg()
    adt = ADT(3, cfg, rng)
    jitter(adt, rng, scale=0.2)
    maps = [FeatureMap(0, rng.normal(size=s)) for s in [(4, 4, 3), (2, 7, 3), (6, 1, 3)]]
    batched = adt(FeatureBatch(maps)).data
    for b, m in enumerate(maps):
        np.testing.assert_allclose(batched[b], adt_forward(m, cfg, adt).data, atol=1e-12)


def test_adt_channel_mismatch():
    adt = ADT(3, small_cfg(), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        adt(FeatureBatch([FeatureMap(0, np.zeros((2, 2, 4)))]))


def test_reference_clamp():
    adt = ADT(3, small_cfg(), np.random.default_rng(0))
    ref = adt.layers[0].cross.reference
    ref.data[:] = [[-0.2, 0.5], [1.3, 0.1], [0.4, 2.0], [0.5, 0.5]]
    adt.clamp_reference()
    assert ref.data.min() >= 0 and ref.data.max() <= 1
    np.testing.assert_array_equal(ref.data[3], [0.5, 0.5])


# --- soft router, aggregation, importance ------------------------------------------------

def test_soft_router_zero_weights_uniform():
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    d = soft_router(Tensor(np.ones(5)), z(5, 8), z(8), z(8, 3), z(3))
    np.testing.assert_allclose(d.weights.data, 1 / 3, atol=1e-15)


def test_soft_router_forced_logits():
    rng = np.random.default_rng(0)
    W1, b1 = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=8))
    d = soft_router(Tensor(rng.normal(size=5)), W1, b1, Tensor(np.zeros((8, 3))), Tensor([2.0, 0.0, -1.0]))
    np.testing.assert_allclose(d.weights.data, [0.8438, 0.1142, 0.0420], atol=1e-4)
    np.testing.assert_allclose(d.logits, [2.0, 0.0, -1.0])


def randomise_router(r, rng, scale=1.0):
    r.fc2.weight.data[:] = rng.normal(scale=scale, size=r.fc2.weight.shape)
    r.fc2.bias.data[:] = rng.normal(scale=scale, size=r.fc2.bias.shape)
    return r


def test_untrained_router_is_uniform():
    rng = np.random.default_rng(0)
    w = SoftRouter(6, 4, rng)(Tensor(rng.normal(scale=5, size=(7, 6)))).weights.data
    np.testing.assert_array_equal(w, 0.25)


def test_soft_router_simplex():
    rng = np.random.default_rng(1)
    r = randomise_router(SoftRouter(6, 4, rng), rng, scale=3.0)
    for _ in range(20):
        w = r(Tensor(rng.normal(scale=5, size=(7, 6)))).weights.data
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_aggregate_contracts():
    rng = np.random.default_rng(2)
    seqs = [Tensor(rng.normal(size=(4, 8))) for _ in range(3)]
    out = move_aggregate(seqs, Tensor([0.0, 1.0, 0.0]))
    assert np.array_equal(out.fused.data, seqs[1].data)
    same = [seqs[0]] * 3
    np.testing.assert_allclose(move_aggregate(same, Tensor(np.full(3, 1 / 3))).fused.data, seqs[0].data, atol=1e-15)
    g1, g2 = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    lhs = move_aggregate(seqs, Tensor(g1)).fused.data + move_aggregate(seqs, Tensor(g2)).fused.data
    np.testing.assert_allclose(lhs, move_aggregate(seqs, Tensor(g1 + g2)).fused.data, atol=1e-10)
    res = move_aggregate(seqs, Tensor(g1))
    np.testing.assert_allclose(res.fused.data, sum(w * s.data for w, s in zip(g1, seqs)), atol=1e-10)
    with pytest.raises(DimensionError):
        move_aggregate([seqs[0], Tensor(np.zeros((3, 8)))], Tensor([0.5, 0.5]))


@pytest.mark.parametrize("seed", SEEDS)
def test_router_and_aggregation_grad_check(seed):
    rng = np.random.default_rng(seed)
    router = randomise_router(SoftRouter(4, 3, rng, hidden=6), rng)
    I = rand_tensor(rng, 2, 4)
    seqs = [rand_tensor(rng, 2, 3, 5) for _ in range(3)]
    w = Tensor(rng.normal(size=(2, 3, 5)))
    loss = lambda: ops.sum(ops.mul(move_aggregate(seqs, router(I)).fused, w))  # noqa: E731
    assert grad_check(loss, [I] + seqs + router.parameters()) < 1e-4


def test_importance_examples():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 8))
    b = a[::-1].copy()
    np.testing.assert_allclose(expert_importance(Tensor([0.5, 0.5]), [a, b]).values, [0.5, 0.5], atol=1e-15)
    np.testing.assert_array_equal(expert_importance(Tensor([0.0, 1.0]), [a, b]).values, [0.0, 1.0])
    imp = expert_importance(Tensor([0.5, 0.5]), [2 * a, a]).values
    np.testing.assert_allclose(imp, [2 / 3, 1 / 3], atol=1e-12)
    frob = expert_importance(Tensor([0.3, 0.7]), [a, b]).values
    mags = [0.3 * np.linalg.norm(a), 0.7 * np.linalg.norm(b)]
    np.testing.assert_allclose(frob, np.array(mags) / sum(mags), atol=1e-12)
    tm = expert_importance(Tensor([0.3, 0.7]), [a, b], mode="token_mean").values
    mags = [0.3 * np.linalg.norm(a.mean(0)), 0.7 * np.linalg.norm(b.mean(0))]
    np.testing.assert_allclose(tm, np.array(mags) / sum(mags), atol=1e-12)


def test_importance_degenerate_is_uniform_with_warning():
    z = np.zeros((3, 4))
    with pytest.warns(RuntimeWarning):
        imp = expert_importance(Tensor([0.2, 0.3, 0.5]), [z, z, z])
    assert imp.degenerate
    np.testing.assert_allclose(imp.values, 1 / 3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        expert_importance(Tensor([0.2, 0.8]), [np.ones((2, 2)), z])


# --- MoVE ------------------------------------------------------------------------------

def _batches(rng, channels, B=3):
    return [FeatureBatch([FeatureMap(e, rng.normal(size=(rng.integers(2, 6), rng.integers(2, 6), c)))
                          for _ in range(B)]) for e, c in enumerate(channels)]


def test_move_addition_is_uniform_and_routerless():
    rng = np.random.default_rng(4)
    mv = MoVE([3, 5, 4], small_cfg(), 6, rng, aggregation="addition")
    assert mv.router is None
    out = mv(_batches(rng, [3, 5, 4]), Tensor(rng.normal(size=(3, 6))))
    np.testing.assert_array_equal(out.weights.weights.data, 1 / 3)
    assert not out.weights.weights.requires_grad
    np.testing.assert_allclose(out.fused.data, sum(s.data for s in out.per_expert) / 3, atol=1e-12)


def test_move_single_expert_weight_one():
    rng = np.random.default_rng(5)
    mv = MoVE([3, 5, 4], small_cfg(), 6, rng, experts=[1])
    out = mv(_batches(rng, [3, 5, 4]), Tensor(rng.normal(size=(3, 6))))
    np.testing.assert_array_equal(out.weights.weights.data, 1.0)
    assert np.array_equal(out.fused.data, out.per_expert[0].data)


def test_move_avgpool_has_no_deformable_layers():
    mv = MoVE([3, 5], small_cfg(), 6, np.random.default_rng(0), transform="avgpool")
    assert all(len(a.layers) == 0 for a in mv.adts)
    with pytest.raises(ConfigError):
        MoVE([3], small_cfg(), 6, np.random.default_rng(0), transform="conv")


@pytest.mark.parametrize("seed", range(3))
def test_full_move_grad_check(seed):
    rng = np.random.default_rng(seed)
    cfg = small_cfg(layers=1)
    mv = MoVE([3, 2], cfg, 4, rng, router_hidden=6)
    jitter(mv, rng)
    randomise_router(mv.router, rng)
    batches = _batches(rng, [3, 2], B=2)
    I = rand_tensor(rng, 2, 4)
    w = Tensor(rng.normal(size=(2, cfg.L, cfg.width)))
    loss = lambda: ops.sum(ops.mul(mv(batches, I).fused, w))  # noqa: E731
    assert grad_check(loss, [I] + mv.parameters(), h=1e-6) < 1e-4


def test_router_decision_keeps_logits():
    rng = np.random.default_rng(6)
    r = randomise_router(SoftRouter(4, 3, rng), rng)
    d = r(Tensor(rng.normal(size=(2, 4))))
    assert isinstance(d, RouterDecision) and d.logits.shape == (2, 3)
    e = np.exp(d.logits - d.logits.max(1, keepdims=True))
    np.testing.assert_allclose(d.weights.data, e / e.sum(1, keepdims=True), atol=1e-14)
