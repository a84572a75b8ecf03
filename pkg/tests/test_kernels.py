"""Differentiable kernels: forward references, autograd, optimizer, schedule."""

import math

import numpy as np
import pytest

from poidet.kernels import ops
from poidet.kernels.gradcheck import registered_names, run_all
from poidet.kernels.optim import Adam, ScheduleConfig, lr_schedule
from poidet.kernels.tensor import Tensor, concat
from poidet.rng import Rng


# ---------------------------------------------------------------------------
# forward references

def test_linear_matches_numpy():
    rng = Rng(1)
    x = rng.normals(12).reshape(3, 4)
    w = rng.normals(20).reshape(5, 4)
    b = rng.normals(5)
    out = ops.linear(Tensor(x), Tensor(w), Tensor(b))
    assert np.allclose(out.data, x @ w.T + b, atol=1e-12)
    nob = ops.linear(Tensor(x), Tensor(w))
    assert np.allclose(nob.data, x @ w.T, atol=1e-12)


def _conv_ref(x, k, stride, pad):
    ci, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((co, oh, ow))
    for o in range(co):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * k[o])
    return out


def test_conv2d_matches_direct_convolution():
    rng = Rng(2)
    for stride, pad in [(1, 1), (2, 1), (1, 0), (2, 0)]:
        x = rng.normals(3 * 7 * 6).reshape(3, 7, 6)
        k = rng.normals(4 * 3 * 3 * 3).reshape(4, 3, 3, 3)
        b = rng.normals(4)
        out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad)
        want = _conv_ref(x, k, stride, pad) + b[:, None, None]
        assert np.allclose(out.data, want, atol=1e-10)


def test_upsample2x_nearest():
    x = np.arange(12, dtype=float).reshape(1, 3, 4)
    out = ops.upsample2x(Tensor(x)).data
    assert out.shape == (1, 6, 8)
    assert np.array_equal(out[0, ::2, ::2], x[0])
    assert np.array_equal(out[0, 1::2, 1::2], x[0])


def test_bilinear_sample_exact_on_linear_field():
    # f(r, c) = 2r - 3c + 1 is reproduced exactly by bilinear interpolation.
    rr, cc = np.mgrid[0:5, 0:6].astype(float)
    fmap = (2 * rr - 3 * cc + 1)[None, :, :]
    pts = np.array([[0.5, 0.5], [3.25, 4.75], [0.0, 0.0], [4.0, 5.0]])
    out = ops.bilinear_sample(Tensor(fmap), pts).data
    want = 2 * pts[:, 0] - 3 * pts[:, 1] + 1
    assert np.allclose(out[:, 0], want, atol=1e-12)


def test_bilinear_sample_clamps_out_of_range():
    fmap = np.arange(6, dtype=float).reshape(1, 2, 3)
    out = ops.bilinear_sample(Tensor(fmap), np.array([[-5.0, -5.0], [50.0, 50.0]])).data
    assert out[0, 0] == fmap[0, 0, 0]
    assert out[1, 0] == fmap[0, -1, -1]


def test_masked_max_matches_numpy():
    rng = Rng(3)
    x = rng.normals(5 * 7 * 3).reshape(5, 7, 3)
    mask = rng.randoms(5 * 7).reshape(5, 7) > 0.4
    mask[2] = False  # fully-masked group
    out = ops.masked_max(Tensor(x), mask).data
    assert out.shape == (5, 3)
    for i in range(5):
        for ch in range(3):
            if mask[i].any():
                assert out[i, ch] == x[i, mask[i], ch].max()
            else:
                assert out[i, ch] == 0.0


def test_gather_scatter_round_trip():
    rng = Rng(4)
    feats = rng.normals(3 * 4).reshape(3, 4)  # C=3, P=4 pillars
    coords = np.array([[0, 1], [2, 3], [1, 0], [2, 2]])
    img = ops.scatter_pillars(Tensor(feats), coords, (3, 5))
    assert img.shape == (3, 3, 5)
    assert np.allclose(img.data[:, 0, 1], feats[:, 0])
    assert np.allclose(img.data[:, 2, 2], feats[:, 3])
    assert img.data.sum() == pytest.approx(feats.sum())
    back = ops.gather_pillars(img, coords)
    assert np.allclose(back.data, feats)


def test_gather_points_rows():
    x = np.arange(24, dtype=float).reshape(2, 4, 3)
    idx = np.array([[3, 0, 3], [1, 1, 2]])
    out = ops.gather_points(Tensor(x), idx).data
    assert out.shape == (2, 3, 3)
    assert np.array_equal(out[0], x[0, [3, 0, 3]])
    assert np.array_equal(out[1], x[1, [1, 1, 2]])
    with pytest.raises(ValueError):
        ops.gather_points(Tensor(x), np.zeros((3, 1), dtype=int))


def test_softmax_cross_entropy_matches_logsumexp():
    rng = Rng(5)
    logits = rng.normals(6 * 3).reshape(6, 3)
    targets = np.array([0, 2, 1, 1, 0, 2])
    out = ops.softmax_cross_entropy(Tensor(logits), targets).data
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    want = lse - logits[np.arange(6), targets]
    assert np.allclose(out, want, atol=1e-12)


def test_smooth_l1_piecewise():
    x = np.array([-3.0, -1.0, -0.5, 0.0, 0.25, 1.0, 4.0])
    out = ops.smooth_l1(Tensor(x)).data
    want = np.where(np.abs(x) < 1.0, 0.5 * x * x, np.abs(x) - 0.5)
    assert np.allclose(out, want, atol=1e-12)


# ---------------------------------------------------------------------------
# autograd plumbing

def test_backward_simple_chain():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = (x * 2.0 + 1.0).relu().sum()
    y.backward()
    # d/dx relu(2x+1): 2 where 2x+1 > 0 else 0
    assert np.array_equal(x.grad, np.array([2.0, 0.0, 2.0]))


def test_backward_matmul_shapes():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.full((3, 4), 2.0), requires_grad=True)
    (a @ b).sum().backward()
    assert np.allclose(a.grad, np.full((2, 3), 8.0))
    assert np.allclose(b.grad, np.full((3, 4), 2.0))


def test_broadcast_add_grad_sums():
    a = Tensor(np.zeros((3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    (a + b).sum().backward()
    assert np.allclose(a.grad, np.ones((3, 4)))
    assert np.allclose(b.grad, np.full(4, 3.0))


def test_concat_backward_splits():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((3, 2)), requires_grad=True)
    out = concat([a, b], axis=0)
    out.backward(np.arange(10, dtype=float).reshape(5, 2))
    assert np.array_equal(a.grad, np.array([[0.0, 1.0], [2.0, 3.0]]))
    assert np.array_equal(b.grad, np.arange(4, 10, dtype=float).reshape(3, 2))


def test_detach_blocks_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    z = y.detach() * 5.0 + x
    z.sum().backward()
    assert np.array_equal(x.grad, np.array([1.0]))


def test_gradcheck_smoke():
    res = run_all(seed=1, n_configs=3, names=["linear", "conv2d", "masked_max"])
    assert all(r.ok for r in res)
    assert "linear" in registered_names()
    with pytest.raises(KeyError):
        run_all(names=["not_a_kernel"])


# ---------------------------------------------------------------------------
# optimizer and schedule

def test_adam_single_step_reference():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w}, beta2=0.999, eps=1e-8, weight_decay=0.0)
    w.grad = np.array([0.5, -1.5])
    opt.step(lr=0.1, beta1=0.9)
    # bias-corrected first step: update = g / (|g| + eps)
    want = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -1.5]) / (
        np.abs(np.array([0.5, -1.5])) + 1e-8)
    assert np.allclose(w.data, want, atol=1e-9)


def test_adam_weight_decay_decoupled():
    w = Tensor(np.array([4.0]), requires_grad=True)
    opt = Adam({"w": w}, weight_decay=0.1)
    w.grad = np.zeros(1)
    opt.step(lr=0.5, beta1=0.9)
    # zero gradient: parameter shrinks by lr * wd * w exactly
    assert np.allclose(w.data, np.array([4.0 - 0.5 * 0.1 * 4.0]))


def test_adam_rejects_nonfinite_gradient():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w})
    w.grad = np.array([np.nan])
    with pytest.raises(ValueError):
        opt.step(0.1)


def test_adam_deterministic_across_param_order():
    def run(names):
        ws = {n: Tensor(np.array([1.0 + i]), requires_grad=True)
              for i, n in enumerate(names)}
        opt = Adam(ws)
        for t in ws.values():
            t.grad = np.array([0.3])
        opt.step(0.01)
        return {n: ws[n].data.copy() for n in names}

    a = run(["p", "q"])
    b = dict(reversed(list(run(["p", "q"]).items())))
    assert all(np.allclose(a[k], b[k]) for k in a)


def test_lr_schedule_shape():
    cfg = ScheduleConfig()
    lr0, b0 = lr_schedule(0, 100, cfg)
    assert (lr0, b0) == (cfg.lr_start, cfg.beta1_hi)
    lr_peak, b_peak = lr_schedule(40, 100, cfg)
    assert lr_peak == pytest.approx(cfg.lr_max)
    assert b_peak == pytest.approx(cfg.beta1_lo)
    lr_end, b_end = lr_schedule(100, 100, cfg)
    assert lr_end == pytest.approx(cfg.lr_final)
    assert b_end == pytest.approx(cfg.beta1_hi)
    rising = [lr_schedule(s, 100, cfg)[0] for s in range(0, 41)]
    falling = [lr_schedule(s, 100, cfg)[0] for s in range(40, 101)]
    assert all(a <= b for a, b in zip(rising, rising[1:]))
    assert all(a >= b for a, b in zip(falling, falling[1:]))
    with pytest.raises(ValueError):
        lr_schedule(101, 100, cfg)
    assert lr_schedule(0, 0, cfg) == (cfg.lr_start, cfg.beta1_hi)
