"""Central finite-difference verification of every differentiable kernel.

Each registered check builds random input configurations, computes analytic
gradients through ``backward()``, and compares them against central
differences (f(x+h) - f(x-h)) / 2h in float64. The relative error bound is

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-3) < tol

with tol = 1e-4 and h = 1e-5. Builders keep inputs away from the kinks of
non-smooth ops (relu at 0, smooth_l1 at |x| = 1, clamp edges, max ties) since
a finite difference straddling a kink measures nothing.

``run_all`` powers both the test suite and the ``gradcheck`` CLI command.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..rng import Rng
from .tensor import Tensor, concat
from . import ops

H = 1e-5
TOL = 1e-4
_REL_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    configs: int
    coords: int
    max_rel_err: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOL


_REGISTRY: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn
    return deco


def registered_names() -> list[str]:
    return sorted(_REGISTRY)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), _REL_FLOOR)


def _probe(graph, arrays, wrt, rng: Rng, max_coords: int) -> tuple[float, int]:
    """Compare analytic and numeric partials for one configuration.

    graph: callable(list[Tensor]) -> scalar Tensor, pure in its inputs.
    Returns (worst relative error, number of coordinates probed).
    """
    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = graph(tensors)
    if out.data.size != 1:
        raise ValueError("gradcheck graphs must end in a scalar")
    out.backward()

    worst = 0.0
    probed = 0
    for i in wrt:
        grad = tensors[i].grad
        if grad is None:
            grad = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = range(n)
        else:
            coords = sorted({rng.randint(n) for _ in range(max_coords)})
        for coord in coords:
            orig = flat[coord]
            flat[coord] = orig + H
            f_plus = float(graph([Tensor(a) for a in arrays]).data)
            flat[coord] = orig - H
            f_minus = float(graph([Tensor(a) for a in arrays]).data)
            flat[coord] = orig
            numeric = (f_plus - f_minus) / (2.0 * H)
            worst = max(worst, _rel_err(float(grad.reshape(-1)[coord]), numeric))
            probed += 1
    return worst, probed


def _run_builder(name: str, builder, rng: Rng, n_configs: int, max_coords: int = 6
                 ) -> CheckResult:
    start = time.perf_counter()
    worst = 0.0
    coords = 0
    for _ in range(n_configs):
        graph, arrays, wrt = builder(rng)
        w, c = _probe(graph, arrays, wrt, rng, max_coords)
        worst = max(worst, w)
        coords += c
    return CheckResult(name, n_configs, coords, worst, time.perf_counter() - start)


def _weights_for(rng: Rng, shape) -> np.ndarray:
    """Fixed random weights that scalarize an op output via a dot product."""
    return rng.normals(int(np.prod(shape))).reshape(shape)


# -- elementary ops ---------------------------------------------------------------


@register("linear")
def _check_linear(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n, din, dout = 1 + r.randint(4), 1 + r.randint(5), 1 + r.randint(4)
        x = r.normals(n * din).reshape(n, din)
        w = r.normals(dout * din).reshape(dout, din)
        b = r.normals(dout)
        wts = _weights_for(r, (n, dout))

        def graph(ts):
            return (ops.linear(ts[0], ts[1], ts[2]) * Tensor(wts)).sum()

        return graph, [x, w, b], [0, 1, 2]

    return _run_builder("linear", build, rng, n_configs)


@register("matmul")
def _check_matmul(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n, k, m = 1 + r.randint(4), 1 + r.randint(4), 1 + r.randint(4)
        a = r.normals(n * k).reshape(n, k)
        b = r.normals(k * m).reshape(k, m)
        wts = _weights_for(r, (n, m))

        def graph(ts):
            return ((ts[0] @ ts[1]) * Tensor(wts)).sum()

        return graph, [a, b], [0, 1]

    return _run_builder("matmul", build, rng, n_configs)


@register("arith_broadcast")
def _check_arith(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n, m = 2 + r.randint(3), 2 + r.randint(3)
        a = r.normals(n * m).reshape(n, m)
        b = r.normals(m)                       # broadcasts over rows
        c = r.normals(n).reshape(n, 1)         # broadcasts over cols
        d = 1.5 + r.randoms(n * m).reshape(n, m)  # safe denominator
        wts = _weights_for(r, (n, m))

        def graph(ts):
            e = (ts[0] * ts[1] + ts[2] - ts[0] / ts[3]) * Tensor(wts)
            return e.sum()

        return graph, [a, b, c, d], [0, 1, 2, 3]

    return _run_builder("arith_broadcast", build, rng, n_configs)


@register("relu")
def _check_relu(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n = 4 + r.randint(8)
        x = r.normals(n)
        x = np.where(np.abs(x) < 0.05, x + np.sign(x + 1e-12) * 0.1, x)  # clear of the kink
        wts = _weights_for(r, (n,))

        def graph(ts):
            return (ts[0].relu() * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("relu", build, rng, n_configs)


@register("sigmoid")
def _check_sigmoid(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n = 4 + r.randint(8)
        x = r.normals(n, 0.0, 2.0)
        wts = _weights_for(r, (n,))

        def graph(ts):
            return (ts[0].sigmoid() * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("sigmoid", build, rng, n_configs)


@register("exp_log_pow")
def _check_exp_log_pow(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n = 4 + r.randint(6)
        x = 0.2 + r.randoms(n) * 3.0
        e = [0.5, 2.0, 3.0][r.randint(3)]
        wts = _weights_for(r, (n,))

        def graph(ts):
            y = ts[0].log().exp().powc(e)
            return (y * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("exp_log_pow", build, rng, n_configs)


@register("clamp")
def _check_clamp(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n = 6 + r.randint(6)
        x = r.normals(n, 0.0, 2.0)
        # keep every value at least 10h away from the clamp edges at +-1
        x = np.where(np.abs(np.abs(x) - 1.0) < 1e-3, x * 1.01, x)
        wts = _weights_for(r, (n,))

        def graph(ts):
            return (ts[0].clamp(-1.0, 1.0) * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("clamp", build, rng, n_configs)


@register("reshape_transpose_concat")
def _check_reshape(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n, m = 2 + r.randint(3), 2 + r.randint(3)
        a = r.normals(n * m).reshape(n, m)
        b = r.normals(n * m).reshape(n, m)
        wts = _weights_for(r, (2 * m * n,))

        def graph(ts):
            joined = concat([ts[0].transpose(1, 0), ts[1].transpose(1, 0)], axis=0)
            return (joined.reshape(2 * m * n) * Tensor(wts)).sum()

        return graph, [a, b], [0, 1]

    return _run_builder("reshape_transpose_concat", build, rng, n_configs)


@register("take_rows")
def _check_take_rows(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n, m = 4 + r.randint(4), 2 + r.randint(3)
        x = r.normals(n * m).reshape(n, m)
        idx = np.array([r.randint(n) for _ in range(n + 2)])  # with repeats
        wts = _weights_for(r, (len(idx), m))

        def graph(ts):
            return (ts[0].take_rows(idx) * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("take_rows", build, rng, n_configs)


def _spread_values(r: Rng, shape, min_gap: float = 1e-3) -> np.ndarray:
    """Random values whose pairwise gaps exceed ``min_gap`` (no max ties)."""
    n = int(np.prod(shape))
    base = np.argsort(r.randoms(n)).astype(np.float64)  # random permutation of 0..n-1
    vals = base * (min_gap * 37.0) + r.randoms(n) * min_gap * 0.2
    return vals.reshape(shape)


@register("max_over_axis")
def _check_max(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n, m, k = 2 + r.randint(2), 3 + r.randint(3), 2 + r.randint(2)
        x = _spread_values(r, (n, m, k))
        axis = r.randint(3)
        out_shape = tuple(d for i, d in enumerate((n, m, k)) if i != axis)
        wts = _weights_for(r, out_shape)

        def graph(ts):
            vals, _ = ts[0].max_over_axis(axis)
            return (vals * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("max_over_axis", build, rng, n_configs)


@register("masked_max")
def _check_masked_max(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        b, m, c = 2 + r.randint(2), 3 + r.randint(3), 2 + r.randint(3)
        x = _spread_values(r, (b, m, c))
        mask = r.randoms(b * m).reshape(b, m) < 0.7
        if b > 1:
            mask[r.randint(b)] = False  # exercise the empty-group path
        wts = _weights_for(r, (b, c))

        def graph(ts):
            return (ops.masked_max(ts[0], mask) * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("masked_max", build, rng, n_configs)


@register("gather_points")
def _check_gather_points(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        b, m, c = 2 + r.randint(2), 4 + r.randint(3), 2 + r.randint(2)
        s, k = 2 + r.randint(2), 2 + r.randint(2)
        x = r.normals(b * m * c).reshape(b, m, c)
        idx = np.array([[[r.randint(m) for _ in range(k)] for _ in range(s)]
                        for _ in range(b)])
        wts = _weights_for(r, (b, s, k, c))

        def graph(ts):
            return (ops.gather_points(ts[0], idx) * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("gather_points", build, rng, n_configs)


# -- structured ops ----------------------------------------------------------------


@register("conv2d")
def _check_conv2d(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        cin, cout = 1 + r.randint(3), 1 + r.randint(3)
        h, w = 3 + r.randint(4), 3 + r.randint(4)
        stride, pad = 1 + r.randint(2), r.randint(2)
        x = r.normals(cin * h * w).reshape(cin, h, w)
        k = r.normals(cout * cin * 9).reshape(cout, cin, 3, 3)
        b = r.normals(cout)
        ho = (h + 2 * pad - 3) // stride + 1
        wo = (w + 2 * pad - 3) // stride + 1
        wts = _weights_for(r, (cout, ho, wo))

        def graph(ts):
            return (ops.conv2d(ts[0], ts[1], ts[2], stride=stride, pad=pad)
                    * Tensor(wts)).sum()

        return graph, [x, k, b], [0, 1, 2]

    return _run_builder("conv2d", build, rng, n_configs)


@register("upsample2x")
def _check_upsample(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        c, h, w = 1 + r.randint(3), 2 + r.randint(3), 2 + r.randint(3)
        x = r.normals(c * h * w).reshape(c, h, w)
        wts = _weights_for(r, (c, 2 * h, 2 * w))

        def graph(ts):
            return (ops.upsample2x(ts[0]) * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("upsample2x", build, rng, n_configs)


@register("bilinear_sample")
def _check_bilinear(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        c, h, w = 1 + r.randint(3), 3 + r.randint(4), 3 + r.randint(4)
        k = 3 + r.randint(5)
        x = r.normals(c * h * w).reshape(c, h, w)
        # points span the map and poke slightly outside to hit the clamp path
        pts = np.column_stack([
            r.randoms(k) * (h + 1.0) - 1.0,
            r.randoms(k) * (w + 1.0) - 1.0,
        ])
        wts = _weights_for(r, (k, c))

        def graph(ts):
            return (ops.bilinear_sample(ts[0], pts) * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("bilinear_sample", build, rng, n_configs)


@register("scatter_gather")
def _check_scatter(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        c, h, w = 1 + r.randint(3), 3 + r.randint(3), 3 + r.randint(3)
        p = 1 + r.randint(h * w - 1)
        cells = r.sample_prefix(h * w, p)
        coords = np.column_stack([cells // w, cells % w])
        feats = r.normals(c * p).reshape(c, p)
        wts = _weights_for(r, (c, p))

        def graph(ts):
            image = ops.scatter_pillars(ts[0], coords, (h, w))
            back = ops.gather_pillars(image, coords)
            return (back * Tensor(wts)).sum()

        return graph, [feats], [0]

    return _run_builder("scatter_gather", build, rng, n_configs)


@register("softmax_cross_entropy")
def _check_softmax_ce(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n, k = 2 + r.randint(4), 2 + r.randint(3)
        logits = r.normals(n * k, 0.0, 2.0).reshape(n, k)
        targets = np.array([r.randint(k) for _ in range(n)])
        wts = _weights_for(r, (n,))

        def graph(ts):
            return (ops.softmax_cross_entropy(ts[0], targets) * Tensor(wts)).sum()

        return graph, [logits], [0]

    return _run_builder("softmax_cross_entropy", build, rng, n_configs)


@register("smooth_l1")
def _check_smooth_l1(rng: Rng, n_configs: int) -> CheckResult:
    def build(r: Rng):
        n = 4 + r.randint(8)
        x = r.normals(n, 0.0, 1.5)
        x = np.where(np.abs(np.abs(x) - 1.0) < 1e-3, x * 1.01, x)  # off the |x|=1 kink
        wts = _weights_for(r, (n,))

        def graph(ts):
            return (ops.smooth_l1(ts[0]) * Tensor(wts)).sum()

        return graph, [x], [0]

    return _run_builder("smooth_l1", build, rng, n_configs)


@register("focal_loss")
def _check_focal(rng: Rng, n_configs: int) -> CheckResult:
    from ..targets import focal_loss

    def build(r: Rng):
        n = 4 + r.randint(6)
        p = 0.05 + 0.9 * r.randoms(n)      # clear of the probability clamp
        y = (r.randoms(n) < 0.5).astype(np.float64)
        wts = _weights_for(r, (n,))

        def graph(ts):
            return (focal_loss(ts[0], y, alpha=0.25, gamma=2.0) * Tensor(wts)).sum()

        return graph, [p], [0]

    return _run_builder("focal_loss", build, rng, n_configs)


@register("direction_loss")
def _check_direction(rng: Rng, n_configs: int) -> CheckResult:
    from ..targets import direction_loss

    def build(r: Rng):
        n = 3 + r.randint(5)
        logits = r.normals(n * 2, 0.0, 2.0).reshape(n, 2)
        bins = np.array([r.randint(2) for _ in range(n)])
        wts = _weights_for(r, (n,))

        def graph(ts):
            return (direction_loss(ts[0], bins) * Tensor(wts)).sum()

        return graph, [logits], [0]

    return _run_builder("direction_loss", build, rng, n_configs)


@register("composed_graph")
def _check_composed(rng: Rng, n_configs: int) -> CheckResult:
    """Three stacked ops, checked end to end against finite differences."""

    def build(r: Rng):
        n, m, k = 2 + r.randint(3), 2 + r.randint(3), 2 + r.randint(3)
        x = r.normals(n * m).reshape(n, m)
        w1 = r.normals(m * k).reshape(m, k)
        w2 = r.normals(k)
        pick = r.randint(3)
        wts = _weights_for(r, (n,))

        def graph(ts):
            hidden = ts[0] @ ts[1]
            if pick == 0:
                hidden = hidden.sigmoid()
            elif pick == 1:
                hidden = (hidden * hidden + 1.0).log()
            else:
                hidden = ops.smooth_l1(hidden + 2.5)  # shifted away from the kink
            out = hidden @ ts[2].reshape(k, 1)
            return (out.reshape(n) * Tensor(wts)).sum()

        return graph, [x, w1, w2], [0, 1, 2]

    return _run_builder("composed_graph", build, rng, n_configs)


@register("two_stage_loss")
def _check_two_stage(rng: Rng, n_configs: int) -> CheckResult:
    """Composed detector loss on a micro instance, differentiated to the map.

    Builds a tiny feature map, runs the proposal heads and the full pooled
    refinement branch (point sampling, visibility, attention, aggregation,
    refinement head, both stage losses) and checks the gradient with respect
    to the feature map and every parameter.
    """
    from .. import refine, targets
    from ..geometry import BBox3D

    def build(r: Rng):
        c, h, w = 4, 8, 8
        fmap = r.normals(c * h * w).reshape(c, h, w)
        w_cls = r.normals(2 * c, 0.0, 0.5).reshape(2, c)
        w_att = r.normals(c, 0.0, 0.5).reshape(1, c)
        b_att = r.normals(1)
        w_fc = r.normals(6 * 5 * c, 0.0, 0.5).reshape(6, 5 * c)
        b_fc = r.normals(6)
        w_reg = r.normals(7 * 6, 0.0, 0.5).reshape(7, 6)
        w_dir = r.normals(2 * 6, 0.0, 0.5).reshape(2, 6)
        w_cls2 = r.normals(1 * 6, 0.0, 0.5).reshape(1, 6)

        gt = BBox3D(3.0 + r.random(), 3.0 + r.random(), 0.8, 1.6, 3.5, 1.5,
                    r.uniform(-3.0, 3.0))
        proposal = BBox3D(gt.x + r.normal(0, 0.3), gt.y + r.normal(0, 0.3), 0.8,
                          1.7, 3.3, 1.5, gt.theta + r.normal(0, 0.2))
        sensor = (0.0, 0.0)
        n_kp = 1
        pois = refine.poi_positions(proposal.bev(), n_kp)
        vis = refine.point_visibility(proposal.bev(), sensor, n_kp)
        residual = targets.encode(gt, proposal)
        dir_bin = targets.direction_target(gt.theta, proposal.theta)

        def graph(ts):
            t_fmap, t_wcls, t_watt, t_batt, t_wfc, t_bfc, t_wreg, t_wdir, t_wcls2 = ts
            # stage one: a 1x1 head over two cells, focal + smooth L1 vs zero
            cells = t_fmap.reshape(c, h * w).transpose(1, 0).take_rows(
                np.array([9, 27]))
            logits1 = ops.linear(cells, t_wcls)
            cls1 = targets.focal_loss(
                logits1.reshape(4).sigmoid().clamp(1e-7, 1 - 1e-7),
                np.array([1.0, 0.0, 0.0, 0.0]), 0.25, 2.0).sum()
            # stage two: pooled refinement on the same map
            feats = ops.bilinear_sample(t_fmap, pois)  # grid units == meters here
            feats = feats * vis[:, None]
            att = ops.linear(feats, t_watt, t_batt).sigmoid()
            feats = feats * att
            agg = refine.aggregate_features(
                feats.reshape(1, len(pois), c), vis[None, :],
                np.array([refine.canonical_edge_order(proposal.bev(), sensor)]),
                n_kp)
            hidden = ops.linear(agg, t_wfc, t_bfc).relu()
            reg = ops.linear(hidden, t_wreg)
            dirs = ops.linear(hidden, t_wdir)
            cls2_logit = ops.linear(hidden, t_wcls2)
            cls2 = targets.focal_loss(
                cls2_logit.reshape(1).sigmoid().clamp(1e-7, 1 - 1e-7),
                np.array([1.0]), 0.25, 2.0).sum()
            reg_l = ops.smooth_l1(reg - Tensor(residual[None, :])).sum()
            dir_l = ops.softmax_cross_entropy(dirs, np.array([dir_bin])).sum()
            s2 = targets.stage_loss(cls2, reg_l, dir_l, 1, targets.LossWeights())
            s1 = targets.stage_loss(cls1, Tensor(0.0), Tensor(0.0), 1,
                                    targets.LossWeights())
            return s1 + s2

        arrays = [fmap, w_cls, w_att, b_att, w_fc, b_fc, w_reg, w_dir, w_cls2]
        return graph, arrays, list(range(len(arrays)))

    return _run_builder("two_stage_loss", build, rng, n_configs, max_coords=10)


def run_all(seed: int = 0, n_configs: int = 100, names: list[str] | None = None
            ) -> list[CheckResult]:
    """Run the registered checks and return their results."""
    selected = registered_names() if names is None else names
    unknown = [n for n in selected if n not in _REGISTRY]
    if unknown:
        raise KeyError("unknown gradcheck names: %s" % ", ".join(unknown))
    results = []
    for name in selected:
        rng = Rng(splitmix_of(seed, name))
        results.append(_REGISTRY[name](rng, n_configs))
    return results


def splitmix_of(seed: int, name: str) -> int:
    """Stable per-check seed derived from the base seed and check name."""
    from ..rng import derive_seed
    return derive_seed(seed, name)


def format_results(results: list[CheckResult]) -> str:
    lines = ["%-28s %8s %8s %12s %8s  %s" % (
        "check", "configs", "coords", "max_rel_err", "sec", "status")]
    for res in results:
        lines.append("%-28s %8d %8d %12.3e %8.2f  %s" % (
            res.name, res.configs, res.coords, res.max_rel_err,
            res.seconds, "ok" if res.ok else "FAIL"))
    return "\n".join(lines)
