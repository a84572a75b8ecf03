"""Structured differentiable operations built on ``Tensor``.

Shapes follow the conventions of the detection pipeline: feature maps are
(C, H, W) with row = y cell and col = x cell, point features are (N, C), and
grouped point features are (B, M, C) with a boolean membership mask.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight.T + bias for 2D ``x`` of shape (N, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(
            "linear shape mismatch: x %s vs weight %s" % (x.data.shape, weight.data.shape))
    wt = weight.transpose(1, 0)
    out = x @ wt
    if bias is not None:
        out = out + bias
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """3x3 cross-correlation with zero padding.

    x: (C_in, H, W); kernel: (C_out, C_in, 3, 3). Output spatial dims are
    floor((H + 2*pad - 3) / stride) + 1 and likewise for W.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1, got %d" % stride)
    cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if (kh, kw) != (3, 3) or cin_k != cin:
        raise ValueError(
            "conv2d expects kernel (C_out, %d, 3, 3), got %s" % (cin, kernel.data.shape))
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - 3) // stride + 1
    wo = (w + 2 * pad - 3) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d output would be empty for input %s" % (x.data.shape,))

    k2d = kernel.data.reshape(cout, cin, 9)
    slices = []
    out2d = np.zeros((cout, ho * wo))
    for di in range(3):
        for dj in range(3):
            sl = xp[:, di:di + (ho - 1) * stride + 1:stride,
                    dj:dj + (wo - 1) * stride + 1:stride].reshape(cin, ho * wo)
            slices.append(sl)
            out2d += k2d[:, :, di * 3 + dj] @ sl
    data = out2d.reshape(cout, ho, wo)
    if bias is not None:
        data = data + bias.data[:, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2d = g.reshape(cout, ho * wo)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(1, 2)))
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for idx, sl in enumerate(slices):
                gk[:, :, idx // 3, idx % 3] = g2d @ sl.T
            kernel.accumulate(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    contrib = (k2d[:, :, di * 3 + dj].T @ g2d).reshape(cin, ho, wo)
                    gxp[:, di:di + (ho - 1) * stride + 1:stride,
                        dj:dj + (wo - 1) * stride + 1:stride] += contrib
            x.accumulate(gxp[:, pad:pad + h, pad:pad + w] if pad else gxp)

    return Tensor._make(data, parents, backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of a (C, H, W) map."""
    c, h, w = x.data.shape
    data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return Tensor._make(data, (x,), backward)


def bilinear_sample(fmap: Tensor, points: np.ndarray) -> Tensor:
    """Bilinear interpolation of a (C, H, W) map at continuous (row, col) points.

    Each output row blends the four neighboring grid nodes of one point.
    Coordinates are clamped to [0, H-1] x [0, W-1] before interpolation, so
    slightly out-of-range points read border values. Differentiable with
    respect to ``fmap`` only; the points are fixed geometry.
    """
    c, h, w = fmap.data.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    r = np.clip(pts[:, 0], 0.0, h - 1.0)
    col = np.clip(pts[:, 1], 0.0, w - 1.0)
    r0 = np.minimum(np.floor(r), max(h - 2, 0)).astype(np.int64)
    c0 = np.minimum(np.floor(col), max(w - 2, 0)).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = col - c0
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    f2d = fmap.data.reshape(c, h * w)
    i00 = r0 * w + c0
    i01 = r0 * w + c1
    i10 = r1 * w + c0
    i11 = r1 * w + c1
    data = (w00[:, None] * f2d[:, i00].T + w01[:, None] * f2d[:, i01].T
            + w10[:, None] * f2d[:, i10].T + w11[:, None] * f2d[:, i11].T)

    def backward(g):
        if not fmap.requires_grad:
            return
        k = len(pts)
        flat_idx = np.concatenate([i00, i01, i10, i11])
        weights = np.concatenate([w00, w01, w10, w11])
        contrib = (weights[:, None] * np.tile(g, (4, 1))).ravel()
        combined = (flat_idx[:, None] * c + np.arange(c)[None, :]).ravel()
        acc = np.bincount(combined, weights=contrib, minlength=h * w * c)
        fmap.accumulate(acc.reshape(h * w, c).T.reshape(c, h, w))

    return Tensor._make(data, (fmap,), backward)


def masked_max(x: Tensor, mask: np.ndarray) -> Tensor:
    """Channelwise max over masked group members.

    x: (B, M, C); mask: boolean (B, M). Output (B, C) takes the max over rows
    where the mask is true; a group with no member set contributes zeros.
    Gradient flows to the (first-tie) argmax member of each channel.
    """
    b, m, c = x.data.shape
    mask = np.asarray(mask, dtype=bool).reshape(b, m)
    masked = np.where(mask[:, :, None], x.data, -np.inf)
    idx = np.argmax(masked, axis=1)
    vals = np.take_along_axis(masked, idx[:, None, :], axis=1).squeeze(1)
    empty = ~mask.any(axis=1)
    vals[empty] = 0.0

    def backward(g):
        if not x.requires_grad:
            return
        buf = np.zeros_like(x.data)
        safe_g = np.where(empty[:, None], 0.0, g)
        np.put_along_axis(buf, idx[:, None, :], safe_g[:, None, :], axis=1)
        x.accumulate(buf)

    return Tensor._make(vals, (x,), backward)


def gather_points(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: x (B, M, C), idx (B, ...) -> (B, ..., C)."""
    b, m, c = x.data.shape
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != b:
        raise ValueError("index batch %d does not match x batch %d" % (idx.shape[0], b))
    batch = np.arange(b).reshape((b,) + (1,) * (idx.ndim - 1))
    data = x.data[batch, idx]

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            np.add.at(buf, (np.broadcast_to(batch, idx.shape), idx), g)
            x.accumulate(buf)

    return Tensor._make(data, (x,), backward)


def scatter_pillars(features: Tensor, coords: np.ndarray, shape: tuple[int, int]) -> Tensor:
    """Place per-pillar feature columns into a dense (C, H, W) pseudo image.

    features: (C, P); coords: integer (P, 2) of (row, col). Cells not named by
    any pillar stay zero. Duplicate coordinates are rejected because each cell
    must hold exactly one pillar's feature vector.
    """
    c, p = features.data.shape
    h, w = shape
    coords = np.asarray(coords, dtype=np.int64).reshape(p, 2)
    if p and (coords.min() < 0 or coords[:, 0].max() >= h or coords[:, 1].max() >= w):
        raise ValueError("pillar coords fall outside the %dx%d grid" % (h, w))
    flat = coords[:, 0] * w + coords[:, 1]
    if len(np.unique(flat)) != p:
        raise ValueError("duplicate pillar coords are not allowed")
    data = np.zeros((c, h * w))
    data[:, flat] = features.data
    data = data.reshape(c, h, w)

    def backward(g):
        if features.requires_grad:
            features.accumulate(g.reshape(c, h * w)[:, flat])

    return Tensor._make(data, (features,), backward)


def gather_pillars(image: Tensor, coords: np.ndarray) -> Tensor:
    """Inverse of ``scatter_pillars``: read (C, P) columns at integer coords."""
    c, h, w = image.data.shape
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    flat = coords[:, 0] * w + coords[:, 1]
    data = image.data.reshape(c, h * w)[:, flat]

    def backward(g):
        if image.requires_grad:
            buf = np.zeros((c, h * w))
            np.add.at(buf.T, flat, g.T)
            image.accumulate(buf.reshape(c, h, w))

    return Tensor._make(data, (image,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row softmax cross-entropy; logits (N, K), integer targets (N,)."""
    n, k = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(n)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    losses = log_z - shifted[np.arange(n), targets]

    def backward(g):
        if not logits.requires_grad:
            return
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), targets] -= 1.0
        logits.accumulate(soft * g[:, None])

    return Tensor._make(losses, (logits,), backward)


def smooth_l1(x: Tensor) -> Tensor:
    """Huber-style loss: 0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    inner = np.abs(x.data) < 1.0
    data = np.where(inner, 0.5 * x.data * x.data, np.abs(x.data) - 0.5)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * np.where(inner, x.data, np.sign(x.data)))

    return Tensor._make(data, (x,), backward)
