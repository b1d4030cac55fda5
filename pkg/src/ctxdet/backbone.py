"""Image-side blocks: CNN backbone, channel attention, FPN, global context
encoder, and RoI feature pooling.

All blocks are pure functions of (inputs, params) where params is a flat
dict of name -> Tensor. Init helpers build that dict with fan-in-scaled
uniform weights, the one convention used everywhere in this package.

The backbone is a small 4-stage CNN producing strides {4, 8, 16, 32}
(a stand-in for heavyweight pretrained encoders; every downstream block
only sees the pyramid contract, not the encoder).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .geometry import assign_fpn_level, box_area
from .tensor import Tensor

FPN_STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


def init_conv(rng, prefix, cout, cin, k, params):
    """Fan-in-scaled uniform conv weights: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(cin * k * k)
    params[f"{prefix}.w"] = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)),
                                   requires_grad=True)
    params[f"{prefix}.b"] = Tensor(rng.uniform(-bound, bound, size=cout),
                                   requires_grad=True)


def init_linear(rng, prefix, d_in, d_out, params):
    """Weights stored [in, out] for row-vector matmul."""
    bound = 1.0 / np.sqrt(d_in)
    params[f"{prefix}.w"] = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)),
                                   requires_grad=True)
    params[f"{prefix}.b"] = Tensor(rng.uniform(-bound, bound, size=d_out),
                                   requires_grad=True)


def _conv_block(x, params, prefix, stride):
    return T.relu(T.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"],
                           stride=stride, padding=1))


def init_backbone(rng, params, channels=(16, 32, 64, 128)):
    c1, c2, c3, c4 = channels
    init_conv(rng, "bb.stem1", c1, 3, 3, params)
    init_conv(rng, "bb.stem2", c1, c1, 3, params)
    init_conv(rng, "bb.stage3", c2, c1, 3, params)
    init_conv(rng, "bb.stage4", c3, c2, 3, params)
    init_conv(rng, "bb.stage5", c4, c3, 3, params)


def backbone_forward(image, params):
    """[B,3,H,W] -> {2: C2, 3: C3, 4: C4, 5: C5} at strides {4,8,16,32}."""
    image = T.as_tensor(image)
    _, _, h, w = image.shape
    if h % 32 or w % 32:
        raise ConfigError(f"backbone needs H,W divisible by 32, got {h}x{w}")
    x = _conv_block(image, params, "bb.stem1", 2)
    c2 = _conv_block(x, params, "bb.stem2", 2)
    c3 = _conv_block(c2, params, "bb.stage3", 2)
    c4 = _conv_block(c3, params, "bb.stage4", 2)
    c5 = _conv_block(c4, params, "bb.stage5", 2)
    return {2: c2, 3: c3, 4: c4, 5: c5}


def init_ace(rng, params, channels, r=None):
    if r is None:
        r = 16 if channels >= 16 else 4
    if channels % r:
        raise ConfigError(f"ACE needs channels divisible by r, got {channels} % {r}")
    init_linear(rng, "ace.fc1", channels, channels // r, params)
    init_linear(rng, "ace.fc2", channels // r, channels, params)
    return r


def ace_forward(c5, params):
    """Squeeze-excitation gate on the final stage: x * sigmoid(MLP(GAP(x)))."""
    c5 = T.as_tensor(c5)
    pooled = T.global_avg_pool(c5)  # [B,C]
    hidden = T.relu(T.linear(pooled, params["ace.fc1.w"], params["ace.fc1.b"]))
    gate = T.sigmoid(T.linear(hidden, params["ace.fc2.w"], params["ace.fc2.b"]))
    b, c = gate.shape
    return T.mul(c5, T.reshape(gate, (b, c, 1, 1)))


def init_fpn(rng, params, channels=(16, 32, 64, 128), fpn_dim=64):
    for lvl, cin in zip((2, 3, 4, 5), channels):
        init_conv(rng, f"fpn.lat{lvl}", fpn_dim, cin, 1, params)
        init_conv(rng, f"fpn.out{lvl}", fpn_dim, fpn_dim, 3, params)


def fpn_forward(feats, params):
    """Top-down pyramid: P_i = Conv3x3(lateral(C_i) + Upsample2x(P_{i+1}))."""
    laterals = {
        lvl: T.conv2d(feats[lvl], params[f"fpn.lat{lvl}.w"], params[f"fpn.lat{lvl}.b"])
        for lvl in (2, 3, 4, 5)
    }
    pyramid = {}
    pyramid[5] = T.conv2d(laterals[5], params["fpn.out5.w"], params["fpn.out5.b"],
                          padding=1)
    for lvl in (4, 3, 2):
        merged = T.add(laterals[lvl], T.upsample_nearest2(pyramid[lvl + 1]))
        pyramid[lvl] = T.conv2d(merged, params[f"fpn.out{lvl}.w"],
                                params[f"fpn.out{lvl}.b"], padding=1)
    return pyramid


def init_gce(rng, params, hidden=(64, 128), d_f=64):
    h1, h2 = hidden
    init_conv(rng, "gce.conv1", h1, 3, 3, params)
    init_conv(rng, "gce.conv2", h2, h1, 3, params)
    init_conv(rng, "gce.conv3", d_f, h2, 3, params)
    init_conv(rng, "gce.res", d_f, 3, 1, params)


def gce_forward(image, params):
    """Scene embedding [B, D_f]: strided conv tower + pooled-image residual.

    Main path: three stride-2 3x3 convs with ReLU. Residual path: the raw
    image average-pooled down 8x, then a 1x1 projection. Fused by addition
    and collapsed with global average pooling.
    """
    image = T.as_tensor(image)
    _, _, h, w = image.shape
    if h % 8 or w % 8:
        raise ConfigError(f"gce needs H,W divisible by 8, got {h}x{w}")
    x = _conv_block(image, params, "gce.conv1", 2)
    x = _conv_block(x, params, "gce.conv2", 2)
    x = _conv_block(x, params, "gce.conv3", 2)
    res = image
    for _ in range(3):
        res = T.avg_pool2d(res, k=3, stride=2, padding=1)
    res = T.conv2d(res, params["gce.res.w"], params["gce.res.b"])
    return T.global_avg_pool(T.add(x, res))


def _bilinear_row_weights(boxes, h, w, stride, grid=7):
    """Pooling weight matrix [N, h*w]: row i maps the flat feature map to the
    spatial mean of a grid x grid bilinear-sampled patch of box i.

    Sample points are cell centers, clamped to the valid pixel-center range
    (edge replication); a box with no overlap gets an untouched zero row.
    """
    n = boxes.shape[0]
    out = np.zeros((n, h * w))
    if n == 0:
        return out
    scale = 1.0 / stride
    x1, y1, x2, y2 = (boxes[:, 0] * scale, boxes[:, 1] * scale,
                      boxes[:, 2] * scale, boxes[:, 3] * scale)
    inside = (x2 > 0) & (y2 > 0) & (x1 < w) & (y1 < h) & (x2 > x1) & (y2 > y1)
    cells = (np.arange(grid) + 0.5) / grid
    # continuous sample coords -> fractional pixel indices (centers at +0.5)
    sx = x1[:, None] + cells[None, :] * (x2 - x1)[:, None] - 0.5
    sy = y1[:, None] + cells[None, :] * (y2 - y1)[:, None] - 0.5
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1i = np.minimum(x0 + 1, w - 1)
    y1i = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    inv = 1.0 / (grid * grid)
    rows = np.repeat(np.arange(n), grid * grid).reshape(n, grid, grid)
    for yi, yw in ((y0, 1.0 - fy), (y1i, fy)):
        for xi, xw in ((x0, 1.0 - fx), (x1i, fx)):
            idx = yi[:, :, None] * w + xi[:, None, :]
            wgt = (yw[:, :, None] * xw[:, None, :]) * inv
            np.add.at(out, (rows[inside], idx[inside]), wgt[inside])
    return out


def roi_pool(pyramid, boxes_px, strides=None, grid=7):
    """Pool per-proposal feature vectors: [B,N,4] pixel boxes -> [B,N,C].

    Each box samples a grid x grid patch (one bilinear tap per cell center)
    on its assigned pyramid level and keeps the spatial mean. Realized as a
    constant weight matrix per level so gradients flow into the features as
    a plain matmul; off-level rows are zero, levels are summed.
    """
    if strides is None:
        strides = FPN_STRIDES
    boxes_px = np.asarray(boxes_px, dtype=np.float64)
    if boxes_px.ndim != 3 or boxes_px.shape[-1] != 4:
        raise ShapeError(f"roi_pool expects boxes [B,N,4], got {boxes_px.shape}")
    bsz, n, _ = boxes_px.shape
    lo, hi = min(pyramid), max(pyramid)
    levels = np.clip(assign_fpn_level(boxes_px.reshape(-1, 4)).reshape(bsz, n), lo, hi)
    zero_area = box_area(boxes_px) == 0.0

    pooled = None
    for lvl, feat in sorted(pyramid.items()):
        _, c, h, w = feat.shape
        weight = np.zeros((bsz, n, h * w))
        for b in range(bsz):
            on_level = (levels[b] == lvl) & ~zero_area[b]
            if not on_level.any():
                continue
            weight[b, on_level] = _bilinear_row_weights(
                boxes_px[b, on_level], h, w, strides[lvl], grid)
        flat = T.reshape(feat, (bsz, c, h * w))
        part = T.matmul(Tensor(weight), T.transpose(flat, (0, 2, 1)))  # [B,N,C]
        pooled = part if pooled is None else T.add(pooled, part)
    return pooled
