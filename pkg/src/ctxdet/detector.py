"""End-to-end detector: denoising forward pass, training step, DDIM sampler.

Boxes cross three frames here. Ground truth and final detections live in
pixel xyxy; the diffusion state lives in signal space (scaled cxcywh); the
loss compares normalized xyxy in [0,1]. Conversions are kept explicit so
each frame appears exactly once per path.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .backbone import (ace_forward, backbone_forward, fpn_forward,
                       gce_forward, init_ace, init_backbone, init_fpn,
                       init_gce, roi_pool)
from .diffusion import (box_renewal, build_cosine_schedule, ddim_step,
                        ddim_timestep_pairs, denormalize_boxes,
                        epsilon_from_x0, normalize_boxes, q_sample)
from .errors import ConfigError, ContractError
from .geometry import cxcywh_to_xyxy, nms, xyxy_to_cxcywh
from .head import head_forward, init_head
from .loss import MatchWeights, hungarian, matching_cost, set_loss
from .tensor import GradTape, Tensor


@dataclass(frozen=True)
class DetectorConfig:
    """Everything needed to build, train and sample the detector."""

    num_classes: int = 3
    num_proposals: int = 500
    timesteps: int = 1000
    ddim_steps: int = 1
    signal_scale: float = 2.0
    renewal_threshold: float = 0.5
    renewal_stride: int = 1
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    backbone_channels: tuple = (16, 32, 64, 128)
    fpn_dim: int = 64
    gce_hidden: tuple = (64, 128)
    gce_dim: int = 64
    attention_heads: int = 4
    extra_self_attention: bool = False
    mmf_mode: str = "attention"
    dropout: float = 0.0
    clip_signal: bool = True
    learning_rate: float = 2.5e-5
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_eps: float = 0.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("renewal_threshold", "score_threshold", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0,1), got {v}")
        if self.ddim_steps < 1:
            raise ConfigError(f"ddim_steps must be >= 1, got {self.ddim_steps}")
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")
        if self.num_proposals < 1:
            raise ConfigError(
                f"num_proposals must be >= 1, got {self.num_proposals}")
        if self.renewal_stride < 1:
            raise ConfigError(
                f"renewal_stride must be >= 1, got {self.renewal_stride}")
        if self.fpn_dim % self.attention_heads:
            raise ConfigError(
                f"fpn_dim {self.fpn_dim} not divisible by "
                f"{self.attention_heads} heads")
        if self.mmf_mode not in ("attention", "additive"):
            raise ConfigError(f"unknown mmf_mode {self.mmf_mode!r}")
        if self.signal_scale <= 0.0:
            raise ConfigError(
                f"signal_scale must be positive, got {self.signal_scale}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        tuple_fields = {"backbone_channels", "gce_hidden"}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = {k: tuple(v) if k in tuple_fields else v for k, v in d.items()}
        return cls(**kw)

    def match_weights(self) -> MatchWeights:
        return MatchWeights(self.lambda_cls, self.lambda_l1, self.lambda_giou)


@dataclass(frozen=True)
class DetectionResult:
    """Final detections for one image, boxes in pixel xyxy."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    trace: list = None

    def __post_init__(self):
        if not (len(self.boxes) == len(self.scores) == len(self.labels)):
            raise ContractError("boxes, scores and labels must align")
        if np.any(np.diff(self.scores) > 0):
            raise ContractError("scores must be sorted descending")


@functools.lru_cache(maxsize=None)
def _schedule(timesteps: int):
    return build_cosine_schedule(timesteps)


def init_detector(cfg: DetectorConfig, rng=None) -> dict:
    """Initialize every learned parameter; names are stable across runs."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    params = {}
    init_backbone(rng, params, cfg.backbone_channels)
    init_ace(rng, params, cfg.backbone_channels[-1])
    init_fpn(rng, params, cfg.backbone_channels, cfg.fpn_dim)
    init_gce(rng, params, cfg.gce_hidden, cfg.gce_dim)
    init_head(rng, params, cfg.fpn_dim, cfg.gce_dim, cfg.num_classes,
              extra_self_attention=cfg.extra_self_attention)
    return params


def signal_to_pixel_boxes(x_sig, h: int, w: int,
                          scale: float) -> np.ndarray:
    """Signal-space state -> pixel xyxy (clamped into the image frame)."""
    cxcywh = denormalize_boxes(np.asarray(x_sig, dtype=np.float64), scale)
    xyxy = cxcywh_to_xyxy(cxcywh)
    return xyxy * np.array([w, h, w, h], dtype=np.float64)


def _signal_to_xyxy_tensor(sig: Tensor, scale: float) -> Tensor:
    """Differentiable signal -> normalized xyxy, deliberately unclamped.

    Clamping here would zero gradients for out-of-range coordinates, so the
    loss path keeps the raw affine map; the sampler clamps separately.
    """
    cxcywh = T.add(T.div(sig, 2.0 * scale), 0.5)
    cx = T.take(cxcywh, (Ellipsis, slice(0, 1)))
    cy = T.take(cxcywh, (Ellipsis, slice(1, 2)))
    hw = T.mul(T.take(cxcywh, (Ellipsis, slice(2, 3))), 0.5)
    hh = T.mul(T.take(cxcywh, (Ellipsis, slice(3, 4))), 0.5)
    return T.concat([T.sub(cx, hw), T.sub(cy, hh),
                     T.add(cx, hw), T.add(cy, hh)], axis=-1)


def denoise_forward(image, x_t, t, params: dict, cfg: DetectorConfig,
                    rng=None, training: bool = False) -> dict:
    """One pass of the denoising network.

    `x_t` is the [B,N,4] signal-space state, `t` a scalar or per-image
    array of timesteps. The box head emits a signal-space offset anchored
    at x_t, so the clean-signal estimate is x_t + offset: a proposal whose
    crop already frames an object only has to learn a zero offset, which
    pooled crop features can express without absolute coordinates.
    """
    image = T.as_tensor(image)
    x_t_data = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
    if x_t_data.ndim != 3 or x_t_data.shape[-1] != 4:
        raise ContractError(f"x_t must be [B,N,4], got {x_t_data.shape}")
    _, _, h, w = image.shape

    feats = backbone_forward(image, params)
    feats[5] = ace_forward(feats[5], params)
    pyramid = fpn_forward(feats, params)
    g = gce_forward(image, params)

    boxes_px = signal_to_pixel_boxes(x_t_data, h, w, cfg.signal_scale)
    f_roi = roi_pool(pyramid, boxes_px)

    out = head_forward(f_roi, g, t, params, cfg.attention_heads, cfg.fpn_dim,
                       extra_self_attention=cfg.extra_self_attention,
                       mmf_mode=cfg.mmf_mode)
    return {"x0_signal": T.add(Tensor(x_t_data), out["box"]),
            "logits": out["logits"], "eps": out["eps"]}


def pad_targets(gt_signal: np.ndarray, n: int, rng) -> np.ndarray:
    """Grow [M,4] clean signals to [n,4] diffusion targets.

    Ground truth rows are cycled into the first half so every object seeds
    several proposals; the remainder is fresh unit Gaussian signal. With
    M >= n the ground truth is truncated.
    """
    gt_signal = np.asarray(gt_signal, dtype=np.float64).reshape(-1, 4)
    m = gt_signal.shape[0]
    if m >= n:
        return gt_signal[:n].copy()
    if m == 0:
        return rng.standard_normal((n, 4))
    repeats = max(m, n // 2)
    rows = gt_signal[np.arange(repeats) % m]
    return np.concatenate([rows, rng.standard_normal((n - repeats, 4))])


def init_optimizer_state(params: dict) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def clip_by_global_norm(grads: dict, max_norm: float):
    """Scale all gradients so their joint norm is at most max_norm.

    The squared norm is accumulated with fsum over sorted names, making the
    result independent of dict insertion order.
    """
    sq = math.fsum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def adamw_update(params: dict, grads: dict, state: dict,
                 cfg: DetectorConfig) -> None:
    """Decoupled weight decay moment update, in place.

    Updated parameters and moments land on the float32 grid (the math is
    still float64): checkpoints store float32 payloads, so this keeps the
    live state equal to its own round-trip and makes resumed runs continue
    bit-for-bit where an unbroken run would.
    """
    state["step"] += 1
    s = state["step"]
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** s
    bc2 = 1.0 - b2 ** s
    for name in sorted(params):
        p, g = params[name], grads[name]
        m, v = state["m"][name], state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m[...] = m.astype(np.float32)
        v[...] = v.astype(np.float32)
        step = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data -= cfg.learning_rate * (step + cfg.weight_decay * p.data)
        p.data[...] = p.data.astype(np.float32)


def _gt_to_normalized(gt_boxes_px: np.ndarray, h: int, w: int) -> np.ndarray:
    gt = np.asarray(gt_boxes_px, dtype=np.float64).reshape(-1, 4)
    return gt / np.array([w, h, w, h], dtype=np.float64)


def train_step(batch: dict, params: dict, opt_state: dict,
               cfg: DetectorConfig, rng) -> dict:
    """One optimization step over a batch; mutates params and opt_state.

    `batch` carries images [B,3,H,W] plus per-image pixel-space gt_boxes
    and gt_classes lists. Returns scalar metrics, including the gradient
    norm before and after clipping.
    """
    images = np.asarray(batch["images"], dtype=np.float64)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ContractError(f"batch images must be [B>=1,3,H,W], "
                            f"got {images.shape}")
    bsz, _, h, w = images.shape
    gt_boxes = batch["gt_boxes"]
    gt_classes = batch["gt_classes"]
    if len(gt_boxes) != bsz or len(gt_classes) != bsz:
        raise ContractError("gt lists must match the batch size")

    sched = _schedule(cfg.timesteps)
    n = cfg.num_proposals
    gt_norm = [_gt_to_normalized(b, h, w) for b in gt_boxes]
    x0 = np.stack([
        pad_targets(normalize_boxes(xyxy_to_cxcywh(g), cfg.signal_scale)
                    if len(g) else np.zeros((0, 4)), n, rng)
        for g in gt_norm
    ])
    t = rng.integers(0, cfg.timesteps, size=bsz)
    noise = rng.standard_normal((bsz, n, 4))
    x_t = q_sample(x0, t, noise, sched, cfg.signal_scale,
                   clip=cfg.clip_signal)

    weights = cfg.match_weights()
    part_sums = {"cls": 0.0, "l1": 0.0, "giou": 0.0, "eps": 0.0}
    with GradTape() as tape:
        preds = denoise_forward(images, x_t, t, params, cfg)
        boxes_norm = _signal_to_xyxy_tensor(preds["x0_signal"],
                                            cfg.signal_scale)
        per_image = []
        for i in range(bsz):
            logits_i = T.take(preds["logits"], i)
            boxes_i = T.take(boxes_norm, i)
            probs_np = T.sigmoid(logits_i).data
            cost = matching_cost(probs_np, boxes_i.data, gt_classes[i],
                                 gt_norm[i], weights)
            assign = hungarian(cost)
            eps_i = T.take(preds["eps"], i) if cfg.lambda_eps > 0 else None
            loss_i, parts_i = set_loss(
                logits_i, boxes_i, gt_classes[i], gt_norm[i], assign,
                weights, cfg.focal_alpha, cfg.focal_gamma,
                eps_pred=eps_i, eps_true=noise[i],
                lambda_eps=cfg.lambda_eps)
            per_image.append(loss_i)
            for k, v in parts_i.items():
                part_sums[k] += float(v.data)
        total = T.div(T.tsum(T.concat(
            [T.reshape(li, (1,)) for li in per_image], axis=0)), bsz)
        loss_value = float(total.data)
        tape.backward(total)
        grads = {k: tape.grad(p).data for k, p in params.items()}

    grads, raw_norm = clip_by_global_norm(grads, cfg.grad_clip)
    adamw_update(params, grads, opt_state, cfg)

    return {
        "total": loss_value,
        "cls": part_sums["cls"] / bsz,
        "l1": part_sums["l1"] / bsz,
        "giou": part_sums["giou"] / bsz,
        "eps": part_sums["eps"] / bsz,
        "grad_norm_raw": raw_norm,
        "grad_norm": min(raw_norm, cfg.grad_clip),
        "step": opt_state["step"],
    }


def infer(image, params: dict, cfg: DetectorConfig, rng,
          denoise_fn=None, want_trace: bool = False) -> DetectionResult:
    """Full DDIM sampling loop for a single image.

    `denoise_fn(image, x_t, t) -> {x0_signal, logits, eps}` defaults to the
    learned network; injecting a substitute exercises the sampler alone.
    Renewal replaces low-confidence rows between steps, never after the
    final one, so the proposal count stays at N until thresholding.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[0] != 1:
        raise ContractError(f"infer expects one image, got {image.shape}")
    _, _, h, w = image.shape

    if denoise_fn is None:
        def denoise_fn(img, x_t, t):
            return denoise_forward(img, x_t, t, params, cfg)

    sched = _schedule(cfg.timesteps)
    pairs = ddim_timestep_pairs(cfg.timesteps, cfg.ddim_steps)
    scale = cfg.signal_scale

    x = rng.standard_normal((1, cfg.num_proposals, 4))
    if cfg.clip_signal:
        x = np.clip(x, -scale, scale)

    logits = None
    trace = [] if want_trace else None
    for i, (t, t_prev) in enumerate(pairs):
        preds = denoise_fn(image, x, t)
        x0_hat = np.asarray(preds["x0_signal"].data
                            if isinstance(preds["x0_signal"], Tensor)
                            else preds["x0_signal"], dtype=np.float64)
        if cfg.clip_signal:
            x0_hat = np.clip(x0_hat, -scale, scale)
        logits = np.asarray(preds["logits"].data
                            if isinstance(preds["logits"], Tensor)
                            else preds["logits"], dtype=np.float64)
        eps_hat = epsilon_from_x0(x, x0_hat, sched.alpha_bar[t])
        x = ddim_step(x, x0_hat, eps_hat, t, t_prev, sched, scale,
                      clip=cfg.clip_signal)
        last = i == len(pairs) - 1
        renew = not last and (i + 1) % cfg.renewal_stride == 0
        if renew:
            scores_now = 1.0 / (1.0 + np.exp(-logits))
            x, kept = box_renewal(x, scores_now, rng,
                                  cfg.renewal_threshold, scale)
        else:
            kept = None
        if want_trace:
            trace.append({"t": t, "t_prev": t_prev, "x": x.copy(),
                          "kept": None if kept is None else kept.copy()})

    boxes_px = signal_to_pixel_boxes(x[0], h, w, scale)
    scores_all = 1.0 / (1.0 + np.exp(-logits[0]))

    det_boxes, det_scores, det_labels = [], [], []
    for c in range(cfg.num_classes):
        s = scores_all[:, c]
        sel = np.flatnonzero(s > cfg.score_threshold)
        if sel.size == 0:
            continue
        keep = nms(boxes_px[sel], s[sel], cfg.nms_iou)
        det_boxes.append(boxes_px[sel][keep])
        det_scores.append(s[sel][keep])
        det_labels.append(np.full(len(keep), c, dtype=np.int64))

    if det_boxes:
        boxes = np.concatenate(det_boxes)
        scores = np.concatenate(det_scores)
        labels = np.concatenate(det_labels)
        order = np.lexsort((np.arange(len(scores)), labels, -scores))
        boxes, scores, labels = boxes[order], scores[order], labels[order]
    else:
        boxes = np.zeros((0, 4))
        scores = np.zeros(0)
        labels = np.zeros(0, dtype=np.int64)
    return DetectionResult(boxes, scores, labels, trace)
