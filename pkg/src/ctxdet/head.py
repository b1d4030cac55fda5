"""Detection head: proposal self-attention, gated global-context fusion,
conditional embeddings, multi-modal fusion, bottleneck MLP, and the three
prediction heads.

Projection matrices are bias-free (pure xW); MLPs carry biases. All
blocks are pure functions of (inputs, params) with params a flat dict,
shared with the backbone module's init conventions.

Self-attention internally reindexes proposals into a canonical
(lexicographic) order before any cross-proposal reduction and restores
the caller's order afterwards, so permuting the proposals permutes the
output bit-exactly instead of only up to summation rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import init_linear
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def init_matrix(rng, name, d_in, d_out, params):
    bound = 1.0 / np.sqrt(d_in)
    params[name] = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)),
                          requires_grad=True)


def init_layer_norm(name, d, params):
    params[f"{name}.g"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(d), requires_grad=True)


def _ln(x, params, name):
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _mlp2(x, params, prefix):
    h = T.relu(T.linear(x, params[f"{prefix}1.w"], params[f"{prefix}1.b"]))
    return T.linear(h, params[f"{prefix}2.w"], params[f"{prefix}2.b"])


def _split_heads(x, heads):
    b, n, d = x.shape
    if d % heads:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dk))


def multi_head_attention(q_in, k_in, v_in, params, prefix, heads):
    """Softmax(QK^T / sqrt(d_k)) V with per-block projections and W_O."""
    q = _split_heads(T.matmul(q_in, params[f"{prefix}.wq"]), heads)
    k = _split_heads(T.matmul(k_in, params[f"{prefix}.wk"]), heads)
    v = _split_heads(T.matmul(v_in, params[f"{prefix}.wv"]), heads)
    dk = q.shape[-1]
    scores = T.div(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), np.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    attended = _merge_heads(T.matmul(weights, v))
    return T.matmul(attended, params[f"{prefix}.wo"])


def init_self_attention(rng, params, d, prefix="head.self"):
    for name in ("wq", "wk", "wv", "wo"):
        init_matrix(rng, f"{prefix}.{name}", d, d, params)
    init_layer_norm(f"{prefix}.ln", d, params)


def _canonical_order(x):
    """Per-batch lexicographic proposal order; ties keep original order."""
    return np.stack([np.lexsort(np.flipud(img.T)) for img in x])


def self_attention(f_roi, params, heads, prefix="head.self"):
    """LayerNorm(x + MHA(x, x, x)), exactly equivariant to proposal order."""
    f_roi = T.as_tensor(f_roi)
    b, n, _ = f_roi.shape
    order = _canonical_order(f_roi.data)
    inv = np.argsort(order, axis=1)
    rows = np.arange(b)[:, None]
    xs = T.take(f_roi, (rows, order))
    att = multi_head_attention(xs, xs, xs, params, prefix, heads)
    out = _ln(T.add(xs, att), params, f"{prefix}.ln")
    return T.take(out, (rows, inv))


def init_caf(rng, params, d, d_f):
    init_matrix(rng, "head.caf.wq", d, d, params)
    init_matrix(rng, "head.caf.wk", d_f, d, params)
    init_matrix(rng, "head.caf.wv", d_f, d, params)
    init_matrix(rng, "head.caf.wo", d, d, params)
    init_layer_norm("head.caf.ln", d, params)
    init_linear(rng, "head.caf.gate1", d_f, d_f, params)
    init_linear(rng, "head.caf.gate2", d_f, 1, params)


def caf_attended(f_self, g, params, heads):
    """Pre-gating attended tensor: the single global token projected and
    broadcast to every proposal. Softmax over one key is exactly 1, so this
    never depends on the query values."""
    b, _ = g.shape
    g_tok = T.reshape(g, (b, 1, g.shape[-1]))
    return multi_head_attention(f_self, g_tok, g_tok, params, "head.caf", heads)


def caf_gate(g, params):
    """Scalar fusion gate per image: sigmoid of a 2-layer MLP on g -> [B,1,1]."""
    beta = T.sigmoid(_mlp2(g, params, "head.caf.gate"))
    return T.reshape(beta, (beta.shape[0], 1, 1))


def cross_attention_caf(f_self, g, params, heads):
    """Gate between the context-fused path and the untouched input path.

    fused = LayerNorm(f_self + attended(g)); out = beta*fused + (1-beta)*f_self,
    so a closed gate returns the input exactly and an open gate is the plain
    residual cross-attention block.
    """
    f_self = T.as_tensor(f_self)
    g = T.as_tensor(g)
    attended = caf_attended(f_self, g, params, heads)
    fused = _ln(T.add(f_self, attended), params, "head.caf.ln")
    beta = caf_gate(g, params)
    return T.add(T.mul(beta, fused), T.mul(T.sub(1.0, beta), f_self))


def sinusoidal_embedding(values, dim):
    """Interleaved [sin, cos, sin, cos, ...] encoding; value 0 -> [0,1,0,1,..]."""
    if dim % 2:
        raise ConfigError(f"sinusoidal dim must be even, got {dim}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    angles = v[:, None] * freqs[None, :]
    out = np.empty((v.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


@dataclass
class ConditionalEmbeddings:
    """Per-forward conditioning: time E_t [B,d], position PE [N,d], context
    C_emb [B,d], and their feature-axis concat latent [B,N,3d]."""

    E_t: Tensor
    PE: Tensor
    C_emb: Tensor
    latent: Tensor


def init_embeddings(rng, params, d, d_f):
    init_linear(rng, "head.time1", d, d, params)
    init_linear(rng, "head.time2", d, d, params)
    init_linear(rng, "head.pos1", d, d, params)
    init_linear(rng, "head.pos2", d, d, params)
    init_linear(rng, "head.ctx1", d_f, d, params)
    init_linear(rng, "head.ctx2", d, d, params)


def _broadcast(x, shape):
    return T.add(x, Tensor(np.zeros(shape)))


def build_embeddings(t, n, g, params, d):
    """Time/position/context embeddings and their [B,N,3d] concat.

    `t` is one timestep per batch image (scalar accepted for B=1 use).
    """
    g = T.as_tensor(g)
    b = g.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
    e_t = _mlp2(Tensor(sinusoidal_embedding(t_arr, d)), params, "head.time")
    pe = _mlp2(Tensor(sinusoidal_embedding(np.arange(n), d)), params, "head.pos")
    c_emb = _mlp2(g, params, "head.ctx")
    latent = T.concat([
        _broadcast(T.reshape(e_t, (b, 1, d)), (b, n, d)),
        _broadcast(T.reshape(pe, (1, n, d)), (b, n, d)),
        _broadcast(T.reshape(c_emb, (b, 1, d)), (b, n, d)),
    ], axis=-1)
    return ConditionalEmbeddings(E_t=e_t, PE=pe, C_emb=c_emb, latent=latent)


def init_mmf(rng, params, d):
    init_matrix(rng, "head.mmf.wq", d, d, params)
    init_matrix(rng, "head.mmf.wk", 3 * d, d, params)
    init_matrix(rng, "head.mmf.wv", 3 * d, d, params)
    init_layer_norm("head.mmf.ln", d, params)


def mmf_fuse(f_cross, latent, params):
    """Single-head cross-attention from proposals into the latent tokens,
    scaled by sqrt(d), with residual + LayerNorm."""
    f_cross = T.as_tensor(f_cross)
    d = f_cross.shape[-1]
    if latent.shape[-1] != 3 * d:
        raise ShapeError(f"latent width {latent.shape[-1]} != 3*{d}")
    q = T.matmul(f_cross, params["head.mmf.wq"])
    k = T.matmul(latent, params["head.mmf.wk"])
    v = T.matmul(latent, params["head.mmf.wv"])
    scores = T.div(T.matmul(q, T.transpose(k, (0, 2, 1))), np.sqrt(d))
    attended = T.matmul(T.softmax(scores, axis=-1), v)
    return _ln(T.add(f_cross, attended), params, "head.mmf.ln")


def mmf_fuse_additive(f_cross, latent, params):
    """Additive fusion variant: project the latent and add, no attention."""
    proj = T.linear(latent, params["head.mmf.wk"])
    return _ln(T.add(f_cross, proj), params, "head.mmf.ln")


def init_final_mlp(rng, params, d):
    init_linear(rng, "head.final1", d, 2 * d, params)
    init_linear(rng, "head.final2", 2 * d, d, params)


def final_mlp(f_fused, params, dropout_rate=0.0, rng=None, training=False):
    """Bottleneck d -> 2d -> d with ReLU; dropout after the second linear."""
    h = T.relu(T.linear(f_fused, params["head.final1.w"], params["head.final1.b"]))
    out = T.linear(h, params["head.final2.w"], params["head.final2.b"])
    return T.dropout(out, dropout_rate, rng, training)


def init_prediction_heads(rng, params, d, num_classes):
    init_linear(rng, "head.cls1", d, d, params)
    init_linear(rng, "head.cls2", d, num_classes, params)
    init_linear(rng, "head.box1", d, d, params)
    init_linear(rng, "head.box2", d, 4, params)
    init_linear(rng, "head.eps1", d, d, params)
    init_linear(rng, "head.eps2", d, 4, params)


def prediction_heads(f_final, params):
    """Three independent 2-layer MLPs: class logits, box offsets,
    predicted noise."""
    return {
        "logits": _mlp2(f_final, params, "head.cls"),
        "box": _mlp2(f_final, params, "head.box"),
        "eps": _mlp2(f_final, params, "head.eps"),
    }


def init_head(rng, params, d, d_f, num_classes, extra_self_attention=False):
    init_self_attention(rng, params, d)
    if extra_self_attention:
        init_self_attention(rng, params, d, prefix="head.self2")
    init_caf(rng, params, d, d_f)
    init_embeddings(rng, params, d, d_f)
    init_mmf(rng, params, d)
    init_final_mlp(rng, params, d)
    init_prediction_heads(rng, params, d, num_classes)


def head_forward(f_roi, g, t, params, heads, d,
                 extra_self_attention=False, mmf_mode="attention"):
    """Full head pipeline from pooled RoI features to the three predictions."""
    f_self = self_attention(f_roi, params, heads)
    if extra_self_attention:
        f_self = self_attention(f_self, params, heads, prefix="head.self2")
    f_cross = cross_attention_caf(f_self, g, params, heads)
    n = f_roi.shape[1]
    emb = build_embeddings(t, n, g, params, d)
    if mmf_mode == "attention":
        f_fused = mmf_fuse(f_cross, emb.latent, params)
    elif mmf_mode == "additive":
        f_fused = mmf_fuse_additive(f_cross, emb.latent, params)
    else:
        raise ConfigError(f"unknown mmf mode {mmf_mode!r}")
    f_final = final_mlp(f_fused, params)
    return prediction_heads(f_final, params)
