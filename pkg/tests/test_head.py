import numpy as np
import pytest

from ctxdet import head as H
from ctxdet import tensor as T
from ctxdet.errors import ConfigError, ShapeError
from ctxdet.tensor import Tensor


def softmax_np(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def mha_np(q_in, k_in, v_in, p, prefix, heads):
    def split(x):
        b, n, d = x.shape
        return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)

    q = split(q_in @ p[f"{prefix}.wq"].data)
    k = split(k_in @ p[f"{prefix}.wk"].data)
    v = split(v_in @ p[f"{prefix}.wv"].data)
    w = softmax_np(q @ k.transpose(0, 1, 3, 2) / np.sqrt(q.shape[-1]))
    out = (w @ v).transpose(0, 2, 1, 3).reshape(q_in.shape[0], q_in.shape[1], -1)
    return out @ p[f"{prefix}.wo"].data


class TestSelfAttention:
    def make(self, d=4, seed=0):
        rng = np.random.default_rng(seed)
        params = {}
        H.init_self_attention(rng, params, d)
        return params, rng

    def test_single_token_weight_is_one(self):
        params, rng = self.make()
        x = rng.normal(size=(1, 1, 4))
        got = H.self_attention(Tensor(x), params, heads=2).data
        attended = mha_np(x, x, x, params, "head.self", 2)
        want = layer_norm_np(x + attended,
                             params["head.self.ln.g"].data,
                             params["head.self.ln.b"].data)
        assert np.allclose(got, want, atol=1e-12)

    def test_permutation_equivariance_exact(self):
        params, rng = self.make(seed=3)
        x = rng.normal(size=(2, 6, 4))
        base = H.self_attention(Tensor(x), params, heads=2).data
        perm = rng.permutation(6)
        permuted = H.self_attention(Tensor(x[:, perm]), params, heads=2).data
        assert np.array_equal(permuted, base[:, perm])

    def test_matches_scalar_oracle(self):
        params, rng = self.make(d=2, seed=5)
        x = rng.normal(size=(1, 2, 2))
        got = H.self_attention(Tensor(x), params, heads=1).data
        want = layer_norm_np(x + mha_np(x, x, x, params, "head.self", 1),
                             params["head.self.ln.g"].data,
                             params["head.self.ln.b"].data)
        assert np.allclose(got, want, atol=1e-12)

    def test_gradient(self):
        params, rng = self.make(seed=7)
        x = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
        probe = rng.normal(size=(1, 3, 4))

        def f():
            return T.tsum(T.mul(H.self_attention(x, params, heads=2), Tensor(probe)))

        assert T.finite_difference_check(f, {**params, "x": x}) < 1e-4

    def test_head_divisibility(self):
        params, rng = self.make(d=4)
        with pytest.raises(ConfigError):
            H.self_attention(Tensor(rng.normal(size=(1, 2, 4))), params, heads=3)


class TestCaf:
    def make(self, d=4, d_f=3, seed=0):
        rng = np.random.default_rng(seed)
        params = {}
        H.init_caf(rng, params, d, d_f)
        return params, rng

    def test_single_key_attended_independent_of_queries(self):
        params, rng = self.make()
        g = Tensor(rng.normal(size=(2, 3)))
        a = H.caf_attended(Tensor(rng.normal(size=(2, 5, 4))), g, params, heads=2).data
        b = H.caf_attended(Tensor(rng.normal(size=(2, 5, 4))), g, params, heads=2).data
        assert np.array_equal(a, b)

    def test_closed_gate_returns_input_exactly(self):
        params, rng = self.make(seed=1)
        params["head.caf.gate2.w"] = Tensor(np.zeros_like(params["head.caf.gate2.w"].data))
        params["head.caf.gate2.b"] = Tensor(np.array([-1e9]))
        x = Tensor(rng.normal(size=(2, 4, 4)))
        g = Tensor(rng.normal(size=(2, 3)))
        out = H.cross_attention_caf(x, g, params, heads=2)
        assert np.array_equal(out.data, x.data)

    def test_open_gate_is_pure_fused_path(self):
        params, rng = self.make(seed=2)
        params["head.caf.gate2.w"] = Tensor(np.zeros_like(params["head.caf.gate2.w"].data))
        params["head.caf.gate2.b"] = Tensor(np.array([1e9]))
        x = rng.normal(size=(1, 3, 4))
        g = rng.normal(size=(1, 3))
        out = H.cross_attention_caf(Tensor(x), Tensor(g), params, heads=2).data
        attended = mha_np(x, g[:, None, :], g[:, None, :], params, "head.caf", 2)
        want = layer_norm_np(x + attended,
                             params["head.caf.ln.g"].data,
                             params["head.caf.ln.b"].data)
        assert np.allclose(out, want, atol=1e-12)

    def test_matches_scalar_oracle(self):
        params, rng = self.make(seed=4)
        x = rng.normal(size=(2, 3, 4))
        g = rng.normal(size=(2, 3))
        got = H.cross_attention_caf(Tensor(x), Tensor(g), params, heads=2).data

        attended = mha_np(x, g[:, None, :], g[:, None, :], params, "head.caf", 2)
        fused = layer_norm_np(x + attended,
                              params["head.caf.ln.g"].data,
                              params["head.caf.ln.b"].data)
        h1 = np.maximum(g @ params["head.caf.gate1.w"].data
                        + params["head.caf.gate1.b"].data, 0)
        beta = 1 / (1 + np.exp(-(h1 @ params["head.caf.gate2.w"].data
                                 + params["head.caf.gate2.b"].data)))
        beta = beta[:, :, None]
        want = beta * fused + (1 - beta) * x
        assert np.allclose(got, want, atol=1e-12)

    def test_gradient(self):
        params, rng = self.make(seed=6)
        x = Tensor(rng.normal(size=(1, 2, 4)), requires_grad=True)
        g = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        probe = rng.normal(size=(1, 2, 4))

        def f():
            out = H.cross_attention_caf(x, g, params, heads=2)
            return T.tsum(T.mul(out, Tensor(probe)))

        assert T.finite_difference_check(f, {**params, "x": x, "g": g}) < 1e-4


class TestEmbeddings:
    def test_sinusoidal_zero_alternates(self):
        out = H.sinusoidal_embedding([0.0], 8)
        assert np.array_equal(out[0], [0, 1, 0, 1, 0, 1, 0, 1])

    def test_sinusoidal_rejects_odd_dim(self):
        with pytest.raises(ConfigError):
            H.sinusoidal_embedding([1.0], 5)

    def test_distinct_timesteps_distinct_rows(self):
        rows = H.sinusoidal_embedding([0.0, 500.0, 1000.0], 8)
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.array_equal(rows[i], rows[j])

    def test_latent_width_and_order(self):
        rng = np.random.default_rng(0)
        d, d_f, b, n = 4, 3, 2, 5
        params = {}
        H.init_embeddings(rng, params, d, d_f)
        g = Tensor(rng.normal(size=(b, d_f)))
        emb = H.build_embeddings(np.array([3.0, 7.0]), n, g, params, d)
        assert emb.latent.shape == (b, n, 3 * d)
        assert emb.E_t.shape == (b, d)
        assert emb.PE.shape == (n, d)
        assert emb.C_emb.shape == (b, d)
        lat = emb.latent.data
        assert np.allclose(lat[:, :, :d], emb.E_t.data[:, None, :], atol=0)
        assert np.allclose(lat[:, :, d:2 * d], emb.PE.data[None, :, :], atol=0)
        assert np.allclose(lat[:, :, 2 * d:], emb.C_emb.data[:, None, :], atol=0)

    def test_per_image_timesteps_differ(self):
        rng = np.random.default_rng(1)
        params = {}
        H.init_embeddings(rng, params, 4, 3)
        g = Tensor(np.zeros((2, 3)))
        emb = H.build_embeddings(np.array([0.0, 900.0]), 3, g, params, 4)
        assert not np.array_equal(emb.latent.data[0], emb.latent.data[1])


class TestMmf:
    def make(self, d=4, seed=0):
        rng = np.random.default_rng(seed)
        params = {}
        H.init_mmf(rng, params, d)
        return params, rng

    def test_zero_value_projection_is_layernormed_input(self):
        params, rng = self.make()
        params["head.mmf.wv"] = Tensor(np.zeros_like(params["head.mmf.wv"].data))
        x = rng.normal(size=(1, 3, 4))
        latent = Tensor(rng.normal(size=(1, 3, 12)))
        got = H.mmf_fuse(Tensor(x), latent, params).data
        want = layer_norm_np(x, params["head.mmf.ln.g"].data,
                             params["head.mmf.ln.b"].data)
        assert np.allclose(got, want, atol=0)

    def test_matches_scalar_oracle(self):
        params, rng = self.make(d=2, seed=2)
        x = rng.normal(size=(1, 2, 2))
        latent = rng.normal(size=(1, 2, 6))
        got = H.mmf_fuse(Tensor(x), Tensor(latent), params).data
        q = x @ params["head.mmf.wq"].data
        k = latent @ params["head.mmf.wk"].data
        v = latent @ params["head.mmf.wv"].data
        att = softmax_np(q @ k.transpose(0, 2, 1) / np.sqrt(2.0)) @ v
        want = layer_norm_np(x + att, params["head.mmf.ln.g"].data,
                             params["head.mmf.ln.b"].data)
        assert np.allclose(got, want, atol=1e-12)

    def test_attention_rows_stochastic(self):
        params, rng = self.make(seed=3)
        x = rng.normal(size=(2, 4, 4))
        latent = rng.normal(size=(2, 4, 12))
        q = x @ params["head.mmf.wq"].data
        k = latent @ params["head.mmf.wk"].data
        w = softmax_np(q @ k.transpose(0, 2, 1) / 2.0)
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_rejects_bad_latent_width(self):
        params, rng = self.make()
        with pytest.raises(ShapeError):
            H.mmf_fuse(Tensor(rng.normal(size=(1, 2, 4))),
                       Tensor(rng.normal(size=(1, 2, 8))), params)

    def test_additive_variant(self):
        params, rng = self.make(seed=5)
        x = rng.normal(size=(1, 2, 4))
        latent = rng.normal(size=(1, 2, 12))
        got = H.mmf_fuse_additive(Tensor(x), Tensor(latent), params).data
        want = layer_norm_np(x + latent @ params["head.mmf.wk"].data,
                             params["head.mmf.ln.g"].data,
                             params["head.mmf.ln.b"].data)
        assert np.allclose(got, want, atol=1e-12)


class TestFinalMlpAndHeads:
    def test_zero_weights_give_bias(self):
        rng = np.random.default_rng(0)
        params = {}
        H.init_final_mlp(rng, params, 4)
        for name in list(params):
            if name.endswith(".w"):
                params[name] = Tensor(np.zeros_like(params[name].data))
        params["head.final2.b"] = Tensor(np.arange(4.0))
        out = H.final_mlp(Tensor(np.ones((1, 2, 4))), params).data
        assert np.allclose(out, np.arange(4.0), atol=0)

    def test_hidden_width_is_double(self):
        params = {}
        H.init_final_mlp(np.random.default_rng(0), params, 6)
        assert params["head.final1.w"].shape == (6, 12)
        assert params["head.final2.w"].shape == (12, 6)

    def test_final_mlp_gradient(self):
        rng = np.random.default_rng(1)
        params = {}
        H.init_final_mlp(rng, params, 4)
        x = Tensor(rng.normal(size=(1, 2, 4)), requires_grad=True)
        probe = rng.normal(size=(1, 2, 4))

        def f():
            return T.tsum(T.mul(H.final_mlp(x, params), Tensor(probe)))

        assert T.finite_difference_check(f, {**params, "x": x}) < 1e-4

    def test_zero_params_give_half_scores(self):
        params = {}
        H.init_prediction_heads(np.random.default_rng(0), params, 4, 6)
        for name in list(params):
            params[name] = Tensor(np.zeros_like(params[name].data))
        out = H.prediction_heads(Tensor(np.ones((1, 3, 4))), params)
        assert np.all(out["logits"].data == 0)
        assert np.all(T.sigmoid(out["logits"]).data == 0.5)

    def test_head_shapes_six_classes(self):
        rng = np.random.default_rng(2)
        params = {}
        H.init_prediction_heads(rng, params, 4, 6)
        out = H.prediction_heads(Tensor(rng.normal(size=(2, 5, 4))), params)
        assert out["logits"].shape == (2, 5, 6)
        assert out["box"].shape == (2, 5, 4)
        assert out["eps"].shape == (2, 5, 4)

    def test_prediction_heads_gradient(self):
        rng = np.random.default_rng(3)
        params = {}
        H.init_prediction_heads(rng, params, 4, 2)
        x = Tensor(rng.normal(size=(1, 2, 4)), requires_grad=True)

        def f():
            out = H.prediction_heads(x, params)
            return T.add(T.tsum(out["logits"]),
                         T.add(T.tsum(out["box"]), T.tsum(out["eps"])))

        assert T.finite_difference_check(f, {**params, "x": x}) < 1e-4


class TestHeadForward:
    def test_end_to_end_gradient(self):
        rng = np.random.default_rng(11)
        d, d_f, n, c = 4, 3, 3, 2
        params = {}
        H.init_head(rng, params, d, d_f, c)
        f_roi = Tensor(rng.normal(size=(1, n, d)), requires_grad=True)
        g = Tensor(rng.normal(size=(1, d_f)), requires_grad=True)
        probes = {k: rng.normal(size=s) for k, s in
                  (("logits", (1, n, c)), ("box", (1, n, 4)), ("eps", (1, n, 4)))}

        def f():
            out = H.head_forward(f_roi, g, 5.0, params, heads=2, d=d)
            acc = Tensor(0.0)
            for k, probe in probes.items():
                acc = T.add(acc, T.tsum(T.mul(out[k], Tensor(probe))))
            return acc

        assert T.finite_difference_check(f, {**params, "f_roi": f_roi, "g": g}) < 1e-4

    def test_extra_self_attention_flag(self):
        rng = np.random.default_rng(12)
        d, d_f, n = 4, 3, 3
        params = {}
        H.init_head(rng, params, d, d_f, 2, extra_self_attention=True)
        assert "head.self2.wq" in params
        out = H.head_forward(Tensor(rng.normal(size=(1, n, d))),
                             Tensor(rng.normal(size=(1, d_f))), 0.0,
                             params, heads=2, d=d, extra_self_attention=True)
        assert out["logits"].shape == (1, n, 2)

    def test_mmf_mode_validation(self):
        rng = np.random.default_rng(13)
        params = {}
        H.init_head(rng, params, 4, 3, 2)
        with pytest.raises(ConfigError):
            H.head_forward(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 3))),
                           0.0, params, heads=2, d=4, mmf_mode="bogus")
