"""End-to-end detector tests: forward contracts, training step, sampler."""

import numpy as np
import pytest

from ctxdet import tensor as T
from ctxdet.detector import (DetectorConfig, DetectionResult, adamw_update,
                             clip_by_global_norm, denoise_forward, infer,
                             init_detector, init_optimizer_state, pad_targets,
                             signal_to_pixel_boxes, train_step)
from ctxdet.diffusion import normalize_boxes
from ctxdet.errors import ConfigError, ContractError
from ctxdet.geometry import xyxy_to_cxcywh
from ctxdet.loss import Assignment, hungarian, matching_cost, set_loss
from ctxdet.tensor import Tensor, finite_difference_check


def tiny_config(**overrides):
    base = dict(num_classes=2, num_proposals=4, timesteps=40,
                backbone_channels=(2, 2, 4, 4), fpn_dim=4, gce_hidden=(2, 4),
                gce_dim=4, attention_heads=2, seed=11)
    base.update(overrides)
    return DetectorConfig(**base)


def tiny_image(rng, h=32, w=32, b=1):
    return rng.uniform(0.0, 1.0, size=(b, 3, h, w))


def make_batch(rng, b=1, h=32, w=32, boxes_per_image=2):
    gt_boxes, gt_classes = [], []
    for _ in range(b):
        x1 = rng.integers(0, w // 2, size=boxes_per_image)
        y1 = rng.integers(0, h // 2, size=boxes_per_image)
        bw = rng.integers(4, w // 2, size=boxes_per_image)
        bh = rng.integers(4, h // 2, size=boxes_per_image)
        gt_boxes.append(np.stack([x1, y1, x1 + bw, y1 + bh],
                                 axis=-1).astype(np.float64))
        gt_classes.append(rng.integers(0, 2, size=boxes_per_image))
    return {"images": tiny_image(rng, h, w, b), "gt_boxes": gt_boxes,
            "gt_classes": gt_classes}


class TestConfig:
    def test_defaults_valid(self):
        cfg = DetectorConfig()
        assert cfg.num_proposals == 500
        assert cfg.timesteps == 1000
        assert cfg.signal_scale == 2.0

    @pytest.mark.parametrize("bad", [
        dict(renewal_threshold=0.0), dict(renewal_threshold=1.0),
        dict(score_threshold=-0.1), dict(nms_iou=1.5),
        dict(ddim_steps=0), dict(timesteps=0), dict(num_proposals=0),
        dict(renewal_stride=0), dict(mmf_mode="bogus"),
        dict(fpn_dim=10, attention_heads=4), dict(signal_scale=0.0),
    ])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ConfigError):
            DetectorConfig(**bad)

    def test_dict_round_trip(self):
        cfg = tiny_config(mmf_mode="additive", lambda_eps=0.5)
        again = DetectorConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert isinstance(again.backbone_channels, tuple)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            DetectorConfig.from_dict({"learning_rates": 1.0})


class TestInit:
    def test_init_deterministic(self):
        cfg = tiny_config()
        a = init_detector(cfg)
        b = init_detector(cfg)
        assert sorted(a) == sorted(b)
        for k in a:
            assert np.array_equal(a[k].data, b[k].data)

    def test_all_params_trainable(self):
        params = init_detector(tiny_config())
        assert all(p.requires_grad for p in params.values())


class TestPadTargets:
    def test_no_gt_is_all_gaussian(self):
        rng = np.random.default_rng(0)
        out = pad_targets(np.zeros((0, 4)), 8, rng)
        assert out.shape == (8, 4)

    def test_gt_rows_cycle_into_first_half(self):
        rng = np.random.default_rng(0)
        gt = np.array([[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8]])
        out = pad_targets(gt, 8, rng)
        assert out.shape == (8, 4)
        for i in range(4):
            assert np.array_equal(out[i], gt[i % 2])

    def test_many_gt_kept_verbatim(self):
        rng = np.random.default_rng(0)
        gt = rng.normal(size=(6, 4))
        out = pad_targets(gt, 8, rng)
        assert np.array_equal(out[:6], gt)

    def test_overfull_gt_truncated(self):
        rng = np.random.default_rng(0)
        gt = rng.normal(size=(10, 4))
        out = pad_targets(gt, 8, rng)
        assert np.array_equal(out, gt[:8])


class TestDenoiseForward:
    def test_output_shapes(self):
        cfg = tiny_config()
        params = init_detector(cfg)
        rng = np.random.default_rng(3)
        img = tiny_image(rng, b=2)
        x_t = rng.normal(size=(2, cfg.num_proposals, 4))
        t = np.array([5, 17])
        out = denoise_forward(img, x_t, t, params, cfg)
        assert out["x0_signal"].shape == (2, cfg.num_proposals, 4)
        assert out["logits"].shape == (2, cfg.num_proposals, cfg.num_classes)
        assert out["eps"].shape == (2, cfg.num_proposals, 4)

    def test_deterministic(self):
        cfg = tiny_config()
        params = init_detector(cfg)
        rng = np.random.default_rng(4)
        img = tiny_image(rng)
        x_t = rng.normal(size=(1, cfg.num_proposals, 4))
        a = denoise_forward(img, x_t, 7, params, cfg)
        b = denoise_forward(img, x_t, 7, params, cfg)
        for k in a:
            assert np.array_equal(a[k].data, b[k].data)

    def test_rejects_bad_state_shape(self):
        cfg = tiny_config()
        params = init_detector(cfg)
        with pytest.raises(ContractError):
            denoise_forward(np.zeros((1, 3, 32, 32)), np.zeros((4, 4)),
                            1, params, cfg)

    def test_full_pipeline_gradients(self):
        # Spot-checks one weight per stage through image -> set loss with a
        # frozen matching; per-op exhaustive checks live in the op tests.
        cfg = tiny_config()
        params = init_detector(cfg)
        rng = np.random.default_rng(5)
        img = tiny_image(rng)
        x_t = rng.uniform(-2.0, 2.0, size=(1, cfg.num_proposals, 4))
        gt_boxes = np.array([[0.1, 0.2, 0.55, 0.7], [0.4, 0.1, 0.9, 0.5]])
        gt_classes = np.array([0, 1])
        assignment = Assignment(((0, 0), (2, 1)), (1, 3))
        w = cfg.match_weights()

        def objective():
            out = denoise_forward(img, x_t, 3, params, cfg)
            sig = out["x0_signal"]
            boxes = T.add(T.div(sig, 2.0 * cfg.signal_scale), 0.5)
            total, _ = set_loss(T.take(out["logits"], 0),
                                T.take(boxes, 0), gt_classes, gt_boxes,
                                assignment, w)
            return total

        picked = ["bb.stem1.w", "bb.stage5.w", "ace.fc1.w", "fpn.lat3.w",
                  "fpn.out5.w", "gce.conv2.w", "gce.res.w", "head.self.wq",
                  "head.caf.wk", "head.caf.gate2.w", "head.time1.w",
                  "head.mmf.wv", "head.final1.w", "head.cls2.w",
                  "head.box2.w", "head.box2.b"]
        subset = {k: params[k] for k in picked}
        # eps trades truncation against subtractive noise; 1e-4 suits the
        # depth of this composite. The squeeze gate's fc1 reaches the loss at
        # ~1e-9 here, below what central differences can resolve, so elements
        # under 3e-7 are held to that absolute scale instead.
        err = finite_difference_check(objective, subset, eps=1e-4, floor=3e-7)
        assert err < 1e-4


class TestOptimizer:
    def test_clip_leaves_small_gradients_alone(self):
        grads = {"a": np.array([0.3, 0.4])}
        clipped, norm = clip_by_global_norm(grads, 1.0)
        assert norm == 0.5
        assert clipped["a"] is grads["a"]

    def test_clip_scales_to_max_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
        clipped, norm = clip_by_global_norm(grads, 1.0)
        assert norm == 5.0
        total = np.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
        assert abs(total - 1.0) < 1e-12

    def test_adamw_decoupled_decay(self):
        # Zero gradient: the only movement is the weight decay shrinkage.
        cfg = tiny_config(learning_rate=0.1, weight_decay=0.5)
        p = Tensor(np.array([2.0]), requires_grad=True)
        params = {"w": p}
        state = init_optimizer_state(params)
        adamw_update(params, {"w": np.array([0.0])}, state, cfg)
        assert np.allclose(p.data, 2.0 - 0.1 * 0.5 * 2.0)
        assert state["step"] == 1

    def test_adamw_first_step_is_signed_gradient(self):
        cfg = tiny_config(learning_rate=1e-3, weight_decay=0.0)
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        params = {"w": p}
        state = init_optimizer_state(params)
        adamw_update(params, {"w": np.array([0.5, -0.25])}, state, cfg)
        # Bias-corrected first step is lr * g / (|g| + eps) ~ lr * sign(g).
        assert np.allclose(p.data, [1.0 - 1e-3, -1.0 + 1e-3], atol=1e-6)


class TestTrainStep:
    def test_rejects_empty_batch(self):
        cfg = tiny_config()
        params = init_detector(cfg)
        state = init_optimizer_state(params)
        batch = {"images": np.zeros((0, 3, 32, 32)), "gt_boxes": [],
                 "gt_classes": []}
        with pytest.raises(ContractError):
            train_step(batch, params, state, cfg, np.random.default_rng(0))

    def test_identical_seeded_steps_identical(self):
        cfg = tiny_config()
        outs = []
        for _ in range(2):
            params = init_detector(cfg)
            state = init_optimizer_state(params)
            batch = make_batch(np.random.default_rng(21), b=2)
            m = train_step(batch, params, state, cfg,
                           np.random.default_rng(9))
            outs.append((m, {k: p.data.copy() for k, p in params.items()}))
        assert outs[0][0] == outs[1][0]
        for k in outs[0][1]:
            assert np.array_equal(outs[0][1][k], outs[1][1][k])

    def test_metrics_and_clipped_norm(self):
        cfg = tiny_config(learning_rate=1e-3)
        params = init_detector(cfg)
        state = init_optimizer_state(params)
        rng = np.random.default_rng(31)
        batch = make_batch(rng)
        for step in range(5):
            m = train_step(batch, params, state, cfg, rng)
            assert m["grad_norm"] <= cfg.grad_clip + 1e-9
            assert np.isfinite(m["total"])
            assert m["step"] == step + 1
        for key in ("total", "cls", "l1", "giou", "grad_norm_raw"):
            assert key in m

    def test_single_image_overfit_loss_drops(self):
        # The regression target is the offset from each step's noised boxes,
        # so even a memorized image keeps a noise-conditioned loss floor; at
        # this width the seeded trajectory settles near 2/3 of its start.
        cfg = tiny_config(learning_rate=2e-3)
        params = init_detector(cfg)
        state = init_optimizer_state(params)
        batch = make_batch(np.random.default_rng(41))
        rng = np.random.default_rng(8)
        losses = [train_step(batch, params, state, cfg, rng)["total"]
                  for _ in range(500)]
        assert losses[-1] < losses[0]
        assert np.mean(losses[-20:]) < 0.75 * np.mean(losses[:20])


def count_calls(fn):
    calls = []

    def wrapped(*args):
        calls.append(1)
        return fn(*args)

    return wrapped, calls


class TestInfer:
    def setup_method(self):
        self.cfg = tiny_config()
        self.params = init_detector(self.cfg)
        self.img = tiny_image(np.random.default_rng(50))

    def test_single_step_calls_denoise_once(self):
        fn, calls = count_calls(
            lambda img, x, t: denoise_forward(img, x, t, self.params,
                                              self.cfg))
        infer(self.img, self.params, self.cfg, np.random.default_rng(1),
              denoise_fn=fn)
        assert len(calls) == 1

    def test_multi_step_call_count_and_trace(self):
        cfg = tiny_config(ddim_steps=3)
        fn, calls = count_calls(
            lambda img, x, t: denoise_forward(img, x, t, self.params, cfg))
        res = infer(self.img, self.params, cfg, np.random.default_rng(1),
                    denoise_fn=fn, want_trace=True)
        assert len(calls) == 3
        assert len(res.trace) == 3
        for i, rec in enumerate(res.trace):
            assert rec["x"].shape == (1, cfg.num_proposals, 4)
            last = i == len(res.trace) - 1
            assert (rec["kept"] is None) == last

    def test_seeded_runs_bit_identical(self):
        a = infer(self.img, self.params, self.cfg, np.random.default_rng(7))
        b = infer(self.img, self.params, self.cfg, np.random.default_rng(7))
        assert np.array_equal(a.boxes, b.boxes)
        assert np.array_equal(a.scores, b.scores)
        assert np.array_equal(a.labels, b.labels)

    def test_count_bounded_and_scores_descending(self):
        for seed in range(5):
            params = init_detector(tiny_config(seed=100 + seed))
            res = infer(self.img, params, self.cfg,
                        np.random.default_rng(seed))
            assert len(res.boxes) <= self.cfg.num_proposals * \
                self.cfg.num_classes
            assert np.all(np.diff(res.scores) <= 0)
            assert np.all((res.labels >= 0)
                          & (res.labels < self.cfg.num_classes))

    def test_result_validation(self):
        with pytest.raises(ContractError):
            DetectionResult(np.zeros((2, 4)), np.array([0.1, 0.9]),
                            np.array([0, 0]))
        with pytest.raises(ContractError):
            DetectionResult(np.zeros((2, 4)), np.array([0.9]),
                            np.array([0, 0]))


class TestOracleHead:
    @pytest.mark.parametrize("clip_signal", [True, False])
    @pytest.mark.parametrize("ddim_steps", [1, 2, 4])
    def test_oracle_x0_recovers_gt_exactly(self, clip_signal, ddim_steps):
        cfg = tiny_config(num_proposals=6, ddim_steps=ddim_steps,
                          clip_signal=clip_signal, timesteps=1000)
        params = init_detector(cfg)
        img = tiny_image(np.random.default_rng(0), 64, 64)
        gt_px = np.array([[8.0, 16.0, 40.0, 48.0],
                          [4.0, 4.0, 24.0, 20.0]])
        gt_signal = normalize_boxes(xyxy_to_cxcywh(gt_px / 64.0),
                                    cfg.signal_scale)
        x0 = gt_signal[np.arange(cfg.num_proposals) % 2]

        def oracle(image, x_t, t):
            n = x_t.shape[1]
            logits = np.full((1, n, cfg.num_classes), -20.0)
            logits[:, :, 0] = 20.0
            return {"x0_signal": Tensor(x0[None]), "logits": Tensor(logits),
                    "eps": Tensor(np.zeros((1, n, 4)))}

        res = infer(img, params, cfg, np.random.default_rng(3),
                    denoise_fn=oracle)
        # Duplicates collapse under NMS; the survivors are the GT boxes,
        # bit for bit.
        assert len(res.boxes) == 2
        order = np.argsort(res.boxes[:, 0])
        assert np.array_equal(res.boxes[order], gt_px[np.argsort(gt_px[:, 0])])
        assert np.all(res.labels == 0)

    def test_signal_round_trip_is_exact_for_dyadic_pixels(self):
        gt_px = np.array([[8.0, 16.0, 40.0, 48.0]])
        sig = normalize_boxes(xyxy_to_cxcywh(gt_px / 64.0), 2.0)
        back = signal_to_pixel_boxes(sig, 64, 64, 2.0)
        assert np.array_equal(back, gt_px)


class TestLossPathMatchesTensorPath:
    def test_matching_uses_same_geometry_as_loss(self):
        # The cost fed to the matcher and the matched loss must see the
        # same boxes, otherwise the assignment optimizes the wrong thing.
        cfg = tiny_config()
        params = init_detector(cfg)
        rng = np.random.default_rng(77)
        img = tiny_image(rng)
        x_t = rng.uniform(-2, 2, size=(1, cfg.num_proposals, 4))
        out = denoise_forward(img, x_t, 2, params, cfg)
        sig = out["x0_signal"]
        boxes = T.add(T.div(sig, 2.0 * cfg.signal_scale), 0.5)
        from ctxdet.detector import _signal_to_xyxy_tensor
        xyxy = _signal_to_xyxy_tensor(sig, cfg.signal_scale)
        cx = (xyxy.data[..., 0] + xyxy.data[..., 2]) / 2.0
        assert np.allclose(cx, boxes.data[..., 0], atol=1e-12)

    def test_hungarian_then_set_loss_runs(self):
        cfg = tiny_config()
        params = init_detector(cfg)
        rng = np.random.default_rng(78)
        img = tiny_image(rng)
        x_t = rng.uniform(-2, 2, size=(1, cfg.num_proposals, 4))
        out = denoise_forward(img, x_t, 2, params, cfg)
        from ctxdet.detector import _signal_to_xyxy_tensor
        boxes = _signal_to_xyxy_tensor(out["x0_signal"], cfg.signal_scale)
        gt_boxes = np.array([[0.2, 0.2, 0.6, 0.6]])
        gt_classes = np.array([1])
        probs = T.sigmoid(T.take(out["logits"], 0)).data
        cost = matching_cost(probs, T.take(boxes, 0).data, gt_classes,
                             gt_boxes, cfg.match_weights())
        assign = hungarian(cost)
        total, parts = set_loss(T.take(out["logits"], 0), T.take(boxes, 0),
                                gt_classes, gt_boxes, assign,
                                cfg.match_weights())
        assert np.isfinite(total.data)
        assert set(parts) == {"cls", "l1", "giou"}
