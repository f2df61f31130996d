import numpy as np
import pytest

import heatcascade.network as network
from heatcascade.geometry import N_LANDMARKS
from heatcascade.losses import StagePolicy, default_policies
from heatcascade.network import (
    GLOBAL_OUTPUTS,
    PATCH_OUTPUTS,
    ConvSpec,
    Net,
    NetSpec,
    RegressorOutput,
    RegressorParams,
    StageTargets,
    batch_loss_and_grad,
    gradient_check,
    predict,
    train_stage,
)

TINY_GLOBAL = NetSpec(
    input_channels=6,
    input_size=(8, 8),
    trunk=(ConvSpec(4, 3, 2, 1), ConvSpec(5, 3, 2, 1)),
    branches=((1, (ConvSpec(4, 3, 2, 1),)),),
    reduce_channels=5,
)

TINY_PATCH = NetSpec(
    input_channels=4,
    input_size=(8, 8),
    trunk=(ConvSpec(4, 3, 2, 1), ConvSpec(4, 3, 2, 1)),
    reduce_channels=4,
    outputs=PATCH_OUTPUTS,
    groups=2,
)


def naive_conv(x, w_flat, b, kernel, stride, pad):
    """Direct quadruple-loop convolution, the independent reference."""
    batch, in_ch, h, in_w = x.shape
    out_ch = w_flat.shape[0]
    w = w_flat.reshape(out_ch, in_ch, kernel, kernel)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (in_w + 2 * pad - kernel) // stride + 1
    out = np.zeros((batch, out_ch, ho, wo))
    for bi in range(batch):
        for oc in range(out_ch):
            for i in range(ho):
                for j in range(wo):
                    window = xp[bi, :, i * stride : i * stride + kernel, j * stride : j * stride + kernel]
                    out[bi, oc, i, j] = (window * w[oc]).sum() + b[oc]
    return out


class TestConvOracle:
    def test_forward_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        for kernel, stride, pad in ((3, 1, 0), (3, 2, 1), (5, 2, 2), (1, 1, 0)):
            conv = network._Conv("c", 3, ConvSpec(4, kernel, stride, pad))
            tensors = conv.init(rng, np.float64)
            x = rng.normal(size=(2, 3, 9, 11))
            got, _ = conv.forward(x, tensors)
            want = naive_conv(x, tensors["c.weight"], tensors["c.bias"], kernel, stride, pad)
            np.testing.assert_allclose(got, want, atol=1e-10)


class TestNetSpec:
    def test_output_dimension_is_66(self):
        assert GLOBAL_OUTPUTS == 2 * N_LANDMARKS + N_LANDMARKS + 3 == 66
        assert PATCH_OUTPUTS == 63
        net = Net(TINY_GLOBAL)
        p = net.init_params(np.random.default_rng(0))
        out = net.forward(p, np.zeros((2, 6, 8, 8)))
        assert out.shape == (2, 66)

    def test_branch_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="branch"):
            NetSpec(
                input_channels=6,
                input_size=(8, 8),
                trunk=(ConvSpec(4, 3, 2, 1), ConvSpec(5, 3, 2, 1)),
                branches=((1, (ConvSpec(4, 3, 1, 1),)),),  # stays 4x4, trunk ends 2x2
            )

    def test_branch_source_bounds(self):
        with pytest.raises(ValueError, match="source"):
            NetSpec(
                input_channels=6,
                input_size=(8, 8),
                trunk=(ConvSpec(4, 3, 2, 1), ConvSpec(5, 3, 2, 1)),
                branches=((2, (ConvSpec(4, 1, 1, 0),)),),  # last stage cannot be a source
            )

    def test_raster_collapse_rejected(self):
        with pytest.raises(ValueError, match="collapses"):
            NetSpec(input_channels=3, input_size=(4, 4), trunk=(ConvSpec(4, 7, 1, 0),))

    def test_mismatched_params_rejected(self):
        net = Net(TINY_GLOBAL)
        p = net.init_params(np.random.default_rng(0))
        del p.tensors["head.bias"]
        with pytest.raises(ValueError, match="head.bias"):
            net.forward(p, np.zeros((1, 6, 8, 8)))


class TestPredict:
    def test_zero_head_gives_zero_output(self):
        net = Net(TINY_GLOBAL)
        p = net.init_params(np.random.default_rng(1))
        p.tensors["head.weight"][:] = 0.0
        p.tensors["head.bias"][:] = 0.0
        out = predict(net, p, np.random.default_rng(2).uniform(0, 1, (6, 8, 8)))
        assert np.all(out.corrections == 0.0)
        assert np.all(out.visibility == 0.0)
        assert np.all(out.pose == 0.0)

    def test_visibility_clamped(self):
        net = Net(TINY_GLOBAL)
        p = net.init_params(np.random.default_rng(1))
        p.tensors["head.weight"][:] = 0.0
        p.tensors["head.bias"][:] = 0.0
        p.tensors["head.bias"][2 * N_LANDMARKS] = 7.0
        p.tensors["head.bias"][2 * N_LANDMARKS + 1] = -7.0
        out = predict(net, p, np.zeros((6, 8, 8)))
        assert out.visibility[0] == 1.0
        assert out.visibility[1] == 0.0

    def test_wrong_channels_named_in_error(self):
        net = Net(TINY_GLOBAL)
        p = net.init_params(np.random.default_rng(1))
        with pytest.raises(ValueError, match=r"\(6, 8, 8\)"):
            net.forward(p, np.zeros((1, 5, 8, 8)))

    def test_output_vector_roundtrip(self):
        rng = np.random.default_rng(3)
        out = RegressorOutput(rng.normal(size=(N_LANDMARKS, 2)), rng.uniform(size=N_LANDMARKS), rng.normal(size=3))
        vec = out.as_vector()
        assert vec.shape == (66,)
        back = RegressorOutput.from_vector(vec)
        np.testing.assert_allclose(back.corrections, out.corrections)
        np.testing.assert_allclose(back.pose, out.pose)

    def test_patch_vector_has_zero_pose(self):
        out = RegressorOutput.from_vector(np.ones(PATCH_OUTPUTS))
        assert np.all(out.pose == 0.0)


class TestBatchLoss:
    def test_agrees_with_single_sample_losses(self):
        # the batched training loss must equal the per-sample loss functions
        from heatcascade.geometry import Pose3D, Shape
        from heatcascade.losses import mixed_keypoint_loss, pose_loss, visibility_loss

        rng = np.random.default_rng(4)
        pol = StagePolicy(3, None, 0.2, 1.0, 0.25, 0.5)
        out = rng.normal(size=(1, 66))
        corr_t = rng.normal(size=(1, N_LANDMARKS, 2))
        vis_t = (rng.uniform(size=(1, N_LANDMARKS)) > 0.3).astype(float)
        pose_t = rng.normal(size=(1, 3))
        got, _ = batch_loss_and_grad(out, corr_t, vis_t, pose_t, pol)

        pred_corr = Shape(out[0, :42].reshape(N_LANDMARKS, 2))
        kp, _ = mixed_keypoint_loss(pred_corr, Shape(corr_t[0]), vis_t[0], 0.2, 1)
        pl = pose_loss(Pose3D.from_array(out[0, 63:]), Pose3D.from_array(pose_t[0]))
        vl = visibility_loss(out[0, 42:63], vis_t[0])
        want = 1.0 * kp + 0.25 * pl + 0.5 * vl
        assert got == pytest.approx(want, rel=1e-12)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        pol = StagePolicy(4, None, 0.1, 1.0, 0.25, 0.5, mining=True)
        out = rng.normal(size=(3, 66))
        corr_t = rng.normal(size=(3, N_LANDMARKS, 2))
        vis_t = (rng.uniform(size=(3, N_LANDMARKS)) > 0.3).astype(float)
        pose_t = rng.normal(size=(3, 3))
        _, grad = batch_loss_and_grad(out, corr_t, vis_t, pose_t, pol)
        h = 1e-6
        for idx in ((0, 0), (1, 41), (2, 50), (0, 64)):
            up = out.copy()
            up[idx] += h
            down = out.copy()
            down[idx] -= h
            vu, _ = batch_loss_and_grad(up, corr_t, vis_t, pose_t, pol)
            vd, _ = batch_loss_and_grad(down, corr_t, vis_t, pose_t, pol)
            assert grad[idx] == pytest.approx((vu - vd) / (2 * h), abs=1e-6)


class TestGradientCheck:
    def test_global_net_passes(self):
        err = gradient_check(TINY_GLOBAL, default_policies()[2], seed=1)
        assert err <= 1e-3

    def test_patch_net_passes(self):
        err = gradient_check(TINY_PATCH, default_policies()[4], seed=2)
        assert err <= 1e-3

    def test_broken_backward_is_caught(self, monkeypatch):
        # fault injection: a subtly wrong activation backward must be flagged
        orig = network._PReLU.backward

        def corrupted(self, dy, tensors, cache):
            dx, grads = orig(self, dy, tensors, cache)
            grads[f"{self.name}.slope"] = grads[f"{self.name}.slope"] * 1.25
            return dx, grads

        monkeypatch.setattr(network._PReLU, "backward", corrupted)
        err = gradient_check(TINY_GLOBAL, default_policies()[2], seed=1)
        assert err > 1e-2


def toy_dataset(rng, count=12, patch=False):
    data = []
    for _ in range(count):
        if patch:
            x = rng.uniform(0, 1, (TINY_PATCH.groups, 4, 8, 8))
            pose = None
        else:
            x = rng.uniform(0, 1, (6, 8, 8))
            pose = rng.normal(0, 5.0, 3)
        targets = StageTargets(
            corrections=rng.normal(0, 1.0, (N_LANDMARKS, 2)),
            visibility=(rng.uniform(size=N_LANDMARKS) > 0.2).astype(float),
            pose=pose,
        )
        data.append((x, targets))
    return data


class TestTrainStage:
    def test_loss_decreases_and_never_regresses(self):
        rng = np.random.default_rng(6)
        data = toy_dataset(rng)
        pol = StagePolicy(1, 20.0, 0.0, 1.0, 0.05, 0.5, learning_rate=0.002, epochs=25)
        params, losses = train_stage(data, pol, TINY_GLOBAL, seed=3, batch_size=4)
        assert len(losses) == 25
        assert losses[-1] <= losses[0]
        assert losses[-1] < 0.5 * losses[0]  # a tiny set should be fit well

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(7)
        data = toy_dataset(rng, count=8)
        pol = StagePolicy(1, 20.0, 0.0, 1.0, 0.05, 0.5, learning_rate=0.02, epochs=3)
        p1, l1 = train_stage(data, pol, TINY_GLOBAL, seed=9, batch_size=4)
        p2, l2 = train_stage(data, pol, TINY_GLOBAL, seed=9, batch_size=4)
        assert l1 == l2
        for k in p1.tensors:
            np.testing.assert_array_equal(p1.tensors[k], p2.tensors[k])

    def test_patch_mode_trains(self):
        rng = np.random.default_rng(8)
        data = toy_dataset(rng, count=8, patch=True)
        pol = StagePolicy(5, None, 0.1, 1.0, 0.0, 0.5, mining=True, patch_mode=True,
                          learning_rate=0.002, epochs=10)
        params, losses = train_stage(data, pol, TINY_PATCH, seed=4, batch_size=4)
        assert losses[-1] <= losses[0]
        assert params.tensors["head.weight"].shape[0] == PATCH_OUTPUTS

    @pytest.mark.filterwarnings("ignore:overflow")
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_divergence_raises(self):
        rng = np.random.default_rng(9)
        data = toy_dataset(rng, count=8)
        pol = StagePolicy(1, 20.0, 0.0, 1.0, 0.5, 0.5, learning_rate=1e9, epochs=5)
        from heatcascade.errors import TrainingDivergedError

        with pytest.raises(TrainingDivergedError):
            train_stage(data, pol, TINY_GLOBAL, seed=5, batch_size=4)

    def test_warm_start_resumes_from_given_params(self):
        rng = np.random.default_rng(10)
        data = toy_dataset(rng, count=8)
        pol = StagePolicy(1, 20.0, 0.0, 1.0, 0.05, 0.5, learning_rate=1e-12, epochs=1)
        base = Net(TINY_GLOBAL).init_params(np.random.default_rng(11), "base")
        params, _ = train_stage(data, pol, TINY_GLOBAL, init=base, seed=6, batch_size=4)
        # learning rate ~0: parameters stay at the warm start
        for k in base.tensors:
            np.testing.assert_allclose(params.tensors[k], base.tensors[k], atol=1e-9)
