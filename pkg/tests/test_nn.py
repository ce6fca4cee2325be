import numpy as np
import pytest

from kgderain import nn
from kgderain.kgcnn.specs import derain_net_spec, param_net_spec
from kgderain.nn import net as L
from kgderain.nn import ops

H = 1e-5


def numeric_grad(f, x):
    """Central differences of the scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + H
        up = f()
        x[i] = old - H
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * H)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return x + np.sign(x) * 0.05


CONV_SHAPES = [((2, 6, 6, 3), 4), ((1, 5, 7, 2), 3), ((3, 4, 4, 1), 2)]


class TestConv:
    @pytest.mark.parametrize("xshape, cout", CONV_SHAPES)
    def test_gradients(self, xshape, cout):
        rng = np.random.default_rng(sum(xshape))
        x = rng.normal(size=xshape)
        w = rng.normal(size=(3, 3, xshape[3], cout))
        b = rng.normal(size=cout)
        proj = rng.normal(size=xshape[:3] + (cout,))

        def f():
            return float((ops.conv3x3_forward(x, w, b)[0] * proj).sum())

        _, cache = ops.conv3x3_forward(x, w, b)
        dx, dw, db = ops.conv3x3_backward(proj, cache)
        assert rel_err(dx, numeric_grad(f, x)) < 1e-6
        assert rel_err(dw, numeric_grad(f, w)) < 1e-6
        assert rel_err(db, numeric_grad(f, b)) < 1e-6

    @pytest.mark.parametrize("xshape, cout", CONV_SHAPES + [((2, 9, 8, 12), 7)])
    def test_matches_shifted_sum_oracle(self, xshape, cout):
        rng = np.random.default_rng(7)
        x = rng.normal(size=xshape)
        w = rng.normal(size=(3, 3, xshape[3], cout))
        b = rng.normal(size=cout)
        n, h, wd, _ = xshape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ref = b + sum(xp[:, i : i + h, j : j + wd] @ w[i, j] for i in range(3) for j in range(3))
        np.testing.assert_allclose(ops.conv3x3_forward(x, w, b)[0], ref, rtol=0, atol=1e-12)

    def test_ones_hand_case(self):
        y, _ = ops.conv3x3_forward(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(y[0, :, :, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 5, 4, 3))
        w = np.zeros((3, 3, 3, 3))
        w[1, 1] = np.eye(3)
        np.testing.assert_array_equal(ops.conv3x3_forward(x, w, np.zeros(3))[0], x)

    def test_is_cross_correlation(self):
        x = np.zeros((1, 3, 3, 1))
        x[0, 1, 1, 0] = 1.0
        w = np.zeros((3, 3, 1, 1))
        w[0, 2, 0, 0] = 1.0
        y = ops.conv3x3_forward(x, w, np.zeros(1))[0]
        # output (r, c) reads input (r - 1 + 0, c - 1 + 2): the impulse lands at (2, 0)
        assert y[0, 2, 0, 0] == 1.0 and y.sum() == 1.0

    def test_channel_mismatch(self):
        with pytest.raises(nn.ShapeError):
            ops.conv3x3_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))


class TestConstConv:
    @pytest.mark.parametrize("n, h, w, t, cout", [(2, 5, 6, 4, 3), (1, 1, 1, 2, 2), (3, 2, 7, 1, 5)])
    def test_matches_explicit_maps(self, n, h, w, t, cout):
        rng = np.random.default_rng(n * h + w)
        c = rng.normal(size=(n, t))
        wt = rng.normal(size=(3, 3, t, cout))
        maps = np.broadcast_to(c[:, None, None, :], (n, h, w, t)).copy()
        y_ref, cache_ref = ops.conv3x3_forward(maps, wt, np.zeros(cout))
        y, cache = ops.const_conv3x3_forward(c, wt, h, w)
        np.testing.assert_allclose(y, y_ref, atol=1e-12)
        g = rng.normal(size=y.shape)
        dmaps, dw_ref, _ = ops.conv3x3_backward(g, cache_ref)
        dc, dw = ops.const_conv3x3_backward(g, cache)
        np.testing.assert_allclose(dw, dw_ref, atol=1e-12)
        np.testing.assert_allclose(dc, dmaps.sum(axis=(1, 2)), atol=1e-12)


class TestElementwise:
    @pytest.mark.parametrize("shape", [(2, 3, 3, 2), (4, 1, 1, 5), (1, 6, 2, 3)])
    def test_relu_gradient(self, shape):
        rng = np.random.default_rng(len(shape) + shape[0])
        x = away_from_zero(rng, shape)
        proj = rng.normal(size=shape)
        _, mask = ops.relu_forward(x)
        dx = ops.relu_backward(proj, mask)
        assert rel_err(dx, numeric_grad(lambda: float((ops.relu_forward(x)[0] * proj).sum()), x)) < 1e-6

    def test_relu_values(self):
        y, _ = ops.relu_forward(np.array([-1.0, 0.0, 2.5]))
        np.testing.assert_array_equal(y, [0.0, 0.0, 2.5])

    @pytest.mark.parametrize("shape", [(2, 4, 4, 3), (1, 2, 6, 1), (3, 2, 2, 2)])
    def test_meanpool_gradient(self, shape):
        rng = np.random.default_rng(shape[2])
        x = rng.normal(size=shape)
        y, xs = ops.meanpool2_forward(x)
        proj = rng.normal(size=y.shape)
        dx = ops.meanpool2_backward(proj, xs)
        assert rel_err(dx, numeric_grad(lambda: float((ops.meanpool2_forward(x)[0] * proj).sum()), x)) < 1e-6

    def test_meanpool_odd(self):
        with pytest.raises(nn.ShapeError):
            ops.meanpool2_forward(np.zeros((1, 3, 4, 1)))


class TestBatchnorm:
    @pytest.mark.parametrize("shape", [(2, 3, 3, 2), (4, 2, 1, 3), (3, 1, 1, 4)])
    def test_train_gradients(self, shape):
        rng = np.random.default_rng(shape[0] * 7 + shape[3])
        x = rng.normal(size=shape) * 2 + 0.5
        gamma = rng.normal(size=shape[3])
        beta = rng.normal(size=shape[3])
        rm, rv = np.zeros(shape[3]), np.ones(shape[3])
        proj = rng.normal(size=shape)

        def f():
            return float((ops.batchnorm_forward(x, gamma, beta, rm, rv, True)[0] * proj).sum())

        _, cache, _ = ops.batchnorm_forward(x, gamma, beta, rm, rv, True)
        dx, dg, db = ops.batchnorm_backward(proj, cache)
        assert rel_err(dx, numeric_grad(f, x)) < 1e-6
        assert rel_err(dg, numeric_grad(f, gamma)) < 1e-6
        assert rel_err(db, numeric_grad(f, beta)) < 1e-6

    @pytest.mark.parametrize("shape", [(1, 3, 3, 2), (2, 2, 2, 1), (5, 1, 1, 3)])
    def test_inference_gradients(self, shape):
        rng = np.random.default_rng(shape[0])
        x = rng.normal(size=shape)
        gamma, beta = rng.normal(size=shape[3]), rng.normal(size=shape[3])
        rm, rv = rng.normal(size=shape[3]), rng.random(shape[3]) + 0.5
        proj = rng.normal(size=shape)

        def f():
            return float((ops.batchnorm_forward(x, gamma, beta, rm, rv, False)[0] * proj).sum())

        _, cache, stats = ops.batchnorm_forward(x, gamma, beta, rm, rv, False)
        assert stats is None
        dx, dg, db = ops.batchnorm_backward(proj, cache)
        assert rel_err(dx, numeric_grad(f, x)) < 1e-6
        assert rel_err(dg, numeric_grad(f, gamma)) < 1e-6

    def test_normalised_statistics(self):
        x = np.random.default_rng(1).normal(3.0, 4.0, size=(6, 5, 5, 4))
        y, _, (mean, var) = ops.batchnorm_forward(x, np.ones(4), np.zeros(4), None, None, True)
        np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1.0, atol=1e-6)
        np.testing.assert_allclose(mean, x.mean(axis=(0, 1, 2)))

    def test_batch_of_one_rejected(self):
        with pytest.raises(nn.ShapeError):
            ops.batchnorm_forward(np.zeros((1, 4, 4, 2)), np.ones(2), np.zeros(2), None, None, True)

    def test_running_update(self):
        assert ops.update_running(np.array([1.0]), np.array([3.0]))[0] == pytest.approx(1.2)


class TestFullyConnected:
    @pytest.mark.parametrize("xshape, cout", [((2, 2, 2, 3), 4), ((3, 1, 1, 5), 2), ((1, 3, 2, 1), 3)])
    def test_gradients(self, xshape, cout):
        rng = np.random.default_rng(xshape[1] * 10 + cout)
        x = rng.normal(size=xshape)
        w = rng.normal(size=(int(np.prod(xshape[1:])), cout))
        b = rng.normal(size=cout)
        proj = rng.normal(size=(xshape[0], 1, 1, cout))

        def f():
            return float((ops.fc_forward(x, w, b)[0] * proj).sum())

        _, cache = ops.fc_forward(x, w, b)
        dx, dw, db = ops.fc_backward(proj, cache)
        assert dx.shape == x.shape
        assert rel_err(dx, numeric_grad(f, x)) < 1e-6
        assert rel_err(dw, numeric_grad(f, w)) < 1e-6
        assert rel_err(db, numeric_grad(f, b)) < 1e-6


class TestLoss:
    def test_hand_value(self):
        loss, grad = ops.frobenius_loss(np.full((2, 1, 1, 2), 1.0), np.zeros((2, 1, 1, 2)))
        assert loss == 2.0
        np.testing.assert_array_equal(grad, 1.0)

    @pytest.mark.parametrize("shape", [(2, 3, 3, 1), (4, 1, 1, 2), (1, 5, 2, 3)])
    def test_gradient(self, shape):
        rng = np.random.default_rng(shape[1])
        pred, target = rng.normal(size=shape), rng.normal(size=shape)
        _, g = ops.frobenius_loss(pred, target)
        assert rel_err(g, numeric_grad(lambda: ops.frobenius_loss(pred, target)[0], pred)) < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(nn.ShapeError):
            ops.frobenius_loss(np.zeros((1, 2, 2, 1)), np.zeros((1, 2, 2, 2)))


def tiny_guided_spec(t=3, f=4):
    return [
        L.conv(3, f),
        L.relu(),
        L.concat_external(f, t),
        L.conv(f + t, f),
        L.bn(f),
        L.relu(),
        L.residual_begin(),
        L.conv(f, f),
        L.bn(f),
        L.relu(),
        L.residual_end(),
        L.conv(f, 3),
    ]


class TestNetwork:
    def test_end_to_end_gradient(self):
        rng = np.random.default_rng(0)
        spec = tiny_guided_spec()
        state = nn.init_state(spec, rng)
        x = rng.normal(size=(2, 5, 5, 3))
        c = rng.normal(size=(2, 3))
        target = rng.normal(size=(2, 5, 5, 3))

        def f():
            return nn.frobenius_loss(nn.forward(spec, state, x, c, train=True), target)[0]

        y, tape = nn.forward_with_tape(spec, state, x, c, train=True)
        _, dy = nn.frobenius_loss(y, target)
        grads, dx, dc = nn.backward(spec, state, tape, dy)
        assert rel_err(dx, numeric_grad(f, x)) < 1e-6
        assert rel_err(dc, numeric_grad(f, c)) < 1e-6
        for i in (0, 3, 4, 7, 11):
            for name, g in grads[i].items():
                num = numeric_grad(f, state.params[i][name])
                if max(np.abs(g).max(), np.abs(num).max()) < 1e-7:
                    continue  # a bias feeding batchnorm has no effect at all
                assert rel_err(g, num) < 1e-6, (i, name)

    def test_fused_equals_explicit_maps(self):
        rng = np.random.default_rng(1)
        spec = tiny_guided_spec()
        state = nn.init_state(spec, rng)
        x = rng.normal(size=(3, 6, 4, 3))
        c = rng.normal(size=(3, 3))
        maps = np.broadcast_to(c[:, None, None, :], (3, 6, 4, 3)).copy()
        y1, t1 = nn.forward_with_tape(spec, state, x, c, train=True)
        y2, t2 = nn.forward_with_tape(spec, state, x, maps, train=True)
        assert t1.fused and not t2.fused
        np.testing.assert_allclose(y1, y2, atol=1e-12)
        g = rng.normal(size=y1.shape)
        g1, dx1, dc1 = nn.backward(spec, state, t1, g)
        g2, dx2, dmaps = nn.backward(spec, state, t2, g)
        np.testing.assert_allclose(dx1, dx2, atol=1e-12)
        np.testing.assert_allclose(dc1, dmaps.sum(axis=(1, 2)), atol=1e-12)
        for a, b in zip(g1, g2):
            for k in a:
                np.testing.assert_allclose(a[k], b[k], atol=1e-12)

    def test_residual_with_zero_conv_is_identity(self):
        spec = [L.residual_begin(), L.conv(3, 3), L.residual_end()]
        state = nn.init_state(spec, np.random.default_rng(0))
        state.params[1]["w"][:] = 0.0
        x = np.random.default_rng(2).normal(size=(2, 4, 4, 3))
        np.testing.assert_array_equal(nn.forward(spec, state, x), x)

    def test_inference_is_batch_independent(self):
        rng = np.random.default_rng(3)
        spec = tiny_guided_spec()
        state = nn.init_state(spec, rng)
        x = rng.normal(size=(4, 5, 5, 3))
        c = rng.normal(size=(4, 3))
        nn.forward(spec, state, x, c, train=True, update_stats=True)
        whole = nn.forward(spec, state, x, c)
        single = np.concatenate([nn.forward(spec, state, x[i : i + 1], c[i : i + 1]) for i in range(4)])
        np.testing.assert_allclose(whole, single, atol=1e-13)
        np.testing.assert_array_equal(whole, nn.forward(spec, state, x, c))

    def test_running_stats_only_move_when_asked(self):
        rng = np.random.default_rng(4)
        spec = tiny_guided_spec()
        state = nn.init_state(spec, rng)
        x, c = rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(2, 3))
        nn.forward(spec, state, x, c, train=True)
        np.testing.assert_array_equal(state.buffers[4]["running_var"], 1.0)
        nn.forward(spec, state, x, c, train=True, update_stats=True)
        assert not np.all(state.buffers[4]["running_var"] == 1.0)

    def test_external_required_exactly_when_concat(self):
        spec = tiny_guided_spec()
        state = nn.init_state(spec, np.random.default_rng(0))
        with pytest.raises(nn.ShapeError):
            nn.forward(spec, state, np.zeros((2, 4, 4, 3)))
        plain = [L.conv(3, 2)]
        with pytest.raises(nn.ShapeError):
            nn.forward(plain, nn.init_state(plain, np.random.default_rng(0)), np.zeros((1, 4, 4, 3)), np.zeros((1, 2)))

    def test_validate(self):
        with pytest.raises(nn.ShapeError):
            nn.validate([L.conv(3, 4), L.bn(5)])
        with pytest.raises(nn.ShapeError):
            nn.validate([L.residual_begin(), L.conv(3, 4), L.residual_end()], in_channels=3)
        with pytest.raises(nn.ShapeError):
            nn.validate([L.residual_begin()])

    def test_he_init_scale(self):
        state = nn.init_state([L.conv(50, 60)], np.random.default_rng(0))
        assert state.params[0]["w"].std() == pytest.approx(np.sqrt(2 / 450), rel=0.03)
        np.testing.assert_array_equal(state.params[0]["b"], 0.0)


class TestArchitectures:
    def test_param_net_output(self):
        spec = param_net_spec()
        state = nn.init_state(spec, np.random.default_rng(0))
        assert nn.forward(spec, state, np.zeros((2, 64, 64, 3))).shape == (2, 1, 1, 2)
        assert sum(layer.kind in ("conv3x3", "fullyconnected") for layer in spec) == 6

    def test_param_net_count(self):
        # four 3x3 convs, then 4*4*c -> hidden -> 2
        widths = [3] + [layer.out_channels for layer in param_net_spec() if layer.kind == "conv3x3"]
        convs = sum(9 * a * b + b for a, b in zip(widths[:-1], widths[1:]))
        fc1 = [layer for layer in param_net_spec() if layer.kind == "fullyconnected"][0]
        expected = convs + 16 * widths[-1] * fc1.out_channels + fc1.out_channels + fc1.out_channels * 2 + 2
        assert nn.param_count(param_net_spec()) == expected

    @pytest.mark.parametrize("depth", [3, 4, 5, 26])
    def test_derain_depth(self, depth):
        from kgderain.kgcnn.specs import conv_depth

        assert conv_depth(derain_net_spec(10, depth, 6)) == depth

    def test_default_derain_count(self):
        t, f = 87, 36
        conv_ff = 9 * f * f + f
        expected = (
            (27 * f + f)  # 3 -> F
            + (9 * (f + t) * f + f)  # F + t -> F
            + 2 * f  # its batchnorm
            + 23 * (conv_ff + 2 * f)  # one plain layer and eleven two-layer blocks
            + (9 * f * 3 + 3)  # F -> 3
        )
        assert nn.param_count(derain_net_spec(t)) == expected == 312699

    def test_default_derain_shapes(self):
        spec = derain_net_spec(5, 26, 4)
        state = nn.init_state(spec, np.random.default_rng(0))
        y = nn.forward(spec, state, np.zeros((2, 64, 64, 3)), np.zeros((2, 5)), train=True)
        assert y.shape == (2, 64, 64, 3)

    def test_unguided_has_no_concat(self):
        spec = derain_net_spec(5, 7, 4, guided=False)
        assert all(layer.kind != "concat_external" for layer in spec)

    def test_too_shallow(self):
        with pytest.raises(ValueError):
            derain_net_spec(5, 2, 4)


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        spec = [L.fc(3, 2)]
        state = nn.init_state(spec, np.random.default_rng(0))
        before = state.params[0]["w"].copy()
        g = {"w": np.full((3, 2), 0.37), "b": np.full(2, -5.0)}
        nn.adam_step(state, [g], lr=0.01)
        np.testing.assert_allclose(before - state.params[0]["w"], 0.01 * 0.37 / (0.37 + 1e-8), rtol=1e-12)
        assert state.step == 1

    def test_two_step_closed_form(self):
        spec = [L.fc(1, 1)]
        state = nn.init_state(spec, np.random.default_rng(0))
        w0 = state.params[0]["w"][0, 0]
        g1, g2 = 2.0, -1.0
        nn.adam_step(state, [{"w": np.array([[g1]])}], 0.1)
        nn.adam_step(state, [{"w": np.array([[g2]])}], 0.1)
        m = 0.9 * 0.1 * g1 + 0.1 * g2
        v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
        step2 = 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        step1 = 0.1 * g1 / (abs(g1) + 1e-8)
        assert state.params[0]["w"][0, 0] == pytest.approx(w0 - step1 - step2, abs=1e-12)

    def test_converges_on_least_squares(self):
        rng = np.random.default_rng(5)
        spec = [L.fc(4, 1)]
        state = nn.init_state(spec, rng)
        x = rng.normal(size=(32, 1, 1, 4))
        w_true = np.array([[0.5], [-1.0], [2.0], [0.25]])
        y = x.reshape(32, 4) @ w_true + 0.3
        for _ in range(2000):
            pred, tape = nn.forward_with_tape(spec, state, x)
            _, dy = nn.frobenius_loss(pred, y.reshape(32, 1, 1, 1))
            grads, _, _ = nn.backward(spec, state, tape, dy)
            nn.adam_step(state, grads, 0.01)
        np.testing.assert_allclose(state.params[0]["w"], w_true, atol=1e-3)
        assert state.params[0]["b"][0] == pytest.approx(0.3, abs=1e-3)

    def test_shape_mismatch(self):
        spec = [L.fc(2, 2)]
        state = nn.init_state(spec, np.random.default_rng(0))
        with pytest.raises(ValueError):
            nn.adam_step(state, [{"w": np.zeros((3, 2))}], 0.01)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        spec = tiny_guided_spec()
        state = nn.init_state(spec, rng)
        x, c = rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(2, 3))
        y, tape = nn.forward_with_tape(spec, state, x, c, train=True, update_stats=True)
        grads, _, _ = nn.backward(spec, state, tape, y)
        nn.adam_step(state, grads, 0.01)
        path = tmp_path / "net.kgcn"
        nn.save_checkpoint(path, spec, state, {"note": "x", "losses": [1.0, 0.5]})
        spec2, state2, meta = nn.load_checkpoint(path)
        assert spec2 == spec and meta["losses"] == [1.0, 0.5] and state2.step == 1
        for a, b in zip(state.params + state.buffers + state.m + state.v, state2.params + state2.buffers + state2.m + state2.v):
            assert a.keys() == b.keys()
            for k in a:
                np.testing.assert_array_equal(a[k], b[k])
        nn.save_checkpoint(tmp_path / "again.kgcn", spec2, state2, meta)
        assert (tmp_path / "again.kgcn").read_bytes() == path.read_bytes()

    def test_rejects_other_files(self, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes(b"JUNK" + bytes(16))
        with pytest.raises(ValueError):
            nn.load_checkpoint(bad)

    def test_truncated(self, tmp_path):
        spec = [L.conv(3, 4)]
        path = tmp_path / "c"
        nn.save_checkpoint(path, spec, nn.init_state(spec, np.random.default_rng(0)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            nn.load_checkpoint(path)
