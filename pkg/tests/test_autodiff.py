import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrseg import autodiff as ad
from corrseg.autodiff import Parameter, Tensor


def naive_conv3d(x, w, b, dilation=1, stride=1):
    """Loop-by-loop cross-correlation with zero padding (independent oracle)."""
    c_out, c_in, k = w.shape[:3]
    pad = dilation * (k - 1) // 2
    _, D, H, W = x.shape
    xp = np.zeros((c_in, D + 2 * pad, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + D, pad:pad + H, pad:pad + W] = x
    Do = (D + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    Ho = (H + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    Wo = (W + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, Do, Ho, Wo))
    for o in range(c_out):
        for z in range(Do):
            for y in range(Ho):
                for xx in range(Wo):
                    acc = b[o]
                    for i in range(c_in):
                        for a in range(k):
                            for bb in range(k):
                                for c in range(k):
                                    acc += w[o, i, a, bb, c] * xp[
                                        i, z * stride + a * dilation, y * stride + bb * dilation, xx * stride + c * dilation
                                    ]
                    out[o, z, y, xx] = acc
    return out


def t64(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


class TestTensor:
    def test_float32_storage_and_shape(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        assert t.shape == (2, 2)
        assert t.data.size == np.prod(t.shape)

    def test_parameter_grad_initialised_same_shape(self):
        p = Parameter("layer.weight", np.ones((2, 3)))
        assert p.requires_grad
        assert p.grad.shape == p.shape
        assert not p.grad.any()


class TestConv3d:
    def test_zero_kernel_gives_zero(self):
        x = Tensor(np.ones((1, 4, 4, 4)))
        out = ad.conv3d(x, Tensor(np.zeros((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 4, 4, 4)
        assert not out.data.any()

    def test_box_kernel_interior_and_corner(self):
        x = Tensor(np.ones((1, 4, 4, 4)))
        w = Tensor(np.full((1, 1, 3, 3, 3), 1 / 27))
        out = ad.conv3d(x, w, Tensor(np.zeros(1))).data[0]
        oracle = naive_conv3d(np.ones((1, 4, 4, 4)), np.full((1, 1, 3, 3, 3), 1 / 27), np.zeros(1))[0]
        np.testing.assert_allclose(out, oracle, rtol=0, atol=1e-6)
        np.testing.assert_allclose(out[1:3, 1:3, 1:3], 1.0, rtol=0, atol=1e-6)
        for corner in [(0, 0, 0), (3, 3, 3), (0, 3, 0), (3, 0, 3)]:
            assert out[corner] == pytest.approx(8 / 27, abs=1e-6)

    @pytest.mark.parametrize("dilation,stride", [(1, 1), (2, 1), (4, 1), (1, 2)])
    def test_matches_naive_oracle(self, dilation, stride):
        rng = np.random.default_rng(dilation * 10 + stride)
        x = rng.standard_normal((2, 6, 5, 6))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        out = ad.conv3d(t64(x), t64(w), t64(b), dilation=dilation, stride=stride)
        np.testing.assert_allclose(out.data, naive_conv3d(x, w, b, dilation, stride), rtol=1e-10, atol=1e-10)

    def test_pointwise_kernel(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3, 3, 3))
        w = rng.standard_normal((2, 4, 1, 1, 1))
        out = ad.conv3d(t64(x), t64(w), t64(np.zeros(2)))
        np.testing.assert_allclose(out.data, naive_conv3d(x, w, np.zeros(2)), rtol=1e-12)

    @pytest.mark.parametrize("dilation", [1, 2, 4])
    def test_same_padding_preserves_shape(self, dilation):
        x = Tensor(np.zeros((2, 8, 6, 5)))
        out = ad.conv3d(x, Tensor(np.zeros((3, 2, 3, 3, 3))), Tensor(np.zeros(3)), dilation=dilation)
        assert out.shape == (3, 8, 6, 5)

    def test_stride_two_halves(self):
        out = ad.conv3d(Tensor(np.zeros((1, 8, 8, 8))), Tensor(np.zeros((2, 1, 3, 3, 3))), Tensor(np.zeros(2)), stride=2)
        assert out.shape == (2, 4, 4, 4)

    def test_weight_gradient_vs_finite_differences_float32(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 4, 4, 4)))
        b = Tensor(np.zeros(3))
        w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
        # float32 with h=1e-3; a linear function of w keeps central differences exact up to rounding
        err = ad.gradcheck(lambda wt: ad.sum(ad.conv3d(x, wt, b)), Tensor(w), h=1e-3, max_elements=30)
        assert err <= 1e-3

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(4, 3, 3, 3, 3\).*\(2, 5, 5, 5\)"):
            ad.conv3d(Tensor(np.zeros((2, 5, 5, 5))), Tensor(np.zeros((4, 3, 3, 3, 3))), Tensor(np.zeros(4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ad.conv3d(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros(1)))


class TestUpsample:
    def test_single_voxel(self):
        out = ad.upsample3d(Tensor(np.full((1, 1, 1, 1), 5.0)), 2)
        assert out.shape == (1, 2, 2, 2)
        assert np.all(out.data == 5)

    def test_shape(self):
        assert ad.upsample3d(Tensor(np.zeros((3, 4, 4, 4))), 2).shape == (3, 8, 8, 8)

    def test_backward_counts_replicas(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 3, 3)), requires_grad=True)
        ad.backward(ad.sum(ad.upsample3d(x, 2)))
        np.testing.assert_array_equal(x.grad, 8.0)

    def test_nearest_neighbour_layout(self):
        x = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        out = ad.upsample3d(Tensor(x), 2).data
        for z in range(4):
            for y in range(4):
                for w in range(4):
                    assert out[0, z, y, w] == x[0, z // 2, y // 2, w // 2]


class TestDense:
    def test_identity(self):
        x = Tensor([1.5, -2.0, 3.0])
        out = ad.dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_multiply(self):
        out = ad.dense(Tensor([1, 1]), Tensor([[1, 2], [3, 4]]), Tensor([0, 1]))
        np.testing.assert_array_equal(out.data, [3, 8])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck_random_layer(self, seed):
        rng = np.random.default_rng(seed)
        w = t64(rng.standard_normal((3, 4)))
        b = t64(rng.standard_normal(3))
        assert ad.gradcheck(lambda x: ad.sum(ad.sigmoid(ad.dense(x, w, b))), rng.standard_normal(4), 1e-5) <= 1e-3
        x = t64(rng.standard_normal(4))
        assert ad.gradcheck(lambda wt: ad.sum(ad.sigmoid(ad.dense(x, wt, b))), w.data, 1e-5) <= 1e-3

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ad.dense(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


class TestActivations:
    def test_leaky_relu_negative(self):
        assert ad.activation(Tensor([-1.0]), "leaky_relu", 0.01).data[0] == pytest.approx(-0.01)

    def test_sigmoid_zero(self):
        assert ad.activation(Tensor([0.0]), "sigmoid").data[0] == 0.5

    def test_relu(self):
        np.testing.assert_array_equal(ad.activation(Tensor([-2.0, 0.0, 3.0]), "relu").data, [0, 0, 3])

    def test_subgradient_at_zero_is_positive_branch(self):
        x = Tensor([0.0], requires_grad=True)
        ad.backward(ad.sum(ad.leaky_relu(x, 0.2)))
        assert x.grad[0] == 1.0
        x = Tensor([0.0], requires_grad=True)
        ad.backward(ad.sum(ad.relu(x)))
        assert x.grad[0] == 1.0

    def test_sigmoid_extremes_finite(self):
        out = ad.sigmoid(Tensor([-1e4, 1e4])).data
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    def test_bad_slope(self):
        with pytest.raises(ValueError):
            ad.leaky_relu(Tensor([1.0]), 1.5)


class TestElementwise:
    def test_mul_zeros(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
        assert not ad.elementwise(x, Tensor(np.zeros((2, 3))), "mul").data.any()

    def test_add_zeros(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
        np.testing.assert_array_equal(ad.elementwise(x, Tensor(np.zeros((2, 3))), "add").data, x.data)

    def test_per_channel_broadcast(self):
        fmap = Tensor(np.array([5.0, 7.0]).reshape(2, 1, 1, 1))
        out = ad.elementwise(fmap, Tensor([2.0, 3.0]), "mul")
        np.testing.assert_array_equal(out.data.reshape(-1), [10, 21])

    def test_broadcast_gradient_reduces(self):
        a = Tensor(np.ones((2, 3, 3, 3)), requires_grad=True)
        v = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.sum(ad.mul(a, v)))
        np.testing.assert_array_equal(v.grad, [27.0, 27.0])
        np.testing.assert_array_equal(a.grad[1], 2.0)

    def test_not_broadcastable(self):
        with pytest.raises(ValueError, match="broadcastable"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


class TestConcat:
    def test_two_maps(self):
        a = Tensor(np.ones((1, 2, 2, 2)))
        b = Tensor(np.zeros((1, 2, 2, 2)))
        out = ad.concat_channels([a, b])
        assert out.shape == (2, 2, 2, 2)
        np.testing.assert_array_equal(out.data[0], a.data[0])

    def test_four_maps(self):
        assert ad.concat_channels([Tensor(np.zeros((8, 2, 2, 2)))] * 4).shape == (32, 2, 2, 2)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        other = t64(rng.standard_normal((2, 2, 2, 2)))
        proj = t64(rng.standard_normal((5, 2, 2, 2)))
        f = lambda t: ad.sum(ad.mul(ad.concat_channels([other, t]), proj))  # noqa: E731
        assert ad.gradcheck(f, rng.standard_normal((3, 2, 2, 2)), 1e-5) <= 1e-3

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError, match="spatial"):
            ad.concat_channels([Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 2, 3)))])


class TestPoolingAndNorm:
    def test_constant_pool(self):
        np.testing.assert_array_equal(ad.global_avg_pool(Tensor(np.full((3, 2, 2, 2), 3.0))).data, [3, 3, 3])

    def test_arithmetic_mean(self):
        x = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        assert ad.global_avg_pool(Tensor(x)).data[0] == 3.5

    def test_pool_backward(self):
        x = Tensor(np.zeros((2, 2, 3, 2)), requires_grad=True)
        ad.backward(ad.sum(ad.mul(ad.global_avg_pool(x), Tensor([1.0, 6.0]))))
        np.testing.assert_allclose(x.grad[0], 1 / 12)
        np.testing.assert_allclose(x.grad[1], 6 / 12)

    def test_instance_norm_constant_channel(self):
        assert not ad.instance_norm(Tensor(np.full((2, 3, 3, 3), 4.0)), 1e-5).data.any()

    def test_instance_norm_two_voxels(self):
        out = ad.instance_norm(t64(np.array([1.0, 3.0]).reshape(1, 2, 1, 1)), 1e-12).data.reshape(-1)
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-9)

    def test_instance_norm_zero_mean(self):
        x = np.random.default_rng(0).standard_normal((4, 5, 5, 5)) * 3 + 2
        out = ad.instance_norm(Tensor(x), 1e-5).data
        assert np.abs(out.reshape(4, -1).mean(axis=1)).max() < 1e-5


class TestBackward:
    def test_linear(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        ad.backward(ad.sum(ad.scale(x, 2.0)))
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.sum(ad.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulates_without_zeroing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            ad.backward(ad.sum(ad.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_fan_out_sums(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ad.backward(ad.sum(ad.add(x, x)))
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_unreachable_parameter_grad_zero(self):
        used = Parameter("used", [1.0, 2.0])
        unused = Parameter("unused", [3.0])
        ad.backward(ad.sum(used))
        np.testing.assert_array_equal(used.grad, 1.0)
        np.testing.assert_array_equal(unused.grad, 0.0)

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.scale(x, 2.0))

    def test_tape_topological(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.mul(x, x)
        z = ad.add(y, ad.sigmoid(y))
        loss = ad.sum(ad.add(z, y))
        tape = ad.Tape.from_output(loss)
        position = {node.output_id: i for i, node in enumerate(tape.nodes)}
        assert len(position) == len(tape.nodes)  # each node once
        for i, node in enumerate(tape.nodes):
            for tid in node.input_ids:
                if tid is not None:
                    assert position[tid] < i

    def test_deep_graph_no_recursion_limit(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = ad.scale(y, 1.0)
        ad.backward(ad.sum(y))
        assert x.grad[0] == 1.0


class TestGradcheck:
    def test_sum_is_exact(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        assert ad.gradcheck(ad.sum, x, 1e-3) <= 1e-6

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_sigmoid_sum(self, seed):
        x = np.random.default_rng(seed).standard_normal((3, 4))
        assert ad.gradcheck(lambda t: ad.sum(ad.sigmoid(t)), x, 1e-3) <= 1e-3

    def test_detects_wrong_gradient(self):
        def broken(t):
            out = ad.scale(t, 2.0)
            if out.node is not None:
                out.node.backward = lambda g: (g * 3.0,)
            return ad.sum(out)

        assert ad.gradcheck(broken, np.ones(3), 1e-3) > 0.1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_gradcheck_suite_ops(seed):
    from corrseg.checks import gradcheck_suite

    results = gradcheck_suite(seeds=(seed,), include_network=False)
    bad = {k: v for k, v in results.items() if v > 1e-3}
    assert not bad


@settings(max_examples=25, deadline=None)
@given(
    c_in=st.integers(1, 3),
    c_out=st.integers(1, 3),
    size=st.integers(1, 5),
    dilation=st.sampled_from([1, 2, 4]),
    seed=st.integers(0, 2**16),
)
def test_conv_deterministic_and_shape_preserving(c_in, c_out, size, dilation, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((c_in, size, size + 1, size)))
    w = Tensor(rng.standard_normal((c_out, c_in, 3, 3, 3)))
    b = Tensor(rng.standard_normal(c_out))
    a = ad.conv3d(x, w, b, dilation=dilation)
    again = ad.conv3d(x, w, b, dilation=dilation)
    assert a.shape == (c_out, size, size + 1, size)
    assert a.data.tobytes() == again.data.tobytes()


class TestSerialization:
    def test_round_trip_and_sidecar(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
        ad.save_tensor(Tensor(x), tmp_path / "x.bin")
        meta = json.loads((tmp_path / "x.bin.json").read_text())
        assert meta == {"shape": [2, 3, 4], "dtype": "f32", "order": "row-major"}
        raw = (tmp_path / "x.bin").read_bytes()
        assert len(raw) == x.size * 4
        np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(2, 3, 4), x)
        np.testing.assert_array_equal(ad.load_tensor(tmp_path / "x.bin").data, x)

    def test_size_mismatch(self, tmp_path):
        ad.save_tensor(Tensor(np.zeros(4)), tmp_path / "x.bin")
        (tmp_path / "x.bin.json").write_text(json.dumps({"shape": [5], "dtype": "f32", "order": "row-major"}))
        with pytest.raises(ValueError, match="do not fill"):
            ad.load_tensor(tmp_path / "x.bin")

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(OSError, match="nope.bin"):
            ad.load_tensor(tmp_path / "nope.bin")
