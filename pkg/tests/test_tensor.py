import math

import numpy as np
import numpy.testing as npt
import pytest

from Errors import DimensionError, GraphError, IndexRangeError
from Tensor import (Graph, Tensor, add, channel_concat, channel_slice, conv2d, kl_to_target, nll_probs,
                    relu, resample, softmax_ce, softmax_channels, stop_gradient, weighted_sum)


def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride:y * stride + k, z * stride:z * stride + k]
                    out[i, o, y, z] = np.sum(patch * w[o]) + b[o]
    return out


class TestConv2d:
    def test_identity_pointwise_kernel(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        w = np.eye(3)[:, :, None, None]
        npt.assert_array_equal(conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data, x)

    def test_all_ones_kernel_sums_nine_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        npt.assert_array_equal(out.data, [[[[9.0]]]])

    @pytest.mark.parametrize('k,stride,pad', [(3, 1, 1), (3, 2, 1), (3, 1, 0), (1, 2, 0), (3, 2, 0)])
    def test_matches_nested_loop_oracle(self, rng, k, stride, pad):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        npt.assert_allclose(out.data, conv_oracle(x, w, b, stride, pad), rtol=0, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError) as info:
            conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(3, 5, 1, 1))))
        assert info.value.axis == 'C'

    def test_rejects_rank3_input(self, rng):
        with pytest.raises(DimensionError):
            conv2d(Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(3, 2, 1, 1))))


class TestElementwise:
    def test_relu(self):
        npt.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_keeps_nan(self):
        out = relu(Tensor([np.nan, -1.0])).data
        assert np.isnan(out[0]) and out[1] == 0.0

    def test_add_identity_and_commutativity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        y = Tensor(rng.normal(size=(2, 3, 4, 4)))
        npt.assert_array_equal(add(x, Tensor(np.zeros(x.shape))).data, x.data)
        npt.assert_array_equal(add(x, y).data, add(y, x).data)

    def test_add_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            add(Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(rng.normal(size=(1, 3, 4, 5))))


class TestChannels:
    def test_concat_slice_inverse(self, rng):
        x1 = Tensor(rng.normal(size=(1, 2, 2, 2)))
        x2 = Tensor(rng.normal(size=(1, 3, 2, 2)))
        both = channel_concat(x1, x2)
        assert both.shape == (1, 5, 2, 2)
        npt.assert_array_equal(channel_slice(both, 1, 2).data, x1.data)
        npt.assert_array_equal(channel_slice(both, 1, 5).data, both.data)

    @pytest.mark.parametrize('lo,hi', [(0, 2), (2, 6), (3, 2)])
    def test_slice_out_of_range(self, rng, lo, hi):
        with pytest.raises(IndexRangeError):
            channel_slice(Tensor(rng.normal(size=(1, 5, 2, 2))), lo, hi)

    def test_concat_spatial_mismatch(self, rng):
        with pytest.raises(DimensionError):
            channel_concat(Tensor(rng.normal(size=(1, 2, 2, 2))), Tensor(rng.normal(size=(1, 2, 3, 2))))


class TestResample:
    def test_single_pixel(self):
        npt.assert_array_equal(resample(Tensor(np.full((1, 1, 1, 1), 5.0))).data, np.full((1, 1, 2, 2), 5.0))

    def test_average_pool_recovers_input(self, rng):
        x = rng.normal(size=(1, 3, 4, 4))
        up = resample(Tensor(x))
        assert up.shape == (1, 3, 8, 8)
        pooled = up.data.reshape(1, 3, 4, 2, 4, 2).mean(axis=(3, 5))
        npt.assert_array_equal(pooled, x)


class TestSoftmaxCE:
    def test_uniform_logits(self):
        probs, loss = softmax_ce(Tensor(np.zeros((1, 4, 2, 3))), np.zeros((1, 2, 3), dtype=int))
        npt.assert_allclose(probs.data, 0.25)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct_logit(self):
        logits = np.zeros((1, 3, 2, 2))
        labels = np.array([[[0, 1], [2, 0]]])
        for i in range(2):
            for j in range(2):
                logits[0, labels[0, i, j], i, j] = 30.0
        assert softmax_ce(Tensor(logits), labels)[1].item() < 1e-9

    def test_matches_logsumexp_oracle(self, rng):
        logits = rng.normal(0.0, 3.0, size=(2, 5, 3, 3))
        labels = rng.integers(0, 5, size=(2, 3, 3))
        labels[1, 2, 2] = 255
        total, count = 0.0, 0
        for n in range(2):
            for i in range(3):
                for j in range(3):
                    if labels[n, i, j] == 255:
                        continue
                    z = logits[n, :, i, j]
                    m = z.max()
                    total += m + math.log(sum(math.exp(v - m) for v in z)) - z[labels[n, i, j]]
                    count += 1
        assert softmax_ce(Tensor(logits), labels)[1].item() == pytest.approx(total / count, rel=1e-12)

    def test_out_of_range_label(self):
        with pytest.raises(IndexRangeError):
            softmax_ce(Tensor(np.zeros((1, 3, 1, 1))), np.array([[[3]]]))

    def test_kl_to_self_is_zero(self, rng):
        logits = Tensor(rng.normal(size=(2, 4, 3, 3)))
        assert kl_to_target(logits, softmax_channels(logits)).item() == pytest.approx(0.0, abs=1e-12)


class TestGraph:
    def test_relu_gradient(self):
        with Graph() as g:
            x = Tensor([2.0, -3.0], requires_grad=True)
            loss = weighted_sum(relu(x), np.ones(2))
        npt.assert_array_equal(g.backward(loss)[x], [1.0, 0.0])

    def test_nll_probs_gradient_skips_ignored_pixels(self):
        with Graph() as g:
            p = Tensor(np.full((1, 4, 1, 2), 0.25), requires_grad=True)
            loss = nll_probs(p, np.array([[[2, 255]]]))
        assert loss.item() == pytest.approx(np.log(4.0))
        expected = np.zeros((1, 4, 1, 2))
        expected[0, 2, 0, 0] = -4.0
        npt.assert_allclose(g.backward(loss)[p], expected)

    def test_add_passes_upstream_to_both_inputs(self, rng):
        r = rng.normal(size=(1, 2, 3, 3))
        with Graph() as g:
            x = Tensor(rng.normal(size=r.shape), requires_grad=True)
            y = Tensor(rng.normal(size=r.shape), requires_grad=True)
            loss = weighted_sum(add(x, y), r)
        grads = g.backward(loss)
        npt.assert_array_equal(grads[x], r)
        npt.assert_array_equal(grads[y], r)

    def test_reused_input_accumulates(self, rng):
        r = rng.normal(size=(1, 2, 3, 3))
        with Graph() as g:
            x = Tensor(rng.normal(size=r.shape), requires_grad=True)
            loss = weighted_sum(add(x, x), r)
        npt.assert_array_equal(g.backward(loss)[x], 2 * r)

    def test_non_scalar_loss(self, rng):
        with Graph() as g:
            x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
            y = relu(x)
        with pytest.raises(GraphError):
            g.backward(y)

    def test_stop_gradient_blocks_flow(self, rng):
        with Graph() as g:
            x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
            loss = weighted_sum(stop_gradient(x), np.ones((1, 1, 2, 2)))
        grads = g.backward(loss)
        assert x not in grads
        npt.assert_array_equal(grads[x], np.zeros((1, 1, 2, 2)))

    def test_ops_outside_graph_record_nothing(self, rng):
        with Graph() as g:
            pass
        relu(Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True))
        assert g.nodes == []

    def test_tensors_are_read_only(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)))
        with pytest.raises(ValueError):
            x.data[0, 0, 0, 0] = 1.0
