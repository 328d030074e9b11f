import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusion_pilot import autodiff as ad


def _param(rng, shape, name):
    return ad.Parameter(rng.normal(size=shape), name)


def _conv_reference(x, w, b, stride, pad):
    """Direct nested-loop convolution used as an independent oracle."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            out[:, i, j, :] = np.tensordot(patch, w, axes=([1, 2, 3], [0, 1, 2])) + b
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (2, 2, 5), (1, 1, 3)])
def test_conv2d_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 9, 7, 3))
    w = _param(rng, (k, k, 3, 4), "w")
    b = _param(rng, (4,), "b")
    out = ad.conv2d(ad.constant(x), w, b, stride, pad)
    np.testing.assert_allclose(out.data, _conv_reference(x, w.data, b.data, stride, pad), atol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    rng = np.random.default_rng(0)
    w = _param(rng, (3, 3, 4, 2), "w")
    b = _param(rng, (2,), "b")
    with pytest.raises(ad.ShapeError, match="4 channels"):
        ad.conv2d(ad.constant(np.zeros((1, 8, 8, 3))), w, b)


def test_linear_and_relu_values():
    w = ad.Parameter(np.array([[1.0, -1.0], [2.0, 0.5]]), "w")
    b = ad.Parameter(np.array([0.5, -3.0]), "b")
    y = ad.relu(ad.linear(ad.constant(np.array([[1.0, 2.0]])), w, b))
    np.testing.assert_array_equal(y.data, [[5.5, 0.0]])


def test_linear_shape_error_names_node():
    w = ad.Parameter(np.zeros((3, 2)), "w")
    b = ad.Parameter(np.zeros(2), "b")
    with pytest.raises(ad.ShapeError) as exc:
        ad.linear(ad.constant(np.zeros((1, 4))), w, b, name="head.fc0")
    assert exc.value.node == "head.fc0"


def test_abs_diff_sum_weighted_value_and_gradient():
    x = ad.Parameter(np.array([[0.2, 0.6, 0.1]]), "x")
    loss = ad.abs_diff_sum(x, np.array([[0.0, 0.5, 0.0]]), (0.5, 0.45, 0.05))
    assert float(loss.data) == pytest.approx(0.15, abs=1e-12)
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [[0.5, 0.45, 0.05]])


def test_gradient_accumulates_over_reuse():
    p = ad.Parameter(np.array([[1.0, -2.0]]), "p")
    loss = ad.abs_diff_sum(ad.add(p, p), np.zeros((1, 2)))
    ad.backward(loss)
    np.testing.assert_array_equal(p.grad, [[2.0, -2.0]])


def test_unused_parameter_keeps_none_grad_and_adam_skips_it():
    rng = np.random.default_rng(1)
    used = _param(rng, (3, 2), "used")
    unused = _param(rng, (3, 2), "unused")
    before = unused.data.copy()
    b = ad.Parameter(np.zeros(2), "b")
    loss = ad.abs_diff_sum(ad.linear(ad.constant(np.ones((1, 3))), used, b), np.ones((1, 2)))
    ad.backward(loss)
    assert unused.grad is None
    opt = ad.Adam([used, unused, b])
    opt.step(1e-2)
    assert np.array_equal(unused.data, before)


def test_take_rows_scatter_adds_gradient():
    x = ad.Parameter(np.arange(6.0).reshape(3, 2), "x")
    y = ad.take_rows(x, [2, 0, 2])
    ad.backward(ad.abs_diff_sum(y, np.full((3, 2), -1.0)))
    np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0], [2, 2]])


def test_backward_requires_scalar():
    x = ad.Parameter(np.ones((2, 2)), "x")
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.relu(x))


def test_concat_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.concat([ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 3)))], axis=-1)


def _small_net(rng):
    w1 = _param(rng, (3, 3, 2, 3), "c.w")
    b1 = _param(rng, (3,), "c.b")
    w2 = _param(rng, (3 * 3 * 3, 4), "f.w")
    b2 = _param(rng, (4,), "f.b")
    x = rng.normal(size=(3, 6, 5, 2))
    sel = np.array([0, 2])
    t = rng.normal(size=(2, 4))

    def loss():
        h = ad.relu(ad.conv2d(ad.constant(x), w1, b1, stride=2, pad=1))
        h = ad.linear(ad.flatten(h), w2, b2)
        h = ad.take_rows(ad.shift(ad.scale(h, 0.7), 0.1), sel)
        return ad.abs_diff_sum(h, t, (0.5, 0.3, 0.15, 0.05))

    return loss, [w1, b1, w2, b2]


def test_finite_difference_small_network():
    rng = np.random.default_rng(3)
    loss, params = _small_net(rng)
    rep = ad.finite_difference_check(loss, params, 1e-5, 1e-3)
    assert rep.checked == sum(p.data.size for p in params)
    assert rep.passed, rep.max_error


def test_finite_difference_kink_is_skipped_not_scored():
    # |x| with x = 5e-5: a 1e-4 step crosses zero, so the central difference reads 0.5
    p = ad.Parameter(np.array([5e-5, 1.0, -2.0]), "p")
    loss = lambda: ad.abs_diff_sum(p, np.zeros(3))  # noqa: E731
    naive = ad.finite_difference_check(loss, [p], 1e-4, 1e-3)
    assert not naive.passed
    rep = ad.finite_difference_check(loss, [p], 1e-4, 1e-3, skip_kinks=True)
    assert rep.passed and rep.skipped == 1 and rep.checked == 2


def test_finite_difference_nonzero_only_sampling():
    p = ad.Parameter(np.array([[0.0], [0.0], [3.0], [0.0], [-1.0]]), "p")
    loss = lambda: ad.abs_diff_sum(ad.take_rows(p, [2, 4]), np.zeros((2, 1)))  # noqa: E731
    rep = ad.finite_difference_check(loss, [p], nonzero_only=True, max_checks=10)
    assert rep.checked == 2 and rep.passed


def test_finite_difference_requires_float64():
    p = ad.Parameter(np.ones(3, dtype=np.float32), "p")
    with pytest.raises(TypeError):
        ad.finite_difference_check(lambda: ad.abs_diff_sum(p, np.zeros(3)), [p])


def test_adam_first_step_moves_by_lr():
    p = ad.Parameter(np.array([1.0, -1.0]), "p")
    p.grad = np.array([0.3, -2.0])
    ad.Adam([p]).step(0.01)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-7)


def test_adam_zero_lr_is_noop():
    p = ad.Parameter(np.array([1.0, -1.0]), "p")
    p.grad = np.array([0.3, -2.0])
    opt = ad.Adam([p])
    opt.step(0.0)
    assert np.array_equal(p.data, [1.0, -1.0])
    assert opt.t["p"] == 0


def test_snapshot_round_trip_and_manifest(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=(5,))}
    path = ad.save_snapshot(tmp_path / "params", tensors)
    lines = ad.manifest_path(path).read_text().splitlines()
    assert [ln.split("\t")[:3] for ln in lines] == [["a.w", "3x4", "float32"], ["b", "5", "float64"]]
    back = ad.load_snapshot(path)
    assert list(back) == ["a.w", "b"]
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert np.array_equal(back[k], tensors[k])
    assert ad.snapshot_checksum(back) == ad.snapshot_checksum(tensors)


def test_snapshot_detects_corruption(tmp_path):
    path = ad.save_snapshot(tmp_path / "params", {"x": np.arange(4.0)})
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        ad.load_snapshot(path)


def test_snapshot_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"not a snapshot")
    with pytest.raises(ValueError):
        ad.load_snapshot(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.integers(1, 3), st.sampled_from([1, 2]),
       st.sampled_from([0, 1]))
def test_conv_output_size_property(n, h, w, c, stride, pad):
    rng = np.random.default_rng(n * 100 + h * 10 + w)
    wt = _param(rng, (3, 3, c, 2), "w")
    b = _param(rng, (2,), "b")
    if h + 2 * pad < 3 or w + 2 * pad < 3:
        return
    out = ad.conv2d(ad.constant(rng.normal(size=(n, h, w, c))), wt, b, stride, pad)
    assert out.shape == (n, ad.conv_out_size(h, 3, stride, pad), ad.conv_out_size(w, 3, stride, pad), 2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_abs_diff_sum_nonnegative_and_symmetric(a, b):
    x = ad.constant(np.array([a]))
    y = ad.constant(np.array([b]))
    l1 = float(ad.abs_diff_sum(x, np.array([b])).data)
    l2 = float(ad.abs_diff_sum(y, np.array([a])).data)
    assert l1 >= 0
    assert l1 == pytest.approx(l2)


@pytest.mark.parametrize("pad", [0, 1])
def test_conv2d_accepts_non_contiguous_input(pad):
    rng = np.random.default_rng(5)
    x = np.asfortranarray(rng.normal(size=(2, 6, 6, 3)))
    w = _param(rng, (3, 3, 3, 2), "w")
    b = _param(rng, (2,), "b")
    out = ad.conv2d(ad.constant(x), w, b, 1, pad)
    np.testing.assert_allclose(out.data, _conv_reference(np.ascontiguousarray(x), w.data, b.data, 1, pad), atol=1e-12)
