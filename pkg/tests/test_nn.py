import numpy as np
import pytest

from radarsynth import autodiff as ad
from radarsynth import gradcheck, nn
from radarsynth.autodiff import GraphError, Parameter, Tensor, backward
from radarsynth.nn import SparseFeatureMap, ShapeError


def naive_conv(x, w, b=None, stride=1, pad=1):
    """Six nested loops over output sites and kernel taps."""
    X, Y, Z, cin = x.shape
    k, cout = w.shape[0], w.shape[4]
    xp = np.zeros((X + 2 * pad, Y + 2 * pad, Z + 2 * pad, cin))
    xp[pad:pad + X, pad:pad + Y, pad:pad + Z] = x
    O = [(n + 2 * pad - k) // stride + 1 for n in (X, Y, Z)]
    out = np.zeros(O + [cout])
    for i in range(O[0]):
        for j in range(O[1]):
            for m in range(O[2]):
                for a in range(k):
                    for c in range(k):
                        for e in range(k):
                            out[i, j, m] += xp[i * stride + a, j * stride + c, m * stride + e] @ w[a, c, e]
    return out if b is None else out + b


def _sparse(rng, dims, density, channels):
    keys = np.flatnonzero(rng.random(int(np.prod(dims))) < density)
    coords = np.stack(np.unravel_index(keys, dims), axis=1)
    feats = rng.normal(size=(len(keys), channels))
    return SparseFeatureMap(coords, Tensor(feats), dims)


def _embed(sfm):
    return nn.scatter_dense(sfm.features, sfm.coords, sfm.dims).value


@pytest.fixture(params=["im2col", "per_offset"])
def conv_path(request, monkeypatch):
    if request.param == "per_offset":
        monkeypatch.setattr(nn, "IM2COL_MAX_ELEMENTS", 0)
    return request.param


def test_identity_kernel(conv_path):
    x = np.random.default_rng(0).normal(size=(4, 5, 3, 2))
    w = np.zeros((3, 3, 3, 2, 2))
    w[1, 1, 1] = np.eye(2)
    np.testing.assert_array_equal(nn.dense_conv3d(Tensor(x), Tensor(w)).value, x)


def test_all_ones_kernel_interior_sum():
    out = nn.dense_conv3d(Tensor(np.ones((3, 3, 3, 1))), Tensor(np.ones((3, 3, 3, 1, 1))))
    assert out.value[1, 1, 1, 0] == 27.0
    assert out.value[0, 0, 0, 0] == 8.0


@pytest.mark.parametrize("stride,pad,shape", [(1, 1, (4, 5, 3)), (2, 1, (6, 5, 4)),
                                              (1, 0, (5, 5, 5)), (2, 0, (6, 6, 5))])
def test_dense_conv_matches_loop_oracle(conv_path, stride, pad, shape):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w, b = rng.normal(size=shape + (2,)), rng.normal(size=(3, 3, 3, 2, 3)), rng.normal(size=3)
    got = nn.dense_conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).value
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad), atol=1e-10)


def test_dense_conv_paths_share_gradients(monkeypatch):
    rng = np.random.default_rng(3)
    x0, w0, r = rng.normal(size=(5, 4, 6, 3)), rng.normal(size=(3, 3, 3, 3, 2)), None
    grads = []
    for limit in (1 << 30, 0):
        monkeypatch.setattr(nn, "IM2COL_MAX_ELEMENTS", limit)
        x, w = Parameter(x0.copy()), Parameter(w0.copy())
        out = nn.dense_conv3d(x, w, stride=2)
        r = rng.normal(size=out.shape) if r is None else r
        backward(ad.total(ad.mul(out, r)))
        grads.append((x.grad, w.grad))
    np.testing.assert_allclose(grads[0][0], grads[1][0], atol=1e-10)
    np.testing.assert_allclose(grads[0][1], grads[1][1], atol=1e-10)


def test_dense_conv_shape_errors():
    with pytest.raises(ShapeError):
        nn.dense_conv3d(Tensor(np.zeros((3, 3, 3, 2))), Tensor(np.zeros((3, 3, 3, 1, 1))))
    with pytest.raises(ShapeError):
        nn.dense_conv3d(Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros((3, 3, 1, 1))))
    with pytest.raises(ShapeError):
        nn.dense_conv3d(Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros((3, 3, 3, 1, 1))), stride=3)


def test_single_voxel_sparse_footprint():
    x = SparseFeatureMap([[3, 3, 3]], Tensor(np.ones((1, 1))), (8, 8, 8))
    out = nn.sparse_conv3d(x, Tensor(np.ones((3, 3, 3, 1, 1))))
    assert len(out) == 27
    np.testing.assert_array_equal(out.features.value, 1.0)


def test_empty_sparse_input():
    x = SparseFeatureMap(np.zeros((0, 3)), Tensor(np.zeros((0, 2))), (4, 4, 4))
    out = nn.sparse_conv3d(x, Tensor(np.ones((3, 3, 3, 2, 1))), stride=2)
    assert len(out) == 0 and out.features.shape == (0, 1)


@pytest.mark.parametrize("stride", [1, 2])
def test_sparse_matches_dense_embedding(conv_path, stride):
    rng = np.random.default_rng(stride)
    for _ in range(10):
        dims = tuple(int(d) for d in rng.integers(2, 9, size=3))
        x = _sparse(rng, dims, rng.uniform(0.05, 0.5), 2)
        w, b = rng.normal(size=(3, 3, 3, 2, 3)), rng.normal(size=3)
        out = nn.sparse_conv3d(x, Tensor(w), Tensor(b), stride=stride)
        dense = nn.dense_conv3d(Tensor(_embed(x)), Tensor(w), Tensor(b), stride=stride).value
        np.testing.assert_allclose(out.features.value, dense[tuple(out.coords.T)], atol=1e-6)
        # every site outside the active set sees only zeros
        mask = np.ones(dense.shape[:3], bool)
        mask[tuple(out.coords.T)] = False
        np.testing.assert_allclose(dense[mask], np.broadcast_to(b, dense[mask].shape), atol=1e-12)
        assert np.all(np.diff(out.keys()) > 0)


def test_submanifold_single_voxel_identity():
    w = np.zeros((3, 3, 3, 1, 1))
    w[1, 1, 1] = 1.0
    x = SparseFeatureMap([[1, 2, 0]], Tensor(np.array([[2.5]])), (4, 4, 4))
    out = nn.submanifold_conv3d(x, Tensor(w))
    np.testing.assert_array_equal(out.coords, [[1, 2, 0]])
    np.testing.assert_array_equal(out.features.value, [[2.5]])


def test_submanifold_matches_masked_dense(conv_path):
    rng = np.random.default_rng(7)
    for _ in range(10):
        dims = tuple(int(d) for d in rng.integers(2, 9, size=3))
        x = _sparse(rng, dims, rng.uniform(0.05, 0.6), 3)
        w, b = rng.normal(size=(3, 3, 3, 3, 2)), rng.normal(size=2)
        out = nn.submanifold_conv3d(x, Tensor(w), Tensor(b))
        np.testing.assert_array_equal(out.coords, x.coords)
        dense = naive_conv(_embed(x), w, b)
        np.testing.assert_allclose(out.features.value, dense[tuple(x.coords.T)], atol=1e-9)


def test_submanifold_rejects_stride():
    x = SparseFeatureMap([[0, 0, 0]], Tensor(np.ones((1, 1))), (2, 2, 2))
    with pytest.raises(ShapeError):
        nn.submanifold_conv3d(x, Tensor(np.ones((3, 3, 3, 1, 1))), stride=2)


def test_sparse_channel_mismatch():
    x = SparseFeatureMap([[0, 0, 0]], Tensor(np.ones((1, 2))), (2, 2, 2))
    with pytest.raises(ShapeError):
        nn.sparse_conv3d(x, Tensor(np.ones((3, 3, 3, 1, 1))))


def test_upsample_blocks_and_composition():
    x = np.zeros((2, 2, 2, 1))
    x[1, 0, 1] = 4.0
    up = nn.upsample_nearest(Tensor(x)).value
    assert up.shape == (4, 4, 4, 1)
    np.testing.assert_array_equal(up[2:4, 0:2, 2:4], 4.0)
    assert up.sum() == 4.0 * 8
    np.testing.assert_array_equal(nn.upsample_nearest(Tensor(np.full((2, 3, 1, 2), 1.5))).value, 1.5)
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(3, 3, 3, 2, 2))
    explicit = x.repeat(2, 0).repeat(2, 1).repeat(2, 2)
    np.testing.assert_allclose(nn.upsample_conv3d(Tensor(x), Tensor(w)).value,
                               naive_conv(explicit, w), atol=1e-10)


def test_activation_values():
    np.testing.assert_allclose(ad.leaky_relu(Tensor(np.array([-1.0, 2.0]))).value, [-0.2, 2.0])
    assert ad.sigmoid(Tensor(np.array(0.0))).value == 0.5
    np.testing.assert_allclose(nn.avg_pool3d(Tensor(np.full((4, 2, 6, 3), 0.7))).value, 0.7, rtol=1e-15)
    with pytest.raises(ShapeError):
        nn.avg_pool3d(Tensor(np.zeros((3, 2, 2, 1))))
    with pytest.raises(ValueError):
        ad.concat([Tensor(np.zeros((2, 2, 2, 1))), Tensor(np.zeros((3, 2, 2, 1)))])


def test_backward_analytic():
    x = Parameter(np.array(3.0))
    backward(ad.square(x))
    assert x.grad == 6.0
    x, y = Parameter(np.array(2.0)), Parameter(np.array(5.0))
    backward(x * y)
    assert (x.grad, y.grad) == (5.0, 2.0)


def test_backward_accumulates_shared_nodes():
    x = Parameter(np.array([1.0, -2.0]))
    h = x * 3.0
    backward(ad.total(h + h * h))
    np.testing.assert_allclose(x.grad, 3.0 + 18.0 * np.array([1.0, -2.0]))


def test_backward_errors():
    x = Parameter(np.ones(3))
    with pytest.raises(GraphError):
        backward(x * 2.0)
    root = ad.total(x * 2.0)
    backward(root)
    with pytest.raises(GraphError):
        backward(root)


def test_no_grad_builds_no_graph():
    x = Parameter(np.ones(2))
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.parents == ()


def test_gradcheck_every_op():
    errors = gradcheck.check_ops(0)
    assert len(errors) >= 30
    assert max(errors.values()) < 1e-4, errors


def _scalar_adam(theta, steps, lr=1e-3, b1=0.5, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2.0 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return theta


def test_adam_first_step_and_zero_grad():
    p, state = nn.adam_step(np.array([1.0]), np.array([1.0]), {}, lr=1e-3)
    np.testing.assert_allclose(p, 1.0 - 1e-3, atol=1e-10)
    p, _ = nn.adam_step(np.array([1.0, -3.0]), np.zeros(2), {}, lr=1e-3)
    np.testing.assert_array_equal(p, [1.0, -3.0])


def test_adam_matches_scalar_oracle():
    theta, state = np.array([1.0]), {}
    for _ in range(3):
        theta, state = nn.adam_step(theta, 2.0 * theta, state, lr=1e-3)
    np.testing.assert_allclose(theta[0], _scalar_adam(1.0, 3), rtol=0, atol=1e-12)
    p = Parameter(np.array([1.0]), "p")
    opt = nn.Adam({"p": p}, lr=1e-3)
    for _ in range(3):
        opt.zero_grad()
        backward(ad.total(ad.square(p)))
        opt.step()
    np.testing.assert_allclose(p.value[0], _scalar_adam(1.0, 3), rtol=0, atol=1e-12)


def test_forward_bitwise_deterministic():
    rng = np.random.default_rng(11)
    x = _sparse(rng, (8, 8, 8), 0.3, 4)
    w = Tensor(rng.normal(size=(3, 3, 3, 4, 4)).astype(np.float32))
    a = nn.sparse_conv3d(x, w, stride=2).features.value
    b = nn.sparse_conv3d(x, w, stride=2).features.value
    assert a.tobytes() == b.tobytes()
