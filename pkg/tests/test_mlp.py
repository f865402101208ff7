import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tests.oracles import central_difference
from tissue_isp.errors import ShapeError
from tissue_isp.mlp import (
    AdamState,
    MlpParams,
    adam_update,
    backward,
    forward,
    index_map,
    init_mlp,
    load_checkpoint,
    n_params,
    save_checkpoint,
)


def test_default_size():
    p = init_mlp((4, 256, 256, 1), np.random.default_rng(0))
    assert p.values.size == 4 * 256 + 256 + 256 * 256 + 256 + 256 + 1
    assert p.values.dtype == np.float64


def test_index_map_contiguous():
    widths = (3, 5, 7, 2)
    m = index_map(widths)
    off = 0
    for name in ["W0", "b0", "W1", "b1", "W2", "b2"]:
        o, shape = m[name]
        assert o == off
        off += int(np.prod(shape))
    assert off == n_params(widths)


def test_init_bounds():
    p = init_mlp((9, 16, 4), np.random.default_rng(1))
    (W0, b0), (W1, b1) = p.layers
    assert np.abs(W0).max() <= 1 / 3 and np.abs(b0).max() <= 1 / 3
    assert np.abs(W1).max() <= 0.25 and np.abs(b1).max() <= 0.25


def test_zero_params_zero_output():
    p = MlpParams((3, 8, 8, 2), np.zeros(n_params((3, 8, 8, 2))))
    np.testing.assert_array_equal(forward(p, np.array([1.0, -4.0, 7.0])), 0.0)


def test_linear_layer():
    p = MlpParams((3, 1), np.array([2.0, -1.0, 0.5, 0.0]))
    x = np.array([1.0, 2.0, 4.0])
    assert forward(p, x)[0] == pytest.approx(2.0)
    gp, gx = backward(p, x, np.array([1.0]))
    np.testing.assert_allclose(gp[:3], x)
    assert gp[3] == 1.0
    np.testing.assert_allclose(gx, [2.0, -1.0, 0.5])


def test_zero_input_is_bias_path():
    p = init_mlp((5, 6, 4, 3), np.random.default_rng(2))
    (W0, b0), (W1, b1), (W2, b2) = [(W.copy(), b.copy()) for W, b in p.layers]
    h = np.maximum(b0, 0)
    h = np.maximum(h @ W1 + b1, 0)
    np.testing.assert_allclose(forward(p, np.zeros(5)), h @ W2 + b2, rtol=1e-15)


def test_width_mismatch():
    p = init_mlp((3, 4, 1), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(p, np.zeros(4))
    with pytest.raises(ShapeError):
        backward(p, np.zeros(3), np.zeros(2))
    with pytest.raises(ShapeError):
        MlpParams((3, 4, 1), np.zeros(3))


def test_zero_output_gradient():
    p = init_mlp((3, 8, 8, 2), np.random.default_rng(3))
    gp, gx = backward(p, np.ones(3), np.zeros(2))
    np.testing.assert_array_equal(gp, 0.0)
    np.testing.assert_array_equal(gx, 0.0)


def test_final_layer_scaling():
    rng = np.random.default_rng(4)
    p = init_mlp((3, 8, 8, 2), rng)
    p.layers[-1][1][:] = 0.0
    x = rng.normal(size=3)
    y = forward(p, x)
    q = p.copy()
    q.layers[-1][0][:] *= -2.5
    np.testing.assert_allclose(forward(q, x), -2.5 * y, rtol=1e-14)


def test_batch_matches_rows():
    rng = np.random.default_rng(5)
    p = init_mlp((4, 16, 16, 3), rng)
    X = rng.normal(size=(7, 4))
    G = rng.normal(size=(7, 3))
    Y = forward(p, X)
    gsum = np.zeros_like(p.values)
    for i in range(7):
        np.testing.assert_allclose(Y[i], forward(p, X[i]), rtol=1e-12, atol=1e-15)
        gsum += backward(p, X[i], G[i])[0]
    gb, gx = backward(p, X, G)
    np.testing.assert_allclose(gb, gsum, rtol=1e-12, atol=1e-14)
    assert gx.shape == (7, 4)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-3, np.abs(a) + np.abs(b)))


def _gradient_check(seed):
    rng = np.random.default_rng(seed)
    widths = (3, 6, 5, 2)
    p = init_mlp(widths, rng)
    x = rng.normal(size=3)
    g = rng.normal(size=2)

    def f_theta(theta):
        return float(forward(MlpParams(widths, theta), x) @ g)

    def f_x(xx):
        return float(forward(p, xx) @ g)

    gp, gx = backward(p, x, g)
    return max(_rel_err(gp, central_difference(f_theta, p.values)), _rel_err(gx, central_difference(f_x, x)))


def test_gradient_check_100_draws():
    errs = [_gradient_check(s) for s in range(100)]
    assert max(errs) < 1e-4


def test_gradient_check_full_width():
    # spot check a few coordinates of the 256-wide network
    rng = np.random.default_rng(6)
    widths = (4, 256, 256, 1)
    p = init_mlp(widths, rng)
    x = rng.normal(size=4)
    gp, _ = backward(p, x, np.array([1.0]))
    idx = rng.choice(p.values.size, 40, replace=False)
    for i in idx:
        tp, tm = p.values.copy(), p.values.copy()
        tp[i] += 1e-5
        tm[i] -= 1e-5
        fd = (forward(MlpParams(widths, tp), x)[0] - forward(MlpParams(widths, tm), x)[0]) / 2e-5
        assert abs(fd - gp[i]) <= 1e-4 * max(1e-3, abs(fd) + abs(gp[i]))


# -- Adam -------------------------------------------------------------------------


def test_adam_zero_gradient():
    v = np.array([1.0, -2.0])
    st_ = AdamState.zeros(2)
    assert adam_update(v, np.zeros(2), st_)
    np.testing.assert_array_equal(v, [1.0, -2.0])
    assert st_.step == 1


@given(g=st.floats(1e-3, 1e3), lr=st.floats(1e-5, 1e-1))
@settings(max_examples=100, deadline=None)
def test_adam_first_step(g, lr):
    v = np.array([0.5])
    st_ = AdamState.zeros(1, lr=lr)
    adam_update(v, np.array([g]), st_)
    step = 0.5 - v[0]
    # closed form: lr * g / (|g| + eps)
    assert step == pytest.approx(lr * g / (g + 1e-8), rel=1e-12)
    assert step < lr


def test_adam_nonfinite_skipped():
    v = np.array([1.0, 2.0])
    st_ = AdamState.zeros(2)
    assert not adam_update(v, np.array([np.nan, 1.0]), st_)
    np.testing.assert_array_equal(v, [1.0, 2.0])
    assert st_.step == 0
    np.testing.assert_array_equal(st_.m, 0.0)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(5, 10))
    outs = []
    for _ in range(2):
        v = np.ones(10)
        s = AdamState.zeros(10)
        for row in g:
            adam_update(v, row, s)
        outs.append(v.tobytes())
    assert outs[0] == outs[1]


def test_adam_minimizes_quadratic():
    v = np.array([3.0, -2.0])
    s = AdamState.zeros(2, lr=0.05)
    for _ in range(2000):
        adam_update(v, 2 * v, s)
    assert np.linalg.norm(v) < 1e-2


def test_adam_length_mismatch():
    with pytest.raises(ShapeError):
        adam_update(np.zeros(2), np.zeros(3), AdamState.zeros(2))


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    nets = {"actor": init_mlp((4, 8, 8, 8), rng), "q1": init_mlp((8, 8, 8, 1), rng)}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, nets, {"obs_dim": 4})
    got, man = load_checkpoint(path)
    assert man == {"obs_dim": 4}
    for k in nets:
        assert got[k].widths == nets[k].widths
        assert got[k].values.tobytes() == nets[k].values.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"garbage-file-contents")
    with pytest.raises(ValueError):
        load_checkpoint(path)
