import numpy as np
import pytest

from bevssl.tape import Tape, add, concat, conv1x1, conv3x3, relu, scale


def loop_conv3x3(x, w, b):
    H, W, ci = x.shape
    out = np.zeros((H, W, w.shape[-1])) + b
    for i in range(H):
        for j in range(W):
            for di in range(3):
                for dj in range(3):
                    ii, jj = i + di - 1, j + dj - 1
                    if 0 <= ii < H and 0 <= jj < W:
                        out[i, j] += x[ii, jj] @ w[di, dj]
    return out


def fd_check(fn, inputs, seed=0, h=1e-6):
    """Compare every input cotangent of ``fn`` with central differences of <out, probe>."""
    rng = np.random.default_rng(seed)
    out, vjp = fn(*inputs)
    probe = rng.normal(size=out.shape)
    grads = vjp(probe)
    for k, x in enumerate(inputs):
        for idx in np.ndindex(x.shape):
            xp = [a.copy() for a in inputs]
            xm = [a.copy() for a in inputs]
            xp[k][idx] += h
            xm[k][idx] -= h
            num = (np.sum(fn(*xp)[0] * probe) - np.sum(fn(*xm)[0] * probe)) / (2 * h)
            assert grads[k][idx] == pytest.approx(num, rel=1e-6, abs=1e-8)


def test_conv3x3_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 5, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out, _ = conv3x3(x, w, b)
    assert np.max(np.abs(out - loop_conv3x3(x, w, b))) <= 1e-12


def test_primitive_vjps():
    rng = np.random.default_rng(1)
    fd_check(conv3x3, [rng.normal(size=(4, 3, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)])
    fd_check(conv1x1, [rng.normal(size=(4, 3, 2)), rng.normal(size=(2, 3)), rng.normal(size=3)])
    fd_check(add, [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))])
    fd_check(lambda a: scale(a, factor=-2.5), [rng.normal(size=(3, 2))])
    fd_check(lambda a, b: concat(a, b), [rng.normal(size=(2, 2, 1)), rng.normal(size=(2, 2, 3))])
    x = rng.normal(size=(5, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    fd_check(relu, [x])


def test_backward_accumulates_shared_inputs():
    tape = Tape()
    x = tape.leaf(np.array([1.0, -2.0, 3.0]))
    y = tape.apply(add, x, x)
    z = tape.apply(relu, y)
    (g,) = tape.grad({z: np.ones(3)}, [x])
    assert g.tolist() == [2.0, 0.0, 2.0]


def test_untouched_leaf_gets_zero_gradient():
    tape = Tape()
    a = tape.leaf(np.ones(2))
    b = tape.leaf(np.ones(2))
    c = tape.apply(scale, a, factor=3.0)
    ga, gb = tape.grad({c: np.ones(2)}, [a, b])
    assert ga.tolist() == [3.0, 3.0] and gb.tolist() == [0.0, 0.0]


def test_foreign_vars_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones(2))
    with pytest.raises(TypeError):
        t2.apply(relu, a)


def test_backward_is_reproducible():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(5, 5, 2))
    w0 = rng.normal(size=(3, 3, 2, 2))

    def run():
        tape = Tape()
        x, w, b = tape.leaf(x0), tape.leaf(w0), tape.leaf(np.zeros(2))
        h = tape.apply(relu, tape.apply(conv3x3, x, w, b))
        o = tape.apply(conv3x3, h, w, b)
        return tape.grad({o: np.ones((5, 5, 2))}, [x, w])

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
