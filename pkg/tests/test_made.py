"""Autoregressive structure of the masked network, verified numerically."""

import numpy as np
import pytest

from longiflow import seeding
from longiflow import tensor as T
from longiflow.made import MadeNet, build_masks, _degrees
from longiflow.tensor import Tensor


def numerical_jacobian(f, x, h=1e-6):
    d = x.size
    out0 = f(x)
    jac = np.zeros((out0.size, d))
    for i in range(d):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        jac[:, i] = (f(xp) - f(xm)) / (2 * h)
    return jac


@pytest.mark.parametrize("n_hidden,width", [(2, 16), (3, 128)])
def test_both_heads_strictly_lower_triangular(n_hidden, width):
    with T.using_precision("f64"):
        d = 5
        net = MadeNet(d, n_hidden, width, seeding.stream(0, seeding.INIT, 0))
        # generic point: undo the small output-head init
        net.weights[-1].data = net.weights[-1].data * 100.0
        x0 = seeding.stream(1, seeding.EVAL, 0).standard_normal(d)

        def head(which):
            def f(x):
                m, s = net(Tensor(x[None, :]))
                return (m if which == 0 else s).data[0]
            return f

        for which in (0, 1):
            jac = numerical_jacobian(head(which), x0)
            upper = np.triu(jac)  # includes the diagonal: strict in inputs
            assert np.abs(upper).max() <= 1e-10


def test_masked_coordinates_exactly_zero():
    # coordinate t of either head must be bitwise independent of inputs >= t
    d = 4
    net = MadeNet(d, 2, 16, seeding.stream(3, seeding.INIT, 0))
    rng = seeding.stream(4, seeding.EVAL, 0)
    x = rng.standard_normal((1, d))
    m0, s0 = net(Tensor(x.copy()))
    for t in range(d):
        x2 = x.copy()
        x2[0, t:] = rng.standard_normal(d - t) * 10
        m2, s2 = net(Tensor(x2))
        assert np.array_equal(m0.data[0, :t + 1], m2.data[0, :t + 1])
        assert np.array_equal(s0.data[0, :t + 1], s2.data[0, :t + 1])


def test_degree_assignment():
    inp, hid, out = _degrees(5, 8, 2)
    assert inp.tolist() == [1, 2, 3, 4, 5]
    for h in hid:
        assert h.min() >= 1 and h.max() <= 4
    assert out.tolist() == [1, 2, 3, 4, 5, 1, 2, 3, 4, 5]


def test_masks_shapes_and_output_strictness():
    masks = build_masks(4, 8, 2)
    assert [m.shape for m in masks] == [(4, 8), (8, 8), (8, 8)]
    # output mask: unit with degree k feeds only outputs of degree > k
    out_mask = masks[-1]
    hid = _degrees(4, 8, 2)[1][-1]
    out_deg = np.tile(np.arange(1, 5), 2)
    for i in range(8):
        for j in range(8):
            assert out_mask[i, j] == float(out_deg[j] > hid[i])


def test_d1_degenerates_but_works():
    net = MadeNet(1, 2, 4, seeding.stream(5, seeding.INIT, 0))
    m, s = net(Tensor(np.array([[0.7]])))
    assert m.data.shape == (1, 1) and s.data.shape == (1, 1)
    # with d=1 the single output may depend on nothing at all
    m2, s2 = net(Tensor(np.array([[-3.1]])))
    assert np.array_equal(m.data, m2.data)
    assert np.array_equal(s.data, s2.data)


def test_config_validation():
    with pytest.raises(ValueError):
        MadeNet(0, 2, 8, seeding.stream(0, seeding.INIT, 0))
    with pytest.raises(ValueError):
        MadeNet(3, 0, 8, seeding.stream(0, seeding.INIT, 0))
