"""The finite-difference checker itself: exactness, detection, preconditions."""

import numpy as np
import pytest

from longiflow import tensor as T
from longiflow.gradcheck import NondeterministicFunctionError, gradcheck


def test_linear_function_is_exact():
    with T.using_precision("f64"):
        w = T.parameter(np.array([1.0, -2.0, 0.5]))
        c = np.array([3.0, 1.0, -4.0])

        def fn(params):
            return T.tsum(params["w"] * c)

        assert gradcheck(fn, {"w": w}) < 1e-10


def test_nonlinear_function_within_tolerance():
    with T.using_precision("f64"):
        rng = np.random.default_rng(11)
        w = T.parameter(rng.standard_normal((4, 3)))
        b = T.parameter(rng.standard_normal(3))
        x = rng.standard_normal((5, 4))

        def fn(params):
            h = T.ttanh(T.Tensor(x) @ params["w"] + params["b"])
            return T.tsum(T.sigmoid(h) * h)

        assert gradcheck(fn, {"w": w, "b": b}) < 1e-6


def test_fresh_randomness_detected():
    with T.using_precision("f64"):
        w = T.parameter(np.ones(2))
        rng = np.random.default_rng(0)

        def fn(params):
            return T.tsum(params["w"] * rng.standard_normal(2))

        with pytest.raises(NondeterministicFunctionError):
            gradcheck(fn, {"w": w})


def test_requires_64bit_mode():
    w = T.parameter(np.ones(2, dtype=np.float32))
    with pytest.raises(RuntimeError):
        gradcheck(lambda p: T.tsum(p["w"]), {"w": w})
