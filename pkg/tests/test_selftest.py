"""The verification battery itself."""

import numpy as np
import pytest

from longiflow import tensor as T
from longiflow.selftest import (CHECKS, ReplayRng, format_battery,
                                run_battery)


def test_full_battery_passes():
    with T.using_precision("f64"):
        rows = run_battery()
    assert len(rows) == len(CHECKS)
    assert all(r.passed for r in rows), format_battery(rows)


def test_injected_sign_error_fails_only_the_logdet_check():
    with T.using_precision("f64"):
        rows = run_battery(_logdet_sign=-1.0)
    by_name = {r.name: r.passed for r in rows}
    assert by_name["flow-logdet"] is False
    for name, passed in by_name.items():
        if name != "flow-logdet":
            assert passed, name


def test_battery_subset_selection():
    with T.using_precision("f64"):
        rows = run_battery(names=["flow-roundtrip", "kl-unbiasedness"])
    assert [r.name for r in rows] == ["flow-roundtrip", "kl-unbiasedness"]
    with pytest.raises(KeyError):
        run_battery(names=["flux-capacitor"])


def test_format_battery_table():
    with T.using_precision("f64"):
        rows = run_battery(names=["flow-roundtrip"])
    text = format_battery(rows)
    assert "flow-roundtrip" in text
    assert "pass" in text


def test_replay_rng_guards():
    rng = ReplayRng(ints=[2], normals=[np.zeros((2, 3))])
    assert rng.integers(5) == 2
    with pytest.raises(IndexError):
        rng.integers(5)
    rng2 = ReplayRng(ints=[7], normals=[np.zeros(4)])
    with pytest.raises(ValueError):
        rng2.integers(3)
    with pytest.raises(ValueError):
        rng2.standard_normal((5,))
