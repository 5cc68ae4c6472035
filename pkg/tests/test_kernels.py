import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hprosody import kernels

finite = st.floats(-10, 10, allow_nan=False, width=64)


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(0, 5, width=64)))
def test_dtw_accumulate_parity(cost):
    a = kernels.dtw_accumulate_numba(cost)
    b = kernels.dtw_accumulate_numpy(cost)
    np.testing.assert_array_equal(a, b)


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.sampled_from([0.0, 1.0, 2.0])))
def test_dtw_backtrack_parity_with_ties(cost):
    acc = kernels.dtw_accumulate_numpy(cost)
    np.testing.assert_array_equal(kernels.dtw_backtrack_numba(acc),
                                  kernels.dtw_backtrack_numpy(acc))


@given(arrays(np.float64, st.integers(0, 200), elements=finite), st.booleans())
def test_crossing_events_parity(x, rising):
    np.testing.assert_array_equal(kernels.crossing_events_numba(x, rising),
                                  kernels.crossing_events_numpy(x, rising))


def test_crossing_positions_are_interpolated():
    x = np.array([1.0, -1.0, -1.0, 3.0])
    np.testing.assert_allclose(kernels.crossing_events_numpy(x, False), [0.5])
    np.testing.assert_allclose(kernels.crossing_events_numpy(x, True), [2.25])


def test_backtrack_prefers_diagonal_on_ties():
    path = kernels.dtw_backtrack(kernels.dtw_accumulate(np.zeros((3, 3))))
    assert path.tolist() == [[0, 0], [1, 1], [2, 2]]


@pytest.mark.parametrize("flag,backend", [("0", "numpy"), ("off", "numpy")])
def test_env_flag_selects_numpy(flag, backend):
    env = dict(os.environ, HPROSODY_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from hprosody import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == backend


def test_default_backend_is_numba_when_available():
    from hprosody._accel import HAVE_NUMBA
    if os.environ.get("HPROSODY_NUMBA", "1") in ("0", "false", "no", "off"):
        pytest.skip("numba disabled for this run")
    assert kernels.BACKEND == ("numba" if HAVE_NUMBA else "numpy")
