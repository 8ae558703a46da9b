import numpy as np
import pytest

from homoglab import kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Trigger JIT compilation once so timed tests measure steady state."""
    pts = np.zeros((2, 1))
    kernels.trig_eval(pts, np.zeros(1), np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    kernels.csr_matvec(np.ones(2), np.array([0, 1], np.int64), np.array([0, 1, 2], np.int64), np.ones(2))
    kernels.shift_inf(np.ones((2, 1)), np.zeros((2, 1)), np.zeros((1, 1)),
                      np.ones((1, 1)), np.zeros(1), np.zeros((2, 1)))
    kernels.interp_periodic(np.ones((4, 1)), np.array([4], np.int64),
                            np.zeros(1), np.ones(1), np.zeros((2, 1)))
