import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # make oracles importable

from kasr import tensor as T
from kasr.tensor import Tensor


def finite_difference(fn, x, h):
    """Central-difference gradient of a scalar fn evaluated on a numpy array."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def gradcheck(make_loss, x0, dtype=np.float64, tol=None, h=None):
    """Assert backprop matches finite differences for loss = make_loss(x).

    ``make_loss`` must be deterministic; step size and tolerance default to
    (1e-5, 1e-6) in 64-bit and (1e-3, 1e-3) in 32-bit.
    """
    if dtype == np.float64:
        h = 1e-5 if h is None else h
        tol = 1e-6 if tol is None else tol
    else:
        h = 1e-3 if h is None else h
        tol = 1e-3 if tol is None else tol
    x0 = np.asarray(x0, dtype=dtype)
    x = Tensor(x0.copy(), requires_grad=True)
    loss = make_loss(x)
    loss.backward()
    assert x.grad is not None, "backward did not populate the input gradient"
    analytic = x.grad.astype(np.float64)

    def scalar(arr):
        with T.no_grad():
            return make_loss(Tensor(arr.astype(dtype))).item()

    numeric = finite_difference(scalar, x0.astype(np.float64), h)
    scale = max(float(np.max(np.abs(numeric))), 1e-6)
    rel = float(np.max(np.abs(analytic - numeric))) / scale
    assert rel < tol, f"gradient mismatch: rel err {rel:.3e} >= {tol}"
    return rel


def probe_loss(op, seed=0):
    """Reduce an op's output to a scalar via a fixed random weighting.

    The probe is frozen on the first call so repeated evaluations (finite
    differences) see the same function.
    """
    state = {}

    def make(t):
        out = op(t)
        if "probe" not in state:
            state["probe"] = Tensor(
                np.random.default_rng(seed).standard_normal(out.shape)
            )
        return T.sum_(T.mul(out, state["probe"]))

    return make


def well_separated_uniform(rng, shape, lo=0.0, hi=1.0, min_gap=1e-3):
    """Uniform draw re-sampled until the two smallest and two largest values
    are farther apart than min_gap (keeps argmin/argmax stable under the
    finite-difference perturbation)."""
    while True:
        x = rng.uniform(lo, hi, shape)
        s = np.sort(x.reshape(-1))
        if s[1] - s[0] > min_gap and s[-1] - s[-2] > min_gap:
            return x


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Small synthetic x2 dataset shared by trainer/CLI tests."""
    from kasr import dataio
    from kasr.image_ops import DegradationSpec, gaussian_kernel

    root = tmp_path_factory.mktemp("synth_small")
    spec = DegradationSpec(gaussian_kernel(5, 1.2), 2, noise_sigma=0.01, rng_seed=3)
    dataio.synth_dataset(12, 32, spec, 3, str(root))
    return str(root)
