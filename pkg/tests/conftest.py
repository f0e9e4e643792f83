import numpy as np
import pytest

from signforge import tensor
from signforge.synth import synth_shapes


@pytest.fixture(autouse=True)
def debug_checks():
    """Run every test with NaN/Inf kernel checks enabled."""
    tensor.set_debug_checks(True)
    yield
    tensor.set_debug_checks(False)


@pytest.fixture(scope="session")
def shapes_dataset(tmp_path_factory):
    """Small synthetic shape dataset shared across the suite."""
    root = tmp_path_factory.mktemp("shapes")
    manifest = synth_shapes(str(root), n_per_class=24, size=32, seed=11)
    return manifest


def central_diff_error(f, tensors, grads, rng, n_coords=10, h=1e-5):
    """Max relative error between analytic gradients and central differences
    at randomly sampled coordinates. `tensors` are perturbed in place.

    A coordinate whose first estimate looks off is re-measured at h/16: a
    ReLU kink or pooling-argmax flip inside the probe interval poisons the
    difference quotient but vanishes at a finer step, while a genuinely wrong
    analytic gradient keeps failing.
    """
    def probe(flat, i, analytic, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        numeric = (fp - fm) / (2 * step)
        return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))

    worst = 0.0
    for arr, grad in zip(tensors, grads):
        if arr is None:
            continue
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for i in idx:
            analytic = grad.reshape(-1)[i]
            err = probe(flat, i, analytic, h)
            if err > 1e-5:
                err = min(err, probe(flat, i, analytic, h / 16))
            worst = max(worst, err)
    return worst
