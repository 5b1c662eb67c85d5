import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from tensor_autodiff import Tensor, backward, get_tape, mul, no_grad, tensor_sum  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def clean_tape():
    get_tape().clear()
    yield
    get_tape().clear()


def relative_gradient_error(fn, inputs, rng, eps=1e-6, max_samples=40):
    """
    Worst relative error between backward() and central differences.

    `fn` maps the float64 `inputs` to a tensor; the scalar being checked is a
    fixed random projection of that tensor. Only inputs with requires_grad
    are checked, at most `max_samples` random elements each.
    """
    with no_grad():
        out_shape = fn(*inputs).shape
    projection = Tensor(rng.normal(size=out_shape), dtype=np.float64)

    def value() -> float:
        with no_grad():
            return float((fn(*inputs).data * projection.data).sum())

    for t in inputs:
        t.grad = None
    get_tape().clear()
    backward(tensor_sum(mul(fn(*inputs), projection)))
    get_tape().clear()

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        size = t.data.size
        picked = rng.choice(size, size=min(size, max_samples), replace=False)
        numeric = np.zeros(picked.size)
        flat = t.data.reshape(-1)
        for n, i in enumerate(picked):
            original = flat[i]
            flat[i] = original + eps
            plus = value()
            flat[i] = original - eps
            minus = value()
            flat[i] = original
            numeric[n] = (plus - minus) / (2 * eps)
        analytic = t.grad.reshape(-1)[picked]
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


@pytest.fixture
def gradcheck(rng):
    def check(fn, *inputs, **kwargs):
        return relative_gradient_error(fn, list(inputs), rng, **kwargs)
    return check
