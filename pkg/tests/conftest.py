import numpy as np
import pytest
import torch

from ttaseg.grids import LabelMap, ProbMap, Volume


@pytest.fixture(autouse=True)
def _single_threaded_torch():
    torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_labelmap(rng, shape=(8, 8, 8), num_labels=3, spacing=(1.0, 1.0, 1.0)):
    data = rng.integers(0, num_labels, size=shape).astype(np.uint8)
    return LabelMap(data, spacing, num_labels)


def random_volume(rng, shape=(8, 8, 8), spacing=(1.0, 1.0, 1.0)):
    return Volume(rng.random(shape, dtype=np.float64).astype(np.float32), spacing)


def probmap_from_labels(lbl: LabelMap) -> ProbMap:
    return ProbMap(lbl.one_hot(), lbl.spacing_mm)


def assert_grads_match_finite_differences(
    named_params, loss_fn, rng, eps=1e-5, rel_tol=1e-4, entries_per_tensor=4
):
    """Compare autodiff gradients against central finite differences.

    ``loss_fn`` must be a pure function of the current parameter values
    (inference-mode batch norm, fixed inputs). Checks a few entries per
    tensor; expects 64-bit parameters.
    """
    named_params = list(named_params)
    for _, p in named_params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    for name, p in named_params:
        assert p.grad is not None, f"no gradient reached {name}"
        flat = p.data.view(-1)
        gflat = p.grad.view(-1)
        n_check = min(entries_per_tensor, flat.numel())
        picks = rng.choice(flat.numel(), size=n_check, replace=False)
        for idx in picks:
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
            lp = loss_fn().item()
            with torch.no_grad():
                flat[idx] = orig - eps
            lm = loss_fn().item()
            with torch.no_grad():
                flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            ad = gflat[idx].item()
            denom = max(abs(ad), abs(fd), 1e-8)
            assert abs(ad - fd) / denom < rel_tol, (
                f"{name}[{idx}]: autodiff {ad:.6e} vs finite difference {fd:.6e}"
            )
