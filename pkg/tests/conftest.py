"""Shared fixtures and numerical helpers for the test suite.

The gradient-checking helpers here are the independent oracle for every
adjoint in the package: central finite differences with a floored relative
error, so that near-zero gradients are still held to an absolute standard.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
import pytest

import frameflow as ff

FD_STEP = 1e-5
GRAD_TOL = 1e-5


def finite_difference(value: Callable[[np.ndarray], float], x: np.ndarray,
                      h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    ``value`` must not retain the array it is handed; it is mutated in place
    between calls.
    """
    work = np.array(x, dtype=np.float64)
    grad = np.zeros_like(work)
    flat = work.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = value(work)
        flat[i] = keep - h
        lo = value(work)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise relative error with a 1e-3 denominator floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build: Callable[..., ff.Tensor], arrays: list[np.ndarray],
                    tol: float = GRAD_TOL) -> float:
    """Compare reverse-mode gradients of ``build(*tensors)`` against finite
    differences for every leaf, returning the worst relative error seen."""
    leaves = [ff.Tensor(a, requires_grad=True) for a in arrays]
    ff.backward(build(*leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def value(x: np.ndarray, hole: int = i) -> float:
            with ff.no_grad():
                args = [ff.Tensor(x if j == hole else arrays[j])
                        for j in range(len(arrays))]
                return build(*args).item()

        numeric = finite_difference(value, arrays[i])
        worst = max(worst, relative_error(leaf.grad, numeric))
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


def perturbed(ckpt: ff.Checkpoint, seed: int, scale: float = 0.2) -> ff.Checkpoint:
    """Randomise every parameter so all branches (gates, heads) are live."""
    rng = np.random.default_rng(seed)
    params = {
        name: ff.Tensor(t.data + scale * rng.standard_normal(t.shape),
                        requires_grad=True)
        for name, t in ckpt.params.items()
    }
    return ff.Checkpoint(config=ckpt.config, params=params)


MINI = ff.ModelConfig(n_frames=4, frame_dim=16, hidden=24, time_embed_dim=8,
                      blocks=2, num_labels=4, lora_rank=2, lora_alpha=4.0)


@pytest.fixture(scope="session")
def mini_config() -> ff.ModelConfig:
    return MINI


@pytest.fixture(scope="session")
def rand_ckpt() -> ff.Checkpoint:
    """A small checkpoint with every parameter perturbed away from init."""
    return perturbed(ff.init_model(MINI, seed=101), seed=202)


@pytest.fixture(scope="session")
def mini_dataset() -> list[ff.VideoSample]:
    return ff.gen_bouncing(48, n_frames=4, side=4, seed=123)


@pytest.fixture(scope="session")
def mini_pretrained(mini_dataset) -> ff.Checkpoint:
    base = ff.init_model(MINI, seed=ff.derive_seed(7, "init"))
    cfg = ff.TrainConfig(mode="pretrain", steps=200, batch_size=8,
                         learning_rate=3e-3, seed=7)
    trained, _ = ff.train(base, mini_dataset, cfg)
    return trained


@pytest.fixture(scope="session")
def mini_adapted(mini_pretrained, mini_dataset) -> ff.Checkpoint:
    lora = ff.attach_lora(mini_pretrained, rank=2, alpha=4.0,
                          seed=ff.derive_seed(7, "lora"))
    cfg = ff.TrainConfig(mode="adapt", steps=150, batch_size=8,
                         learning_rate=1e-3, seed=8)
    adapted, _ = ff.train(lora, mini_dataset, cfg)
    return adapted
