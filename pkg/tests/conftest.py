import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stochastic(rng, B, K):
    """Row-stochastic matrix with a spread of row sharpness."""
    logits = rng.normal(size=(B, K)) * rng.uniform(0.1, 5.0, size=(B, 1))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def central_diff(f, x: torch.Tensor, eps=1e-4) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f(x))
        flat[i] = old - eps
        lo = float(f(x))
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def autograd_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    f(x).backward()
    return x.grad


def grad_rel_error(f, x, eps=1e-4) -> float:
    a = autograd_grad(f, x)
    n = central_diff(f, x, eps)
    return float((a - n).norm() / max(a.norm(), n.norm(), 1e-12))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
