import numpy as np
import pytest
import torch

_ACCEPTANCE_LINES = []


def fd_grad(fn, x, h=1e-6):
    """Central-difference gradient of scalar ``fn`` at ``x`` (float64 tensor), element by element."""
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn(x).item()
            flat[i] = orig - h
            down = fn(x).item()
            flat[i] = orig
            grad[i] = (up - down) / (2 * h)
    return grad.view_as(x)


def autograd_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def rel_err(a, b):
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    denom = max(a.norm().item(), b.norm().item(), 1e-30)
    return (a - b).norm().item() / denom


def param_fd_check(loss_fn, params, h=1e-6):
    """Worst relative error over ``params`` between autograd and central differences of ``loss_fn()``."""
    grads = torch.autograd.grad(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        num = torch.zeros_like(p).view(-1)
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num[i] = (up - down) / (2 * h)
        worst = max(worst, rel_err(g.reshape(-1), num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion (printed in the terminal summary)."""

    def record(name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" :: {detail}" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
