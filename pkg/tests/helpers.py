"""Shared test utilities: central finite differences over module parameters."""
from __future__ import annotations

import numpy as np
import torch


def _param_stream(params: list[torch.nn.Parameter], seed: int):
    """Endless random (tensor index, flat element index) pairs, weighted by tensor size."""
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params], dtype=float)
    while True:
        t = int(rng.choice(len(params), p=sizes / sizes.sum()))
        yield t, int(rng.integers(params[t].numel()))


def pick_params(params: list[torch.nn.Parameter], n: int, seed: int) -> list[tuple[int, int]]:
    stream = _param_stream(params, seed)
    return [next(stream) for _ in range(n)]


class FDResult(list):
    """(analytic, numeric, relative error) triples plus the count of rejected samples."""

    skipped: int = 0


def fd_check(loss_fn, params: list[torch.nn.Parameter], n: int = 10, h: float = 1e-4, seed: int = 0,
             floor: float = 1e-8, smooth_tol: float = 1e-4, max_skips: int = 20) -> FDResult:
    """Compare autograd against central differences at n random parameter elements.

    The relative error uses max(|a|, |fd|, floor) in the denominator so that
    exactly-zero gradients (dead ReLU units) do not divide by zero.

    A central difference is only an oracle where the loss is differentiable on
    [x - h, x + h]. ReLU networks have kinks, so each sample is first screened
    by comparing the differences at h and h/2; when they disagree by more than
    `smooth_tol` (relative), a unit switched inside the step and the sample is
    replaced by a fresh draw. The screen never looks at the analytic gradient,
    so it cannot hide a wrong backward pass.
    """
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)

    def central(flat, i, orig, step):
        with torch.no_grad():
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
        return (up - down) / (2 * step)

    out = FDResult()
    for t, i in _param_stream(params, seed):
        if len(out) == n:
            break
        flat = params[t].data.view(-1)
        orig = flat[i].item()
        fd = central(flat, i, orig, h)
        half = central(flat, i, orig, h / 2)
        if abs(fd - half) > smooth_tol * max(abs(fd), abs(half), floor):
            out.skipped += 1
            if out.skipped > max_skips:
                raise RuntimeError("too many non-smooth finite-difference samples")
            continue
        g = grads[t]
        a = 0.0 if g is None else g.reshape(-1)[i].item()
        out.append((a, fd, abs(a - fd) / max(abs(a), abs(fd), floor)))
    return out

ACCEPTANCE: list[str] = []


def record(criterion: int, title: str, ok: bool, detail: str = "") -> None:
    """Remember one acceptance verdict for the end-of-run summary, then assert it."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:>2}: {title}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line
