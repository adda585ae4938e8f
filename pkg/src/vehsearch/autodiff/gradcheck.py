"""Central finite-difference oracle for the analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _evaluate(f: Callable[[], Tensor]) -> tuple[float, list[bytes]]:
    with T.record_branches() as branches:
        value = float(np.asarray(f().data, dtype=np.float64))
    return value, branches


def grad_check(f: Callable[[], Tensor], inputs: Tensor | Sequence[Tensor], h: float = 1e-3,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               kink_retries: int = 3, stats: dict | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` takes no arguments and closes over ``inputs``; it must return a
    scalar tensor. Analytic gradients are taken in the inputs' own dtype.
    The difference quotients are evaluated with the probed input promoted
    to float64. ``max_entries`` limits the number of probed coordinates per
    input (sampled with ``rng``).

    When the +h and -h evaluations land on different sides of a ReLU kink
    the quotient does not estimate the derivative, so the step is divided
    by 10, up to ``kink_retries`` times. ``stats`` (if given) receives the
    probe count and how many probes needed a smaller step.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    rng = rng or np.random.default_rng(0)
    saved_flags = [t.requires_grad for t in inputs]
    saved_grads = [t.grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    T.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    probes = refined = 0
    with T.no_grad():
        for t, ga in zip(inputs, analytic):
            original = t.data
            probe = original.astype(np.float64)
            t.data = probe
            idx = np.arange(probe.size)
            if max_entries is not None and probe.size > max_entries:
                idx = rng.choice(probe.size, size=max_entries, replace=False)
            flat = probe.reshape(-1)
            ga_flat = ga.reshape(-1).astype(np.float64)
            for i in idx:
                x0 = flat[i]
                step = h
                for attempt in range(kink_retries + 1):
                    flat[i] = x0 + step
                    fp, branches_p = _evaluate(f)
                    flat[i] = x0 - step
                    fm, branches_m = _evaluate(f)
                    flat[i] = x0
                    if branches_p == branches_m:
                        break
                    if attempt < kink_retries:
                        step /= 10
                refined += step != h
                probes += 1
                numeric = (fp - fm) / (2 * step)
                err = abs(ga_flat[i] - numeric) / max(1.0, abs(ga_flat[i]))
                worst = max(worst, err)
            t.data = original
    for t, flag, g in zip(inputs, saved_flags, saved_grads):
        t.requires_grad = flag
        t.grad = g
    if stats is not None:
        stats.update(probes=probes, refined=refined)
    return worst
