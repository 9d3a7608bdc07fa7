from __future__ import annotations

import warnings

import numpy as np

from .tensor import no_grad


def grad_check(fn, inputs, eps=1e-5, max_samples=None, seed=0, return_details=False, atol=0.0):
    """Compare analytic gradients with central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``inputs`` (a dict name -> Tensor, or a list).  For every input the
    relative error ``|a - n| / max(|a|, |n|, 1e-8)`` is measured with
    2-norms over the checked entries; the max over inputs is returned.
    ``max_samples`` caps the number of entries perturbed per input.
    With ``atol > 0`` an input whose analytic and numeric gradients both
    have norm below ``atol`` counts as exact (e.g. biases that a softmax
    cancels, where the ratio would only measure rounding noise).
    """
    if not isinstance(inputs, dict):
        inputs = {f"input{i}": t for i, t in enumerate(inputs)}
    for t in inputs.values():
        if t.dtype != np.float64:
            warnings.warn("grad_check is only reliable in 64-bit mode", stacklevel=2)
            break
    for t in inputs.values():
        t.grad = None
    loss = fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    details = {}
    for name, t in inputs.items():
        analytic_full = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        if max_samples is not None and flat.size > max_samples:
            picks = np.sort(rng.choice(flat.size, size=max_samples, replace=False))
        else:
            picks = np.arange(flat.size)
        numeric = np.empty(picks.size)
        with no_grad():
            for j, i in enumerate(picks):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn().data)
                flat[i] = orig - eps
                fm = float(fn().data)
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * eps)
        analytic = analytic_full.reshape(-1)[picks].astype(np.float64)
        num = np.linalg.norm(analytic - numeric)
        den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        details[name] = 0.0 if den < atol else num / den
    for t in inputs.values():
        t.grad = None
    worst = max(details.values()) if details else 0.0
    return (worst, details) if return_details else worst
