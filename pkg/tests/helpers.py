"""Shared test utilities: finite-difference gradient oracle, tensor builders."""

import numpy as np
import torch


def fd_check(loss_fn, tensors, names=None, eps=1e-5, rtol=1e-4, atol=1e-8, max_entries=24):
    """Compare autograd gradients of loss_fn() against central finite differences.

    ``tensors`` are leaves (parameters or requires_grad inputs) perturbed in
    place. Large tensors are checked on a deterministic strided subset of
    entries (first, last, evenly spaced interior).
    """
    names = names or [f"tensor{i}" for i in range(len(tensors))]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    for tensor, grad, name in zip(tensors, grads, names):
        assert grad is not None, f"{name}: no gradient flowed"
        flat = tensor.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.numel()
        if n <= max_entries:
            idxs = range(n)
        else:
            idxs = sorted({0, n - 1, *np.linspace(0, n - 1, max_entries, dtype=int).tolist()})
        for i in idxs:
            old = flat[i].item()
            flat[i] = old + eps
            lp = loss_fn().item()
            flat[i] = old - eps
            lm = loss_fn().item()
            flat[i] = old
            numeric = (lp - lm) / (2.0 * eps)
            analytic = gflat[i].item()
            err = abs(numeric - analytic)
            scale = max(abs(numeric), abs(analytic))
            assert err <= atol + rtol * scale, (
                f"{name}[{i}]: analytic {analytic:.10g} vs numeric {numeric:.10g} "
                f"(err {err:.3g} > bound {atol + rtol * scale:.3g})"
            )
            if scale > 1e-6:  # relative error is meaningful only away from zero
                worst = max(worst, err / scale)
    return worst


def token_batch(rows, pad_to=None, pad_id=1):
    """Build (tokens, mask) int64/bool tensors from lists of ids."""
    width = pad_to or max(len(r) for r in rows)
    tokens = torch.full((len(rows), width), pad_id, dtype=torch.int64)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, row in enumerate(rows):
        tokens[i, : len(row)] = torch.tensor(row, dtype=torch.int64)
        mask[i, : len(row)] = True
    return tokens, mask
