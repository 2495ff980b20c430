"""Shared test utilities: finite-difference gradient checking."""

import numpy as np
import torch


def central_difference_check(
    build_loss,
    params: list[torch.Tensor],
    n_coords: int = 50,
    step: float = 1e-5,
    rtol: float = 1e-4,
    seed: int = 0,
):
    """Compare autograd gradients against central finite differences.

    ``build_loss()`` must recompute the scalar loss from the current values of
    ``params`` (double precision). Checks ``n_coords`` randomly chosen
    coordinates spread over all parameters.
    """
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = build_loss()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(n_coords, total), replace=False)

    worst = 0.0
    for flat_idx in coords:
        pi = 0
        while flat_idx >= sizes[pi]:
            flat_idx -= sizes[pi]
            pi += 1
        p = params[pi]
        with torch.no_grad():
            orig = p.view(-1)[flat_idx].item()
            p.view(-1)[flat_idx] = orig + step
        up = build_loss().item()
        with torch.no_grad():
            p.view(-1)[flat_idx] = orig - step
        down = build_loss().item()
        with torch.no_grad():
            p.view(-1)[flat_idx] = orig
        fd = (up - down) / (2 * step)
        an = grads[pi].view(-1)[flat_idx].item()
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        worst = max(worst, rel)
        assert rel < rtol, (
            f"gradient mismatch at param {pi} coord {flat_idx}: "
            f"analytic {an:.6e} vs finite-diff {fd:.6e} (rel {rel:.3e})"
        )
    return worst
