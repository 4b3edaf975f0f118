"""Central finite-difference oracle for gradient checks (float64)."""

import torch


def rel_err(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(fn, x, h=1e-6, coords=None):
    """Central differences of scalar ``fn`` w.r.t. the flattened ``x`` at ``coords`` (all by default)."""
    x = x.detach().clone()
    flat = x.view(-1)
    coords = range(flat.numel()) if coords is None else coords
    out = []
    with torch.no_grad():
        for i in coords:
            old = flat[i].item()
            flat[i] = old + h
            fp = float(fn(x))
            flat[i] = old - h
            fm = float(fn(x))
            flat[i] = old
            out.append((fp - fm) / (2 * h))
    return torch.tensor(out, dtype=torch.float64)


def analytic_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def max_rel_err(fn, x, h=1e-6, coords=None, floor=1e-5):
    """Largest relative error between autograd and central differences, normalized by the gradient scale.

    Gradients whose scale is below ``floor`` are treated as zero and compared
    absolutely against it (the default atol of torch gradcheck). Central
    differences of an O(10) loss carry ~1e-9 of round-off, so a relative
    comparison of two zeros is meaningless.
    """
    g = analytic_grad(fn, x).reshape(-1)
    idx = list(range(g.numel())) if coords is None else list(coords)
    num = numeric_grad(fn, x, h, idx)
    ana = g[idx]
    scale = max(float(ana.abs().max()), float(num.abs().max()), floor)
    return float((ana - num).abs().max()) / scale


def directional_rel_err(fn, x, n_dirs=3, h=1e-6, seed=0):
    """Compare grad . v with (f(x + h v) - f(x - h v)) / 2h along random unit directions."""
    gen = torch.Generator().manual_seed(seed)
    g = analytic_grad(fn, x)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_dirs):
            v = torch.randn(x.shape, generator=gen, dtype=x.dtype)
            v /= v.norm()
            num = (float(fn(x + h * v)) - float(fn(x - h * v))) / (2 * h)
            worst = max(worst, rel_err(float((g * v).sum()), num))
    return worst
