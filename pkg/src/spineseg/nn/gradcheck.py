"""Central finite-difference check of the analytic network gradients."""

from __future__ import annotations

import numpy as np

from . import layers as L
from .network import Architecture, Network

# denominators below this are treated as this: both gradients are then
# indistinguishable from finite-difference noise
REL_FLOOR = 1e-8


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _loss_and_pattern(net: Network, x, labels):
    """Loss plus every piecewise decision the forward pass made.

    The pattern holds the relu masks and the max-pool winners; while it is
    unchanged the loss is a smooth function of the parameters.
    """
    logits, (caches, _, _) = net._run(x, False, None)
    loss = L.softmax_xent(logits, labels)[0]
    n_conv = len(net.arch.conv_channels)
    parts = [c[1] for c in caches] + [c[2][0] for c in caches[:n_conv]]
    return loss, b"".join(np.ascontiguousarray(a).tobytes() for a in parts)


def gradient_check(net: Network, patch, label, eps: float = 3e-3, shrink: int = 9) -> float:
    """Largest relative error between backprop and central differences.

    Runs in float64 with dropout off; every parameter is perturbed.  Each
    derivative is the Richardson combination of central differences at
    ``h`` and ``h/2``, with ``h`` starting at ``eps`` and divided by 10 (up
    to ``shrink`` times) while a relu or pooling decision flips inside
    ``[-h, h]``.  Away from kinks this removes the truncation error that a
    step large enough to beat float64 round-off would otherwise leave.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    net = net.astype(np.float64)
    x = net._prepare_input(patch)
    labels = np.atleast_1d(label)
    _, grads, _ = net.loss_and_grads(x, labels, train=False)
    _, base = _loss_and_pattern(net, x, labels)
    steps = [eps / 2**k for k in range(shrink + 1)]

    worst = 0.0
    for name, p in net.params.items():
        flat = p.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            for h in steps:
                f = {}
                smooth = True
                for t in (h, -h, h / 2, -h / 2):
                    flat[i] = orig + t
                    f[t], pattern = _loss_and_pattern(net, x, labels)
                    smooth &= pattern == base
                flat[i] = orig
                if smooth:
                    break
            d_h = (f[h] - f[-h]) / (2 * h)
            d_half = (f[h / 2] - f[-h / 2]) / h
            numeric[i] = (4 * d_half - d_h) / 3 if smooth else d_half
        worst = max(worst, float(relative_error(grads[name].reshape(-1), numeric).max()))
    return worst


def reduced_check(seed: int = 0, draws: int = 1, eps: float = 3e-3, classes: int = 4) -> float:
    """Gradient check of the reduced architecture over random (input, label) draws."""
    rng = np.random.default_rng(seed)
    arch = Architecture.reduced(classes)
    worst = 0.0
    for _ in range(draws):
        net = Network.init(arch, rng, dtype=np.float64)
        for name in net.params:
            if name.endswith(".b"):
                net.params[name] = rng.normal(0.0, 0.1, net.params[name].shape)
        x = rng.standard_normal((1, arch.input_size, arch.input_size, arch.in_channels))
        worst = max(worst, gradient_check(net, x, int(rng.integers(arch.classes)), eps))
    return worst
