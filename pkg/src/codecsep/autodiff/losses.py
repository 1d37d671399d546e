"""Differentiable SI-SDR head used for training.

Unlike :func:`codecsep.metrics.si_sdr` there are no caps here: denominators
carry a small epsilon instead, so the value stays finite and smooth.
"""

from __future__ import annotations

from .tensor import Tensor, add, div, log10, mean, mul, scale, square, sub, sum_


def si_sdr(estimate: Tensor, reference: Tensor, eps: float = 1e-8) -> Tensor:
    """SI-SDR in dB along the last axis, after mean removal.

    Leading axes broadcast, so ``estimate[:, :, None]`` against
    ``reference[:, None, :]`` yields the full pairwise matrix used by PIT.
    """
    est = sub(estimate, mean(estimate, axis=-1, keepdims=True))
    ref = sub(reference, mean(reference, axis=-1, keepdims=True))
    dot = sum_(mul(est, ref), axis=-1, keepdims=True)
    ref_energy = sum_(square(ref), axis=-1, keepdims=True)
    alpha = div(dot, add(ref_energy, eps))
    target = mul(alpha, ref)
    noise = sub(target, est)
    ratio = div(sum_(square(target), axis=-1), add(sum_(square(noise), axis=-1), eps))
    return scale(log10(add(ratio, eps)), 10.0)


def neg_si_sdr(estimate: Tensor, reference: Tensor, eps: float = 1e-8) -> Tensor:
    """Mean negative SI-SDR, a scalar loss."""
    return scale(mean(si_sdr(estimate, reference, eps)), -1.0)
