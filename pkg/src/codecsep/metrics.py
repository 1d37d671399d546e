"""Evaluation metrics: SI-SDR, codec SI-SDR, SNR-style SDR, improvements and PIT.

All metrics work in float64 on mean-removed signals. Perfect or degenerate
cases do not produce infinities: they are capped at +/-300 dB and flagged
``finite=False``.

``sdr`` is a plain signal-to-error ratio, not the BSS-eval SDR with a
distortion-filter projection; scores are only meant for comparison between
systems evaluated here.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .signal import Waveform

CAP_DB = 300.0
_PERFECT = 1e-12


@dataclass(frozen=True)
class MetricValue:
    value_db: float
    finite: bool = True

    def __float__(self) -> float:
        return self.value_db


@dataclass(frozen=True)
class PitAssignment:
    permutation: tuple[int, ...]
    score_db: float


Metric = Callable[..., MetricValue]


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64).reshape(-1)


def _prepare(estimate, reference) -> tuple[np.ndarray, np.ndarray]:
    est = _samples(estimate).astype(np.float64)
    ref = _samples(reference).astype(np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: estimate {est.shape[0]} vs reference {ref.shape[0]}")
    if est.shape[0] < 2:
        raise ValueError("signals need at least 2 samples")
    ref = ref - ref.mean()
    if not np.any(ref):
        raise ValueError("degenerate reference: zero variance")
    return est - est.mean(), ref


def _ratio_db(signal_energy: float, error_energy: float) -> MetricValue:
    if error_energy < _PERFECT * signal_energy:
        return MetricValue(CAP_DB, False)
    return MetricValue(10.0 * math.log10(signal_energy / error_energy))


def si_sdr(estimate, reference) -> MetricValue:
    est, ref = _prepare(estimate, reference)
    alpha = float(est @ ref) / float(ref @ ref)
    if alpha == 0.0:
        return MetricValue(-CAP_DB, False)
    target = alpha * ref
    return _ratio_db(float(target @ target), float(np.sum((target - est) ** 2)))


def sdr(estimate, reference) -> MetricValue:
    est, ref = _prepare(estimate, reference)
    return _ratio_db(float(ref @ ref), float(np.sum((ref - est) ** 2)))


def _truncate(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = min(a.shape[0], b.shape[0])
    return a[:n], b[:n]


def codec_si_sdr(estimate, clean_reference, codec, use_rvq: bool = True) -> MetricValue:
    """SI-SDR of ``estimate`` against the codec transmission of the clean reference.

    ``codec`` needs a ``transmit(waveform, use_rvq)`` method. Framing length
    differences are resolved by truncating both signals to the shorter one.
    """
    ref_w = clean_reference if isinstance(clean_reference, Waveform) else Waveform(clean_reference, 1)
    t = codec.transmit(ref_w, use_rvq=use_rvq)
    est, ref = _truncate(_samples(estimate), _samples(t))
    return si_sdr(est, ref)


def improvement(metric: Metric, estimate, reference, mixture) -> MetricValue:
    a = metric(estimate, reference)
    b = metric(mixture, reference)
    return MetricValue(a.value_db - b.value_db, a.finite and b.finite)


def pit_assign(metric: Metric, estimates: Sequence, references: Sequence) -> PitAssignment:
    """Best assignment estimate i -> reference perm[i] by mean metric.

    Exhaustive over all N! permutations (N <= 4); ties keep the
    lexicographically smallest permutation since those are visited first.
    """
    n = len(estimates)
    if n != len(references):
        raise ValueError(f"{n} estimates vs {len(references)} references")
    if not 1 <= n <= 4:
        raise ValueError(f"pit_assign supports 1..4 sources, got {n}")
    scores = np.array([[metric(e, r).value_db for r in references] for e in estimates])
    best_perm, best = None, -math.inf
    for perm in itertools.permutations(range(n)):
        s = float(np.mean(scores[np.arange(n), perm]))
        if s > best:
            best_perm, best = perm, s
    return PitAssignment(tuple(best_perm), best)


class IdentityCodec:
    """Codec double whose transmission is the input itself."""

    def transmit(self, w: Waveform, use_rvq: bool = True) -> Waveform:
        return w
