"""Waveforms, PCM16 WAV I/O and the deterministic synthetic two-talker corpus.

The corpus generator draws every random number from :class:`XorShift64Star`
seeded through :func:`splitmix64`, both defined by their integer update rules
below, so a given :class:`SynthSpec` yields the same audio on any platform.

splitmix64 (seed hashing)::

    x += 0x9E3779B97F4A7C15
    z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)                       # all arithmetic mod 2**64

xorshift64* (stream)::

    x ^= x >> 12; x ^= x << 25; x ^= x >> 27
    return x * 0x2545F4914F6CDD1D              # mod 2**64

Uniform doubles are ``(u64 >> 11) * 2**-53``.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_MASK = (1 << 64) - 1
F0_RANGE = (80.0, 300.0)
SOURCE_PEAK = 0.7
EXAMPLE_PEAK = 0.95
MIX_STREAM = 0xFFFF


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        self.state = splitmix64(seed & _MASK) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * ((self.next_u64() >> 11) * 2.0**-53)

    def randint(self, low: int, high: int) -> int:
        """Integer in [low, high], inclusive."""
        return low + self.next_u64() % (high - low + 1)


def stream(seed: int, example_index: int, stream_index: int) -> XorShift64Star:
    h = splitmix64(seed & _MASK)
    h = splitmix64(h ^ example_index)
    h = splitmix64(h ^ stream_index)
    return XorShift64Star(h)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class MixtureExample:
    mixture: Waveform
    sources: list[Waveform]
    id: str = ""
    snr_db: float = 0.0

    def __post_init__(self):
        for s in self.sources:
            if s.sample_rate != self.mixture.sample_rate or len(s) != len(self.mixture):
                raise ValueError(f"example {self.id}: sources must share rate and length with the mixture")


@dataclass
class SynthSpec:
    num_examples: int
    num_speakers: int = 2
    duration_s: float = 1.0
    sample_rate: int = 8000
    snr_range_db: tuple[float, float] = (0.0, 5.0)
    seed: int = 0

    def __post_init__(self):
        low, high = self.snr_range_db
        if low > high:
            raise ValueError(f"snr_range_db low {low} exceeds high {high}")
        if self.num_examples < 0 or self.num_speakers < 1:
            raise ValueError("num_examples must be >= 0 and num_speakers >= 1")
        n = self.duration_s * self.sample_rate
        if n < 1 or abs(n - round(n)) > 1e-9:
            raise ValueError(f"duration_s * sample_rate must be a positive integer, got {n}")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))


def speaker_band(speaker_index: int, num_speakers: int) -> tuple[float, float]:
    lo, hi = F0_RANGE
    width = (hi - lo) / num_speakers
    return lo + speaker_index * width, lo + (speaker_index + 1) * width


def synth_source(spec: SynthSpec, example_index: int, speaker_index: int) -> Waveform:
    """Harmonic "voice": 3-8 partials over a random f0, shaped by a piecewise-linear envelope."""
    if not 0 <= example_index < max(spec.num_examples, 1) or not 0 <= speaker_index < spec.num_speakers:
        raise IndexError(f"indices ({example_index}, {speaker_index}) outside the SynthSpec")
    rng = stream(spec.seed, example_index, speaker_index)
    f0 = rng.uniform(*speaker_band(speaker_index, spec.num_speakers))
    n_harm = rng.randint(3, 8)
    amps = []
    phases = []
    for h in range(1, n_harm + 1):
        amps.append(rng.uniform(0.3, 1.0) / h)
        phases.append(rng.uniform(0.0, 2.0 * math.pi))
    n_seg = rng.randint(4, 16)
    cuts = sorted(rng.uniform() for _ in range(n_seg - 1))
    levels = [rng.uniform(0.05, 1.0) for _ in range(n_seg + 1)]

    n = spec.num_samples
    t = np.arange(n) / spec.sample_rate
    x = np.zeros(n)
    for h, (a, phi) in enumerate(zip(amps, phases), start=1):
        x += a * np.sin(2.0 * math.pi * h * f0 * t + phi)
    knots = np.array([0.0, *cuts, 1.0]) * (n - 1)
    x *= np.interp(np.arange(n), knots, levels)
    return Waveform(x * (SOURCE_PEAK / np.max(np.abs(x))), spec.sample_rate)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def scale_to_snr(reference: np.ndarray, other: np.ndarray, snr_db: float) -> np.ndarray:
    p_ref, p_other = power(reference), power(other)
    if p_ref == 0.0 or p_other == 0.0:
        raise ValueError("degenerate source: zero power")
    return other * math.sqrt(p_ref / (p_other * 10.0 ** (snr_db / 10.0)))


def mix(sources: Sequence[Waveform], snr_db: float) -> Waveform:
    """Rescale the second source to ``snr_db`` below the first and add them. No clipping."""
    if len(sources) != 2:
        raise ValueError(f"mix needs exactly 2 sources, got {len(sources)}")
    s1, s2 = sources
    if s1.sample_rate != s2.sample_rate or len(s1) != len(s2):
        raise ValueError("sources must share sample rate and length")
    return Waveform(s1.samples + scale_to_snr(s1.samples, s2.samples, snr_db), s1.sample_rate)


def synth_example(spec: SynthSpec, example_index: int) -> MixtureExample:
    """Sources scaled as they appear in the mixture, so mixture == sum(sources).

    A common gain keeps every waveform of the example under EXAMPLE_PEAK;
    it preserves both the SNR and additivity.
    """
    raw = [synth_source(spec, example_index, k) for k in range(spec.num_speakers)]
    rng = stream(spec.seed, example_index, MIX_STREAM)
    snr = rng.uniform(*spec.snr_range_db)
    scaled = [raw[0].samples] + [scale_to_snr(raw[0].samples, s.samples, snr) for s in raw[1:]]
    mixture = np.sum(scaled, axis=0)
    peak = max(np.max(np.abs(mixture)), *(np.max(np.abs(s)) for s in scaled))
    gain = min(1.0, EXAMPLE_PEAK / peak)
    sr = spec.sample_rate
    return MixtureExample(
        mixture=Waveform(mixture * gain, sr),
        sources=[Waveform(s * gain, sr) for s in scaled],
        id=f"ex{example_index:05d}",
        snr_db=snr,
    )


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

class WavError(ValueError):
    pass


PCM_SCALE = 32767.0


def write_wav(w: Waveform, path) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate, n = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            raw = fh.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise WavError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1:
        raise WavError(f"{path}: expected mono, found {channels} channels")
    if width != 2:
        raise WavError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    if len(raw) != 2 * n:
        raise WavError(f"{path}: truncated data chunk")
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE, rate)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    mixture_path: str
    source_paths: list[str] = field(default_factory=list)
    snr_db: float = 0.0

    def to_line(self) -> str:
        return "\t".join([self.id, self.mixture_path, *self.source_paths, f"{self.snr_db:.6f}"])

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        cols = line.rstrip("\n").split("\t")
        if len(cols) < 4:
            raise ValueError(f"manifest line needs id, mixture, >=1 source, snr: {line!r}")
        return cls(cols[0], cols[1], cols[2:-1], float(cols[-1]))


def synth_dataset(spec: SynthSpec, out_dir) -> Path:
    """Write ``manifest.tsv`` plus mixture/source WAVs under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(spec.num_examples):
        ex = synth_example(spec, i)
        mix_rel = f"wav/{ex.id}_mix.wav"
        write_wav(ex.mixture, out / mix_rel)
        src_rel = []
        for k, src in enumerate(ex.sources, start=1):
            rel = f"wav/{ex.id}_s{k}.wav"
            write_wav(src, out / rel)
            src_rel.append(rel)
        lines.append(ManifestEntry(ex.id, mix_rel, src_rel, ex.snr_db).to_line() + "\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    text = Path(path).read_text(encoding="utf-8")
    return [ManifestEntry.from_line(line) for line in text.splitlines() if line.strip()]


def load_examples(manifest_path) -> list[MixtureExample]:
    root = Path(manifest_path).parent
    examples = []
    for e in read_manifest(manifest_path):
        examples.append(MixtureExample(
            mixture=read_wav(root / e.mixture_path),
            sources=[read_wav(root / p) for p in e.source_paths],
            id=e.id,
            snr_db=e.snr_db,
        ))
    return examples
