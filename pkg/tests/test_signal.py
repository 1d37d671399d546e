import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codecsep.signal import (
    SOURCE_PEAK, ManifestEntry, SynthSpec, Waveform, WavError, XorShift64Star, load_examples, mix,
    read_manifest, read_wav, scale_to_snr, speaker_band, splitmix64, stream, synth_dataset, synth_example,
    synth_source, write_wav,
)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_splitmix64_reference_values():
    # first outputs of the reference splitmix64 sequence seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_xorshift_stream_is_reproducible():
    a = [stream(3, 1, 0).next_u64() for _ in range(3)]
    b = [stream(3, 1, 0).next_u64() for _ in range(3)]
    assert a == b
    assert stream(3, 1, 0).next_u64() != stream(3, 1, 1).next_u64()


@given(st.integers(0, 2**64 - 1))
def test_uniform_in_unit_interval(seed):
    r = XorShift64Star(seed)
    for _ in range(5):
        u = r.uniform()
        assert 0.0 <= u < 1.0
        assert 2 <= r.randint(2, 4) <= 4


def test_speaker_bands_are_disjoint():
    lo0, hi0 = speaker_band(0, 2)
    lo1, hi1 = speaker_band(1, 2)
    assert hi0 <= lo1 and lo0 == 80 and hi1 == 300


def test_synth_source_determinism_and_peak():
    spec = SynthSpec(num_examples=1, seed=1)
    a = synth_source(spec, 0, 0)
    b = synth_source(spec, 0, 0)
    c = synth_source(SynthSpec(num_examples=1, seed=2), 0, 0)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert abs(np.max(np.abs(a.samples)) - SOURCE_PEAK) <= 1e-6


def test_mix_hand_examples():
    s1 = Waveform(np.array([1.0, 0.0]), 8000)
    s2 = Waveform(np.array([0.0, 2.0]), 8000)
    np.testing.assert_allclose(mix([s1, s2], 0.0).samples, [1.0, 1.0])
    x = Waveform(np.sin(np.arange(100.0)), 8000)
    np.testing.assert_array_equal(mix([x, x], 0.0).samples, x.samples + x.samples)


def test_mix_snr_20db():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(1000), rng.standard_normal(1000)
    b *= math.sqrt(np.mean(a**2) / np.mean(b**2))
    scaled = scale_to_snr(a, b, 20.0)
    assert abs(np.mean(a**2) / np.mean(scaled**2) - 100.0) < 1e-6


def test_mix_errors():
    w = Waveform(np.ones(4), 8000)
    with pytest.raises(ValueError, match="degenerate"):
        mix([w, Waveform(np.zeros(4), 8000)], 0.0)
    with pytest.raises(ValueError):
        mix([w, w, w], 0.0)
    with pytest.raises(ValueError):
        mix([w, Waveform(np.ones(5), 8000)], 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 9))
def test_mixture_is_sum_of_sources(seed, idx):
    ex = synth_example(SynthSpec(num_examples=10, duration_s=0.1, seed=seed), idx)
    total = np.sum([s.samples for s in ex.sources], axis=0)
    assert np.max(np.abs(ex.mixture.samples - total)) <= 1e-6
    assert 0.0 <= ex.snr_db <= 5.0
    assert np.max(np.abs(ex.mixture.samples)) <= 0.95 + 1e-12


def test_example_snr_is_preserved_by_common_gain():
    ex = synth_example(SynthSpec(num_examples=1, seed=4), 0)
    s1, s2 = (s.samples for s in ex.sources)
    assert abs(10 * np.log10(np.mean(s1**2) / np.mean(s2**2)) - ex.snr_db) < 1e-9


def test_wav_round_trip_sine(tmp_path):
    t = np.arange(2000) / 8000
    w = Waveform(0.8 * np.sin(2 * np.pi * 440 * t), 8000)
    write_wav(w, tmp_path / "a.wav")
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000 and len(back) == len(w)
    assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32768


def test_wav_zero_round_trip_and_bytes_stable(tmp_path):
    write_wav(Waveform(np.zeros(50), 16000), tmp_path / "z.wav")
    back = read_wav(tmp_path / "z.wav")
    assert not back.samples.any() and back.sample_rate == 16000
    write_wav(back, tmp_path / "z2.wav")
    assert (tmp_path / "z.wav").read_bytes() == (tmp_path / "z2.wav").read_bytes()


def test_wav_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"JUNK" + bytes(60))
    with pytest.raises(WavError):
        read_wav(bad)
    good = tmp_path / "g.wav"
    write_wav(Waveform(np.full(100, 0.1), 8000), good)
    cut = tmp_path / "cut.wav"
    cut.write_bytes(good.read_bytes()[:-11])
    with pytest.raises(WavError):
        read_wav(cut)


def test_manifest_line_round_trip():
    e = ManifestEntry("ex1", "wav/m.wav", ["wav/a.wav", "wav/b.wav"], 2.5)
    assert ManifestEntry.from_line(e.to_line()) == e
    with pytest.raises(ValueError):
        ManifestEntry.from_line("only\ttwo")


def test_synth_dataset_layout_and_determinism(tmp_path):
    spec = SynthSpec(num_examples=3, duration_s=0.1, seed=5)
    m = synth_dataset(spec, tmp_path / "a")
    synth_dataset(spec, tmp_path / "b")
    assert len(read_manifest(m)) == 3
    assert len(list((tmp_path / "a" / "wav").glob("*.wav"))) == 9
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    exs = load_examples(m)
    ref = synth_example(spec, 1)
    assert np.max(np.abs(exs[1].mixture.samples - ref.mixture.samples)) <= 1 / 32768


def test_synth_dataset_empty(tmp_path):
    m = synth_dataset(SynthSpec(num_examples=0), tmp_path)
    assert m.read_text() == ""
    assert not list((tmp_path / "wav").glob("*.wav"))
