"""Symbolic multiply-accumulate counting for the codec and the separator.

Convention: one MAC is one multiply plus one accumulate inside a linear map
(dense, convolution, attention products). Bias adds, activations,
normalisation and softmax are listed with 0 MACs. Nothing is allocated: the
layer lists are derived from the configs, so the full-size separator can be
profiled on any machine.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .codec import Codec, CodecConfig, down_geometry
from .separator import Codecformer, SeparatorConfig

MAC_CONVENTION = "1 MAC = multiply+accumulate in linear/conv/attention products; biases, activations, norms, softmax excluded"


def macs_linear(n_positions: int, in_dim: int, out_dim: int) -> int:
    return n_positions * in_dim * out_dim


def macs_conv1d(out_len: int, in_ch: int, out_ch: int, kernel: int) -> int:
    return out_len * in_ch * out_ch * kernel


def macs_conv1d_transposed(in_len: int, in_ch: int, out_ch: int, kernel: int) -> int:
    # every input sample scatters in_ch*out_ch*kernel products: the adjoint of a conv with out_len == in_len
    return in_len * in_ch * out_ch * kernel


def macs_attention(seq_len: int, model_dim: int, num_heads: int = 1) -> int:
    """Q/K/V/output projections (4 L d^2) plus scores and weighted sum (2 L^2 d).

    Splitting d into heads leaves the total unchanged, so ``num_heads`` is unused.
    """
    return 4 * seq_len * model_dim * model_dim + 2 * seq_len * seq_len * model_dim


@dataclass
class Layer:
    name: str
    kind: str
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    params: dict = field(default_factory=dict)
    macs: int = 0


ZERO_MAC_KINDS = {"snake", "relu", "layer_norm", "add", "softmax"}


def count_layer(layer: Layer) -> int:
    p = layer.params
    if layer.kind == "linear":
        return macs_linear(p["n"], p["in_dim"], p["out_dim"])
    if layer.kind == "conv1d":
        return macs_conv1d(p["out_len"], p["in_ch"], p["out_ch"], p["kernel"])
    if layer.kind == "conv1d_transposed":
        return macs_conv1d_transposed(p["in_len"], p["in_ch"], p["out_ch"], p["kernel"])
    if layer.kind == "attention":
        return macs_attention(p["seq_len"], p["model_dim"], p.get("num_heads", 1))
    if layer.kind in ZERO_MAC_KINDS:
        return 0
    raise ValueError(f"unknown layer kind {layer.kind!r}")


@dataclass
class MacReport:
    title: str
    layers: list[Layer] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for layer in self.layers:
            out[layer.kind] = out.get(layer.kind, 0) + layer.macs
        return out

    def render(self) -> str:
        rows = [(l.name, l.kind, "x".join(map(str, l.input_shape)), "x".join(map(str, l.output_shape)), f"{l.macs:,}")
                for l in self.layers]
        rows.append(("TOTAL", "", "", "", f"{self.total_macs:,}"))
        head = ("layer", "kind", "input", "output", "MACs")
        widths = [max(len(r[i]) for r in [head, *rows]) for i in range(5)]
        fmt = "  ".join(f"{{:<{w}}}" if i < 4 else f"{{:>{w}}}" for i, w in enumerate(widths))
        lines = [self.title, fmt.format(*head), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*r) for r in rows]
        lines.append(f"({self.total_macs / 1e9:.4f} GMACs; {MAC_CONVENTION})")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["layer", "kind", "input_shape", "output_shape", "macs"])
        for l in self.layers:
            w.writerow([l.name, l.kind, "x".join(map(str, l.input_shape)), "x".join(map(str, l.output_shape)), l.macs])
        w.writerow(["TOTAL", "", "", "", self.total_macs])
        return buf.getvalue()


def _finish(title: str, layers: list[Layer]) -> MacReport:
    for layer in layers:
        layer.macs = count_layer(layer)
    return MacReport(title, layers)


def codec_layers(cfg: CodecConfig, n_samples: int) -> list[Layer]:
    if n_samples % cfg.hop:
        raise ValueError(f"{n_samples} samples is not a multiple of hop {cfg.hop}")
    K = cfg.kernel_size
    c0 = cfg.channels[0]
    L: list[Layer] = []
    T = n_samples
    L.append(Layer("enc.stem", "conv1d", (1, T), (c0, T), dict(out_len=T, in_ch=1, out_ch=c0, kernel=K)))
    L.append(Layer("enc.stem.snake", "snake", (c0, T), (c0, T)))
    prev = c0
    for i, (s, c) in enumerate(zip(cfg.strides, cfg.channels)):
        k, _ = down_geometry(s)
        T //= s
        L.append(Layer(f"enc.down{i}", "conv1d", (prev, T * s), (c, T), dict(out_len=T, in_ch=prev, out_ch=c, kernel=k)))
        L.append(Layer(f"enc.down{i}.snake", "snake", (c, T), (c, T)))
        L.append(Layer(f"enc.res{i}", "conv1d", (c, T), (c, T), dict(out_len=T, in_ch=c, out_ch=c, kernel=K)))
        L.append(Layer(f"enc.res{i}.add", "add", (c, T), (c, T)))
        L.append(Layer(f"enc.res{i}.snake", "snake", (c, T), (c, T)))
        prev = c
    for i in reversed(range(len(cfg.strides))):
        s, c = cfg.strides[i], cfg.channels[i]
        below = cfg.channels[i - 1] if i > 0 else c0
        k, _ = down_geometry(s)
        L.append(Layer(f"dec.res{i}", "conv1d", (c, T), (c, T), dict(out_len=T, in_ch=c, out_ch=c, kernel=K)))
        L.append(Layer(f"dec.res{i}.add", "add", (c, T), (c, T)))
        L.append(Layer(f"dec.res{i}.snake", "snake", (c, T), (c, T)))
        L.append(Layer(f"dec.up{i}", "conv1d_transposed", (c, T), (below, T * s),
                       dict(in_len=T, in_ch=c, out_ch=below, kernel=k)))
        T *= s
        L.append(Layer(f"dec.up{i}.snake", "snake", (below, T), (below, T)))
    L.append(Layer("dec.out", "conv1d", (c0, T), (1, T), dict(out_len=T, in_ch=c0, out_ch=1, kernel=K)))
    return L


def separator_layers(cfg: SeparatorConfig, frames: int) -> list[Layer]:
    d, E, F, N = cfg.model_dim, cfg.codec_embedding_dim, cfg.ffn_dim, cfg.num_speakers
    L: list[Layer] = [
        Layer("in", "linear", (frames, E), (frames, d), dict(n=frames, in_dim=E, out_dim=d)),
        Layer("in.pos", "add", (frames, d), (frames, d)),
    ]
    for i in range(cfg.num_blocks):
        b = f"block{i}."
        L += [
            Layer(b + "ln1", "layer_norm", (frames, d), (frames, d)),
            Layer(b + "attn", "attention", (frames, d), (frames, d),
                  dict(seq_len=frames, model_dim=d, num_heads=cfg.num_heads)),
            Layer(b + "attn.add", "add", (frames, d), (frames, d)),
            Layer(b + "ln2", "layer_norm", (frames, d), (frames, d)),
            Layer(b + "ff1", "linear", (frames, d), (frames, F), dict(n=frames, in_dim=d, out_dim=F)),
            Layer(b + "ff1.relu", "relu", (frames, F), (frames, F)),
            Layer(b + "ff2", "linear", (frames, F), (frames, d), dict(n=frames, in_dim=F, out_dim=d)),
            Layer(b + "ff.add", "add", (frames, d), (frames, d)),
        ]
    L += [
        Layer("out_ln", "layer_norm", (frames, d), (frames, d)),
        Layer("out", "linear", (frames, d), (frames, N * E), dict(n=frames, in_dim=d, out_dim=N * E)),
        Layer("out.snake", "snake", (N, frames, E), (N, frames, E)),
    ]
    return L


def _n_samples(duration_s: float, sample_rate: int) -> int:
    n = duration_s * sample_rate
    if abs(n - round(n)) > 1e-9 or n < 1:
        raise ValueError(f"duration {duration_s}s at {sample_rate} Hz is not a whole number of samples")
    return int(round(n))


def profile(model, duration_s: float = 2.0, sample_rate: int = 8000, hop: int | None = None) -> MacReport:
    """MAC report for a codec or separator processing ``duration_s`` of audio.

    A separator runs at ``sample_rate / hop`` frames per second; ``hop=1``
    gives the same architecture applied at the waveform rate.
    """
    n = _n_samples(duration_s, sample_rate)
    if isinstance(model, Codec):
        model = model.config
    if isinstance(model, Codecformer):
        model = model.config
    if isinstance(model, CodecConfig):
        padded = n + (-n) % model.hop   # transmit pads to a hop multiple
        return _finish(f"codec {duration_s:g}s @ {sample_rate} Hz (hop {model.hop})", codec_layers(model, padded))
    if isinstance(model, SeparatorConfig):
        if hop is None:
            raise ValueError("profiling a separator needs the codec hop (use hop=1 for waveform rate)")
        frames = n // hop
        return _finish(f"separator {duration_s:g}s @ {sample_rate} Hz, {frames} frames (hop {hop})",
                       separator_layers(model, frames))
    raise ValueError(f"cannot profile {type(model).__name__}")


def profile_pipeline(codec_cfg: CodecConfig, sep_cfg: SeparatorConfig, duration_s: float = 2.0,
                     sample_rate: int = 8000, include_codec: bool = False) -> MacReport:
    """Codec-space separation; codec encode/decode are excluded unless asked for."""
    report = profile(sep_cfg, duration_s, sample_rate, hop=codec_cfg.hop)
    if include_codec:
        report.layers = codec_layers(codec_cfg, _n_samples(duration_s, sample_rate)) + report.layers
        _finish(report.title, report.layers)
        report.title += " + codec"
    else:
        report.title += " (codec encode/decode excluded)"
    return report


@dataclass
class RatioTable:
    rows: list[tuple[str, int, int, float]]   # kind, a, b, b / a

    @property
    def total_ratio(self) -> float:
        return self.rows[-1][3]

    def render(self) -> str:
        lines = [f"{'kind':<20} {'candidate':>16} {'baseline':>18} {'reduction':>10}"]
        for kind, a, b, r in self.rows:
            lines.append(f"{kind:<20} {a:>16,} {b:>18,} {r:>9.1f}x")
        return "\n".join(lines)


def _ratio(a: int, b: int) -> float:
    if a == 0:
        return 1.0 if b == 0 else float("inf")
    return b / a


def compare(report_a: MacReport, report_b: MacReport) -> RatioTable:
    """Reduction factors baseline/candidate per op kind and in total (b is the baseline)."""
    if not report_b.layers or report_b.total_macs == 0:
        raise ValueError("empty baseline")
    ka, kb = report_a.by_kind(), report_b.by_kind()
    kinds = [k for k in dict.fromkeys([*ka, *kb]) if ka.get(k, 0) or kb.get(k, 0)]
    rows = [(k, ka.get(k, 0), kb.get(k, 0), _ratio(ka.get(k, 0), kb.get(k, 0))) for k in kinds]
    rows.append(("total", report_a.total_macs, report_b.total_macs, _ratio(report_a.total_macs, report_b.total_macs)))
    return RatioTable(rows)

