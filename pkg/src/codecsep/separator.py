"""Codecformer: transformer separator working directly on codec embeddings.

The mixture embedding (frames x E) goes through a linear projection to the
model width, sinusoidal positions, a plain stack of pre-norm transformer
blocks over the whole sequence, a final norm, and a projection to one
embedding per speaker. The head ends in a Snake so the outputs live in the
same value range as the codec encoder's own (Snake-activated) embeddings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .signal import Waveform


@dataclass
class SeparatorConfig:
    codec_embedding_dim: int = 64
    model_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    ffn_dim: int = 0          # 0 -> 4 * model_dim
    num_speakers: int = 2
    max_frames: int = 4096

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.model_dim
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 2 <= self.num_speakers <= 4:
            raise ValueError("num_speakers must be between 2 and 4")
        if min(self.codec_embedding_dim, self.num_blocks, self.max_frames) < 1:
            raise ValueError("dimensions must be positive")

    @classmethod
    def preset(cls, name: str, codec_embedding_dim: int) -> "SeparatorConfig":
        if name == "toy":
            return cls(codec_embedding_dim=codec_embedding_dim)
        if name == "paper":
            return cls(codec_embedding_dim=codec_embedding_dim, model_dim=256, num_blocks=16)
        raise ValueError(f"unknown preset {name!r} (expected 'toy' or 'paper')")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeparatorConfig":
        return cls(**d)


def sinusoidal_positions(num_frames: int, dim: int) -> np.ndarray:
    pos = np.arange(num_frames)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)
    pe = np.zeros((num_frames, dim), dtype=np.float32)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return pe


class Codecformer:
    def __init__(self, config: SeparatorConfig | None = None, seed: int = 0):
        self.config = cfg = config or SeparatorConfig()
        rng = np.random.default_rng(seed)
        d, E, F = cfg.model_dim, cfg.codec_embedding_dim, cfg.ffn_dim

        def w(fan_in, fan_out, gain=1.0):
            return Tensor((rng.standard_normal((fan_in, fan_out)) * gain / math.sqrt(fan_in)).astype(np.float32),
                          requires_grad=True)

        def const(n, value):
            return Tensor(np.full(n, value, dtype=np.float32), requires_grad=True)

        p = {"in.w": w(E, d), "in.b": const(d, 0.0)}
        for i in range(cfg.num_blocks):
            b = f"block{i}."
            p[b + "ln1.g"], p[b + "ln1.b"] = const(d, 1.0), const(d, 0.0)
            for name in ("q", "k", "v"):
                p[b + f"attn.{name}.w"], p[b + f"attn.{name}.b"] = w(d, d), const(d, 0.0)
            # residual branches start small so the stack is close to identity
            p[b + "attn.o.w"], p[b + "attn.o.b"] = w(d, d, 0.5 / math.sqrt(cfg.num_blocks)), const(d, 0.0)
            p[b + "ln2.g"], p[b + "ln2.b"] = const(d, 1.0), const(d, 0.0)
            p[b + "ff1.w"], p[b + "ff1.b"] = w(d, F), const(F, 0.0)
            p[b + "ff2.w"], p[b + "ff2.b"] = w(F, d, 0.5 / math.sqrt(cfg.num_blocks)), const(d, 0.0)
        p["out_ln.g"], p["out_ln.b"] = const(d, 1.0), const(d, 0.0)
        p["out.w"], p["out.b"] = w(d, cfg.num_speakers * E), const(cfg.num_speakers * E, 0.0)
        self.params = p
        for name, t in p.items():
            t.name = name
        self._pe = sinusoidal_positions(cfg.max_frames, d)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def _attention(self, h: Tensor, prefix: str, trace) -> Tensor:
        cfg, p = self.config, self.params
        B, T, d = h.shape
        H = cfg.num_heads
        dh = d // H

        def heads(name):
            x = ad.linear(h, p[f"{prefix}{name}.w"], p[f"{prefix}{name}.b"])
            return ad.transpose(ad.reshape(x, (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if trace is not None:
            trace.append((prefix + "scores", scores.shape))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        return ad.linear(ctx, p[f"{prefix}o.w"], p[f"{prefix}o.b"])

    def forward(self, x: Tensor, positions: np.ndarray | None = None, trace: list | None = None) -> Tensor:
        """(B, frames, E) mixture embeddings -> (B, num_speakers, frames, E).

        ``positions`` overrides the positional-encoding rows (frames, d);
        ``trace`` collects (name, shape) of the attention score tensors.
        """
        cfg, p = self.config, self.params
        if x.ndim != 3 or x.shape[-1] != cfg.codec_embedding_dim:
            raise ValueError(f"expected (B, frames, {cfg.codec_embedding_dim}), got {x.shape}")
        B, T, E = x.shape
        if T > cfg.max_frames:
            raise ValueError(f"{T} frames exceed max_frames={cfg.max_frames}; chunked evaluation is not supported")
        pe = self._pe[:T] if positions is None else np.asarray(positions, dtype=np.float32)
        h = ad.add(ad.linear(x, p["in.w"], p["in.b"]), Tensor(pe[None].astype(x.dtype)))
        for i in range(cfg.num_blocks):
            b = f"block{i}."
            a = ad.layer_norm(h, p[b + "ln1.g"], p[b + "ln1.b"])
            h = ad.add(h, self._attention(a, b + "attn.", trace))
            f = ad.layer_norm(h, p[b + "ln2.g"], p[b + "ln2.b"])
            f = ad.linear(ad.relu(ad.linear(f, p[b + "ff1.w"], p[b + "ff1.b"])), p[b + "ff2.w"], p[b + "ff2.b"])
            h = ad.add(h, f)
        h = ad.layer_norm(h, p["out_ln.g"], p["out_ln.b"])
        y = ad.linear(h, p["out.w"], p["out.b"])
        y = ad.transpose(ad.reshape(y, (B, T, cfg.num_speakers, E)), (0, 2, 1, 3))
        return ad.snake(y)

    __call__ = forward

    def separate(self, mixture_embedding: np.ndarray) -> list[np.ndarray]:
        """(frames, E) -> list of num_speakers (frames, E) embeddings."""
        with ad.no_grad():
            y = self.forward(Tensor(np.asarray(mixture_embedding, dtype=np.float32)[None]))
        return [y.data[0, k] for k in range(self.config.num_speakers)]


def separate(sep: Codecformer, mixture_embedding: np.ndarray) -> list[np.ndarray]:
    return sep.separate(mixture_embedding)


def separate_batch(sep: Codecformer, codec, mixtures: np.ndarray, use_rvq_in: bool = False) -> Tensor:
    """Differentiable path for training: (B, T) mixtures -> (B, num_speakers, T) waveforms.

    Encoding (and quantization) run without gradient; the decoder is part of
    the graph so the separator receives waveform-level gradients.
    """
    with ad.no_grad():
        e = codec.encode_tensor(Tensor(mixtures.astype(np.float32)))
        if use_rvq_in:
            e = codec.quantize_tensor(e).embedding
        e = Tensor(e.data)
    y = sep.forward(e)
    B, N, T, E = y.shape
    wav = codec.decode_tensor(ad.reshape(y, (B * N, T, E)))
    return ad.reshape(wav, (B, N, wav.shape[-1]))


def separate_waveforms(sep: Codecformer, codec, mixture: Waveform, use_rvq_in: bool = False) -> list[Waveform]:
    """Encode, optionally quantize, separate and decode one mixture.

    Outputs have the hop-padded mixture length.
    """
    from .codec import pad_to_hop

    padded = pad_to_hop(mixture, codec.hop)
    with ad.no_grad():
        out = separate_batch(sep, codec, padded.samples[None], use_rvq_in).data[0]
    return [Waveform(o, mixture.sample_rate) for o in out]
