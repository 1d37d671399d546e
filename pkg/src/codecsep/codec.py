"""A small DAC-style codec: strided-conv encoder, residual VQ, transposed-conv decoder.

Layout, for strides ``s_i`` and widths ``C_i``::

    encoder: snake(conv7 1->C_0)
             per stage i: snake(conv(2*s_i, stride s_i) C_{i-1}->C_i); snake(h + conv7(h))
    decoder: per stage i (reversed): snake(h + conv7(h)); snake(convT(2*s_i, stride s_i) C_i->C_{i-1})
             conv7 C_0->1   (no output nonlinearity)

Embeddings are returned frame-major, ``(frames, E)`` or ``(batch, frames, E)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .signal import Waveform


@dataclass
class CodecConfig:
    sample_rate: int = 8000
    strides: tuple[int, ...] = (4, 4, 4)
    channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 64
    num_codebooks: int = 4
    codebook_size: int = 256
    kernel_size: int = 7

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.strides) != len(self.channels) or not self.strides:
            raise ValueError("strides and channels need one entry per stage")
        if any(s < 1 for s in self.strides) or any(c < 1 for c in self.channels):
            raise ValueError("strides and channels must be positive")
        if self.embedding_dim != self.channels[-1]:
            raise ValueError(f"embedding_dim {self.embedding_dim} must equal the last channel count {self.channels[-1]}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def hop(self) -> int:
        return math.prod(self.strides)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @classmethod
    def paper(cls) -> "CodecConfig":
        """DAC-sized geometry: 1024-d latents at 50 Hz for 8 kHz input."""
        return cls(strides=(2, 4, 4, 5), channels=(128, 256, 512, 1024), embedding_dim=1024,
                   num_codebooks=12, codebook_size=1024)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


def _conv_init(rng, shape, fan_in, gain=1.0):
    return Tensor((rng.standard_normal(shape) * gain / math.sqrt(fan_in)).astype(np.float32), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)


def down_geometry(stride: int) -> tuple[int, int]:
    """(kernel, padding) for a stride-s conv that maps length T to T / s exactly."""
    if stride == 1:
        return 3, 1
    return 2 * stride, (stride + 1) // 2


class ResidualVQ:
    """Residual vector quantizer with EMA codebooks.

    Codebooks are plain arrays (Q, K, E); they are learned by exponential
    moving averages of assigned residuals, never by gradients.
    """

    def __init__(self, num_codebooks: int, codebook_size: int, dim: int, decay: float = 0.99,
                 dead_after: int = 100, eps: float = 1e-5):
        self.num_codebooks = num_codebooks
        self.codebook_size = codebook_size
        self.dim = dim
        self.decay = decay
        self.dead_after = dead_after
        self.eps = eps
        self.codebooks: np.ndarray | None = None
        self.ema_count = np.zeros((num_codebooks, codebook_size), dtype=np.float32)
        self.ema_sum = np.zeros((num_codebooks, codebook_size, dim), dtype=np.float32)
        self.last_used = np.zeros((num_codebooks, codebook_size), dtype=np.float32)
        self.steps = 0

    @property
    def initialized(self) -> bool:
        return self.codebooks is not None

    def set_codebooks(self, codebooks: np.ndarray) -> None:
        cb = np.asarray(codebooks, dtype=np.float32)
        if cb.shape != (self.num_codebooks, self.codebook_size, self.dim):
            raise ValueError(f"codebooks shape {cb.shape} does not match {(self.num_codebooks, self.codebook_size, self.dim)}")
        self.codebooks = cb.copy()
        self.ema_sum = self.codebooks.copy()
        self.ema_count = np.ones((self.num_codebooks, self.codebook_size), dtype=np.float32)

    def random_init(self, rng: np.random.Generator, scale: float = 1.0) -> None:
        self.set_codebooks(rng.standard_normal((self.num_codebooks, self.codebook_size, self.dim)) * scale)

    def data_init(self, vectors: np.ndarray, rng: np.random.Generator) -> None:
        """Seed each stage's codebook with residuals drawn from ``vectors`` (N, E)."""
        cbs = np.zeros((self.num_codebooks, self.codebook_size, self.dim), dtype=np.float32)
        residual = np.asarray(vectors, dtype=np.float64)
        for q in range(self.num_codebooks):
            pick = rng.choice(residual.shape[0], self.codebook_size, replace=residual.shape[0] < self.codebook_size)
            cbs[q] = residual[pick] + 1e-3 * rng.standard_normal((self.codebook_size, self.dim))
            idx = nearest(residual, cbs[q])
            residual = residual - cbs[q][idx]
        self.set_codebooks(cbs)

    def _check(self):
        if self.codebooks is None:
            raise RuntimeError("codebooks are not initialized")

    def encode_frames(self, frames: np.ndarray, num_codebooks: int | None = None):
        """Residual assignment of (N, E) frames.

        Returns (indices (N, Q), quantized (N, E), stage inputs (Q, N, E)).
        """
        self._check()
        nq = self.num_codebooks if num_codebooks is None else num_codebooks
        residual = np.asarray(frames, dtype=np.float64)
        quantized = np.zeros_like(residual)
        indices = np.zeros((residual.shape[0], nq), dtype=np.int64)
        stage_inputs = np.zeros((nq, *residual.shape))
        for q in range(nq):
            stage_inputs[q] = residual
            idx = nearest(residual, self.codebooks[q])
            chosen = self.codebooks[q][idx].astype(np.float64)
            indices[:, q] = idx
            quantized += chosen
            residual = residual - chosen
        return indices, quantized, stage_inputs

    def decode_indices(self, indices: np.ndarray) -> np.ndarray:
        self._check()
        out = np.zeros((*indices.shape[:-1], self.dim))
        for q in range(indices.shape[-1]):
            out += self.codebooks[q][indices[..., q]]
        return out

    def ema_update(self, indices: np.ndarray, stage_inputs: np.ndarray, rng: np.random.Generator) -> None:
        self._check()
        self.steps += 1
        d = self.decay
        K = self.codebook_size
        for q in range(indices.shape[1]):
            idx = indices[:, q]
            counts = np.bincount(idx, minlength=K).astype(np.float32)
            sums = np.zeros((K, self.dim), dtype=np.float64)
            np.add.at(sums, idx, stage_inputs[q])
            self.ema_count[q] = d * self.ema_count[q] + (1 - d) * counts
            self.ema_sum[q] = d * self.ema_sum[q] + (1 - d) * sums.astype(np.float32)
            n = self.ema_count[q].sum()
            smoothed = (self.ema_count[q] + self.eps) / (n + K * self.eps) * n
            self.codebooks[q] = self.ema_sum[q] / smoothed[:, None]
            self.last_used[q][counts > 0] = self.steps
            dead = np.flatnonzero(self.steps - self.last_used[q] >= self.dead_after)
            if dead.size:
                pick = rng.choice(stage_inputs.shape[1], dead.size, replace=stage_inputs.shape[1] < dead.size)
                self.codebooks[q][dead] = stage_inputs[q][pick]
                self.ema_sum[q][dead] = stage_inputs[q][pick]
                self.ema_count[q][dead] = 1.0
                self.last_used[q][dead] = self.steps


def nearest(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the closest code (squared L2) for each row; ties go to the lowest index."""
    v = np.asarray(vectors, dtype=np.float64)
    c = np.asarray(codebook, dtype=np.float64)
    cc = (c * c).sum(axis=1)
    dist = cc[None, :] - 2.0 * v @ c.T
    best = np.argmin(dist, axis=1)
    # the expanded form can misorder near-ties; re-rank those rows with direct distances
    tol = 1e-9 * ((v * v).sum(axis=1) + cc.max()) + 1e-300
    near = dist <= dist[np.arange(len(v)), best][:, None] + tol[:, None]
    for r in np.flatnonzero(near.sum(axis=1) > 1):
        cand = np.flatnonzero(near[r])
        best[r] = cand[np.argmin(np.sum((c[cand] - v[r]) ** 2, axis=1))]
    return best


@dataclass
class Quantized:
    codes: np.ndarray            # (..., frames, Q) int
    embedding: Tensor            # STE tensor: forward = quantized, backward -> encoder output
    commitment_loss: Tensor      # scalar
    stage_inputs: np.ndarray = field(repr=False, default=None)


class Codec:
    def __init__(self, config: CodecConfig | None = None, seed: int = 0):
        self.config = config or CodecConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        K = cfg.kernel_size
        p: dict[str, Tensor] = {}
        c0 = cfg.channels[0]
        p["enc.stem.w"] = _conv_init(rng, (c0, 1, K), K)
        p["enc.stem.b"] = _zeros(c0)
        prev = c0
        for i, (s, c) in enumerate(zip(cfg.strides, cfg.channels)):
            k, _ = down_geometry(s)
            p[f"enc.down{i}.w"] = _conv_init(rng, (c, prev, k), prev * k)
            p[f"enc.down{i}.b"] = _zeros(c)
            p[f"enc.res{i}.w"] = _conv_init(rng, (c, c, K), c * K, gain=0.3)
            p[f"enc.res{i}.b"] = _zeros(c)
            prev = c
        for i, (s, c) in enumerate(zip(cfg.strides, cfg.channels)):
            k, _ = down_geometry(s)
            below = cfg.channels[i - 1] if i > 0 else c0
            p[f"dec.res{i}.w"] = _conv_init(rng, (c, c, K), c * K, gain=0.3)
            p[f"dec.res{i}.b"] = _zeros(c)
            # transposed weight layout (Cin, Cout, K); each output sees ~Cin*K/s taps
            p[f"dec.up{i}.w"] = _conv_init(rng, (c, below, k), c * k / s)
            p[f"dec.up{i}.b"] = _zeros(below)
        p["dec.out.w"] = _conv_init(rng, (1, c0, K), c0 * K)
        p["dec.out.b"] = _zeros(1)
        self.params = p
        for name, t in p.items():
            t.name = name
        self.rvq = ResidualVQ(cfg.num_codebooks, cfg.codebook_size, cfg.embedding_dim)
        self.rvq.random_init(rng)

    # -- parameters -------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.rvq.initialized:
            return {}
        return {
            "rvq.codebooks": self.rvq.codebooks,
            "rvq.ema_count": self.rvq.ema_count,
            "rvq.ema_sum": self.rvq.ema_sum,
            "rvq.last_used": self.rvq.last_used,
        }

    def param_count(self) -> int:
        n = sum(t.data.size for t in self.params.values())
        return n + (self.rvq.codebooks.size if self.rvq.initialized else 0)

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = True

    @property
    def hop(self) -> int:
        return self.config.hop

    # -- tensor-level forward -------------------------------------------
    def encode_tensor(self, x: Tensor) -> Tensor:
        """(B, T) waveform batch -> (B, T/hop, E) embeddings."""
        cfg, p = self.config, self.params
        if x.shape[-1] % cfg.hop:
            raise ValueError(f"length {x.shape[-1]} is not a multiple of hop {cfg.hop}; pad to multiple of hop first")
        pad = cfg.kernel_size // 2
        h = ad.reshape(x, (x.shape[0], 1, x.shape[1]))
        h = ad.snake(ad.conv1d(h, p["enc.stem.w"], p["enc.stem.b"], padding=pad))
        for i, s in enumerate(cfg.strides):
            _, dpad = down_geometry(s)
            h = ad.snake(ad.conv1d(h, p[f"enc.down{i}.w"], p[f"enc.down{i}.b"], stride=s, padding=dpad))
            h = ad.snake(ad.add(h, ad.conv1d(h, p[f"enc.res{i}.w"], p[f"enc.res{i}.b"], padding=pad)))
        return ad.transpose(h, (0, 2, 1))

    def decode_tensor(self, e: Tensor) -> Tensor:
        """(B, frames, E) embeddings -> (B, frames*hop) waveform batch."""
        cfg, p = self.config, self.params
        if e.ndim != 3 or e.shape[-1] != cfg.embedding_dim:
            raise ValueError(f"expected (B, frames, {cfg.embedding_dim}) embeddings, got {e.shape}")
        pad = cfg.kernel_size // 2
        h = ad.transpose(e, (0, 2, 1))
        for i in reversed(range(len(cfg.strides))):
            s = cfg.strides[i]
            _, dpad = down_geometry(s)
            h = ad.snake(ad.add(h, ad.conv1d(h, p[f"dec.res{i}.w"], p[f"dec.res{i}.b"], padding=pad)))
            h = ad.snake(ad.conv1d_transposed(h, p[f"dec.up{i}.w"], p[f"dec.up{i}.b"], stride=s,
                                              padding=dpad, output_padding=s % 2))
        y = ad.conv1d(h, p["dec.out.w"], p["dec.out.b"], padding=pad)
        return ad.reshape(y, (y.shape[0], y.shape[2]))

    def quantize_tensor(self, e: Tensor, num_codebooks: int | None = None) -> Quantized:
        lead = e.shape[:-1]
        idx, q, stage_inputs = self.rvq.encode_frames(e.data.reshape(-1, e.shape[-1]), num_codebooks)
        qt = Tensor(q.reshape(e.shape).astype(e.dtype))
        ste = ad.passthrough_grad(e, qt)
        commit = ad.mean(ad.square(ad.sub(e, qt)))
        return Quantized(idx.reshape(*lead, idx.shape[-1]), ste, commit, stage_inputs)

    # -- waveform-level API ---------------------------------------------
    def pad_to_hop(self, w: Waveform) -> Waveform:
        return pad_to_hop(w, self.hop)

    def encode(self, w: Waveform) -> np.ndarray:
        """Embedding (frames, E) of a waveform whose length is a multiple of hop."""
        if len(w) % self.hop:
            raise ValueError(f"length {len(w)} is not a multiple of hop {self.hop}; pad to multiple of hop (pad_to_hop)")
        with ad.no_grad():
            return self.encode_tensor(Tensor(w.samples[None].astype(np.float32))).data[0]

    def quantize(self, e: np.ndarray, num_codebooks: int | None = None):
        """(codes (frames, Q), quantized (frames, E), commitment loss)."""
        with ad.no_grad():
            qz = self.quantize_tensor(Tensor(np.asarray(e, dtype=np.float32)), num_codebooks)
        return qz.codes, qz.embedding.data, float(qz.commitment_loss.data)

    def decode(self, e: np.ndarray) -> Waveform:
        with ad.no_grad():
            y = self.decode_tensor(Tensor(np.asarray(e, dtype=np.float32)[None]))
        return Waveform(y.data[0], self.config.sample_rate)

    def transmit(self, w: Waveform, use_rvq: bool = True) -> Waveform:
        """t = Codec(s): reflect-pad to hop, encode, optionally quantize, decode, crop back."""
        n = len(w)
        e = self.encode(self.pad_to_hop(w))
        if use_rvq:
            _, e, _ = self.quantize(e)
        out = self.decode(e)
        return Waveform(out.samples[:n], w.sample_rate)

    def transmit_batch(self, x: np.ndarray, use_rvq: bool = True) -> np.ndarray:
        """Transmission of a (B, T) batch, T a multiple of hop."""
        with ad.no_grad():
            e = self.encode_tensor(Tensor(x.astype(np.float32)))
            if use_rvq:
                e = self.quantize_tensor(e).embedding
            return self.decode_tensor(e).data


def pad_to_hop(w: Waveform, hop: int) -> Waveform:
    n = len(w)
    extra = (-n) % hop
    if extra == 0:
        return w
    mode = "reflect" if n > extra else "constant"
    return Waveform(np.pad(w.samples, (0, extra), mode=mode), w.sample_rate)


def encode(codec: Codec, w: Waveform) -> np.ndarray:
    return codec.encode(w)


def quantize(codec: Codec, e: np.ndarray):
    return codec.quantize(e)


def decode(codec: Codec, e: np.ndarray) -> Waveform:
    return codec.decode(e)


def transmit(codec, w: Waveform, use_rvq: bool = True) -> Waveform:
    return codec.transmit(w, use_rvq=use_rvq)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class CodecTrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    commit_weight: float = 0.25
    seed: int = 0


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Crop or zero-pad a 1-D signal to n samples."""
    if x.shape[0] >= n:
        return x[:n]
    return np.pad(x, (0, n - x.shape[0]))


def codec_loss(codec: Codec, batch: np.ndarray, commit_weight: float = 0.25):
    x = Tensor(batch.astype(np.float32))
    e = codec.encode_tensor(x)
    qz = codec.quantize_tensor(e)
    y = codec.decode_tensor(qz.embedding)
    loss = ad.add(ad.losses.neg_si_sdr(y, x), ad.scale(qz.commitment_loss, commit_weight))
    return loss, qz


def train_codec(codec: Codec, waveforms: list[np.ndarray], cfg: CodecTrainConfig, log=None) -> list[dict]:
    """Fit encoder/decoder by gradient descent and the RVQ codebooks by EMA.

    ``waveforms`` are equal-length (multiple of hop) sample arrays. Returns
    one record per epoch: ``{"epoch", "loss", "first_loss", "last_loss"}``.
    """
    if not waveforms:
        raise ValueError("empty dataset: nothing to train the codec on")
    n = waveforms[0].shape[0]
    if n % codec.hop:
        raise ValueError(f"segment length {n} is not a multiple of hop {codec.hop}")
    data = np.stack([fit_length(np.asarray(w, dtype=np.float32), n) for w in waveforms])
    rng = np.random.default_rng(cfg.seed)
    codec.unfreeze()
    opt = ad.Adam(codec.parameters(), lr=cfg.lr)

    with ad.no_grad():
        first = data[rng.choice(len(data), min(len(data), cfg.batch_size * 4), replace=False)]
        e0 = codec.encode_tensor(Tensor(first)).data
    codec.rvq.data_init(e0.reshape(-1, e0.shape[-1]), rng)

    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            opt.zero_grad()
            loss, qz = codec_loss(codec, batch, cfg.commit_weight)
            loss.backward()
            opt.step()
            codec.rvq.ema_update(qz.codes.reshape(-1, qz.codes.shape[-1]), qz.stage_inputs, rng)
            losses.append(loss.item())
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "first_loss": losses[0], "last_loss": losses[-1]}
        history.append(rec)
        if log:
            log(rec)
    return history
