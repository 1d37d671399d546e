"""Permutation-invariant training of the separator over a frozen codec, evaluation, checkpoints."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .archive import (
    ArchiveError,
    Checkpoint,
    config_from_meta,
    config_to_meta,
    decode_value,
    load_archive,
    save_archive,
)
from .autodiff import Tensor
from .codec import Codec, CodecConfig, fit_length, pad_to_hop
from .metrics import improvement, pit_assign, sdr, si_sdr
from .separator import Codecformer, SeparatorConfig, separate_batch, separate_waveforms
from .signal import MixtureExample, Waveform

log = logging.getLogger(__name__)


class Target(str, Enum):
    GROUND_TRUTH = "ground-truth"
    TRANSMISSION = "transmission"


Comparison = Target


@dataclass
class TrainConfig:
    target: Target = Target.TRANSMISSION
    rvq_in_loop: bool = False
    lr: float = 1.5e-4
    lr_halve_patience: int = 2
    lr_schedule_start_epoch: int = 5
    epochs: int = 200
    batch_size: int = 2
    segment_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.target = Target(self.target)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name == "paper":
            return cls(**overrides)
        if name == "toy":
            return cls(**{"epochs": 40, **overrides})
        raise ValueError(f"unknown preset {name!r}")


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def apply_overrides(cfg, values: dict[str, str]):
    """Return a copy of dataclass ``cfg`` with string ``values`` parsed by field type."""
    names = {f.name for f in fields(cfg)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for k, v in values.items():
        kwargs[k] = decode_value(v, kwargs[k])
    return type(cfg)(**kwargs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_tensors(model) -> dict[str, np.ndarray]:
    out = {f"param.{k}": t.data for k, t in model.parameters().items()}
    out.update({f"buffer.{k}": v for k, v in model.buffers().items()})
    return out


def save_checkpoint(path, model, extra: dict[str, str] | None = None, optimizer: ad.Adam | None = None) -> None:
    kind = "codec" if isinstance(model, Codec) else "separator"
    tensors = model_tensors(model)
    meta = {"kind": kind, **config_to_meta(model.config, "config.")}
    if isinstance(model, Codec):
        meta["rvq.steps"] = str(model.rvq.steps)
    if optimizer is not None:
        for k, m in optimizer.state.m.items():
            tensors[f"optim.m.{k}"] = m
            tensors[f"optim.v.{k}"] = optimizer.state.v[k]
        meta["optim.step"] = str(optimizer.state.step)
    meta.update(extra or {})
    save_archive(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    return load_archive(path)


def bind(model, ckpt: Checkpoint) -> None:
    params = {k[len("param."):]: v for k, v in ckpt.tensors.items() if k.startswith("param.")}
    if not params:
        raise ArchiveError("checkpoint holds no model parameters (empty model)")
    expected = model.parameters()
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ArchiveError(f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for k, t in expected.items():
        if t.data.shape != params[k].shape:
            raise ArchiveError(f"shape mismatch for {k}: {params[k].shape} vs {t.data.shape}")
        t.data = params[k].copy()
    if isinstance(model, Codec):
        rvq = model.rvq
        cb = ckpt.tensors.get("buffer.rvq.codebooks")
        if cb is not None:
            rvq.codebooks = cb.copy()
            rvq.ema_count = ckpt.tensors["buffer.rvq.ema_count"].copy()
            rvq.ema_sum = ckpt.tensors["buffer.rvq.ema_sum"].copy()
            rvq.last_used = ckpt.tensors["buffer.rvq.last_used"].copy()
            rvq.steps = int(ckpt.metadata.get("rvq.steps", 0))
        else:
            rvq.codebooks = None


def load_codec(path) -> Codec:
    ckpt = load_archive(path)
    if ckpt.metadata.get("kind") != "codec":
        raise ArchiveError(f"{path}: not a codec checkpoint (kind={ckpt.metadata.get('kind')})")
    codec = Codec(config_from_meta(CodecConfig, ckpt.metadata, "config."))
    bind(codec, ckpt)
    return codec


def load_separator(path) -> Codecformer:
    ckpt = load_archive(path)
    if ckpt.metadata.get("kind") != "separator":
        raise ArchiveError(f"{path}: not a separator checkpoint (kind={ckpt.metadata.get('kind')})")
    sep = Codecformer(config_from_meta(SeparatorConfig, ckpt.metadata, "config."))
    bind(sep, ckpt)
    return sep


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

Estimator = Callable[[Waveform], Sequence[Waveform]]


def metric_names(comparison: Target) -> list[str]:
    base = ["si_sdr", "si_sdri", "sdr", "sdri"]
    return ["c" + m for m in base] if Target(comparison) is Target.TRANSMISSION else base


@dataclass
class EvalReport:
    comparison: Target
    rows: list[dict] = field(default_factory=list)
    means: dict[str, float] = field(default_factory=dict)
    capped: dict[str, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.rows)

    def write_csv(self, path) -> None:
        names = metric_names(self.comparison)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *names, "permutation"])
            for r in self.rows:
                w.writerow([r["id"], *(f"{r[m]:.4f}" for m in names), " ".join(map(str, r["permutation"]))])
            w.writerow(["mean", *(f"{self.means[m]:.4f}" if m in self.means else "nan" for m in names), ""])

    def summary(self) -> str:
        parts = [f"{m}={self.means.get(m, float('nan')):.2f}" for m in metric_names(self.comparison)]
        capped = sum(self.capped.values())
        return f"{self.comparison.value} n={self.n} " + " ".join(parts) + (f" capped={capped}" if capped else "")


def references_for(example: MixtureExample, comparison: Target, codec, rvq: bool) -> list[Waveform]:
    if Target(comparison) is Target.GROUND_TRUTH:
        return list(example.sources)
    return [codec.transmit(s, use_rvq=rvq) for s in example.sources]


def _crop(w: Waveform, n: int) -> Waveform:
    return Waveform(w.samples[:n], w.sample_rate)


def score_example(estimates: Sequence[Waveform], references: Sequence[Waveform], mixture: Waveform,
                  comparison: Target) -> dict:
    n = min([len(mixture)] + [len(w) for w in [*estimates, *references]])
    est = [_crop(e, n) for e in estimates]
    ref = [_crop(r, n) for r in references]
    mix = _crop(mixture, n)
    pit = pit_assign(si_sdr, est, ref)
    names = metric_names(comparison)
    per = {m: [] for m in names}
    finite = {m: True for m in names}
    for i, j in enumerate(pit.permutation):
        for m, value in zip(names, (
            si_sdr(est[i], ref[j]),
            improvement(si_sdr, est[i], ref[j], mix),
            sdr(est[i], ref[j]),
            improvement(sdr, est[i], ref[j], mix),
        )):
            per[m].append(value.value_db)
            finite[m] &= value.finite
    row = {m: float(np.mean(v)) for m, v in per.items()}
    row["finite"] = finite
    row["permutation"] = pit.permutation
    return row


def summarize(rows: list[dict], comparison: Target) -> EvalReport:
    report = EvalReport(Target(comparison), rows)
    for m in metric_names(comparison):
        vals = [r[m] for r in rows if r["finite"][m]]
        report.capped[m] = len(rows) - len(vals)
        if vals:
            report.means[m] = float(np.mean(vals))
    return report


def evaluate_estimator(estimator: Estimator, codec, examples: Sequence[MixtureExample],
                       comparisons: Sequence[Target], rvq_in_loop: bool = False,
                       reference_cache: dict | None = None) -> dict[Target, EvalReport]:
    if not examples:
        raise ValueError("empty manifest: nothing to evaluate")
    rows = {Target(c): [] for c in comparisons}
    for ex in examples:
        est = list(estimator(ex.mixture))
        for c in rows:
            key = (ex.id, c, rvq_in_loop)
            refs = reference_cache.get(key) if reference_cache is not None else None
            if refs is None:
                refs = references_for(ex, c, codec, rvq_in_loop)
                if reference_cache is not None:
                    reference_cache[key] = refs
            row = score_example(est, refs, ex.mixture, c)
            row["id"] = ex.id
            rows[c].append(row)
    return {c: summarize(r, c) for c, r in rows.items()}


SCENARIOS = ("oracle", "local", "cloud", "codecspace")


def scenario_estimator(scenario: str, codec, separate_fn: Estimator | None = None,
                       sep: Codecformer | None = None, rvq_in_loop: bool = False) -> Estimator:
    """Deployment scenarios.

    oracle: separate the clean mixture; local: separate, then transmit each
    output; cloud: transmit the mixture, then separate; codecspace: separate
    inside the codec latent space with ``sep``.
    """
    if scenario == "codecspace":
        if sep is None:
            raise ValueError("codecspace scenario needs a separator checkpoint")
        return lambda m: separate_waveforms(sep, codec, m, rvq_in_loop)
    if separate_fn is None:
        raise ValueError(f"{scenario} scenario needs a waveform separator")
    if scenario == "oracle":
        return separate_fn
    if scenario == "local":
        return lambda m: [codec.transmit(_crop(o, len(m)), use_rvq=rvq_in_loop) for o in separate_fn(m)]
    if scenario == "cloud":
        return lambda m: separate_fn(codec.transmit(m, use_rvq=rvq_in_loop))
    raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")


def evaluate(sep: Codecformer, codec, examples: Sequence[MixtureExample], comparison: Target,
             rvq_in_loop: bool = False) -> EvalReport:
    """Codec-space separation scored against clean sources or their transmissions."""
    est = scenario_estimator("codecspace", codec, sep=sep, rvq_in_loop=rvq_in_loop)
    return evaluate_estimator(est, codec, examples, [comparison], rvq_in_loop)[Target(comparison)]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_primary: float
    val_secondary: float
    lr: float

    HEADER = "epoch,train_loss,val_primary,val_secondary,lr"

    def to_csv(self) -> str:
        return f"{self.epoch},{self.train_loss:.6f},{self.val_primary:.6f},{self.val_secondary:.6f},{self.lr:.8g}"


@dataclass
class TrainResult:
    logs: list[EpochLog]
    best_epoch: int
    best_score: float
    best_params: dict[str, np.ndarray]


PERMS = {n: list(itertools.permutations(range(n))) for n in range(1, 5)}


def pit_loss(estimates: Tensor, references: Tensor, eps: float = 1e-8) -> tuple[Tensor, np.ndarray]:
    """Negative SI-SDR under the best permutation per example.

    estimates, references: (B, N, T). Returns (scalar loss, chosen permutation index per example).
    """
    B, N, T = estimates.shape
    pair = ad.losses.si_sdr(ad.reshape(estimates, (B, N, 1, T)), ad.reshape(references, (B, 1, N, T)), eps)
    perms = PERMS[N]
    scores = np.stack([pair.data[:, np.arange(N), list(p)].mean(axis=1) for p in perms], axis=1)
    best = np.argmax(scores, axis=1)
    mask = np.zeros((B, N, N), dtype=pair.dtype)
    for b, k in enumerate(best):
        mask[b, np.arange(N), list(perms[k])] = 1.0 / (N * B)
    return ad.scale(ad.sum_(ad.mul(pair, Tensor(mask))), -1.0), best


def _segment(x: np.ndarray, n: int) -> np.ndarray:
    return fit_length(np.asarray(x, dtype=np.float32), n)


def train_separator(sep: Codecformer, codec: Codec, train: Sequence[MixtureExample],
                    valid: Sequence[MixtureExample], cfg: TrainConfig,
                    log_path=None, on_epoch: Callable[[EpochLog], None] | None = None,
                    validate: Callable[[int], tuple[float, float]] | None = None) -> TrainResult:
    """Train ``sep`` in place and leave it holding the best-validation weights.

    ``validate`` (epoch -> (primary, secondary)) replaces the real validation
    pass; tests use it to script the schedule.
    """
    if not train or not valid:
        raise ValueError("train and valid manifests must be non-empty")
    sr = codec.config.sample_rate
    seg = int(round(cfg.segment_s * sr))
    if seg % codec.hop:
        raise ValueError(f"segment of {seg} samples is not a multiple of hop {codec.hop}")
    codec.freeze()
    target = Target(cfg.target)
    primary = Target.TRANSMISSION if target is Target.TRANSMISSION else Target.GROUND_TRUTH
    secondary = Target.GROUND_TRUTH if primary is Target.TRANSMISSION else Target.TRANSMISSION

    mixtures = np.stack([_segment(ex.mixture.samples, seg) for ex in train])
    sources = np.stack([[_segment(s.samples, seg) for s in ex.sources] for ex in train])
    if target is Target.TRANSMISSION:
        B, N, T = sources.shape
        refs = codec.transmit_batch(sources.reshape(B * N, T), use_rvq=cfg.rvq_in_loop).reshape(B, N, T)
    else:
        refs = sources

    opt = ad.Adam(sep.parameters(), lr=cfg.lr)
    sched = ad.PlateauHalving(cfg.lr, cfg.lr_halve_patience, cfg.lr_schedule_start_epoch)
    ref_cache: dict = {}
    logs: list[EpochLog] = []
    best_score, best_epoch, best_params = -math.inf, 0, None
    if log_path is not None:
        Path(log_path).write_text(EpochLog.HEADER + "\n", encoding="utf-8")

    for epoch in range(1, cfg.epochs + 1):
        opt.lr = sched.lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            try:
                est = separate_batch(sep, codec, mixtures[idx], cfg.rvq_in_loop)
                loss, _ = pit_loss(est, Tensor(refs[idx]))
                loss.backward()
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
            opt.step()
            losses.append(loss.item())

        if validate is not None:
            val_p, val_s = validate(epoch)
        else:
            reports = evaluate_estimator(
                scenario_estimator("codecspace", codec, sep=sep, rvq_in_loop=cfg.rvq_in_loop),
                codec, valid, [primary, secondary], cfg.rvq_in_loop, ref_cache)
            val_p = reports[primary].means.get(metric_names(primary)[1], -math.inf)
            val_s = reports[secondary].means.get(metric_names(secondary)[1], -math.inf)
        rec = EpochLog(epoch, float(np.mean(losses)), val_p, val_s, opt.lr)
        logs.append(rec)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_csv() + "\n")
        if on_epoch:
            on_epoch(rec)
        if val_p > best_score:
            best_score, best_epoch = val_p, epoch
            best_params = {k: t.data.copy() for k, t in sep.parameters().items()}
        sched.step(epoch, val_p)

    if best_params is not None:
        for k, t in sep.parameters().items():
            t.data = best_params[k].copy()
    return TrainResult(logs, best_epoch, best_score, best_params or {})
