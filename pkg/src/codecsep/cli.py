"""Command line entry point: ``codecsep <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data/model error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import macprof
from .archive import ArchiveError, config_to_meta
from .codec import Codec, CodecConfig, CodecTrainConfig, fit_length, train_codec
from .separator import Codecformer, SeparatorConfig, separate_waveforms
from .signal import SynthSpec, WavError, load_examples, synth_dataset
from .trainer import (
    SCENARIOS,
    Target,
    TrainConfig,
    apply_overrides,
    evaluate_estimator,
    load_checkpoint,
    load_codec,
    load_separator,
    read_config_file,
    save_checkpoint,
    scenario_estimator,
    train_separator,
)

HELP_WIDTH = 100


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=36)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="codecsep", formatter_class=_formatter,
                description="Speech separation inside the latent space of a toy neural audio codec.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic two-talker dataset", formatter_class=_formatter)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--num", type=int, default=10, help="number of examples (default: 10)")
    s.add_argument("--speakers", type=int, default=2, help="sources per mixture (default: 2)")
    s.add_argument("--duration", type=float, default=1.0, help="seconds per example (default: 1.0)")
    s.add_argument("--sr", type=int, default=8000, help="sample rate in Hz (default: 8000)")
    s.add_argument("--snr-low", type=float, default=0.0, help="lowest mixing SNR in dB (default: 0)")
    s.add_argument("--snr-high", type=float, default=5.0, help="highest mixing SNR in dB (default: 5)")
    s.add_argument("--seed", type=int, default=0, help="dataset seed (default: 0)")

    c = sub.add_parser("train-codec", help="train the toy codec", formatter_class=_formatter)
    c.add_argument("--data", required=True, help="training manifest")
    c.add_argument("--out", required=True, help="output checkpoint path")
    c.add_argument("--epochs", type=int, help="training epochs (default: 20)")
    c.add_argument("--lr", type=float, help="Adam learning rate (default: 0.001)")
    c.add_argument("--batch-size", type=int, help="waveforms per step (default: 8)")
    c.add_argument("--config", help="key = value file with codec/training fields (default: none)")
    c.add_argument("--seed", type=int, help="initialisation and shuffling seed (default: 0)")

    t = sub.add_parser("train-sep", help="train the codec-space separator", formatter_class=_formatter)
    t.add_argument("--codec", required=True, help="trained codec checkpoint (kept frozen)")
    t.add_argument("--data", required=True, help="training manifest")
    t.add_argument("--valid", required=True, help="validation manifest")
    t.add_argument("--target", choices=["ground-truth", "transmission"], help="training target (default: transmission)")
    t.add_argument("--rvq", choices=["on", "off"], help="quantize mixture embeddings in the loop (default: off)")
    t.add_argument("--preset", choices=["toy", "paper"], default="toy", help="model/training size (default: toy)")
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.add_argument("--epochs", type=int, help="override the preset epoch count (toy: 40, paper: 200)")
    t.add_argument("--lr", type=float, help="initial learning rate (default: 0.00015)")
    t.add_argument("--config", help="key = value file with TrainConfig fields (default: none)")
    t.add_argument("--log", help="epoch log CSV path (default: <out>.log.csv)")
    t.add_argument("--seed", type=int, help="initialisation and shuffling seed (default: 0)")

    e = sub.add_parser("eval", help="score a deployment scenario", formatter_class=_formatter)
    e.add_argument("--codec", required=True, help="codec checkpoint")
    e.add_argument("--sep", required=True, help="separator checkpoint, or 'identity' for the pass-through stub")
    e.add_argument("--data", required=True, help="evaluation manifest")
    e.add_argument("--scenario", choices=list(SCENARIOS), default="codecspace", help="deployment scenario (default: codecspace)")
    e.add_argument("--comparison", choices=["ground-truth", "transmission"], default="transmission",
                   help="reference signals (default: transmission)")
    e.add_argument("--rvq", choices=["on", "off"], default="off", help="use the quantizer in transmissions (default: off)")
    e.add_argument("--report", help="per-example CSV report path (default: none)")

    m = sub.add_parser("profile", help="count multiply-accumulates", formatter_class=_formatter)
    m.add_argument("--model", choices=["codec", "sep", "pipeline"], default="pipeline", help="what to profile (default: pipeline)")
    m.add_argument("--preset", choices=["toy", "paper"], default="toy", help="model size (default: toy)")
    m.add_argument("--duration", type=float, default=2.0, help="input seconds (default: 2.0)")
    m.add_argument("--sr", type=int, default=8000, help="sample rate in Hz (default: 8000)")
    m.add_argument("--csv", help="also write the report as CSV (default: none)")

    i = sub.add_parser("info", help="describe a checkpoint", formatter_class=_formatter)
    i.add_argument("--ckpt", required=True, help="checkpoint path")
    return p


def _print_config(title: str, values: dict) -> None:
    print(f"[{title}] resolved config")
    for k, v in values.items():
        print(f"  {k} = {v}")
    sys.stdout.flush()


def _on_off(v: str | None) -> bool | None:
    return None if v is None else v == "on"


# ---------------------------------------------------------------------------

def cmd_synth(a) -> int:
    spec = SynthSpec(a.num, a.speakers, a.duration, a.sr, (a.snr_low, a.snr_high), a.seed)
    _print_config("synth", {"out": a.out, **{f.name: getattr(spec, f.name) for f in fields(spec)}})
    manifest = synth_dataset(spec, a.out)
    print(f"wrote {spec.num_examples} examples -> {manifest}")
    return 0


def _manifest_waveforms(path, hop: int) -> list[np.ndarray]:
    examples = load_examples(path)
    waves = [w.samples for ex in examples for w in [ex.mixture, *ex.sources]]
    if not waves:
        raise ValueError(f"{path}: empty dataset")
    n = max(len(w) for w in waves)
    n += (-n) % hop
    return [fit_length(w, n) for w in waves]


def cmd_train_codec(a) -> int:
    file_values = read_config_file(a.config) if a.config else {}
    arch_keys = {f.name for f in fields(CodecConfig)}
    codec_cfg = apply_overrides(CodecConfig(), {k: v for k, v in file_values.items() if k in arch_keys})
    train_cfg = apply_overrides(CodecTrainConfig(), {k: v for k, v in file_values.items() if k not in arch_keys})
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"), ("seed", "seed")):
        if getattr(a, flag) is not None:
            setattr(train_cfg, key, getattr(a, flag))
    _print_config("train-codec", {"data": a.data, "out": a.out, **codec_cfg.to_dict(),
                                  **{f.name: getattr(train_cfg, f.name) for f in fields(train_cfg)}})
    waves = _manifest_waveforms(a.data, codec_cfg.hop)
    codec = Codec(codec_cfg, seed=train_cfg.seed)
    train_codec(codec, waves, train_cfg,
                log=lambda r: print(f"epoch {r['epoch']:3d} loss {r['loss']:.4f}", flush=True))
    save_checkpoint(a.out, codec, extra={"epochs": str(train_cfg.epochs)})
    print(f"saved codec -> {a.out}")
    return 0


def cmd_train_sep(a) -> int:
    codec = load_codec(a.codec)
    cfg = TrainConfig.preset(a.preset)
    if a.config:
        cfg = apply_overrides(cfg, read_config_file(a.config))
    overrides = {"target": a.target, "rvq_in_loop": _on_off(a.rvq), "epochs": a.epochs, "lr": a.lr, "seed": a.seed}
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, Target(v) if k == "target" else v)
    sep_cfg = SeparatorConfig.preset(a.preset, codec.config.embedding_dim)
    log_path = a.log or f"{a.out}.log.csv"
    _print_config("train-sep", {"codec": a.codec, "data": a.data, "valid": a.valid, "out": a.out, "log": log_path,
                                **config_to_meta(cfg, "train."), **config_to_meta(sep_cfg, "model.")})
    train, valid = load_examples(a.data), load_examples(a.valid)
    sep = Codecformer(sep_cfg, seed=cfg.seed)
    result = train_separator(sep, codec, train, valid, cfg, log_path=log_path,
                             on_epoch=lambda r: print(r.to_csv(), flush=True))
    save_checkpoint(a.out, sep, extra={
        "epoch": str(result.best_epoch), "best_score": f"{result.best_score:.6f}", **config_to_meta(cfg, "train."),
    })
    print(f"best epoch {result.best_epoch} (validation {result.best_score:.3f} dB) -> {a.out}")
    return 0


def cmd_eval(a) -> int:
    codec = load_codec(a.codec)
    examples = load_examples(a.data)
    if not examples:
        raise ValueError(f"{a.data}: empty manifest")
    rvq = a.rvq == "on"
    n_spk = len(examples[0].sources)
    _print_config("eval", {"codec": a.codec, "sep": a.sep, "data": a.data, "scenario": a.scenario,
                           "comparison": a.comparison, "rvq": a.rvq, "report": a.report})
    if a.sep == "identity":
        sep = None
        separate_fn = lambda m: [m] * n_spk
        if a.scenario == "codecspace":
            separate_fn = lambda m: [codec.transmit(m, use_rvq=rvq)] * n_spk
            estimator = separate_fn
        else:
            estimator = scenario_estimator(a.scenario, codec, separate_fn=separate_fn, rvq_in_loop=rvq)
    else:
        sep = load_separator(a.sep)
        estimator = scenario_estimator(a.scenario, codec, separate_fn=lambda m: separate_waveforms(sep, codec, m),
                                       sep=sep, rvq_in_loop=rvq)
    comparison = Target(a.comparison)
    report = evaluate_estimator(estimator, codec, examples, [comparison], rvq)[comparison]
    print(report.summary())
    if a.report:
        report.write_csv(a.report)
        print(f"report -> {a.report}")
    return 0


def _presets(name: str) -> tuple[CodecConfig, SeparatorConfig]:
    codec_cfg = CodecConfig.paper() if name == "paper" else CodecConfig()
    return codec_cfg, SeparatorConfig.preset(name, codec_cfg.embedding_dim)


def cmd_profile(a) -> int:
    codec_cfg, sep_cfg = _presets(a.preset)
    _print_config("profile", {"model": a.model, "preset": a.preset, "duration": a.duration, "sr": a.sr,
                              "hop": codec_cfg.hop, "model_dim": sep_cfg.model_dim, "num_blocks": sep_cfg.num_blocks})
    if a.model == "codec":
        report = macprof.profile(codec_cfg, a.duration, a.sr)
    elif a.model == "sep":
        report = macprof.profile(sep_cfg, a.duration, a.sr, hop=codec_cfg.hop)
    else:
        report = macprof.profile_pipeline(codec_cfg, sep_cfg, a.duration, a.sr)
    print(report.render())
    if a.model == "pipeline":
        baseline = macprof.profile(sep_cfg, a.duration, a.sr, hop=1)
        baseline.title = "same separator at waveform rate"
        print()
        print(f"{baseline.title}: {baseline.total_macs / 1e9:.4f} GMACs")
        print(macprof.compare(report, baseline).render())
    if a.csv:
        Path(a.csv).write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_info(a) -> int:
    ckpt = load_checkpoint(a.ckpt)
    kind = ckpt.metadata.get("kind", "unknown")
    _print_config("info", {"ckpt": a.ckpt, "kind": kind})
    for k, v in ckpt.metadata.items():
        print(f"  {k}: {v}")
    n_params = sum(v.size for k, v in ckpt.tensors.items() if k.startswith("param."))
    print(f"tensors: {len(ckpt.tensors)}  parameters: {n_params:,}")
    if kind == "codec":
        model = load_codec(a.ckpt)
        print(f"hop: {model.hop}  frame rate: {model.config.frame_rate:g} Hz  "
              f"parameters incl. codebooks: {model.param_count():,}")
    elif kind == "separator":
        print(f"param_count: {load_separator(a.ckpt).param_count():,}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train-codec": cmd_train_codec,
    "train-sep": cmd_train_sep,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "info": cmd_info,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ArchiveError, WavError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
