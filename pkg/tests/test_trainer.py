import numpy as np
import pytest

from codecsep import autodiff as ad
from codecsep.archive import ArchiveError, save_archive
from codecsep.autodiff import Tensor
from codecsep.codec import Codec, CodecTrainConfig, train_codec
from codecsep.separator import Codecformer, SeparatorConfig
from codecsep.trainer import (
    PERMS, EpochLog, Target, TrainConfig, TrainingDiverged, apply_overrides, bind, evaluate, evaluate_estimator,
    load_checkpoint, load_codec, load_separator, pit_loss, read_config_file, save_checkpoint, scenario_estimator,
    train_separator,
)

from conftest import TINY_CODEC

SMALL = SeparatorConfig(codec_embedding_dim=8, model_dim=8, num_blocks=1, num_heads=2, max_frames=512)


@pytest.fixture(scope="module")
def trained_tiny_codec(short_examples):
    codec = Codec(TINY_CODEC, seed=0)
    waves = [w.samples for ex in short_examples for w in [ex.mixture, *ex.sources]]
    train_codec(codec, waves, CodecTrainConfig(epochs=2, batch_size=6))
    return codec


def tiny_cfg(**kw):
    return TrainConfig(segment_s=0.25, epochs=2, lr=1e-3, **kw)


def test_toy_preset_and_overrides(tmp_path):
    toy = TrainConfig.preset("toy")
    assert toy.epochs == 40 and toy.target is Target.TRANSMISSION and not toy.rvq_in_loop
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nlr = 0.01\nrvq_in_loop = on  # trailing\ntarget = ground-truth\n")
    cfg = apply_overrides(TrainConfig(), read_config_file(f))
    assert cfg.lr == 0.01 and cfg.rvq_in_loop and cfg.target is Target.GROUND_TRUTH
    with pytest.raises(ValueError, match="unknown"):
        apply_overrides(TrainConfig(), {"nope": "1"})


def test_pit_loss_is_min_over_permutations():
    rng = np.random.default_rng(0)
    est = rng.standard_normal((3, 2, 50))
    refs = rng.standard_normal((3, 2, 50))
    loss, best = pit_loss(Tensor(est), Tensor(refs))
    for perm in PERMS[2]:
        fixed = refs[:, list(perm)]
        pair = ad.losses.si_sdr(Tensor(est), Tensor(fixed))
        assert loss.item() <= -pair.data.mean() + 1e-9
    swapped = pit_loss(Tensor(refs[:, ::-1] + 0.01 * est), Tensor(refs))[1]
    assert list(swapped) == [1, 1, 1]


def test_smoke_and_frozen_codec(trained_tiny_codec, short_examples, tmp_path):
    codec = trained_tiny_codec
    before = {k: p.data.tobytes() for k, p in codec.parameters().items()}
    cb = codec.rvq.codebooks.tobytes()
    sep = Codecformer(SMALL, seed=0)
    res = train_separator(sep, codec, short_examples[:4], short_examples[4:], tiny_cfg(), log_path=tmp_path / "log.csv")
    assert len(res.logs) == 2
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == EpochLog.HEADER and len(lines) == 3
    assert all(np.isfinite(r.val_primary) for r in res.logs)
    assert {k: p.data.tobytes() for k, p in codec.parameters().items()} == before
    assert codec.rvq.codebooks.tobytes() == cb
    best = res.logs[res.best_epoch - 1]
    assert res.best_score == best.val_primary == max(r.val_primary for r in res.logs)


def test_seeded_runs_are_identical(trained_tiny_codec, short_examples, tmp_path):
    for name in ("a", "b"):
        train_separator(Codecformer(SMALL, seed=3), trained_tiny_codec, short_examples[:4], short_examples[4:],
                        tiny_cfg(seed=3), log_path=tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_scripted_schedule(trained_tiny_codec, short_examples):
    cfg = TrainConfig(segment_s=0.25, epochs=12, lr=1e-3)
    res = train_separator(Codecformer(SMALL), trained_tiny_codec, short_examples[:2], short_examples[4:5], cfg,
                          validate=lambda epoch: (1.0, 0.0))
    assert [r.lr for r in res.logs] == [1e-3] * 7 + [5e-4] * 2 + [2.5e-4] * 2 + [1.25e-4]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(trained_tiny_codec, short_examples):
    sep = Codecformer(SMALL)
    sep.params["in.w"].data[:] = np.inf
    with pytest.raises(TrainingDiverged, match="in.w"):
        train_separator(sep, trained_tiny_codec, short_examples[:2], short_examples[4:], tiny_cfg())


def test_empty_sets_rejected(trained_tiny_codec, short_examples):
    with pytest.raises(ValueError):
        train_separator(Codecformer(SMALL), trained_tiny_codec, [], short_examples, tiny_cfg())


def test_stub_estimators(trained_tiny_codec, short_examples):
    codec = trained_tiny_codec
    as_mixture = lambda m: [m, m]
    reports = evaluate_estimator(as_mixture, codec, short_examples, [Target.GROUND_TRUTH, Target.TRANSMISSION])
    for rep, names in ((reports[Target.GROUND_TRUTH], ("si_sdri", "sdri")),
                       (reports[Target.TRANSMISSION], ("csi_sdri", "csdri"))):
        for m in names:
            assert rep.means[m] == 0.0
    oracle = {ex.id: ex.sources for ex in short_examples}
    by_mix = {ex.mixture.samples.tobytes(): ex.id for ex in short_examples}
    rep = evaluate_estimator(lambda m: oracle[by_mix[m.samples.tobytes()]], codec, short_examples, [Target.GROUND_TRUTH])
    assert rep[Target.GROUND_TRUTH].capped["si_sdr"] == len(short_examples)


def test_scenarios_need_their_inputs(trained_tiny_codec):
    with pytest.raises(ValueError):
        scenario_estimator("codecspace", trained_tiny_codec)
    with pytest.raises(ValueError):
        scenario_estimator("local", trained_tiny_codec)
    with pytest.raises(ValueError):
        scenario_estimator("orbit", trained_tiny_codec, separate_fn=lambda m: [m])


def test_evaluate_empty():
    with pytest.raises(ValueError, match="empty"):
        evaluate(Codecformer(SMALL), Codec(TINY_CODEC), [], Target.TRANSMISSION)


def test_checkpoint_round_trip(trained_tiny_codec, short_examples, tmp_path):
    sep = Codecformer(SMALL, seed=4)
    save_checkpoint(tmp_path / "s.ntar", sep, extra={"epoch": "3"})
    save_checkpoint(tmp_path / "c.ntar", trained_tiny_codec)
    sep2, codec2 = load_separator(tmp_path / "s.ntar"), load_codec(tmp_path / "c.ntar")
    x = Tensor(np.random.default_rng(0).standard_normal((1, 6, 8)).astype(np.float32))
    with ad.no_grad():
        assert sep.forward(x).data.tobytes() == sep2.forward(x).data.tobytes()
    w = short_examples[0].mixture
    assert trained_tiny_codec.transmit(w).samples.tobytes() == codec2.transmit(w).samples.tobytes()
    assert load_checkpoint(tmp_path / "s.ntar").metadata["epoch"] == "3"
    with pytest.raises(ArchiveError, match="not a codec"):
        load_codec(tmp_path / "s.ntar")


def test_empty_archive_fails_at_bind(tmp_path):
    save_archive(tmp_path / "e.ntar", {}, {"kind": "separator"})
    ck = load_checkpoint(tmp_path / "e.ntar")
    assert ck.tensors == {}
    with pytest.raises(ArchiveError, match="empty model"):
        bind(Codecformer(SMALL), ck)
