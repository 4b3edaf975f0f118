import json
import math

import pytest
import torch

from caiiswap.config import RunConfig, TrainConfig, tiny_config
from caiiswap.data import PairDataset
from caiiswap.encoders import build_suite, parameter_checksum
from caiiswap.errors import ConfigError, NonFiniteLoss, ResumeMismatch
from caiiswap.losses import recombine
from caiiswap.training import (
    Trainer,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
    trainer_from_checkpoint,
)


def _cfg(**kw):
    # batch 2 keeps each CPU step around a quarter second
    return tiny_config(**{"batch_size": 2, "steps_per_epoch": 4, **kw})


def _probe():
    g = torch.Generator().manual_seed(123)
    return torch.rand(1, 3, 112, 112, generator=g) * 2 - 1, torch.rand(1, 3, 256, 256, generator=g) * 2 - 1


def _probe_out(trainer):
    trainer.model.eval()
    with torch.no_grad():
        out = trainer.model(*_probe())
    trainer.model.train()
    return out


# -- schedule ---------------------------------------------------------------------------


def test_lr_published_values():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(0.01, abs=1e-15)
    assert lr_at(5, cfg) == pytest.approx(0.009, abs=1e-15)
    assert lr_at(49, cfg) == pytest.approx(0.003874, abs=5e-7)


def test_lr_matches_closed_form_over_all_epochs():
    cfg = TrainConfig()
    for e in range(51):
        expected = 0.01
        for _ in range(e // 5):  # repeated multiplication, independent of the power form
            expected *= 0.9
        assert lr_at(e, cfg) == pytest.approx(expected, rel=1e-12)
        assert lr_at(e, cfg) == lr_at(5 * (e // 5), cfg)


def test_lr_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_at(-1, TrainConfig())


@pytest.mark.parametrize(
    "key,value", [("lr0", 0.0), ("lr0", -1.0), ("decay_factor", 0.0), ("decay_factor", 1.5), ("decay_every_epochs", 0)]
)
def test_train_config_validation(key, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{key: value}).validate()


def test_config_round_trip_and_unknown_keys():
    cfg = tiny_config()
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.hash() == cfg.hash()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"lr": 0.1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nonsense": {}})


# -- train_step ------------------------------------------------------------------------------


def test_one_step_updates_both_networks_and_nothing_else(corpus):
    trainer = Trainer(_cfg())
    batch = PairDataset(corpus, seed=0).batch(0, 2)
    g0, d0 = parameter_checksum(trainer.model), parameter_checksum(trainer.disc)
    frozen = trainer.encoder_checksum()
    seen = {}

    # checksum discipline: each optimizer step touches only its own network
    step_d, step_g = trainer.opt_d.step, trainer.opt_g.step

    def guarded_d(*a, **k):
        before = parameter_checksum(trainer.model)
        out = step_d(*a, **k)
        seen["d"] = parameter_checksum(trainer.model) == before
        return out

    def guarded_g(*a, **k):
        before = parameter_checksum(trainer.disc)
        out = step_g(*a, **k)
        seen["g"] = parameter_checksum(trainer.disc) == before
        return out

    trainer.opt_d.step, trainer.opt_g.step = guarded_d, guarded_g
    breakdown = trainer.train_step(batch)
    assert seen == {"d": True, "g": True}
    assert trainer.step == 1
    assert parameter_checksum(trainer.model) != g0 and parameter_checksum(trainer.disc) != d0
    assert trainer.encoder_checksum() == frozen
    assert abs(float(breakdown.total.detach()) - recombine(breakdown, trainer.config.loss.weights)) < 1e-6
    assert 0.0 <= breakdown.tau_active_fraction <= 1.0


def test_frozen_encoders_unchanged_after_ten_steps(corpus):
    trainer = Trainer(_cfg())
    ds = PairDataset(corpus, seed=0)
    frozen = trainer.encoder_checksum()
    for i in range(10):
        trainer.train_step(ds.batch(i, 2))
    assert trainer.encoder_checksum() == frozen and trainer.step == 10


def _trajectory(corpus, steps):
    trainer = Trainer(_cfg())
    ds = PairDataset(corpus, seed=0)
    return [float(trainer.train_step(ds.batch(i, 2)).total) for i in range(steps)], parameter_checksum(trainer.model)


def test_identical_seeds_give_identical_trajectories(corpus):
    a, ca = _trajectory(corpus, 20)
    b, cb = _trajectory(corpus, 20)
    assert max(abs(x - y) for x, y in zip(a, b)) < 1e-6
    assert ca == cb


def test_wo_clips_never_calls_clip_encoders(corpus):
    cfg = _cfg()
    cfg.loss.ablation = "wo_clips"
    enc = build_suite()
    trainer = Trainer(cfg, encoders=enc)
    b = trainer.train_step(PairDataset(corpus, seed=0).batch(0, 2))
    assert enc.clip_image.calls == 0 and enc.clip_text.calls == 0
    assert float(b.clip_text) == float(b.clip_id) == 0.0


@pytest.mark.parametrize("ablation,text_on", [("clip_wo_text", False), ("clip_wo_id", True)])
def test_partial_ablations_call_text_encoder_only_when_needed(corpus, ablation, text_on):
    cfg = _cfg()
    cfg.loss.ablation = ablation
    enc = build_suite()
    Trainer(cfg, encoders=enc).train_step(PairDataset(corpus, seed=0).batch(0, 2))
    assert (enc.clip_text.calls > 0) == text_on
    assert enc.clip_image.calls > 0  # both clip terms embed the swapped image


def test_non_finite_loss_aborts_with_diagnostics(corpus):
    trainer = Trainer(_cfg())
    with torch.no_grad():
        trainer.model.decoder.to_rgb.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss) as err:
        trainer.train_step(PairDataset(corpus, seed=0).batch(0, 2))
    assert err.value.term and trainer.step == 0


# -- checkpoints ---------------------------------------------------------------------------------


def test_checkpoint_round_trips_are_bit_identical(corpus, tmp_path):
    trainer = Trainer(_cfg())
    ds = PairDataset(corpus, seed=0)
    for stage, steps in (("fresh", 0), ("mid", 3), ("post", 3)):
        for _ in range(steps):
            trainer.train_step(ds.batch(trainer.step, 2))
        path = save_checkpoint(trainer, tmp_path / f"{stage}.pt")
        restored = trainer_from_checkpoint(path)
        assert restored.step == trainer.step
        assert torch.equal(_probe_out(restored), _probe_out(trainer)), stage


def test_checkpoint_rejects_foreign_files(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "x.pt")


def test_resume_with_different_config_is_rejected(corpus, tmp_path):
    path = save_checkpoint(Trainer(_cfg()), tmp_path / "c.pt")
    with pytest.raises(ResumeMismatch):
        Trainer(_cfg(lr0=0.002)).load_state(load_checkpoint(path))


# -- train loop ------------------------------------------------------------------------------------


def test_train_writes_monotone_metrics_and_epoch_checkpoints(corpus, tmp_path):
    cfg = _cfg(epochs=2)
    result = train(cfg, corpus, tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == list(range(1, 9))
    assert [r["epoch"] for r in lines] == [0] * 4 + [1] * 4
    for r in lines:
        assert abs(r["total"] - recombine(r, cfg.loss.weights)) < 1e-6
        assert all(math.isfinite(r[k]) for k in ("total", "d_loss", "lr"))
    assert (tmp_path / "checkpoints" / "epoch_000.pt").exists()
    assert (tmp_path / "checkpoints" / "epoch_001.pt").exists()
    assert load_checkpoint(result.checkpoint)["step"] == 8


def test_lr_follows_schedule_in_the_loop(corpus, tmp_path):
    cfg = _cfg(epochs=6, steps_per_epoch=1, decay_every_epochs=5)
    result = train(cfg, corpus, tmp_path)
    lrs = [r["lr"] for r in result.metrics]
    assert lrs == pytest.approx([0.01] * 5 + [0.009])
    assert result.trainer.opt_g.param_groups[0]["lr"] == pytest.approx(0.009)


def test_resume_reproduces_unbroken_run(corpus, tmp_path):
    k = 3
    cfg = _cfg(epochs=4, steps_per_epoch=4, checkpoint_every=k)
    unbroken = train(cfg, corpus, tmp_path / "a").metrics
    train(cfg, corpus, tmp_path / "b", max_steps=k)
    resumed = train(cfg, corpus, tmp_path / "b", resume=tmp_path / "b" / "checkpoints" / "last.pt", max_steps=k + 10)
    assert [r["step"] for r in resumed.metrics] == list(range(k + 1, k + 11))
    for a, b in zip(unbroken[k : k + 10], resumed.metrics):
        assert a["step"] == b["step"]
        assert abs(a["total"] - b["total"]) < 1e-5
