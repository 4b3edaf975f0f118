"""Alternating critic / generator training with the cyclic second pass."""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig
from .data import PairDataset
from .encoders import build_suite, parameter_checksum
from .errors import CaiiSwapError, NonFiniteLoss, ResumeMismatch
from .losses import (
    clip_id_loss,
    clip_terms_enabled,
    clip_text_loss,
    critic_loss,
    cycle_loss,
    generator_adv_loss,
    id_swap_loss,
    masked_recon_loss,
    perceptual_loss,
    total_loss,
)
from .networks import PatchDiscriminator, SwapModel, reswap_cycle

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "caiiswap-checkpoint"
CHECKPOINT_VERSION = 1


def lr_at(epoch, train_cfg):
    """Step decay: ``lr0 * decay_factor ** (epoch // decay_every_epochs)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return train_cfg.lr0 * train_cfg.decay_factor ** (epoch // train_cfg.decay_every_epochs)


class Trainer:
    """Owns the generator, critic, optimizers and frozen encoders for one run."""

    def __init__(self, config, encoders=None):
        self.config = config.validate()
        torch.manual_seed(config.train.seed)
        self.encoders = encoders or build_suite(config.encoders)
        self.model = SwapModel(config.generator, config.fusion, self.encoders.identity)
        self.disc = PatchDiscriminator(config.discriminator)
        betas = tuple(config.train.betas)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=config.train.lr0, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=config.train.lr0, betas=betas)
        self.step = 0
        self.epoch = 0
        self.last_metrics = {}
        self.set_epoch(0)

    def set_epoch(self, epoch):
        self.epoch = epoch
        lr = lr_at(epoch, self.config.train)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def encoder_checksum(self):
        return parameter_checksum(*self.encoders.modules())

    def _check_finite(self, terms, extra=None):
        for name, value in terms.items():
            if torch.is_tensor(value) and not torch.isfinite(value).all():
                diag = {k: float(v.detach()) for k, v in terms.items() if torch.is_tensor(v)}
                diag.update(extra or {})
                raise NonFiniteLoss(name, float(value.detach()), diag)

    def train_step(self, batch):
        cfg = self.config
        enc = self.encoders
        x_s, x_t, m_t, captions = batch["source"], batch["target"], batch["mask"], batch["caption"]
        self.model.train()
        self.disc.train()

        # (1) swap
        with torch.no_grad():
            c_s = enc.identity(x_s)
        x_ts = self.model(x_s, x_t, c_s=c_s)

        # (2) critic update on real target vs detached swap
        self.disc.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss = critic_loss(self.disc(x_t), self.disc(x_ts.detach()), cfg.loss.gan_objective)
        self._check_finite({"d_loss": d_loss})
        d_loss.backward()
        if cfg.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.disc.parameters(), cfg.train.grad_clip)
        self.opt_d.step()

        # (3) cyclic pass through the same generator
        x_tst = reswap_cycle(x_ts, x_t, self.model)

        # (4) generator update on the weighted objective
        self.disc.requires_grad_(False)
        use_text, use_id = clip_terms_enabled(cfg.loss.ablation)
        zero = x_ts.new_zeros(())
        terms = {
            "id": id_swap_loss(x_ts, x_s, enc.identity, c_s=c_s),
            "rec": masked_recon_loss(x_ts, x_t, m_t),
            "cycle": cycle_loss(x_tst, x_t),
            "percept": perceptual_loss(x_ts, x_t, enc.perceptual),
            "adv_g": generator_adv_loss(self.disc(x_ts), cfg.loss.gan_objective),
            "clip_text": zero,
            "clip_id": zero,
        }
        tau_frac = 0.0
        if use_text:
            text = enc.text_embeddings(captions)
            terms["clip_text"], tau = clip_text_loss(x_ts, x_t, captions, enc.clip_image, enc.clip_text, text_emb=text)
            tau_frac = float(tau.mean())
        if use_id:
            terms["clip_id"] = clip_id_loss(x_ts, x_s, enc.clip_image)
        self._check_finite(terms, {"step": self.step, "d_loss": float(d_loss.detach())})
        breakdown = total_loss(terms, cfg.loss.weights, cfg.loss.ablation, tau_frac)
        self._check_finite({"total": breakdown.total})

        self.opt_g.zero_grad(set_to_none=True)
        breakdown.total.backward()
        if cfg.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.train.grad_clip)
        self.opt_g.step()
        self.disc.requires_grad_(True)

        self.step += 1
        self.last_metrics = {**breakdown.as_floats(), "d_loss": float(d_loss.detach())}
        return breakdown

    # -- checkpoints ------------------------------------------------------

    def state(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "step": self.step,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "param_manifest": {
                f"{prefix}.{name}": [list(t.shape), str(t.dtype)]
                for prefix, module in (("model", self.model), ("disc", self.disc))
                for name, t in module.state_dict().items()
            },
            "model": self.model.state_dict(),
            "disc": self.disc.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "metrics": dict(self.last_metrics),
            "torch_rng": torch.get_rng_state(),
        }

    def load_state(self, ckpt, strict_config=True):
        if strict_config and ckpt["config_hash"] != self.config.hash():
            raise ResumeMismatch(
                f"checkpoint config hash {ckpt['config_hash']} != current {self.config.hash()}"
            )
        self.model.load_state_dict(ckpt["model"])
        self.disc.load_state_dict(ckpt["disc"])
        self.opt_g.load_state_dict(ckpt["opt_g"])
        self.opt_d.load_state_dict(ckpt["opt_d"])
        self.step = int(ckpt["step"])
        self.set_epoch(int(ckpt["epoch"]))
        self.last_metrics = dict(ckpt.get("metrics", {}))
        torch.set_rng_state(ckpt["torch_rng"])
        return self


def save_checkpoint(trainer, path):
    """Single-file archive (``torch.save`` zip container), written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(trainer.state(), tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CaiiSwapError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if int(ckpt.get("version", 0)) != CHECKPOINT_VERSION:
        raise CaiiSwapError(f"unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def trainer_from_checkpoint(path, encoders=None):
    ckpt = load_checkpoint(path)
    trainer = Trainer(RunConfig.from_dict(ckpt["config"]), encoders=encoders)
    return trainer.load_state(ckpt, strict_config=False)


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: list
    trainer: Trainer


def steps_per_epoch(config, manifest):
    return config.train.steps_per_epoch or max(1, len(manifest) // config.train.batch_size)


def train(config, manifest, out_dir, resume=None, max_steps=None, encoders=None):
    """Run (or resume) training, writing checkpoints and ``metrics.jsonl`` to ``out_dir``.

    ``max_steps`` stops early after that global step (used to pause a run).
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config, encoders=encoders)
    if resume is not None:
        trainer.load_state(load_checkpoint(resume))
    dataset = PairDataset(manifest, seed=config.train.seed, p_same=config.train.p_same)
    spe = steps_per_epoch(config, manifest)
    last_step = config.train.epochs * spe
    if max_steps is not None:
        last_step = min(last_step, max_steps)
    frozen = trainer.encoder_checksum()

    metrics = []
    ckpt_path = out / "checkpoints" / "last.pt"
    with open(out / "metrics.jsonl", "a", encoding="utf-8") as log_fh:
        while trainer.step < last_step:
            epoch = trainer.step // spe
            lr = trainer.set_epoch(epoch)
            batch = dataset.batch(trainer.step, config.train.batch_size)
            trainer.train_step(batch)
            rec = {"step": trainer.step, "epoch": epoch, "lr": lr, **trainer.last_metrics}
            metrics.append(rec)
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()
            boundary = trainer.step % spe == 0
            periodic = config.train.checkpoint_every and trainer.step % config.train.checkpoint_every == 0
            if boundary or periodic:
                save_checkpoint(trainer, ckpt_path)
                if boundary:
                    if trainer.encoder_checksum() != frozen:
                        raise CaiiSwapError("frozen encoder parameters changed during training")
                    save_checkpoint(trainer, out / "checkpoints" / f"epoch_{epoch:03d}.pt")
    save_checkpoint(trainer, ckpt_path)
    return TrainResult(ckpt_path, metrics, trainer)
