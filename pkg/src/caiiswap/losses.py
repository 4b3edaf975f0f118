"""Training objectives for the swap generator and the patch critic.

All L1 terms are element means. Cosine terms normalize internally; encoders
do not pre-normalize their embeddings. Source-side embeddings (x_s) are
always detached: only the swapped image is optimized.
"""

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .data import resize_image
from .errors import ConfigError, EmptyText, ShapeMismatch, ZeroVector

ABLATIONS = ("w_clips", "clip_wo_text", "clip_wo_id", "wo_clips")
GAN_OBJECTIVES = ("lsgan", "hinge", "bce")


@dataclass
class LossWeights:
    lambda_id: float = 10.0
    lambda_ap: float = 0.5
    lambda_adv: float = 1.0
    lambda_clip: float = 1.0

    def validate(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ConfigError(f"loss.{k}", f"must be >= 0, got {v}")
        return self


@dataclass
class LossBreakdown:
    id: torch.Tensor
    rec: torch.Tensor
    cycle: torch.Tensor
    percept: torch.Tensor
    adv_g: torch.Tensor
    clip_text: torch.Tensor
    clip_id: torch.Tensor
    total: torch.Tensor
    tau_active_fraction: float = 0.0

    @property
    def ap(self):
        return self.rec + self.cycle + self.percept

    def as_floats(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {tuple(a.shape)} vs {tuple(b.shape)}")


def cosine_similarity(a, b):
    """Cosine over the last dim; raises ZeroVector on a zero-norm operand."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroVector("cosine of a zero vector is undefined")
    return (a * b).sum(-1) / (na * nb)


def cosine_distance_loss(a, b):
    """``1 - cos(a, b)``, averaged over a leading batch dimension if present."""
    return (1.0 - cosine_similarity(a, b)).mean()


def id_swap_loss(x_ts, x_s, identity_backend, c_s=None):
    """Identity distance between swap and source under the frozen recognizer.

    ``x_ts`` is resized to the recognizer resolution; pass ``c_s`` to reuse a
    source code already computed for the forward pass.
    """
    if c_s is None:
        with torch.no_grad():
            c_s = identity_backend(x_s)
    c_ts = identity_backend(resize_image(x_ts, identity_backend.input_size))
    return cosine_distance_loss(c_ts, c_s.detach().to(c_ts.dtype))


def masked_recon_loss(x_ts, x_t, m_t):
    """Mean |(1 - m) * (x_ts - x_t)| over all elements; ``m_t`` is 1 on the face."""
    _check_same_shape(x_ts, x_t)
    if m_t.dim() != x_t.dim() or m_t.shape[-2:] != x_t.shape[-2:]:
        raise ShapeMismatch(f"mask {tuple(m_t.shape)} does not match image {tuple(x_t.shape)}")
    return ((1.0 - m_t) * (x_ts - x_t)).abs().mean()


def cycle_loss(x_tst, x_t):
    _check_same_shape(x_tst, x_t)
    return (x_tst - x_t).abs().mean()


def perceptual_loss(x_ts, x_t, perceptual_backend, target_feats=None):
    feats = perceptual_backend(x_ts)
    if target_feats is None:
        with torch.no_grad():
            target_feats = perceptual_backend(x_t)
    if len(feats) != len(target_feats):
        raise ShapeMismatch("perceptual stacks differ in depth")
    return sum((a - b.detach()).abs().mean() for a, b in zip(feats, target_feats)) / len(feats)


def attribute_preserving_loss(x_ts, x_tst, x_t, m_t, backend):
    return masked_recon_loss(x_ts, x_t, m_t) + cycle_loss(x_tst, x_t) + perceptual_loss(x_ts, x_t, backend)


def clip_text_gate(s_swap, s_tgt):
    """Indicator: 1 where the target matches its caption strictly better than the swap."""
    return (s_tgt.detach() > s_swap.detach()).to(s_swap.dtype)


def clip_text_from_embeddings(img_swap, img_tgt, text):
    s_swap = cosine_similarity(img_swap, text)
    s_tgt = cosine_similarity(img_tgt, text)
    tau = clip_text_gate(s_swap, s_tgt)
    return (tau * (1.0 - s_swap)).mean(), tau


def clip_text_loss(x_ts, x_t, t_t, clip_image, clip_text, text_emb=None):
    """Gated image-to-caption loss. Returns ``(loss, tau)`` with one tau per sample."""
    if text_emb is None:
        captions = [t_t] if isinstance(t_t, str) else list(t_t)
        if any(not isinstance(c, str) or not c.strip() for c in captions):
            raise EmptyText("caption text is empty")
        with torch.no_grad():
            text_emb = clip_text(captions)
    img_swap = clip_image(x_ts)
    with torch.no_grad():
        img_tgt = clip_image(x_t)
    text_emb = text_emb.to(img_swap.dtype)
    if text_emb.shape[0] == 1 and img_swap.shape[0] > 1:
        text_emb = text_emb.expand(img_swap.shape[0], -1)
    return clip_text_from_embeddings(img_swap, img_tgt, text_emb)


def clip_id_loss(x_ts, x_s, clip_image):
    with torch.no_grad():
        e_s = clip_image(x_s)
    return cosine_distance_loss(clip_image(x_ts), e_s.detach())


def adversarial_losses(real, fake, objective="lsgan"):
    """(generator loss, critic loss) over patch logits.

    ``fake`` should carry generator gradients for the generator loss; the
    critic loss is computed from whatever graph ``fake`` has (detach it for a
    critic update).
    """
    if objective == "lsgan":
        d = 0.5 * (((real - 1) ** 2).mean() + (fake**2).mean())
        g = ((fake - 1) ** 2).mean()
    elif objective == "hinge":
        d = F.relu(1 - real).mean() + F.relu(1 + fake).mean()
        g = -fake.mean()
    elif objective == "bce":
        d = 0.5 * (
            F.binary_cross_entropy_with_logits(real, torch.ones_like(real))
            + F.binary_cross_entropy_with_logits(fake, torch.zeros_like(fake))
        )
        g = F.binary_cross_entropy_with_logits(fake, torch.ones_like(fake))
    else:
        raise ConfigError("loss.gan_objective", f"must be one of {GAN_OBJECTIVES}")
    return g, d


def generator_adv_loss(fake, objective="lsgan"):
    return adversarial_losses(fake.detach(), fake, objective)[0]


def critic_loss(real, fake, objective="lsgan"):
    return adversarial_losses(real, fake, objective)[1]


def clip_terms_enabled(ablation):
    """(text term on, id term on) for an ablation name."""
    if ablation not in ABLATIONS:
        raise ConfigError("loss.ablation", f"must be one of {ABLATIONS}")
    return ablation in ("w_clips", "clip_wo_id"), ablation in ("w_clips", "clip_wo_text")


def total_loss(terms, weights, ablation="w_clips", tau_active_fraction=0.0):
    """Weighted recombination; disabled CLIP terms are reported and counted as 0.

    ``terms`` maps id, rec, cycle, percept, adv_g, clip_text, clip_id to scalars.
    """
    use_text, use_id = clip_terms_enabled(ablation)
    t = dict(terms)
    ref = next(v for v in t.values() if torch.is_tensor(v)) if any(torch.is_tensor(v) for v in t.values()) else None

    def as_t(v):
        if torch.is_tensor(v):
            return v
        return torch.tensor(float(v), dtype=ref.dtype if ref is not None else torch.float64)

    vals = {k: as_t(t.get(k, 0.0)) for k in ("id", "rec", "cycle", "percept", "adv_g", "clip_text", "clip_id")}
    if not use_text:
        vals["clip_text"] = torch.zeros_like(vals["clip_text"])
    if not use_id:
        vals["clip_id"] = torch.zeros_like(vals["clip_id"])
    # accumulate in float64 so the logged total reproduces from logged components
    d = {k: v.double() for k, v in vals.items()}
    total = (
        weights.lambda_id * d["id"]
        + weights.lambda_ap * (d["rec"] + d["cycle"] + d["percept"])
        + weights.lambda_adv * d["adv_g"]
        + weights.lambda_clip * (d["clip_text"] + d["clip_id"])
    )
    return LossBreakdown(total=total, tau_active_fraction=float(tau_active_fraction), **vals)


def recombine(breakdown, weights):
    """Recompute the weighted total from a breakdown's reported components (floats)."""
    b = breakdown.as_floats() if isinstance(breakdown, LossBreakdown) else breakdown
    return (
        weights.lambda_id * b["id"]
        + weights.lambda_ap * (b["rec"] + b["cycle"] + b["percept"])
        + weights.lambda_adv * b["adv_g"]
        + weights.lambda_clip * (b["clip_text"] + b["clip_id"])
    )
