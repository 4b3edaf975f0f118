"""Frozen perception backends: identity, CLIP image/text, perceptual, pose,
expression and FID features.

Every role has a deterministic stub (fixed-seed random projection network,
differentiable, tanh activations) and a file-backed variant that loads a
TorchScript archive. Backends never train: parameters have
``requires_grad=False`` and ``train()`` is a no-op, but gradients still flow
to their inputs.
"""

import hashlib
import logging
from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import IDENTITY_SIZE, TARGET_SIZE, AlignedFace, resize_image
from .errors import BackendNotLoaded, ConfigError, EmptyText, ShapeMismatch

log = logging.getLogger(__name__)

ROLES = ("identity", "eval_identity", "clip_image", "clip_text", "perceptual", "pose", "expression", "fid")
MIN_NORM = 1e-6


def _as_batch(image):
    if isinstance(image, AlignedFace):
        return image.to_tensor()
    if image.dim() == 3:
        return image[None]
    return image


class FrozenBackend(nn.Module):
    """Base for all backends: frozen params, call counter, input checks."""

    role = None
    strict_size = False  # identity encoders reject wrong sizes instead of resizing

    def __init__(self, input_size=None, in_channels=3):
        super().__init__()
        self.input_size = input_size
        self.in_channels = in_channels
        self.calls = 0
        self.loaded = True

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self.train(False)

    def train(self, mode=True):
        # set flags directly: exported graph modules refuse train()/eval()
        for m in self.modules():
            m.training = False
        return self

    def prepare(self, x):
        if not self.loaded:
            raise BackendNotLoaded(f"{self.role} backend not loaded")
        x = _as_batch(x)
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"{self.role}: expected N x {self.in_channels} x H x W, got {tuple(x.shape)}")
        if self.input_size is not None and x.shape[-1] != self.input_size:
            if self.strict_size or x.shape[-1] != x.shape[-2]:
                raise ShapeMismatch(f"{self.role}: expected {self.input_size} px input, got {tuple(x.shape[-2:])}")
            x = resize_image(x, self.input_size)
        ref = next(self.parameters(), None)
        if ref is not None and x.dtype != ref.dtype:
            x = x.to(ref.dtype)
        return x

    def forward(self, x):
        self.calls += 1
        return self.run(self.prepare(x))

    def run(self, x):
        raise NotImplementedError


def _seeded_generator(seed, role):
    digest = hashlib.sha256(f"{role}:{seed}".encode()).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(digest[:8], "little"))
    return g


def _init_fixed(module, g):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) / fan_in**0.5)
                if m.bias is not None:
                    m.bias.zero_()


def _floor_norm(v):
    """Guarantee the nonzero-embedding contract without touching ordinary outputs."""
    norms = v.norm(dim=-1, keepdim=True)
    if bool((norms < MIN_NORM).any()):
        fallback = torch.zeros_like(v)
        fallback[..., 0] = MIN_NORM
        v = torch.where(norms < MIN_NORM, fallback, v)
    return v


class _ProjectionNet(nn.Module):
    """Strided 3x3 conv stages with tanh, flattened into a random linear map."""

    def __init__(self, in_channels, input_size, out_dim, stages=3, width=8):
        super().__init__()
        layers, c, s = [], in_channels, input_size
        for _ in range(stages):
            if s <= 1:
                break
            layers += [nn.Conv2d(c, width, 3, stride=2, padding=1, bias=False), nn.Tanh()]
            c, s = width, (s + 1) // 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(c * s * s, out_dim, bias=False)

    def forward(self, x):
        return self.head(self.body(x).flatten(1))


# ---------------------------------------------------------------------------
# stubs


class StubIdentityEncoder(FrozenBackend):
    role = "identity"
    strict_size = True

    def __init__(self, dim=512, input_size=IDENTITY_SIZE, in_channels=3, seed=0, role="identity"):
        super().__init__(input_size, in_channels)
        self.role = role
        self.dim = dim
        self.net = _ProjectionNet(in_channels, input_size, dim)
        _init_fixed(self, _seeded_generator(seed, role))
        self.freeze()

    def run(self, x):
        return _floor_norm(self.net(x))


class StubClipImageEncoder(FrozenBackend):
    role = "clip_image"

    def __init__(self, dim=512, input_size=64, in_channels=3, seed=0):
        super().__init__(input_size, in_channels)
        self.dim = dim
        self.net = _ProjectionNet(in_channels, input_size, dim)
        _init_fixed(self, _seeded_generator(seed, self.role))
        self.freeze()

    def run(self, x):
        return _floor_norm(self.net(x))


def tokenize(text):
    return text.lower().split()


class StubClipTextEncoder(FrozenBackend):
    """Hashed-token embeddings fed through a fixed tanh recurrence (order-sensitive)."""

    role = "clip_text"

    def __init__(self, dim=512, vocab=4096, hidden=128, seed=0):
        super().__init__()
        self.dim = dim
        self.vocab = vocab
        self.embed = nn.Embedding(vocab, hidden)
        self.recur = nn.Linear(hidden, hidden, bias=False)
        self.out = nn.Linear(hidden, dim, bias=False)
        g = _seeded_generator(seed, self.role)
        _init_fixed(self, g)
        with torch.no_grad():
            self.embed.weight.copy_(torch.randn(self.embed.weight.shape, generator=g))
            q, _ = torch.linalg.qr(torch.randn(hidden, hidden, generator=g))
            self.recur.weight.copy_(0.9 * q)
        self.freeze()

    def token_ids(self, text):
        return [
            int.from_bytes(hashlib.sha256(tok.encode("utf-8")).digest()[:8], "little") % self.vocab
            for tok in tokenize(text)
        ]

    def forward(self, texts):
        if isinstance(texts, str):
            texts = [texts]
        self.calls += 1
        outs = []
        for text in texts:
            ids = self.token_ids(text) if isinstance(text, str) else []
            if not ids:
                raise EmptyText("caption text is empty")
            h = torch.zeros(self.embed.weight.shape[1], dtype=self.embed.weight.dtype)
            for e in self.embed.weight[ids]:
                h = torch.tanh(self.recur(h) + e)
            outs.append(self.out(h))
        return _floor_norm(torch.stack(outs))


class StubPerceptual(FrozenBackend):
    """Three stride-2 stages; a 256 px input gives maps at 128 / 64 / 32."""

    role = "perceptual"

    def __init__(self, widths=(8, 16, 32), in_channels=3, seed=0):
        super().__init__(None, in_channels)
        chans = (in_channels,) + tuple(widths)
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, bias=False), nn.Tanh())
            for i in range(len(widths))
        )
        _init_fixed(self, _seeded_generator(seed, self.role))
        self.freeze()

    def run(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def _pooled(x, cells):
    return F.adaptive_avg_pool2d(x, cells).flatten(1)


class StubPose(FrozenBackend):
    """Yaw/pitch/roll in degrees; exactly zero on :func:`synthetic.canonical_face`."""

    role = "pose"

    def __init__(self, cells=8, in_channels=3, seed=0):
        super().__init__(None, in_channels)
        from .synthetic import canonical_face

        self.cells = cells
        self.proj = nn.Linear(in_channels * cells * cells, 3, bias=False)
        _init_fixed(self, _seeded_generator(seed, self.role))
        # pooled the same way (and in the same precision) as run() sees it
        face = canonical_face().to_tensor()
        self.register_buffer("reference", _pooled(face, cells))
        self.register_buffer("reference64", _pooled(face.double(), cells))
        self.freeze()

    def run(self, x):
        ref = self.reference64 if x.dtype == torch.float64 else self.reference.to(x.dtype)
        d = _pooled(x, self.cells) - ref
        return 90.0 * torch.tanh(self.proj(d))


class StubExpression(FrozenBackend):
    role = "expression"

    def __init__(self, dim=64, cells=16, in_channels=3, seed=0):
        super().__init__(None, in_channels)
        self.cells = cells
        self.dim = dim
        self.proj = nn.Linear(in_channels * cells * cells, dim, bias=False)
        _init_fixed(self, _seeded_generator(seed, self.role))
        self.freeze()

    def run(self, x):
        return self.proj(_pooled(x, self.cells))


class StubFid(FrozenBackend):
    role = "fid"

    def __init__(self, dim=2048, cells=16, in_channels=3, seed=0):
        super().__init__(None, in_channels)
        self.cells = cells
        self.dim = dim
        self.proj = nn.Linear(in_channels * cells * cells, dim, bias=False)
        _init_fixed(self, _seeded_generator(seed, self.role))
        self.freeze()

    def run(self, x):
        return torch.tanh(self.proj(_pooled(x, self.cells)))


# ---------------------------------------------------------------------------
# file-backed backends


class ExportedBackend(FrozenBackend):
    """``torch.export`` archive (``.pt2``, written by ``torch.export.save``) with input renormalization.

    Images arrive in [-1, 1]; they are mapped to [0, 1], resized to
    ``input_size`` and standardized with ``mean``/``std`` before the call.
    """

    def __init__(self, role, weights_path, input_size=None, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
        super().__init__(input_size, 3)
        self.role = role
        self.strict_size = False
        self.weights_path = str(weights_path)
        try:
            self.module = torch.export.load(self.weights_path).module()
        except (RuntimeError, ValueError, OSError, KeyError) as exc:
            raise BackendNotLoaded(f"{role}: cannot load {weights_path}: {exc}") from exc
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.freeze()

    def run(self, x):
        x = ((x + 1) / 2 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = self.module(x)
        if self.role == "perceptual":
            return list(out)
        return out


class HFClipImage(FrozenBackend):
    """CLIP vision tower from a local Hugging Face checkpoint directory."""

    role = "clip_image"

    def __init__(self, weights_path, input_size=224):
        super().__init__(input_size, 3)
        try:
            from transformers import CLIPModel
        except ImportError as exc:  # pragma: no cover
            raise BackendNotLoaded("transformers is not installed") from exc
        self.model = CLIPModel.from_pretrained(weights_path)
        self.register_buffer("mean", torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1))
        self.freeze()

    def run(self, x):
        x = ((x + 1) / 2 - self.mean) / self.std
        return self.model.get_image_features(pixel_values=x)


class HFClipText(FrozenBackend):
    role = "clip_text"

    def __init__(self, weights_path):
        super().__init__()
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover
            raise BackendNotLoaded("transformers is not installed") from exc
        self.model = CLIPModel.from_pretrained(weights_path)
        self.tokenizer = CLIPTokenizer.from_pretrained(weights_path)
        self.freeze()

    def forward(self, texts):
        if isinstance(texts, str):
            texts = [texts]
        if any(not t or not t.strip() for t in texts):
            raise EmptyText("caption text is empty")
        self.calls += 1
        tok = self.tokenizer(list(texts), padding=True, truncation=True, return_tensors="pt")
        return self.model.get_text_features(**tok)


# ---------------------------------------------------------------------------
# registry

_STUBS = {
    "identity": lambda d: StubIdentityEncoder(**d),
    "eval_identity": lambda d: StubIdentityEncoder(role="eval_identity", **{"seed": 1, **d}),
    "clip_image": lambda d: StubClipImageEncoder(**d),
    "clip_text": lambda d: StubClipTextEncoder(**d),
    "perceptual": lambda d: StubPerceptual(**d),
    "pose": lambda d: StubPose(**d),
    "expression": lambda d: StubExpression(**d),
    "fid": lambda d: StubFid(**d),
}


def build_backend(spec):
    """Build one backend from ``{role, kind: stub|file|hf_clip, weights_path?, dims...}``."""
    spec = dict(spec)
    role = spec.pop("role", None)
    kind = spec.pop("kind", "stub")
    if role not in ROLES:
        raise ConfigError("encoders.role", f"unknown role {role!r}")
    if kind == "stub":
        if "dims" in spec:
            spec["dim"] = spec.pop("dims")
        try:
            return _STUBS[role](spec)
        except TypeError as exc:
            raise ConfigError(f"encoders.{role}", str(exc)) from None
    if kind == "file":
        if "weights_path" not in spec:
            raise ConfigError(f"encoders.{role}.weights_path", "required for kind 'file'")
        return ExportedBackend(role, spec.pop("weights_path"), **spec)
    if kind == "hf_clip":
        if role == "clip_image":
            return HFClipImage(spec["weights_path"], spec.get("input_size", 224))
        if role == "clip_text":
            return HFClipText(spec["weights_path"])
        raise ConfigError(f"encoders.{role}.kind", "hf_clip only serves clip_image / clip_text")
    raise ConfigError(f"encoders.{role}.kind", f"unknown kind {kind!r}")


@dataclass
class EncoderSuite:
    identity: FrozenBackend
    eval_identity: FrozenBackend
    clip_image: FrozenBackend
    clip_text: FrozenBackend
    perceptual: FrozenBackend
    pose: FrozenBackend
    expression: FrozenBackend
    fid: FrozenBackend
    _text_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.eval_identity is self.identity:
            raise ConfigError("encoders.eval_identity", "must be a different backend instance than identity")

    def modules(self):
        return [getattr(self, f.name) for f in fields(self) if f.name in ROLES]

    def double(self):
        for m in self.modules():
            m.double()
        self._text_cache.clear()
        return self

    def text_embeddings(self, captions):
        """CLIP text embeddings; cached per caption since the text branch carries no gradient."""
        missing = [c for c in dict.fromkeys(captions) if c not in self._text_cache]
        if missing:
            with torch.no_grad():
                emb = self.clip_text(missing)
            for c, e in zip(missing, emb):
                self._text_cache[c] = e
        return torch.stack([self._text_cache[c] for c in captions])


def build_suite(config=None):
    """Suite from a list/dict of backend specs; unspecified roles get stubs."""
    config = config or {}
    if isinstance(config, dict):
        specs = {role: {"role": role, **(spec or {})} for role, spec in config.items()}
    else:
        specs = {}
        for spec in config:
            if spec.get("role") in specs:
                raise ConfigError("encoders", f"duplicate role {spec.get('role')!r}")
            specs[spec.get("role")] = spec
    unknown = set(specs) - set(ROLES)
    if unknown:
        raise ConfigError("encoders", f"unknown roles {sorted(unknown)}")
    return EncoderSuite(**{role: build_backend(specs.get(role, {"role": role})) for role in ROLES})


# ---------------------------------------------------------------------------
# functional surface


def check_embedding(v):
    if not torch.isfinite(v).all():
        raise FloatingPointError("non-finite embedding")
    if (v.norm(dim=-1) < MIN_NORM).any():
        raise FloatingPointError("zero embedding")
    return v


def encode_identity(face, backend):
    x = _as_batch(face)
    if x.shape[-1] != getattr(backend, "input_size", x.shape[-1]):
        raise ShapeMismatch(f"identity encoder expects {backend.input_size} px, got {x.shape[-1]}")
    return backend(x)


def clip_encode_image(image, backend):
    return backend(_as_batch(image))


def clip_encode_text(caption, backend):
    if not isinstance(caption, str) or not caption.strip():
        raise EmptyText("caption text is empty")
    return backend([caption])[0]


def perceptual_features(image, backend):
    return backend(_as_batch(image))


def estimate_pose(image, backend):
    """N x 3 tensor of (yaw, pitch, roll) degrees."""
    return backend(_as_batch(image))


def estimate_expression(image, backend):
    return backend(_as_batch(image))


def fid_features(image, backend):
    return backend(_as_batch(image))


def parameter_checksum(*modules):
    """SHA-256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in list(m.named_parameters()) + list(m.named_buffers()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


__all__ = [
    "TARGET_SIZE",
    "EncoderSuite",
    "FrozenBackend",
    "build_backend",
    "build_suite",
    "clip_encode_image",
    "clip_encode_text",
    "encode_identity",
    "estimate_expression",
    "estimate_pose",
    "fid_features",
    "parameter_checksum",
    "perceptual_features",
]
