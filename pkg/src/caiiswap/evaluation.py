"""Quantitative evaluation: identity retrieval, CSIM, pose / expression error,
FID and per-image latency, plus the two dataset protocols.

Protocols
---------
``ffpp_style``
    Every identity label is a "video". Up to ``frames_per_video`` frames are
    sampled per video. For each (source video, target video) pair, the
    first sampled source frame is swapped onto every sampled target frame.
    Swaps are scored by nearest-neighbour retrieval against a gallery of all
    sampled frames.
``mpie_style``
    ``n_sources`` source faces are drawn once; every manifest entry is a
    target. Identity is scored with CSIM instead of retrieval.
"""

import json
import logging
import platform
import statistics
import subprocess
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import IDENTITY_SIZE, load_face, resize_image
from .errors import ConfigError, EmptyGallery, ShapeMismatch, TooFewSamples

log = logging.getLogger(__name__)

PROTOCOLS = ("ffpp_style", "mpie_style")


def _np(x):
    if torch.is_tensor(x):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _unit_rows(x):
    x = _np(x)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if (n == 0).any():
        raise ValueError("zero embedding")
    return x / n


def _embed_identity(images, backend):
    with torch.no_grad():
        return backend(resize_image(images, backend.input_size))


def csim_per_sample(x_ts, x_s, eval_backend, train_backend=None):
    if train_backend is not None and eval_backend is train_backend:
        raise ConfigError("encoders.eval_identity", "evaluation recognizer must differ from the training one")
    a = _unit_rows(_embed_identity(x_ts, eval_backend))
    b = _unit_rows(_embed_identity(x_s, eval_backend))
    return np.clip((a * b).sum(-1), -1.0, 1.0)


def csim(x_ts, x_s, eval_backend, train_backend=None):
    """Mean cosine similarity between recognizer embeddings of swaps and sources."""
    return float(csim_per_sample(x_ts, x_s, eval_backend, train_backend).mean())


@dataclass
class GalleryIndex:
    frame_ids: list
    labels: list
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = _np(self.embeddings)
        if len(self.labels) == 0 or self.embeddings.shape[0] == 0:
            raise EmptyGallery("gallery has no entries")
        if self.embeddings.ndim != 2 or not (len(self.frame_ids) == len(self.labels) == self.embeddings.shape[0]):
            raise ShapeMismatch("gallery ids, labels and embeddings must align")


def build_gallery(images, labels, frame_ids, backend):
    return GalleryIndex(list(frame_ids), list(labels), _embed_identity(images, backend))


def nearest_labels(query_embeddings, gallery):
    """Label of the highest-cosine gallery entry per query (first index wins ties)."""
    q = _unit_rows(query_embeddings)
    g = _unit_rows(gallery.embeddings)
    if q.shape[1] != g.shape[1]:
        raise ShapeMismatch(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    best = np.argmax(q @ g.T, axis=1)
    return [gallery.labels[i] for i in best]


def id_retrieval(query_embeddings, source_labels, gallery):
    """Percent of queries whose nearest gallery entry carries their source label."""
    if gallery is None or len(gallery.labels) == 0:
        raise EmptyGallery("gallery has no entries")
    if len(source_labels) == 0:
        raise TooFewSamples("no swapped images to score")
    hits = sum(p == t for p, t in zip(nearest_labels(query_embeddings, gallery), source_labels))
    return 100.0 * hits / len(source_labels)


def _mean_l2(a, b):
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=-1).mean())


def pose_error(x_ts_set, x_t_set, pose_backend):
    """Mean L2 distance in degrees between (yaw, pitch, roll) estimates."""
    with torch.no_grad():
        return _mean_l2(pose_backend(x_ts_set), pose_backend(x_t_set))


def expr_error(x_ts_set, x_t_set, expr_backend):
    with torch.no_grad():
        return _mean_l2(expr_backend(x_ts_set), expr_backend(x_t_set))


# ---------------------------------------------------------------------------
# FID


def _sqrtm_psd(mat):
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(cov_a, cov_b):
    """tr((A B)^(1/2)) via the symmetric form A^(1/2) B A^(1/2), eigenvalues clipped at 0."""
    ra = _sqrtm_psd(cov_a)
    m = ra @ cov_b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_distance(feats_a, feats_b):
    a, b = _np(feats_a), _np(feats_b)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise TooFewSamples("FID needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch("feature dimensions differ")
    if min(a.shape[0], b.shape[0]) < a.shape[1]:
        warnings.warn(
            f"FID with {min(a.shape[0], b.shape[0])} samples < feature dim {a.shape[1]}: covariance is rank-deficient",
            RuntimeWarning,
            stacklevel=2,
        )
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * trace_sqrt_product(cov_a, cov_b))
    return max(d, 0.0)


def extract_fid_features(images, backend, batch_size=32):
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            out.append(_np(backend(images[i : i + batch_size])))
    return np.concatenate(out)


def fid(set_a, set_b, fid_backend, batch_size=32):
    if set_a.shape[0] < 2 or set_b.shape[0] < 2:
        raise TooFewSamples("FID needs at least 2 images per set")
    return frechet_distance(extract_fid_features(set_a, fid_backend, batch_size),
                            extract_fid_features(set_b, fid_backend, batch_size))


# ---------------------------------------------------------------------------
# speed


def device_descriptor(device=None):
    device = torch.device(device or "cpu")
    if device.type == "cuda":  # pragma: no cover
        return f"cuda:{torch.cuda.get_device_name(device)}"
    return f"cpu:{platform.processor() or platform.machine()}:threads={torch.get_num_threads()}"


@dataclass
class SpeedReport:
    ms_per_image: float
    samples_ms: list
    device: str
    input_shape: list


def bench_speed(model, n_warmup=3, n_iters=20, x_s=None, x_t=None, clock=time.perf_counter):
    """Median wall-clock milliseconds per swap, after discarding warm-up calls."""
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if x_t is None:
        x_t = torch.zeros(1, 3, 256, 256)
    if x_s is None:
        x_s = torch.zeros(1, 3, model.identity_size, model.identity_size)
    model.eval()
    samples = []
    with torch.no_grad():
        for i in range(n_warmup + n_iters):
            t0 = clock()
            model(x_s, x_t)
            dt = (clock() - t0) * 1000.0 / x_t.shape[0]
            if i >= n_warmup:
                samples.append(dt)
    return SpeedReport(statistics.median(samples), samples, device_descriptor(x_t.device), list(x_t.shape))


# ---------------------------------------------------------------------------
# protocols


@dataclass
class MetricReport:
    protocol: str
    n_samples: int
    id_retrieval: float = None
    csim: float = None
    pose_error: float = None
    expr_error: float = None
    fid: float = None
    ms_per_image: float = None
    device: str = ""
    config_hash: str = ""
    provenance: dict = field(default_factory=dict)

    def check(self):
        if self.id_retrieval is not None and not 0.0 <= self.id_retrieval <= 100.0:
            raise ValueError(f"id_retrieval out of range: {self.id_retrieval}")
        if self.csim is not None and not -1.0 <= self.csim <= 1.0:
            raise ValueError(f"csim out of range: {self.csim}")
        for name in ("pose_error", "expr_error", "fid", "ms_per_image"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        return self

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def git_revision(cwd=None):
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=cwd, capture_output=True, text=True, timeout=5, check=True
        )
        return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return None


def _stack_faces(entries, cache):
    faces = []
    for e in entries:
        key = str(e.image_path)
        if key not in cache:
            cache[key] = load_face(e.image_path).to_tensor()
        faces.append(cache[key])
    return torch.cat(faces)


def _sources(entries, cache, size=IDENTITY_SIZE):
    return resize_image(_stack_faces(entries, cache).double(), size).float()


def ffpp_pairs(manifest, eval_cfg):
    """(source_entry, target_entry) list for the ffpp-style protocol, plus the sampled frames."""
    rng = np.random.default_rng(eval_cfg.seed)
    videos = {}
    for e in manifest:
        videos.setdefault(e.identity_label, []).append(e)
    frames = {}
    for label in sorted(videos):
        items = videos[label]
        k = min(eval_cfg.frames_per_video, len(items))
        idx = np.sort(rng.choice(len(items), size=k, replace=False))
        frames[label] = [items[i] for i in idx]
    if eval_cfg.pairs:
        pairs = [tuple(p) for p in eval_cfg.pairs]
        unknown = {lab for p in pairs for lab in p} - set(frames)
        if unknown:
            raise ConfigError("eval.pairs", f"unknown identities {sorted(unknown)}")
    else:
        labels = sorted(frames)
        pairs = [(a, b) for a in labels for b in labels if a != b]
    swaps = [(frames[src][0], tgt_entry) for src, tgt in pairs for tgt_entry in frames[tgt]]
    return swaps, frames


def mpie_pairs(manifest, eval_cfg, source_manifest=None):
    pool = list(source_manifest or manifest)
    rng = np.random.default_rng(eval_cfg.seed)
    k = min(eval_cfg.n_sources, len(pool))
    sources = [pool[i] for i in np.sort(rng.choice(len(pool), size=k, replace=False))]
    return [(s, t) for s in sources for t in manifest]


def _run_swaps(model, pairs, batch_size, cache, clock):
    outs, times = [], []
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            x_s = _sources([s for s, _ in chunk], cache, model.identity_size)
            x_t = _stack_faces([t for _, t in chunk], cache)
            t0 = clock()
            outs.append(model(x_s, x_t))
            times.append((clock() - t0) * 1000.0 / len(chunk))
    return torch.cat(outs), times


def run_protocol(protocol, model, manifest, encoders, eval_cfg, config_hash="", source_manifest=None,
                 clock=time.perf_counter):
    """Swap every protocol pair with ``model`` and score the result."""
    if protocol not in PROTOCOLS:
        raise ConfigError("eval.protocol", f"must be one of {PROTOCOLS}")
    eval_cfg.validate()
    if encoders.eval_identity is model.identity_encoder:
        raise ConfigError("encoders.eval_identity", "evaluation recognizer must differ from the training one")
    model.eval()
    cache = {}
    if protocol == "ffpp_style":
        pairs, frames = ffpp_pairs(manifest, eval_cfg)
    else:
        pairs = mpie_pairs(manifest, eval_cfg, source_manifest)
    if not pairs:
        raise TooFewSamples("protocol produced no swap pairs")
    swapped, times = _run_swaps(model, pairs, eval_cfg.batch_size, cache, clock)
    targets = _stack_faces([t for _, t in pairs], cache)
    sources = _sources([s for s, _ in pairs], cache, encoders.eval_identity.input_size)

    report = MetricReport(protocol=protocol, n_samples=len(pairs), config_hash=config_hash)
    if protocol == "ffpp_style":
        gallery_entries = [e for label in sorted(frames) for e in frames[label]]
        gallery = build_gallery(
            _sources(gallery_entries, cache, encoders.eval_identity.input_size),
            [e.identity_label for e in gallery_entries],
            [e.image_id for e in gallery_entries],
            encoders.eval_identity,
        )
        report.id_retrieval = id_retrieval(
            _embed_identity(swapped, encoders.eval_identity), [s.identity_label for s, _ in pairs], gallery
        )
    report.csim = csim(swapped, sources, encoders.eval_identity)
    report.pose_error = pose_error(swapped, targets, encoders.pose)
    report.expr_error = expr_error(swapped, targets, encoders.expression)
    if len(pairs) >= 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            report.fid = fid(swapped, targets, encoders.fid, eval_cfg.batch_size)
    report.ms_per_image = float(statistics.median(times))
    report.device = device_descriptor()
    report.provenance = {"package_version": __version__, "git": git_revision()}
    return report.check()


__all__ = [
    "GalleryIndex",
    "MetricReport",
    "SpeedReport",
    "bench_speed",
    "build_gallery",
    "csim",
    "expr_error",
    "fid",
    "frechet_distance",
    "id_retrieval",
    "pose_error",
    "run_protocol",
]
