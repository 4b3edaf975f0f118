"""Face alignment, resizing, manifests and training-pair sampling.

Pixel contract: every image on the generator path is float32 H x W x 3 in
[-1, 1]. Encoders own any further renormalization.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import (
    DegenerateLandmarks,
    DuplicateId,
    InsufficientIdentities,
    MissingFile,
    OutOfBounds,
    ParseError,
    ShapeMismatch,
)

log = logging.getLogger(__name__)

TARGET_SIZE = 256
IDENTITY_SIZE = 112
VALID_RESOLUTIONS = (TARGET_SIZE, IDENTITY_SIZE)

# Standard 5-point recognizer template (eyes, nose tip, mouth corners) at 112 px.
_TEMPLATE_112 = np.array(
    [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ]
)


def canonical_landmarks(size=TARGET_SIZE):
    """Template landmark positions (5 x 2, x/y order) for a ``size`` crop."""
    return _TEMPLATE_112 * (size / IDENTITY_SIZE)


@dataclass
class AlignedFace:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] != px.shape[1]:
            raise ShapeMismatch(f"expected square H x W x 3 image, got {px.shape}")
        if px.shape[0] not in VALID_RESOLUTIONS:
            raise ShapeMismatch(f"resolution {px.shape[0]} not in {VALID_RESOLUTIONS}")
        if not np.all(np.isfinite(px)) or px.min() < -1.0 or px.max() > 1.0:
            raise ValueError("pixels must be finite and within [-1, 1]")
        self.pixels = px

    @property
    def resolution(self):
        return self.pixels.shape[0]

    def to_tensor(self):
        """1 x 3 x H x W float32 tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)))[None]

    @classmethod
    def from_tensor(cls, t):
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise ShapeMismatch("from_tensor expects a single image")
            t = t[0]
        arr = t.detach().cpu().float().clamp(-1, 1).numpy().transpose(1, 2, 0)
        return cls(arr)

    def to_uint8(self):
        return np.clip(np.rint((self.pixels + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class FaceMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.values = v.astype(np.float32)

    def to_tensor(self):
        return torch.from_numpy(self.values)[None, None]


@dataclass
class ManifestEntry:
    image_id: str
    image_path: Path
    mask_path: Path
    caption: str
    identity_label: str

    def to_record(self, base_dir=None):
        def rel(p):
            p = Path(p)
            if base_dir is not None:
                p = p.resolve()
                try:
                    return str(p.relative_to(base_dir))
                except ValueError:
                    pass
            return str(p)

        return {
            "image_id": self.image_id,
            "image_path": rel(self.image_path),
            "mask_path": rel(self.mask_path),
            "caption": self.caption,
            "identity_label": self.identity_label,
        }


@dataclass
class TrainingSample:
    source: AlignedFace
    target: AlignedFace
    mask: FaceMask
    caption: str
    same_identity: bool
    source_id: str = ""
    target_id: str = ""
    source_label: str = ""
    target_label: str = ""


# ---------------------------------------------------------------------------
# alignment


@dataclass
class SimilarityTransform:
    """``dst = scale * R @ src + t``; ``matrix`` is the 2 x 3 forward map."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def matrix(self):
        return np.hstack([self.scale * self.rotation, self.translation[:, None]])

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ (self.scale * self.rotation).T + self.translation

    def inverse_apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64) - self.translation
        return pts @ self.rotation / self.scale


def estimate_similarity(src, dst, rel_tol=1e-6):
    """Least-squares similarity transform mapping ``src`` points onto ``dst`` (Umeyama).

    Raises DegenerateLandmarks when the source points do not span two
    dimensions (coincident or collinear), since the rotation is then not
    determined by the face geometry.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ShapeMismatch(f"landmark arrays must be N x 2 and equal, got {src.shape} / {dst.shape}")
    n = src.shape[0]
    mu_s, mu_d = src.mean(0), dst.mean(0)
    sc, dc = src - mu_s, dst - mu_d
    sv = np.linalg.svd(sc, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= rel_tol * sv[0]:
        raise DegenerateLandmarks("landmarks are coincident or collinear")
    var_s = (sc**2).sum() / n
    cov = dc.T @ sc / n
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[1, 1] = -1
    rot = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s) / var_s)
    if not np.isfinite(scale) or scale <= 0:
        raise DegenerateLandmarks(f"non-positive similarity scale {scale}")
    trans = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, rot, trans)


def to_unit_range(raw):
    """uint8 image -> float in [-1, 1]."""
    raw = np.asarray(raw)
    if raw.dtype != np.uint8:
        raise TypeError(f"expected uint8 image, got {raw.dtype}")
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    return raw[..., :3].astype(np.float64) / 127.5 - 1.0


def align_and_crop(raw_image, landmarks, size=TARGET_SIZE, pad_fraction=0.25, return_transform=False):
    """Warp ``raw_image`` so its 5 landmarks land on the canonical template.

    ``landmarks`` are (x, y) pixel coordinates. Output pixels falling outside
    the raw image take the value -1 (black). The crop may extend past the
    image by at most ``pad_fraction`` of its larger side.
    """
    img = to_unit_range(raw_image)
    h, w = img.shape[:2]
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (5, 2):
        raise ShapeMismatch(f"expected 5 x 2 landmarks, got {lm.shape}")
    if (lm < 0).any() or (lm[:, 0] > w - 1).any() or (lm[:, 1] > h - 1).any():
        raise OutOfBounds("landmarks fall outside the raw image")
    tf = estimate_similarity(lm, canonical_landmarks(size))

    pad = pad_fraction * max(h, w)
    corners = np.array([[0, 0], [size - 1, 0], [0, size - 1], [size - 1, size - 1]], dtype=np.float64)
    src_corners = tf.inverse_apply(corners)
    if (
        (src_corners < -pad).any()
        or (src_corners[:, 0] > w - 1 + pad).any()
        or (src_corners[:, 1] > h - 1 + pad).any()
    ):
        raise OutOfBounds("crop window exceeds the padded raw image")

    ys, xs = np.mgrid[0:size, 0:size]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    # snap round-off so exact edge pixels are not treated as outside the image
    src = np.round(tf.inverse_apply(grid), 6)
    coords = [src[:, 1], src[:, 0]]
    out = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        out[..., c] = ndimage.map_coordinates(img[..., c], coords, order=1, mode="constant", cval=-1.0).reshape(
            size, size
        )
    face = AlignedFace(np.clip(out, -1.0, 1.0))
    return (face, tf) if return_transform else face


def resize_image(x, size):
    """Antialiased bilinear resize of an N x C x H x W tensor (differentiable)."""
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


def downsample_for_identity(face, size=IDENTITY_SIZE):
    if face.resolution != TARGET_SIZE:
        raise ShapeMismatch(f"expected a {TARGET_SIZE} px face, got {face.resolution}")
    t = resize_image(face.to_tensor().double(), size)
    return AlignedFace.from_tensor(t)


def ellipse_mask(size=TARGET_SIZE, rx=0.32, ry=0.42, cx=0.5, cy=0.52):
    """Centered-ellipse stand-in for a face-parsing mask (1 inside the face)."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    inside = ((xs / size - cx) / rx) ** 2 + ((ys / size - cy) / ry) ** 2 <= 1.0
    return FaceMask(inside.astype(np.float32))


# ---------------------------------------------------------------------------
# image I/O


def load_face(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return AlignedFace(to_unit_range(arr))


def save_face(face, path):
    Image.fromarray(face.to_uint8()).save(path)


def load_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return FaceMask((arr >= 128).astype(np.uint8))


def save_mask(mask, path):
    Image.fromarray((mask.values * 255).astype(np.uint8), mode="L").save(path)


def _image_size(path):
    with Image.open(path) as im:
        return im.size


# ---------------------------------------------------------------------------
# manifests

_FIELDS = ("image_id", "image_path", "mask_path", "caption", "identity_label")


def load_manifest(path, check_files=True):
    """Read a JSON Lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest not found: {path}")
    base = path.parent
    entries, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(line_no, "record is not an object")
            missing = [k for k in _FIELDS if k not in rec]
            if missing:
                raise ParseError(line_no, f"missing fields {missing}")
            bad = [k for k in _FIELDS if not isinstance(rec[k], str)]
            if bad:
                raise ParseError(line_no, f"fields must be strings: {bad}")
            if rec["image_id"] in seen:
                raise DuplicateId(rec["image_id"], line_no)
            seen[rec["image_id"]] = line_no
            entry = ManifestEntry(
                image_id=rec["image_id"],
                image_path=(base / rec["image_path"]),
                mask_path=(base / rec["mask_path"]),
                caption=rec["caption"],
                identity_label=rec["identity_label"],
            )
            if check_files:
                for p in (entry.image_path, entry.mask_path):
                    if not p.exists():
                        raise MissingFile(f"line {line_no}: {p} does not exist")
                if _image_size(entry.image_path) != _image_size(entry.mask_path):
                    raise ShapeMismatch(f"line {line_no}: image and mask sizes differ")
            entries.append(entry)
    return entries


def write_manifest(entries, path):
    """Atomic, byte-deterministic JSONL write."""
    path = Path(path)
    base = path.parent.resolve()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            rec = e.to_record(base_dir=base) if isinstance(e, ManifestEntry) else e
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# pair sampling


def _group_by_identity(manifest):
    groups = {}
    for i, e in enumerate(manifest):
        groups.setdefault(e.identity_label, []).append(i)
    return groups


def sample_pair_indices(manifest, rng_seed, p_same):
    """Pick (source_index, target_index, same_identity) deterministically from the seed.

    ``rng_seed`` may be an int or a sequence of ints (seed-per-index scheme).
    """
    if not 0.0 <= p_same <= 1.0:
        raise ValueError(f"p_same must be in [0, 1], got {p_same}")
    if not manifest:
        raise InsufficientIdentities("empty manifest")
    groups = _group_by_identity(manifest)
    labels = sorted(groups)
    if p_same < 1.0 and len(labels) < 2:
        raise InsufficientIdentities("need at least 2 identities when p_same < 1")
    rng = np.random.default_rng(rng_seed)
    tgt = int(rng.integers(len(manifest)))
    same = bool(rng.random() < p_same)
    tgt_label = manifest[tgt].identity_label
    if same:
        pool = groups[tgt_label]
    else:
        others = [lab for lab in labels if lab != tgt_label]
        pool = groups[others[int(rng.integers(len(others)))]]
    src = pool[int(rng.integers(len(pool)))]
    return src, tgt, same


class _DecodeCache:
    def __init__(self):
        self.faces = {}
        self.masks = {}

    def face(self, path):
        key = str(path)
        if key not in self.faces:
            self.faces[key] = load_face(path)
        return self.faces[key]

    def mask(self, path):
        key = str(path)
        if key not in self.masks:
            self.masks[key] = load_mask(path)
        return self.masks[key]


def _build_sample(manifest, src, tgt, same, cache):
    se, te = manifest[src], manifest[tgt]
    target = cache.face(te.image_path)
    mask = cache.mask(te.mask_path)
    if mask.values.shape != target.pixels.shape[:2]:
        raise ShapeMismatch(f"mask/target size mismatch for {te.image_id}")
    source = downsample_for_identity(cache.face(se.image_path))
    return TrainingSample(
        source=source,
        target=target,
        mask=mask,
        caption=te.caption,
        same_identity=same,
        source_id=se.image_id,
        target_id=te.image_id,
        source_label=se.identity_label,
        target_label=te.identity_label,
    )


def sample_training_pair(manifest, rng_seed, p_same=0.2, _cache=None):
    src, tgt, same = sample_pair_indices(manifest, rng_seed, p_same)
    return _build_sample(manifest, src, tgt, same, _cache or _DecodeCache())


@dataclass
class PairDataset:
    """Indexable pair source; item ``i`` depends only on (manifest, seed, i)."""

    manifest: list
    seed: int = 0
    p_same: float = 0.2
    _cache: _DecodeCache = field(default_factory=_DecodeCache, repr=False)

    def __post_init__(self):
        # validate identity count eagerly
        sample_pair_indices(self.manifest, (self.seed, 0), self.p_same)

    def __getitem__(self, index):
        src, tgt, same = sample_pair_indices(self.manifest, (self.seed, int(index)), self.p_same)
        return _build_sample(self.manifest, src, tgt, same, self._cache)

    def batch(self, step, batch_size):
        """Batch ``step``: samples ``step * batch_size`` .. ``+ batch_size - 1``."""
        return collate([self[step * batch_size + i] for i in range(batch_size)])


def collate(samples):
    return {
        "source": torch.cat([s.source.to_tensor() for s in samples]),
        "target": torch.cat([s.target.to_tensor() for s in samples]),
        "mask": torch.cat([s.mask.to_tensor() for s in samples]),
        "caption": [s.caption for s in samples],
        "same_identity": torch.tensor([s.same_identity for s in samples]),
        "source_label": [s.source_label for s in samples],
        "target_label": [s.target_label for s in samples],
    }
