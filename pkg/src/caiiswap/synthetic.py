"""Procedural toy faces for tests, smoke training and the demo corpus.

Images are smooth (soft-edged shapes over a gradient background) so that a
tiny generator can fit them in a few hundred steps.
"""

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import TARGET_SIZE, AlignedFace, FaceMask, ManifestEntry, canonical_landmarks, save_face, save_mask, write_manifest

_BACKGROUNDS = {
    "blue": (0.2, 0.35, 0.8),
    "green": (0.25, 0.65, 0.3),
    "grey": (0.55, 0.55, 0.55),
    "orange": (0.9, 0.55, 0.2),
}


@dataclass(frozen=True)
class FaceParams:
    skin: tuple = (0.85, 0.68, 0.55)
    face_rx: float = 0.30
    face_ry: float = 0.40
    eye_radius: float = 0.035
    eye_color: tuple = (0.15, 0.1, 0.08)
    mouth_open: float = 0.01
    shift_x: float = 0.0
    background: str = "grey"
    glasses: bool = False


def _soft(d, softness):
    # d < 0 inside
    return 1.0 / (1.0 + np.exp(np.clip(d / softness, -60, 60)))


def face_region(params, size=TARGET_SIZE):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    u, v = xs / size, ys / size
    cx, cy = 0.5 + params.shift_x, 0.52
    return np.sqrt(((u - cx) / params.face_rx) ** 2 + ((v - cy) / params.face_ry) ** 2) - 1.0


def render_face(params=FaceParams(), size=TARGET_SIZE):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    u, v = xs / size, ys / size
    bg = np.array(_BACKGROUNDS[params.background])
    img = bg[None, None, :] * (0.75 + 0.25 * v[..., None])

    face = _soft(face_region(params, size), 0.02)[..., None]
    img = img * (1 - face) + np.array(params.skin)[None, None, :] * face

    lm = canonical_landmarks(size) / size + np.array([params.shift_x, 0.0])
    for ex, ey in lm[:2]:
        r = np.sqrt((u - ex) ** 2 + (v - ey) ** 2) - params.eye_radius
        eye = _soft(r, 0.006)[..., None]
        img = img * (1 - eye) + np.array(params.eye_color)[None, None, :] * eye
        if params.glasses:
            ring = _soft(np.abs(r - 0.015) - 0.004, 0.003)[..., None]
            img = img * (1 - ring) + 0.05 * ring
    nx, ny = lm[2]
    nose = _soft(np.sqrt(((u - nx) / 0.02) ** 2 + ((v - ny) / 0.035) ** 2) - 1.0, 0.15)[..., None]
    img = img * (1 - 0.3 * nose)
    (mx0, my0), (mx1, my1) = lm[3], lm[4]
    mcx, mcy = (mx0 + mx1) / 2, (my0 + my1) / 2
    mouth = _soft(
        np.sqrt(((u - mcx) / ((mx1 - mx0) / 2)) ** 2 + ((v - mcy) / (0.008 + params.mouth_open)) ** 2) - 1.0, 0.12
    )[..., None]
    img = img * (1 - mouth) + np.array([0.55, 0.15, 0.15])[None, None, :] * mouth
    return AlignedFace(np.clip(img * 2.0 - 1.0, -1.0, 1.0))


def render_mask(params, size=TARGET_SIZE):
    return FaceMask((face_region(params, size) <= 0).astype(np.uint8))


def canonical_face(size=TARGET_SIZE):
    """The frontal reference face (pose stubs report (0, 0, 0) for it)."""
    return render_face(FaceParams(), size)


def identity_params(rng):
    return FaceParams(
        skin=tuple(float(c) for c in rng.uniform([0.45, 0.3, 0.2], [0.95, 0.8, 0.7])),
        face_rx=float(rng.uniform(0.26, 0.34)),
        face_ry=float(rng.uniform(0.36, 0.44)),
        eye_radius=float(rng.uniform(0.025, 0.045)),
        eye_color=tuple(float(c) for c in rng.uniform(0.0, 0.35, size=3)),
    )


def frame_params(base, rng):
    return replace(
        base,
        mouth_open=float(rng.uniform(0.0, 0.03)),
        shift_x=float(rng.uniform(-0.04, 0.04)),
        background=str(rng.choice(sorted(_BACKGROUNDS))),
        glasses=bool(rng.random() < 0.25),
    )


def describe(params):
    pose = "turned slightly left" if params.shift_x < -0.015 else "turned slightly right" if params.shift_x > 0.015 else "frontal"
    mouth = "an open mouth" if params.mouth_open > 0.015 else "a closed mouth"
    acc = "wearing dark glasses" if params.glasses else "with no facial accessories"
    return f"A {pose} face with {mouth} {acc} in front of a plain {params.background} background, nothing covers the face."


def make_synthetic_corpus(out_dir, n_identities=4, frames_per_identity=4, seed=0, with_captions=True):
    """Write images, masks and ``manifest.jsonl`` under ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_identities):
        base = identity_params(rng)
        for j in range(frames_per_identity):
            p = frame_params(base, rng)
            image_id = f"id{i:03d}_f{j:03d}"
            ipath, mpath = out / "images" / f"{image_id}.png", out / "masks" / f"{image_id}.png"
            save_face(render_face(p), ipath)
            save_mask(render_mask(p), mpath)
            entries.append(ManifestEntry(image_id, ipath, mpath, describe(p) if with_captions else "", f"id{i:03d}"))
    path = out / "manifest.jsonl"
    write_manifest(entries, path)
    return path
