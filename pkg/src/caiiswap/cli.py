"""``caiiswap`` command line: preprocess, caption, train, swap, evaluate, bench.

Every subcommand validates all of its inputs before it writes anything, and
writes a provenance record (config hash, seed, package version) beside its
outputs. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .config import RunConfig, apply_overrides, tiny_config
from .data import (
    IDENTITY_SIZE,
    TARGET_SIZE,
    AlignedFace,
    FaceMask,
    ManifestEntry,
    align_and_crop,
    downsample_for_identity,
    ellipse_mask,
    load_face,
    load_manifest,
    save_face,
    save_mask,
    write_manifest,
)
from .errors import CaiiSwapError, ConfigError, MissingFile, ParseError, ShapeMismatch

log = logging.getLogger("caiiswap")


class UsageError(Exception):
    pass


def _write_json(path, doc):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _provenance(command, argv, config=None, diff=(), seed=None, **extra):
    rec = {
        "command": command,
        "argv": list(argv),
        "package_version": __version__,
        "torch_version": torch.__version__,
        "config_hash": config.hash() if config is not None else None,
        "seed": seed if seed is not None else (config.train.seed if config is not None else None),
        "overrides": [{"key": k, "old": old, "new": new} for k, old, new in diff],
    }
    rec.update(extra)
    return rec


def _load_run_config(path, overrides, tiny=False):
    """Config file (or the built-in preset) with ``--set`` overrides applied and validated."""
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
    else:
        doc = (tiny_config() if tiny else RunConfig().validate()).to_dict()
    doc, diff = apply_overrides(doc, overrides)
    try:
        config = RunConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError("<config>", str(exc)) from None
    return config, diff


def _require_file(path, what):
    if not Path(path).is_file():
        raise MissingFile(f"{what} not found: {path}")


def _ensure_fresh_dir(path):
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise CaiiSwapError(f"{path} exists and is not a directory")
    return path


# ---------------------------------------------------------------------------
# preprocess


def _read_raw_records(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON ({exc.msg})") from None
            for key in ("image_id", "raw_path", "identity_label"):
                if not isinstance(rec.get(key), str):
                    raise ParseError(line_no, f"field {key!r} must be a string")
            if rec.get("landmarks") is not None and np.asarray(rec["landmarks"]).shape != (5, 2):
                raise ParseError(line_no, "landmarks must be 5 [x, y] pairs")
            rec["_line"] = line_no
            records.append(rec)
    return records


def cmd_preprocess(args, argv):
    out = _ensure_fresh_dir(args.out_dir)
    if args.synthetic:
        from .synthetic import make_synthetic_corpus

        if args.identities < 1 or args.frames < 1:
            raise UsageError("--identities and --frames must be >= 1")
        manifest = make_synthetic_corpus(out, args.identities, args.frames, seed=args.seed)
        n = args.identities * args.frames
    else:
        if args.input is None:
            raise UsageError("preprocess needs --input or --synthetic")
        _require_file(args.input, "raw record file")
        base = Path(args.input).parent
        records = _read_raw_records(args.input)
        seen = set()
        # validate every record (and do the alignment in memory) before writing
        prepared = []
        for rec in records:
            if rec["image_id"] in seen:
                raise ParseError(rec["_line"], f"duplicate image_id {rec['image_id']!r}")
            seen.add(rec["image_id"])
            raw_path = base / rec["raw_path"]
            _require_file(raw_path, f"line {rec['_line']}: raw image")
            with Image.open(raw_path) as im:
                raw = np.asarray(im.convert("RGB"))
            if rec.get("landmarks") is None:
                if raw.shape[:2] != (TARGET_SIZE, TARGET_SIZE):
                    raise ShapeMismatch(f"line {rec['_line']}: no landmarks and image is not a {TARGET_SIZE} px crop")
                face = AlignedFace(raw.astype(np.float64) / 127.5 - 1.0)
                tf = None
            else:
                face, tf = align_and_crop(raw, rec["landmarks"], return_transform=True)
            if rec.get("mask_path"):
                mpath = base / rec["mask_path"]
                _require_file(mpath, f"line {rec['_line']}: mask")
                with Image.open(mpath) as im:
                    mask_raw = np.asarray(im.convert("L"))
                if tf is not None:
                    warped = align_and_crop(mask_raw, rec["landmarks"])
                    mask = FaceMask((warped.pixels[..., 0] >= 0.0).astype(np.uint8))
                else:
                    mask = FaceMask((mask_raw >= 128).astype(np.uint8))
            else:
                mask = ellipse_mask()
            prepared.append((rec, face, mask))
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        entries = []
        for rec, face, mask in prepared:
            ipath = out / "images" / f"{rec['image_id']}.png"
            mpath = out / "masks" / f"{rec['image_id']}.png"
            save_face(face, ipath)
            save_mask(mask, mpath)
            entries.append(ManifestEntry(rec["image_id"], ipath, mpath, rec.get("caption", ""), rec["identity_label"]))
        manifest = out / "manifest.jsonl"
        write_manifest(entries, manifest)
        n = len(entries)
    _write_json(out / "provenance.json", _provenance("preprocess", argv, seed=args.seed, n_entries=n))
    print(manifest)
    return 0


# ---------------------------------------------------------------------------
# caption


def cmd_caption(args, argv):
    from .captions import CaptionCache, ChatCompletionsClient, StubVLMClient, caption_corpus, default_prompt

    if args.concurrency < 1:
        raise UsageError("--concurrency must be >= 1")
    manifest = load_manifest(args.manifest)
    prompt = default_prompt()
    if args.prompt_file:
        _require_file(args.prompt_file, "prompt file")
        prompt = Path(args.prompt_file).read_text(encoding="utf-8").strip()
        if not prompt:
            raise ConfigError("--prompt-file", "prompt is empty")
    out = Path(args.out or args.manifest)
    cache = CaptionCache(args.cache_dir or Path(args.manifest).parent / ".caption_cache")
    if args.endpoint.startswith("stub:"):
        client = StubVLMClient(args.endpoint[len("stub:"):] or "A face.", model_id=args.model)
    else:
        client = ChatCompletionsClient(args.endpoint, args.model)
    updated, failures = caption_corpus(manifest, client, cache, args.concurrency, prompt)
    write_manifest(updated, out)
    report = {
        "manifest": str(out),
        "n_entries": len(updated),
        "n_failed": len(failures),
        "failures": [f.__dict__ for f in failures],
        "model_id": args.model,
        "endpoint": args.endpoint,
    }
    _write_json(out.with_name(out.name + ".caption_report.json"), {**_provenance("caption", argv), **report})
    for f in failures:
        print(f"caption failed for {f.image_id}: {f.error}: {f.message}", file=sys.stderr)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# train / swap / evaluate / bench


def cmd_train(args, argv):
    from .training import load_checkpoint, train

    config, diff = _load_run_config(args.config, args.set, tiny=args.tiny)
    manifest = load_manifest(args.manifest)
    if not manifest:
        raise CaiiSwapError("manifest is empty")
    if args.resume:
        _require_file(args.resume, "resume checkpoint")
        ckpt = load_checkpoint(args.resume)
        if ckpt["config_hash"] != config.hash():
            raise ConfigError("--resume", "checkpoint was trained with a different config")
    out = _ensure_fresh_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    _write_json(
        out / "provenance.json",
        _provenance("train", argv, config, diff, manifest=str(Path(args.manifest).resolve()), resume=args.resume),
    )
    result = train(config, manifest, out, resume=args.resume, max_steps=args.max_steps)
    print(result.checkpoint)
    return 0


def _model_from_checkpoint(path):
    from .training import trainer_from_checkpoint

    _require_file(path, "checkpoint")
    trainer = trainer_from_checkpoint(path)
    trainer.model.eval()
    return trainer


def cmd_swap(args, argv):
    _require_file(args.source, "source image")
    _require_file(args.target, "target image")
    source = load_face(args.source)
    target = load_face(args.target)
    if target.resolution != TARGET_SIZE:
        raise ShapeMismatch(f"target must be a {TARGET_SIZE} px aligned face")
    if source.resolution == TARGET_SIZE:
        source = downsample_for_identity(source)
    elif source.resolution != IDENTITY_SIZE:
        raise ShapeMismatch(f"source must be a {TARGET_SIZE} or {IDENTITY_SIZE} px aligned face")
    trainer = _model_from_checkpoint(args.checkpoint)
    with torch.no_grad():
        out = trainer.model(source.to_tensor(), target.to_tensor())
    save_face(AlignedFace.from_tensor(out), args.out)
    _write_json(
        Path(str(args.out) + ".provenance.json"),
        _provenance("swap", argv, trainer.config, checkpoint=str(args.checkpoint), step=trainer.step),
    )
    print(args.out)
    return 0


def cmd_evaluate(args, argv):
    from .evaluation import run_protocol

    manifest = load_manifest(args.manifest)
    sources = load_manifest(args.source_manifest) if args.source_manifest else None
    trainer = _model_from_checkpoint(args.checkpoint)
    config, diff = trainer.config, []
    if args.set:
        doc, diff = apply_overrides({"eval": config.to_dict()["eval"]}, args.set)
        unknown = {k.split(".")[0] for k, _, _ in diff} - {"eval"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "evaluate only accepts eval.* overrides")
        config = RunConfig.from_dict({**config.to_dict(), "eval": doc["eval"]})
    protocol = {"ffpp": "ffpp_style", "mpie": "mpie_style"}[args.protocol]
    report = run_protocol(protocol, trainer.model, manifest, trainer.encoders, config.eval, config.hash(), sources)
    report.provenance.update(_provenance("evaluate", argv, config, diff, checkpoint=str(args.checkpoint)))
    report.save(args.out)
    print(args.out)
    return 0


def cmd_bench(args, argv):
    from .evaluation import bench_speed
    from .networks import SwapModel

    if args.iters < 1 or args.warmup < 0:
        raise UsageError("--iters must be >= 1 and --warmup >= 0")
    if args.checkpoint:
        trainer = _model_from_checkpoint(args.checkpoint)
        config, model, diff = trainer.config, trainer.model, []
    else:
        from .encoders import build_suite

        config, diff = _load_run_config(args.config, args.set, tiny=args.tiny)
        torch.manual_seed(config.train.seed)
        model = SwapModel(config.generator, config.fusion, build_suite(config.encoders).identity)
    if args.threads:
        torch.set_num_threads(args.threads)
    x_t = torch.zeros(args.batch, 3, TARGET_SIZE, TARGET_SIZE)
    x_s = torch.zeros(args.batch, 3, model.identity_size, model.identity_size)
    rep = bench_speed(model, args.warmup, args.iters, x_s, x_t)
    doc = {**rep.__dict__, "provenance": _provenance("bench", argv, config, diff)}
    if args.out:
        _write_json(args.out, doc)
    print(f"{rep.ms_per_image:.3f} ms/image on {rep.device}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="caiiswap", description="Identity-injecting face swap: data, training, evaluation.")
    p.add_argument("--version", action="version", version=f"caiiswap {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", metavar="{preprocess,caption,train,swap,evaluate,bench}")
    p.subparsers = sub.choices

    def config_flags(sp):
        sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--tiny", action="store_true", help="start from the desk-scale preset instead of defaults")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")

    sp = sub.add_parser("preprocess", help="align raw frames (or render a synthetic corpus) into a manifest")
    sp.add_argument("--input", help="JSONL of {image_id, raw_path, landmarks, identity_label, mask_path?, caption?}")
    sp.add_argument("--synthetic", action="store_true", help="render a synthetic corpus instead")
    sp.add_argument("--identities", type=int, default=4)
    sp.add_argument("--frames", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("caption", help="caption every manifest entry with a vision-language model")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--endpoint", required=True, help="chat-completions URL, or stub:<text> for offline runs")
    sp.add_argument("--model", required=True)
    sp.add_argument("--prompt-file")
    sp.add_argument("--concurrency", type=int, default=4)
    sp.add_argument("--cache-dir")
    sp.add_argument("--out", help="output manifest (default: rewrite the input manifest)")
    sp.set_defaults(func=cmd_caption)

    sp = sub.add_parser("train", help="train the swap generator")
    config_flags(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--resume")
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("swap", help="swap one source identity onto one target face")
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_swap)

    sp = sub.add_parser("evaluate", help="score a checkpoint under an evaluation protocol")
    sp.add_argument("--protocol", choices=("ffpp", "mpie"), required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--source-manifest", help="mpie: draw sources from this manifest")
    sp.add_argument("--set", action="append", default=[], metavar="eval.KEY=VALUE")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", help="median per-image swap latency")
    config_flags(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--threads", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.subparsers[args.command].print_usage(sys.stderr)
        print(f"caiiswap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CaiiSwapError, OSError) as exc:
        print(f"caiiswap {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
