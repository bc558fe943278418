"""Command-line entry point: ``lesion <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import runconfig
from .cascade import batch_extract_roi, extract_roi, resize_float
from .checkpoint import load_checkpoint, save_checkpoint
from .clsmodel import argmax_label, build_cls_model, predict_proba
from .dataio import (DataError, DatasetManifest, NormalizationPolicy, binarize_mask, labels_of, load_batch,
                     load_cls_manifest, load_image, load_mask, load_seg_manifest, split, _read_gray, _read_rgb)
from .metrics import MIOU_CONVENTIONS, classification_report, segmentation_report
from .segmodel import build_seg_model, predict_mask
from .synthgen import SynthConfig, generate_cls_dataset, generate_seg_dataset
from .trainer import fit
from .visualize import render_overlay

log = logging.getLogger("lesioncascade")


class UsageError(Exception):
    pass


def _resolve_path(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _prepare_manifest(cfg: runconfig.RunConfig, data_dir: Path) -> DatasetManifest:
    if cfg.task == "seg":
        manifest = load_seg_manifest(data_dir)
    else:
        labels = cfg.paths.get("labels_csv")
        manifest = load_cls_manifest(data_dir, _resolve_path(data_dir, labels) if labels else None)
    manifest = split(manifest, cfg.train_fraction, cfg.train.seed)
    if cfg.val_fraction > 0:
        train = manifest.subset("train")
        inner = split(train, 1 - cfg.val_fraction, cfg.train.seed + 1)
        val_stems = {s.stem for s in inner.samples if s.split == "test"}
        for s in manifest.samples:
            if s.stem in val_stems:
                s.split = "val"
    manifest.policy = cfg.policy.to_dict()
    manifest.config_digest = cfg.digest
    return manifest


def _load_arrays(manifest: DatasetManifest, policy: NormalizationPolicy, task: str):
    if not len(manifest):
        return None, None
    if task == "seg":
        return load_batch(manifest.samples, policy)
    return load_batch(manifest.samples, policy, with_masks=False), labels_of(manifest.samples)


def _train(args, task: str) -> int:
    config_path = Path(args.config)
    cfg = runconfig.load(config_path, seed=args.seed, epochs=args.epochs)
    if cfg.task != task:
        raise runconfig.ConfigError(f"config task is {cfg.task!r}, command expects {task!r}")
    base = config_path.parent
    if "data_dir" not in cfg.paths or "out_dir" not in cfg.paths:
        raise runconfig.ConfigError("paths.data_dir and paths.out_dir are required")
    data_dir = _resolve_path(base, cfg.paths["data_dir"])
    out = _resolve_path(base, cfg.paths["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = _prepare_manifest(cfg, data_dir)
    manifest.save(out / "manifest.json")
    (out / "config.resolved.json").write_text(json.dumps(cfg.raw, indent=1, sort_keys=True) + "\n")

    dtype = getattr(torch, cfg.dtype)
    build = build_seg_model if task == "seg" else build_cls_model
    model = build(cfg.model, seed=cfg.train.seed).to(dtype)
    x, y = _load_arrays(manifest.subset("train"), cfg.policy, task)
    if x is None:
        raise DataError("training cohort is empty")
    xv, yv = _load_arrays(manifest.subset("val"), cfg.policy, task)
    meta = {"policy": cfg.policy.to_dict(), "config_digest": cfg.digest}
    ckpt = out / "model.pt"
    model, records = fit(model, x, y, cfg.train, xv, yv, cfg.augment, cfg.policy.value_range,
                         log_path=out / "epochs.jsonl", checkpoint_path=ckpt, checkpoint_meta=meta,
                         resume=args.resume)
    with open(out / "timing.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps({"epoch": r.epoch, "wall_time_s": r.wall_time_s}) + "\n")
    if not records or not ckpt.exists():
        save_checkpoint(ckpt, model, **meta)
    test = manifest.subset("test")
    report = _evaluate(model, test if len(test) else manifest.subset("train"), cfg.policy, task, cfg.digest)
    (out / "metrics.json").write_text(report.to_json())
    print(report.table(f"{task} evaluation on {'test' if len(test) else 'train'} cohort"), end="")
    print(f"checkpoint: {ckpt}")
    return 0


def _evaluate(model, manifest, policy, task, digest, seg_model=None, use_mask_files=False,
              miou_convention="foreground"):
    if task == "seg":
        x, y = load_batch(manifest.samples, policy)
        pred = np.concatenate([predict_mask(model, x[i:i + 8]) for i in range(0, len(x), 8)])
        return segmentation_report(zip(pred, y), digest, miou_convention)
    x = load_batch(manifest.samples, policy, with_masks=False)
    if seg_model is not None:
        sh, sw, _ = seg_model.config.input_size
        seg_policy = NormalizationPolicy(policy.mode, (sh, sw))
        rois = []
        for s in manifest.samples:
            img = load_image(s.image_path, seg_policy)
            mask = predict_mask(seg_model, img[None])[0]
            rois.append(resize_float(extract_roi(img, mask), policy.target_size))
        x = np.stack(rois)
    elif use_mask_files:
        masks = np.stack([load_mask(s.mask_path, policy.target_size) for s in manifest.samples])
        x = extract_roi(x, masks)
    probs = np.concatenate([predict_proba(model, x[i:i + 16]) for i in range(0, len(x), 16)])
    names = model.config.class_names
    preds = [argmax_label(p, names)[0] for p in probs]
    return classification_report(preds, [s.label for s in manifest.samples], names, digest)


def cmd_train_seg(args) -> int:
    return _train(args, "seg")


def cmd_train_cls(args) -> int:
    return _train(args, "cls")


def _policy_from(payload) -> NormalizationPolicy:
    p = payload.get("policy") or {}
    h, w, _ = payload["model_config"]["input_size"]
    return NormalizationPolicy(p.get("mode", "unit_interval"), (h, w))


def _load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        if (path / "labels.csv").exists():
            return load_cls_manifest(path)
        return load_seg_manifest(path)
    return DatasetManifest.load(path)


def cmd_eval(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    policy = _policy_from(payload)
    manifest = _load_manifest(args.manifest)
    if manifest.policy and manifest.policy.get("mode") != policy.mode:
        raise UsageError(f"manifest normalization {manifest.policy.get('mode')!r} differs from "
                         f"checkpoint normalization {policy.mode!r}")
    if args.split != "all":
        manifest = manifest.subset(args.split) if any(s.split == args.split for s in manifest.samples) else manifest
    if not len(manifest):
        raise DataError("no samples")
    task = payload["kind"]
    seg_model = None
    if task == "cls" and args.with_roi and not args.oracle_masks:
        if args.seg_checkpoint is None:
            raise UsageError("--with-roi needs --seg-checkpoint (or --oracle-masks)")
        seg_model, seg_payload = load_checkpoint(args.seg_checkpoint)
        if _policy_from(seg_payload).mode != policy.mode:
            raise UsageError("segmenter and classifier use different normalization policies")
    report = _evaluate(model, manifest, policy, task, payload.get("config_digest", ""), seg_model,
                       use_mask_files=task == "cls" and args.with_roi and args.oracle_masks,
                       miou_convention=args.miou)
    report.extra = {**report.extra, "roi": bool(args.with_roi) if task == "cls" else None, "split": args.split}
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    title = "segmentation" if task == "seg" else f"classification ({'with' if args.with_roi else 'without'} ROI)"
    print(report.table(title), end="")
    return 0


def cmd_extract_roi(args) -> int:
    model, payload = load_checkpoint(args.seg_checkpoint)
    manifest = _load_manifest(args.manifest)
    if manifest.kind != "cls":
        raise UsageError("extract-roi needs a classification manifest")
    result = batch_extract_roi(model, manifest, args.out_dir, _policy_from(payload),
                               config_digest=payload.get("config_digest", ""))
    print(f"wrote {len(result)} ROI images to {args.out_dir}")
    return 0


def cmd_predict(args) -> int:
    seg, payload = load_checkpoint(args.seg_checkpoint)
    policy = _policy_from(payload)
    img = load_image(args.image, policy)
    mask = predict_mask(seg, img[None], args.threshold)[0]
    out = {"image": str(args.image), "lesion_pixels": int(mask.sum())}
    if args.out_mask:
        Image.fromarray(mask[..., 0] * 255).save(args.out_mask)
        out["mask"] = str(args.out_mask)
    if args.cls_checkpoint:
        cls, cpay = load_checkpoint(args.cls_checkpoint)
        h, w, _ = cls.config.input_size
        probs = predict_proba(cls, resize_float(extract_roi(img, mask), (h, w))[None])[0]
        label, _ = argmax_label(probs, cls.config.class_names)
        out["label"] = label
        out["probs"] = {c: round(float(p), 6) for c, p in zip(cls.config.class_names, probs)}
    print(json.dumps(out, indent=1))
    return 0


def cmd_overlay(args) -> int:
    image = _read_rgb(args.image)
    gt = binarize_mask(_read_gray(args.gt_mask))
    pred = binarize_mask(_read_gray(args.pred_mask))
    Image.fromarray(render_overlay(image, gt, pred)).save(args.out)
    return 0


_SYNTH_KEYS = {f.name for f in fields(SynthConfig)} | {"kind", "out_dir"}


def cmd_synth(args) -> int:
    config_path = Path(args.config)
    raw = json.loads(config_path.read_text())
    runconfig._reject_unknown(raw, _SYNTH_KEYS, "")
    kind = raw.pop("kind", "seg")
    out_dir = args.out_dir or raw.pop("out_dir", None)
    raw.pop("out_dir", None)
    if out_dir is None:
        raise UsageError("synth needs out_dir (config key or --out-dir)")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SynthConfig(**raw)
    except ValueError as exc:
        raise runconfig.ConfigError(str(exc)) from None
    out = _resolve_path(config_path.parent, out_dir) if args.out_dir is None else Path(out_dir)
    if kind == "seg":
        generate_seg_dataset(cfg, out)
    elif kind == "cls":
        generate_cls_dataset(cfg, out)
    else:
        raise runconfig.ConfigError(f"synth kind must be seg or cls, got {kind!r}")
    print(f"wrote {cfg.n_samples} {kind} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesion", description="Skin-lesion segmentation + classification cascade")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("train-seg", cmd_train_seg), ("train-cls", cmd_train_cls)):
        p = sub.add_parser(name, help=f"train the {'segmenter' if 'seg' in name else 'classifier'}")
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--resume", action="store_true")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="manifest JSON or dataset directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    roi = p.add_mutually_exclusive_group()
    roi.add_argument("--with-roi", dest="with_roi", action="store_true")
    roi.add_argument("--without-roi", dest="with_roi", action="store_false")
    p.add_argument("--seg-checkpoint")
    p.add_argument("--oracle-masks", action="store_true", help="use the manifest's mask files as ROI masks")
    p.add_argument("--miou", choices=MIOU_CONVENTIONS, default="foreground",
                   help="foreground IoU per image (default) or mean of foreground and background IoU")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval, with_roi=False)

    p = sub.add_parser("extract-roi", help="mask every image of a classification set")
    p.add_argument("--seg-checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_extract_roi)

    p = sub.add_parser("predict", help="segment (and optionally classify) one image")
    p.add_argument("--seg-checkpoint", required=True)
    p.add_argument("--cls-checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out-mask")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("overlay", help="draw prediction (green) and ground truth (blue) boundaries")
    p.add_argument("--image", required=True)
    p.add_argument("--gt-mask", required=True)
    p.add_argument("--pred-mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (runconfig.ConfigError, UsageError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
