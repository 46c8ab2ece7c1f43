"""Command-line entry point: synth | train-cgfe | train-fusion | fuse | evaluate."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint
from .cgfe import CgfeModel, make_optimizers, predict_labels, train_cgfe
from .config import RunConfig, load_config, parse_pairs
from .datamodel import (
    FMB_PALETTE, DatasetSplit, ImagePair, LabelPalette, load_pair, save_pair,
    synth_scene, to_uint8,
)
from .errors import AlignmentError, ConfigError, HSFusionError, NotFound
from .fusion import FusionModel, fuse_pair, luminance, make_optimizer, train_fusion
from .metrics import confusion, evaluate_pair, iou_from_confusion, write_report

log = logging.getLogger("hsfusion")

CGFE_LOSS_COLUMNS = ("epoch", "adv_g", "adv_f", "cycle", "l_cg", "l_sere", "ssim", "sobel",
                     "l_str", "total", "lam", "loss_dx", "loss_dy")
FUSION_LOSS_COLUMNS = ("epoch", "ssim_term", "mse_vis_term", "mse_ir_term", "total",
                       "sigma_omega", "sigma_gamma")


def setup_torch(seed: int) -> None:
    threads = os.environ.get("HSF_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)


def write_loss_csv(path: Path, columns, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in history:
            w.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in columns])


def load_split(root, role: str, palette: LabelPalette = FMB_PALETTE, cfg: RunConfig | None = None):
    split = DatasetSplit.discover(root, role)
    pairs = [load_pair(split, i, palette) for i in split.ids]
    if cfg is not None and cfg.crop:
        pairs = [center_crop(p, cfg.image_size) for p in pairs]
    return pairs


def center_crop(pair: ImagePair, size) -> ImagePair:
    h, w = size
    H, W = pair.size
    if H < h or W < w:
        raise ConfigError(f"{pair.id}: {H}x{W} smaller than crop {h}x{w}")
    top, left = (H - h) // 2, (W - w) // 2
    sl = (slice(top, top + h), slice(left, left + w))
    return ImagePair(pair.id, pair.ir[sl], pair.vis[sl],
                     None if pair.label is None else pair.label[sl])


# -- checkpoints of the two stages --------------------------------------------------

def save_cgfe(path, m: CgfeModel, opts, cfg: RunConfig, epoch: int, history, steps: int) -> None:
    meta = {
        "kind": "cgfe", "modality": m.modality, "preset": cfg.preset, "arch": m.arch,
        "palette": m.palette.to_dict(), "config": cfg.to_dict(), "epoch": epoch,
        "history": history, "step": steps,
    }
    state = {"model": m.state_dict(),
             "optim": {k: o.state_dict() for k, o in opts.all().items()},
             "rng": torch.get_rng_state()}
    checkpoint.save(path, meta, state)


def load_cgfe(path, cfg: RunConfig | None = None):
    """Return (model, optimizers, meta, state)."""
    meta, state = checkpoint.load(path)
    if meta.get("kind") != "cgfe":
        raise ConfigError(f"{path} is not a CGFE checkpoint")
    palette = LabelPalette.from_dict(meta["palette"])
    m = CgfeModel(meta["modality"], palette, **meta["arch"])
    m.load_state_dict(state["model"])
    opts = make_optimizers(m, cfg or RunConfig.from_dict(meta["config"]))
    for k, o in opts.all().items():
        o.load_state_dict(state["optim"][k])
    return m, opts, meta, state


def save_fusion(path, fm: FusionModel, opt, cfg: RunConfig, epoch: int, history, sources: dict,
                steps: int) -> None:
    meta = {"kind": "fusion", "preset": cfg.preset, "arch": fm.arch, "config": cfg.to_dict(),
            "epoch": epoch, "step": steps, "history": history, "cgfe": sources}
    checkpoint.save(path, meta, {"model": fm.state_dict(), "optim": opt.state_dict(),
                                 "rng": torch.get_rng_state()})


def load_fusion(path, cfg: RunConfig | None = None):
    meta, state = checkpoint.load(path)
    if meta.get("kind") != "fusion":
        raise ConfigError(f"{path} is not a fusion checkpoint")
    fm = FusionModel(meta["arch"]["tap_channels"], meta["arch"]["reduction"])
    fm.load_state_dict(state["model"])
    opt = make_optimizer(fm, cfg or RunConfig.from_dict(meta["config"]))
    opt.load_state_dict(state["optim"])
    return fm, opt, meta


def load_backbones(ir_path, vis_path):
    if not ir_path or not vis_path:
        raise ConfigError("both --cgfe-ir and --cgfe-vis checkpoints are required")
    cg_ir, _, meta_ir, _ = load_cgfe(ir_path)
    cg_vi, _, meta_vi, _ = load_cgfe(vis_path)
    if meta_ir["modality"] != "ir" or meta_vi["modality"] != "vis":
        raise ConfigError("checkpoint modalities must be ir and vis respectively")
    if meta_ir["arch"] != meta_vi["arch"] or meta_ir["preset"] != meta_vi["preset"]:
        raise ConfigError(f"scale mismatch between CGFE checkpoints: {meta_ir['arch']} vs {meta_vi['arch']}")
    if meta_ir["palette"] != meta_vi["palette"]:
        raise ConfigError("CGFE checkpoints use different label palettes")
    cg_ir.eval()
    cg_vi.eval()
    return cg_ir, cg_vi, meta_ir


# -- commands ------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path) -> Path:
    manifest = {"seed": cfg.seed, "image_size": list(cfg.image_size),
                "palette": FMB_PALETTE.to_dict(), "train": [], "test": []}
    stride = max(2 ** cfg.unet_depth, 4)
    for role, count, offset in (("train", cfg.n_train, 0), ("test", cfg.n_test, 500_000)):
        for i in range(count):
            seed = cfg.seed * 1_000_000 + offset + i
            pair = synth_scene(seed, cfg.image_size, FMB_PALETTE, stride)
            pair.id = f"{i:05d}"
            save_pair(out, role, pair)
            manifest[role].append({"id": pair.id, "seed": seed})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d train and %d test pairs to %s", cfg.n_train, cfg.n_test, out)
    return out


def cmd_train_cgfe(cfg: RunConfig, modality: str, data: Path, out: Path, resume=None) -> Path:
    setup_torch(cfg.seed)
    split = DatasetSplit.discover(data, "train")
    if not split.has_labels():
        raise ConfigError(f"training split {data}/train has no labels; the CGFE needs them")
    pairs = load_split(data, "train", FMB_PALETTE, cfg)
    if resume:
        m, opts, meta, state = load_cgfe(resume, cfg)
        if meta["modality"] != modality:
            raise ConfigError(f"resume checkpoint is for {meta['modality']}, not {modality}")
        torch.set_rng_state(state["rng"])
        start, history = meta["epoch"], list(meta["history"])
    else:
        m = CgfeModel.from_config(cfg, modality, FMB_PALETTE)
        opts = make_optimizers(m, cfg)
        start, history = 0, []
    out.mkdir(parents=True, exist_ok=True)
    per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    ckpt = out / f"cgfe_{modality}.ckpt"
    loss_csv = out / f"cgfe_{modality}_loss.csv"

    def on_epoch(epoch, row):
        history.append(row)
        save_cgfe(ckpt, m, opts, cfg, epoch + 1, history, (epoch + 1) * per_epoch)
        write_loss_csv(loss_csv, CGFE_LOSS_COLUMNS, history)
        log.info("cgfe %s epoch %d total %.4f sere %.4f", modality, epoch, row["total"], row["l_sere"])

    train_cgfe(m, pairs, cfg, opts, cfg.epochs_cgfe, start, on_epoch)
    if start >= cfg.epochs_cgfe:
        save_cgfe(ckpt, m, opts, cfg, start, history, start * per_epoch)
        write_loss_csv(loss_csv, CGFE_LOSS_COLUMNS, history)
    return ckpt


def cmd_train_fusion(cfg: RunConfig, cgfe_ir, cgfe_vis, data: Path, out: Path, resume=None) -> Path:
    setup_torch(cfg.seed)
    cg_ir, cg_vi, meta = load_backbones(cgfe_ir, cgfe_vis)
    arch = meta["arch"]
    if arch["base_ch"] != cfg.base_ch:
        raise ConfigError(f"CGFE base_ch {arch['base_ch']} differs from config {cfg.base_ch}")
    pairs = load_split(data, "train", FMB_PALETTE, cfg)
    if resume:
        fm, opt, fmeta = load_fusion(resume, cfg)
        start, history = fmeta["epoch"], list(fmeta["history"])
    else:
        fm = FusionModel.from_config(cfg)
        opt = make_optimizer(fm, cfg)
        start, history = 0, []
    # identify backbones by content so the checkpoint does not depend on where they live
    sources = {m: {"file": Path(p).name, "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
               for m, p in (("ir", cgfe_ir), ("vis", cgfe_vis))}
    out.mkdir(parents=True, exist_ok=True)
    per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    ckpt = out / "fusion.ckpt"
    loss_csv = out / "fusion_loss.csv"

    def on_epoch(epoch, row):
        history.append(row)
        save_fusion(ckpt, fm, opt, cfg, epoch + 1, history, sources, (epoch + 1) * per_epoch)
        write_loss_csv(loss_csv, FUSION_LOSS_COLUMNS, history)
        log.info("fusion epoch %d total %.4f sigma(omega) %.4f sigma(gamma) %.4f",
                 epoch, row["total"], row["sigma_omega"], row["sigma_gamma"])

    train_fusion(fm, cg_ir, cg_vi, pairs, cfg, opt, cfg.epochs_fusion, start, on_epoch)
    if start >= cfg.epochs_fusion:
        save_fusion(ckpt, fm, opt, cfg, start, history, sources, start * per_epoch)
        write_loss_csv(loss_csv, FUSION_LOSS_COLUMNS, history)
    return ckpt


def _split_from_dir(path: Path) -> DatasetSplit:
    path = Path(path)
    return DatasetSplit.discover(path.parent, path.name)


def cmd_fuse(cfg: RunConfig, fusion_ckpt, cgfe_ir, cgfe_vis, input_dir: Path, out: Path,
             dump_masks: bool = False) -> int:
    """Fuse every pair under ``input_dir``; returns the number of failed pairs."""
    setup_torch(cfg.seed)
    cg_ir, cg_vi, _ = load_backbones(cgfe_ir, cgfe_vis)
    fm, _, _ = load_fusion(fusion_ckpt)
    fm.eval()
    split = _split_from_dir(input_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dump_masks:
        (out / "masks").mkdir(exist_ok=True)
    failed = 0
    for id_ in split.ids:
        try:
            pair = load_pair(split, id_, cg_ir.palette)
            if cfg.crop:
                pair = center_crop(pair, cfg.image_size)
            rgb, mask = fuse_pair(fm, cg_ir, cg_vi, pair, return_mask=True)
            Image.fromarray(to_uint8(rgb)).save(out / f"{id_}.png")
            if dump_masks:
                Image.fromarray(mask.m).save(out / "masks" / f"{id_}.png")
        except Exception as exc:  # keep going; report at the end
            failed += 1
            log.error("pair %s failed: %s", id_, exc)
    log.info("fused %d of %d pairs into %s", len(split.ids) - failed, len(split.ids), out)
    return failed


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def cmd_evaluate(cfg: RunConfig, fused_dir: Path, source_dir: Path, out_csv: Path,
                 labels: bool = False, seg_ckpt=None, pred_dir=None) -> dict:
    split = _split_from_dir(source_dir)
    fused_ids = sorted(p.stem for p in Path(fused_dir).glob("*.png"))
    for id_ in fused_ids:
        if id_ not in split.ids:
            raise AlignmentError(f"fused image {id_!r} has no source pair in {source_dir}")
    for id_ in split.ids:
        if id_ not in fused_ids:
            raise AlignmentError(f"source pair {id_!r} has no fused image in {fused_dir}")

    seg_model = None
    if seg_ckpt:
        setup_torch(cfg.seed)
        seg_model, _, _, _ = load_cgfe(seg_ckpt)
        seg_model.eval()
    with_miou = labels and (seg_model is not None or pred_dir is not None)
    palette = seg_model.palette if seg_model is not None else FMB_PALETTE
    conf = np.zeros((palette.n, palette.n), dtype=np.int64)

    rows = []
    for id_ in split.ids:
        pair = load_pair(split, id_, palette)
        fused = _read_rgb(Path(fused_dir) / f"{id_}.png")
        fused_y = luminance(fused)
        report = evaluate_pair(fused_y, pair.ir[..., 0], luminance(pair.vis.astype(np.float64)))
        if with_miou:
            if pair.label is None:
                raise NotFound(f"no label for {id_} in {source_dir}")
            if seg_model is not None:
                # the segmenter sees the fused image through its own modality's channels
                as_pair = ImagePair(id_, fused_y[..., None].astype(np.float32), fused.astype(np.float32))
                pred = predict_labels(seg_model, [as_pair])[0]
            else:
                with Image.open(Path(pred_dir) / f"{id_}.png") as im:
                    pred = np.asarray(im).astype(np.int64)
            c = confusion(pred, pair.label, palette.n)
            conf += c
            report.per_class_iou, report.miou = iou_from_confusion(c)
            report.per_class_iou = list(report.per_class_iou)
        rows.append((id_, report))

    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    summary = write_report(out_csv, rows, with_miou=with_miou)
    if with_miou:
        per_class, total = iou_from_confusion(conf)
        with open(out_csv.with_name(out_csv.stem + "_classes.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "name", "iou"])
            for c, (name, v) in enumerate(zip(palette.names, per_class)):
                w.writerow([c, name, repr(float(v))])
            w.writerow(["all", "miou", repr(total)])
        summary["dataset_miou"] = total
    log.info("evaluated %d pairs: %s", len(rows), summary)
    return summary


# -- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--preset", choices=("paper", "toy"))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory (file for evaluate)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hsfusion", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")

    t = sub.add_parser("train-cgfe", parents=[common], help="train one modality's CGFE")
    t.add_argument("--modality", choices=("ir", "vis"), required=True)
    t.add_argument("--data", type=Path)
    t.add_argument("--resume", type=Path)

    f = sub.add_parser("train-fusion", parents=[common], help="train the fusion network")
    f.add_argument("--cgfe-ir", type=Path, required=True)
    f.add_argument("--cgfe-vis", type=Path, required=True)
    f.add_argument("--data", type=Path)
    f.add_argument("--resume", type=Path)

    u = sub.add_parser("fuse", parents=[common], help="fuse every pair of a split directory")
    u.add_argument("--fusion", type=Path, required=True)
    u.add_argument("--cgfe-ir", type=Path, required=True)
    u.add_argument("--cgfe-vis", type=Path, required=True)
    u.add_argument("--input", type=Path, required=True, help="split dir with Infrared/ and Visible/")
    u.add_argument("--dump-masks", action="store_true")

    e = sub.add_parser("evaluate", parents=[common], help="metric CSV for fused images")
    e.add_argument("--fused", type=Path, required=True)
    e.add_argument("--source", type=Path, required=True, help="split dir with the source pairs")
    e.add_argument("--labels", action="store_true", help="compute mIoU against Label/")
    e.add_argument("--seg-ckpt", type=Path, help="CGFE whose G segments the fused images")
    e.add_argument("--pred", type=Path, help="directory of stored label predictions")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_pairs(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, args.preset, overrides)
        data = Path(getattr(args, "data", None) or cfg.data_root)
        if args.verb == "synth":
            cmd_synth(cfg, args.out or Path(cfg.data_root))
        elif args.verb == "train-cgfe":
            cmd_train_cgfe(cfg, args.modality, data, args.out or Path(cfg.out_dir), args.resume)
        elif args.verb == "train-fusion":
            cmd_train_fusion(cfg, args.cgfe_ir, args.cgfe_vis, data, args.out or Path(cfg.out_dir),
                             args.resume)
        elif args.verb == "fuse":
            failed = cmd_fuse(cfg, args.fusion, args.cgfe_ir, args.cgfe_vis, args.input,
                              args.out or Path(cfg.out_dir) / "fused", args.dump_masks)
            return 1 if failed else 0
        elif args.verb == "evaluate":
            cmd_evaluate(cfg, args.fused, args.source, args.out or Path(cfg.out_dir) / "metrics.csv",
                         args.labels, args.seg_ckpt, args.pred)
    except HSFusionError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
