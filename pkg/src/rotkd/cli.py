"""Command-line interface: ``rotkd <command> [options]``.

Every command writes a JSON report (sorted keys, stable float formatting) and
prints a plain-text table. Errors go to stderr with exit status 1; bad usage
exits with status 2.
"""

from __future__ import annotations

import os

# numerical kernels must not pick their own thread count: reports are only
# byte-reproducible single-threaded
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import re  # noqa: E402
import sys  # noqa: E402
from collections import defaultdict  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import jsonschema  # noqa: E402
import numpy as np  # noqa: E402

from . import orchestrate as orch  # noqa: E402
from . import toynet  # noqa: E402
from .data import (  # noqa: E402
    AnnotationError, Scene, build_dataset, crop_scene, merge_detections,
    parse_dota_annotation, plan_tiles, read_task1, serialize_dota_annotation, write_manifest,
    write_task1,
)
from .evaluation import pr_report  # noqa: E402

log = logging.getLogger("rotkd")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

# flag name -> path inside the JSON config
OVERRIDES = {
    "seed": ("seed",),
    "n_train": ("data", "n_train"),
    "n_test": ("data", "n_test"),
    "num_classes": ("data", "scene", "num_classes"),
    "teacher_width": ("teacher_width",),
    "student_width": ("student_width",),
    "lambda1": ("distill", "lambda1"),
    "lambda2": ("distill", "lambda2"),
    "lambda3": ("distill", "lambda3"),
    "lambda4": ("distill", "lambda4"),
    "t_cls": ("distill", "t_cls"),
    "t_reg": ("distill", "t_reg"),
    "kd_direction": ("distill", "kd_direction"),
    "lr": ("optim", "lr"),
    "batch_size": ("optim", "batch_size"),
    "steps": ("optim", "steps"),
    "teacher_steps": ("optim", "teacher_steps"),
    "output_dir": ("output_dir",),
}


def resolve_config(args) -> orch.ExperimentConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise CLIError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise CLIError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise CLIError(f"{args.config}: top level must be an object")
    for flag, path in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = raw
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    try:
        return orch.ExperimentConfig.from_dict(raw)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CLIError(f"invalid config at {where}: {exc.message}") from None


def output_dir(cfg: orch.ExperimentConfig, args) -> Path:
    out = Path(cfg.output_dir or getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def emit(report: dict, text: str, out: Path, stem: str) -> None:
    dump_json(report, out / f"{stem}.json")
    (out / f"{stem}.txt").write_text(text + "\n")
    print(text)


def record_table(rec: orch.RunRecord) -> str:
    return orch.format_table([dict(rec.summary(), variant=rec.role, status="ok")])


def _checkpoint(cfg: orch.ExperimentConfig, path: str, what: str) -> tuple:
    try:
        params, det, meta = toynet.load_checkpoint(path, cfg.detector(1))
    except FileNotFoundError:
        raise CLIError(f"{what} checkpoint not found: {path}") from None
    return params, det, meta


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = resolve_config(args)
    out = output_dir(cfg, args)
    ds = build_dataset(cfg.scene, cfg.n_train, cfg.n_test, cfg.seed)
    write_manifest(ds, out / "manifest.json")
    dump_json(cfg.to_dict(), out / "config.resolved.json")
    counts = defaultdict(int)
    for sc in ds.train + ds.test:
        for c in sc.classes:
            counts[int(c)] += 1
    lines = [f"{'split':>8} | {'scenes':>6} | {'objects':>7}"]
    for name, scenes in (("train", ds.train), ("test", ds.test)):
        lines.append(f"{name:>8} | {len(scenes):>6} | {sum(len(s) for s in scenes):>7}")
    lines.append("objects per class: " + ", ".join(f"{c}={counts[c]}" for c in sorted(counts)))
    text = "\n".join(lines)
    (out / "manifest.txt").write_text(text + "\n")
    print(text)


def _run_and_report(args, runner, stem: str, cfg=None) -> None:
    cfg = resolve_config(args) if cfg is None else cfg
    out = output_dir(cfg, args)
    cfg = replace(cfg, output_dir=str(out))
    dump_json(cfg.to_dict(), out / "config.resolved.json")
    rec, _ = runner(cfg)
    emit(rec.to_dict(), record_table(rec), out, stem)


def cmd_train_teacher(args) -> None:
    _run_and_report(args, lambda cfg: orch.train_teacher(cfg), "teacher.record")


def cmd_train_baseline(args) -> None:
    _run_and_report(args, lambda cfg: orch.train_baseline(cfg), "baseline.record")


def cmd_distill(args) -> None:
    cfg = resolve_config(args)
    params, _, _ = _checkpoint(cfg, args.teacher, "teacher")
    _run_and_report(args, lambda c: orch.distill_student(c, params, teacher_checkpoint=str(args.teacher)),
                    "distilled.record", cfg)


def cmd_ablate(args) -> None:
    cfg = resolve_config(args)
    out = output_dir(cfg, args)
    cfg = replace(cfg, output_dir=str(out))
    dump_json(cfg.to_dict(), out / "config.resolved.json")
    table = orch.run_ablation(cfg)
    emit(table, orch.format_table(table["rows"]), out, "ablation")
    if any(r["status"] != "ok" for r in table["rows"]):
        raise CLIError("one or more ablation rows failed; see ablation.json")


def cmd_evaluate(args) -> None:
    cfg = resolve_config(args)
    out = output_dir(cfg, args)
    params, _, meta = _checkpoint(cfg, args.checkpoint, "model")
    prep = orch.prepare(cfg)
    split = args.split
    images = prep.train_images if split == "train" else prep.test_images
    scenes = prep.dataset.train if split == "train" else prep.dataset.test
    dets = orch.detect(params, images, prep.anchors.boxes, [s.image_id for s in scenes], cfg.eval)
    gts = orch.ground_truths(scenes)
    result = orch.evaluate(dets, gts, cfg.scene.num_classes)
    report = {"checkpoint": str(args.checkpoint), "split": split, "config_hash": cfg.config_hash(),
              "checkpoint_meta": meta, "num_detections": len(dets), **result.to_dict()}
    lines = [f"{'class':>8} | {'AP50':>7} | {'AP75':>7}"]
    for c, aps in sorted(result.per_class.items()):
        lines.append(f"{c:>8} | {aps[0.5]:>7.4f} | {aps[0.75]:>7.4f}")
    lines.append(f"map_dota {result.map_dota:.4f}  ap75 {result.ap75:.4f}  map_coco {result.map_coco:.4f}")
    emit(report, "\n".join(lines), out, f"eval_{split}")
    if args.pr_csv:
        for c in range(cfg.scene.num_classes):
            r = pr_report([d for d in dets if d.cls == c], [g for g in gts if g.cls == c],
                          args.pr_iou)
            (out / f"pr_{split}_class{c}.csv").write_text(r.to_csv())
    if args.task1:
        write_task1(dets, out / "task1", [str(c) for c in range(cfg.scene.num_classes)])


def cmd_tile(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = plan_tiles((args.height, args.width), args.tile, args.overlap)
    report = {"image_size": list(plan.image_size), "tile_size": plan.tile_size,
              "overlap": plan.overlap, "pad_value": plan.pad_value,
              "origins": [list(o) for o in plan.origins], "tiles": []}
    anns = []
    if args.annotation:
        try:
            text = Path(args.annotation).read_text()
        except FileNotFoundError:
            raise CLIError(f"annotation file not found: {args.annotation}") from None
        anns = parse_dota_annotation(text)
    boxes = np.array([b.as_array() for b, _, _ in anns]).reshape(-1, 5)
    scene = Scene(np.zeros((0, 0)), boxes, np.array([c for _, c, _ in anns], dtype=int),
                  np.array([d for _, _, d in anns], dtype=bool), image_id=args.image_id)
    for origin in plan.origins:
        tile = crop_scene(scene, origin, plan.tile_size)
        entry = {"image_id": tile.image_id, "origin": list(origin), "objects": len(tile),
                 "clipped": int(np.count_nonzero(tile.clipped)) if len(tile) else 0}
        if args.annotation:
            name = f"{tile.image_id}.txt"
            (out / name).write_text(serialize_dota_annotation(tile.annotations))
            entry["labels"] = name
        report["tiles"].append(entry)
    lines = [f"{'tile':>24} | {'x0':>6} | {'y0':>6} | {'objects':>7}"]
    for t in report["tiles"]:
        lines.append(f"{t['image_id']:>24} | {t['origin'][0]:>6} | {t['origin'][1]:>6} | {t['objects']:>7}")
    emit(report, "\n".join(lines), out, "tiles")


TILE_ID = re.compile(r"^(?P<image>.+)__(?P<x>-?\d+)_(?P<y>-?\d+)$")


def cmd_merge(args) -> None:
    dets = read_task1(args.input)
    groups = defaultdict(lambda: defaultdict(list))
    for d in dets:
        m = TILE_ID.match(d.image_id)
        if not m:
            raise CLIError(f"detection image id {d.image_id!r} is not of the form <image>__<x0>_<y0>")
        groups[m["image"]][(int(m["x"]), int(m["y"]))].append(d)
    merged = []
    for image in sorted(groups):
        origins = sorted(groups[image], key=lambda o: (o[1], o[0]))
        merged.extend(merge_detections([groups[image][o] for o in origins], origins,
                                       args.nms_iou, image_id=image))
    out = Path(args.out)
    write_task1(merged, out)
    report = {"input_detections": len(dets), "merged_detections": len(merged),
              "nms_iou": args.nms_iou,
              "per_image": {img: sum(1 for d in merged if d.image_id == img) for img in sorted(groups)}}
    lines = [f"{'image':>16} | {'tiles':>5} | {'kept':>6}"]
    for img in sorted(groups):
        lines.append(f"{img:>16} | {len(groups[img]):>5} | {report['per_image'][img]:>6}")
    emit(report, "\n".join(lines), out, "merge")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (see README for the schema)")
    p.add_argument("--output-dir", dest="output_dir", help="directory for reports and checkpoints")
    g = p.add_argument_group("config overrides")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-test", dest="n_test", type=int)
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--teacher-width", dest="teacher_width", type=int)
    g.add_argument("--student-width", dest="student_width", type=int)
    for k in ("lambda1", "lambda2", "lambda3", "lambda4"):
        g.add_argument(f"--{k}", type=float)
    g.add_argument("--t-cls", dest="t_cls", type=float)
    g.add_argument("--t-reg", dest="t_reg", type=float)
    g.add_argument("--kd-direction", dest="kd_direction", choices=["as-printed", "classic"])
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--teacher-steps", dest="teacher_steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rotkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset manifest")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the wide detector on hard targets")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-baseline", help="train the narrow detector without distillation")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("distill", help="train the narrow detector against a frozen teacher")
    _add_config_flags(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint (JSON)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("ablate", help="teacher plus baseline / KD-cls / KD-cls+KD-reg table")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a synthetic split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--pr-csv", dest="pr_csv", action="store_true",
                   help="also write per-class precision/recall CSV files")
    p.add_argument("--pr-iou", dest="pr_iou", type=float, default=0.5)
    p.add_argument("--task1", action="store_true", help="also write DOTA Task-1 detection files")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tile", help="plan tiles and split DOTA labels into per-tile files")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--tile", type=int, default=600)
    p.add_argument("--overlap", type=int, default=150)
    p.add_argument("--annotation", help="DOTA v1.0 label file of the full image")
    p.add_argument("--image-id", dest="image_id", default="image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("merge", help="merge per-tile Task-1 detections back to image frames")
    p.add_argument("--input", required=True, help="directory of Task1_<class>.txt with tile ids")
    p.add_argument("--out", required=True)
    p.add_argument("--nms-iou", dest="nms_iou", type=float, default=0.3)
    p.set_defaults(func=cmd_merge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, AnnotationError, orch.TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
