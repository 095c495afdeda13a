"""Command-line entry point: train, eval, detect, stream, gen-data, grad-check.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import queue
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (IMAGE_SUFFIXES, DatasetError, load_dataset, read_image, render_sample, resize_image,
                   synth_shapes, to_chw, write_ppm)
from .decode import BBox
from .metrics import EvalReport, evaluate_detections
from .model import PRESETS, Model, ModelConfig, build_model, preset
from .train import METRICS_COLUMNS, METRICS_SCHEMA_VERSION, EpochRecord, TrainHyper, TrainingDiverged, evaluate_model, predict, train

logger = logging.getLogger("gridsight")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

PALETTE = np.array([(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180),
                    (70, 240, 240), (240, 50, 230), (210, 245, 60)], dtype=np.uint8)


class InputError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def resolve_config(spec: str) -> ModelConfig:
    """A preset name or a path to a JSON file of ModelConfig fields."""
    if spec in PRESETS:
        return preset(spec)
    path = Path(spec)
    if not path.is_file():
        raise InputError(f"--config {spec!r} is neither a preset ({', '.join(PRESETS)}) nor a JSON file")
    try:
        return ModelConfig.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, TypeError) as e:
        raise InputError(f"{path}: invalid model config: {e}") from e


def format_detection(image_id: str, row) -> str:
    # repr keeps floats exact so a dump reloads bit-for-bit
    return f"{image_id} {int(row[4])} {float(row[5])!r} {float(row[0])!r} {float(row[1])!r} {float(row[2])!r} {float(row[3])!r}"


def write_dump(path: Path, ids: Sequence[str], rows: Sequence[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for image_id, r in zip(ids, rows):
            for row in r:
                f.write(format_detection(image_id, row) + "\n")


def read_dump(path: str | Path) -> dict[str, list[BBox]]:
    """Parse a detections dump into boxes per image id (file order kept)."""
    out: dict[str, list[BBox]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise InputError(f"{path}:{n}: expected 7 fields, got {len(parts)}")
        image_id, cls, score, cx, cy, w, h = parts
        out.setdefault(image_id, []).append(BBox(float(cx), float(cy), float(w), float(h), int(cls), float(score)))
    return out


def evaluate_dump(dump: dict[str, list[BBox]], dataset) -> EvalReport:
    dets = [dump.get(s.id, []) for s in dataset.samples]
    return evaluate_detections(dets, [s.annotations for s in dataset.samples], dataset.num_classes, dataset.class_names)


def draw_boxes(image: np.ndarray, rows: np.ndarray, thickness: int = 2) -> np.ndarray:
    """Draw rectangles (H x W x 3 uint8) in class-indexed colors; returns a copy."""
    out = image.copy()
    H, W = out.shape[:2]
    for r in rows:
        color = PALETTE[int(r[4]) % len(PALETTE)]
        x0 = int(np.clip(np.floor((r[0] - r[2] / 2) * W), 0, W - 1))
        x1 = int(np.clip(np.ceil((r[0] + r[2] / 2) * W) - 1, 0, W - 1))
        y0 = int(np.clip(np.floor((r[1] - r[3] / 2) * H), 0, H - 1))
        y1 = int(np.clip(np.ceil((r[1] + r[3] / 2) * H) - 1, 0, H - 1))
        t = thickness
        out[y0 : min(y0 + t, y1 + 1), x0 : x1 + 1] = color
        out[max(y1 - t + 1, y0) : y1 + 1, x0 : x1 + 1] = color
        out[y0 : y1 + 1, x0 : min(x0 + t, x1 + 1)] = color
        out[y0 : y1 + 1, max(x1 - t + 1, x0) : x1 + 1] = color
    return out


def _load_model(path: str) -> Model:
    if not Path(path).is_file():
        raise InputError(f"checkpoint {path} does not exist")
    model = load_checkpoint(path)
    model.eval()
    return model


def _check_classes(model: Model, dataset, what: str) -> None:
    if model.config.num_classes != dataset.num_classes:
        raise InputError(f"checkpoint has {model.config.num_classes} classes but {what} has {dataset.num_classes}")


# -------------------------------------------------------------------- train


def cmd_train(args) -> int:
    root = Path(args.data)
    if not (root / "images" / "train").is_dir():
        raise InputError(f"dataset {root} has no images/train directory")
    cfg = resolve_config(args.config)
    train_set = load_dataset(root, "train", size=cfg.input_size)
    if len(train_set) == 0 and args.epochs > 0:
        raise InputError(f"dataset {root} has an empty train split")
    val_set = None
    if (root / "images" / "val").is_dir():
        val_set = load_dataset(root, "val", size=cfg.input_size)
        if len(val_set) == 0:
            val_set = None
    cfg = ModelConfig.from_dict({**cfg.to_dict(), "num_classes": train_set.num_classes, "seed": args.seed})
    model = build_model(cfg)
    hyper = TrainHyper(epochs=args.epochs, batch_size=args.batch, lr=args.lr, momentum=args.momentum,
                       weight_decay=args.weight_decay, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        csv.writer(f, lineterminator="\n").writerow(METRICS_COLUMNS)
    # the CSV header is frozen; its schema version travels in checkpoint metadata
    meta = {"metrics_schema": METRICS_SCHEMA_VERSION}
    save_checkpoint(model, out / "last.gsd", {**meta, "epoch": 0})
    save_checkpoint(model, out / "best.gsd", {**meta, "epoch": 0})
    best = [-1.0]

    def on_epoch(rec: EpochRecord, m: Model) -> None:
        with open(csv_path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(rec.csv_row())
        score = rec.report.map50 if rec.report else 0.0
        save_checkpoint(m, out / "last.gsd", {**meta, "epoch": rec.epoch})
        if score > best[0]:
            best[0] = score
            save_checkpoint(m, out / "best.gsd", {**meta, "epoch": rec.epoch, "map50": score})
        print(f"epoch {rec.epoch}/{hyper.epochs}  " + "  ".join(f"{k} {v:.4f}" for k, v in rec.losses.items())
              + (f"  map50 {rec.report.map50:.4f}  map50_95 {rec.report.map50_95:.4f}" if rec.report else ""), flush=True)

    if args.epochs > 0:
        try:
            train(model, train_set, hyper, val_set, on_epoch)
        except TrainingDiverged as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_NUMERIC
    print(f"wrote {out / 'best.gsd'}, {out / 'last.gsd'} and {csv_path}")
    return EXIT_OK


# --------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    root = Path(args.data)
    if not (root / "images" / args.split).is_dir():
        raise InputError(f"dataset {root} has no images/{args.split} directory")
    dataset = load_dataset(root, args.split, size=model.config.input_size)
    _check_classes(model, dataset, f"dataset {root}")
    report, rows = evaluate_model(model, dataset, args.conf, args.iou)
    if args.dump:
        write_dump(Path(args.dump), [s.id for s in dataset.samples], rows)
    print(report.table())
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(report.csv_rows())
    print(buf.getvalue(), end="")
    if args.csv:
        Path(args.csv).write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


# ------------------------------------------------------------------- detect


def _image_paths(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        return sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
    if p.exists():
        return [p]
    raise InputError(f"input {spec} does not exist")


def cmd_detect(args) -> int:
    model = _load_model(args.ckpt)
    paths = _image_paths(args.input)
    if not paths:
        raise InputError(f"no images found in {args.input}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ok, ids, all_rows = 0, [], []
    for path in paths:
        try:
            img = read_image(path)
        except (OSError, ValueError) as e:
            logger.warning("skipping %s: %s", path, e)
            continue
        x = resize_image(to_chw(img), model.config.input_size)[None]
        rows = predict(model, x, args.conf, args.iou)[0]
        write_ppm(out / f"{path.stem}.ppm", draw_boxes(img, rows))
        ids.append(path.stem)
        all_rows.append(rows)
        ok += 1
        print(f"{path.name}: {len(rows)} detection(s)")
    write_dump(out / "detections.txt", ids, all_rows)
    if ok == 0:
        print("error: no readable images", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


# ------------------------------------------------------------------- stream


@dataclass
class LatencyReport:
    """Per-frame inference wall-clock times (non-deterministic values)."""

    frame_ms: list[float]
    preset: str
    wall_s: float = 0.0
    fps_target: float | None = None
    mean: float = field(init=False)
    p50: float = field(init=False)
    p95: float = field(init=False)

    def __post_init__(self):
        if not self.frame_ms:
            raise ValueError("latency report needs at least one frame")
        a = np.asarray(self.frame_ms)
        self.mean, self.p50, self.p95 = float(a.mean()), float(np.percentile(a, 50)), float(np.percentile(a, 95))

    @property
    def frames(self) -> int:
        return len(self.frame_ms)

    @property
    def achieved_fps(self) -> float:
        return self.frames / self.wall_s if self.wall_s > 0 else 1000.0 / self.mean

    def text(self) -> str:
        lines = [
            "# latency values are wall-clock measurements and are not deterministic",
            f"preset {self.preset}",
            f"frames {self.frames}",
            f"mean_ms {self.mean:.3f}",
            f"p50_ms {self.p50:.3f}",
            f"p95_ms {self.p95:.3f}",
            f"achieved_fps {self.achieved_fps:.3f}",
            f"inference_bound_fps {1000.0 / self.mean:.3f}",
        ]
        if self.fps_target:
            lines.append(f"fps_target {self.fps_target:.3f}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        return "frame,latency_ms\n" + "".join(f"{k},{v:.6f}\n" for k, v in enumerate(self.frame_ms))


def frame_source(spec: str, size: int) -> Iterator[tuple[str, np.ndarray]]:
    """Frames from a directory of images or ``synth:N[:seed]``."""
    if spec.startswith("synth:"):
        parts = spec.split(":")[1:]
        try:
            n = int(parts[0])
            seed = int(parts[1]) if len(parts) > 1 else 0
        except (ValueError, IndexError) as e:
            raise InputError(f"bad generator spec {spec!r}; expected synth:N[:seed]") from e
        rng = np.random.default_rng(seed)
        for k in range(n):
            img, _ = render_sample(rng, size, 3)
            yield f"{k:06d}", to_chw(img)
        return
    for p in _image_paths(spec):
        yield p.stem, resize_image(to_chw(read_image(p)), size)


def run_stream(model: Model, frames: Iterator[tuple[str, np.ndarray]], conf: float = 0.25, iou: float = 0.45,
               fps_target: float | None = None, capacity: int = 2) -> tuple[list[tuple[str, np.ndarray]], LatencyReport]:
    """Decode frames on a worker thread, infer in FIFO order on the caller's thread.

    Latency covers the inference call only.
    """
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    error: list[BaseException] = []

    def producer():
        try:
            for item in frames:
                q.put(item)
        except BaseException as e:  # surfaced on the consumer side
            error.append(e)
        finally:
            q.put(done)

    worker = threading.Thread(target=producer, daemon=True)
    worker.start()
    results, times = [], []
    period = 1.0 / fps_target if fps_target else 0.0
    start = time.perf_counter()
    while True:
        item = q.get()
        if item is done:
            break
        frame_id, image = item
        t0 = time.perf_counter()
        rows = predict(model, image[None].astype(model.config.dtype, copy=False), conf, iou)[0]
        times.append((time.perf_counter() - t0) * 1000.0)
        results.append((frame_id, rows))
        if period:
            wait = start + len(results) * period - time.perf_counter()
            if wait > 0:
                time.sleep(wait)
    wall = time.perf_counter() - start
    worker.join()
    if error:
        raise error[0]
    if not times:
        raise InputError("frame source is empty")
    return results, LatencyReport(times, model.config.name, wall, fps_target)


def cmd_stream(args) -> int:
    if args.ckpt:
        model = _load_model(args.ckpt)
    else:
        model = build_model(preset(args.preset))
        model.eval()
    results, report = run_stream(model, frame_source(args.frames, model.config.input_size), args.conf, args.iou,
                                 args.fps_target)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_dump(out / "detections.txt", [r[0] for r in results], [r[1] for r in results])
        (out / "latency.txt").write_text(report.text(), encoding="utf-8")
        (out / "latency.csv").write_text(report.csv(), encoding="utf-8")
    print(report.text(), end="")
    return EXIT_OK


# ----------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    n_val = args.n // 8 if args.n_val is None else args.n_val
    try:
        out = synth_shapes(args.out, args.n, n_val, args.classes, args.size, args.seed)
    except ValueError as e:
        raise InputError(str(e)) from e
    print(f"wrote {args.n} train / {n_val} val images to {out}")
    return EXIT_OK


# --------------------------------------------------------------- grad-check


def cmd_grad_check(args) -> int:
    from .gradcheck import format_table, run_suite

    resolve_config(args.config)  # validated; block cases use fixed toy shapes in float64
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    results = run_suite(seeds, args.tol)
    print(f"gradient check: float64, seeds {seeds[0]}..{seeds[-1]}, relative tolerance {args.tol:g}")
    print(format_table(results))
    failed = sorted({r.name for _, r in results if not r.passed})
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_NUMERIC
    print(f"all {len({r.name for _, r in results})} cases passed")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridsight", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a YOLO-format dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default="c", help="preset name or JSON config file")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=TrainHyper.lr)
    t.add_argument("--momentum", type=float, default=TrainHyper.momentum)
    t.add_argument("--weight-decay", type=float, default=TrainHyper.weight_decay)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--conf", type=float, default=0.001)
    e.add_argument("--iou", type=float, default=0.45)
    e.add_argument("--dump", help="write detections dump here")
    e.add_argument("--csv", help="write the report CSV here")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="annotate images with detections")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--input", required=True, help="image file or directory")
    d.add_argument("--out", required=True)
    d.add_argument("--conf", type=float, default=0.25)
    d.add_argument("--iou", type=float, default=0.45)
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("stream", help="run a frame stream and report latency")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--preset", choices=sorted(PRESETS), help="untrained preset (latency benchmarking)")
    s.add_argument("--frames", required=True, help="directory of frames or synth:N[:seed]")
    s.add_argument("--fps-target", type=float, default=None)
    s.add_argument("--conf", type=float, default=0.25)
    s.add_argument("--iou", type=float, default=0.45)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stream)

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    g.add_argument("--n", type=int, required=True, help="training images")
    g.add_argument("--n-val", type=int, default=None, help="validation images (default n // 8)")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--size", type=int, default=160)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("grad-check", help="finite-difference check of every primitive and block")
    c.add_argument("--config", default="c")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, DatasetError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
