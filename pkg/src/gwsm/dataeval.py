"""Synthetic multi-label shapes benchmark with pixel ground truth, mIoU
scoring, and the diagnostic (ablation) harness.

Six shape classes on a 32x32 textured canvas.  Hues are deliberately shared
between confusable pairs (disk/ring, square/triangle, cross/bar) so color
alone cannot separate a pair: telling a ring from a disk requires seeing the
hole, a cross from a bar the second arm.  That builds the
discriminative-part pathology into the benchmark by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .camgen import IGNORE, build_cam_stack, make_pseudo_label
from .errors import ContractError, DataError, ShapeError
from .grouping import ImageSample, eval_iterator
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainResult, forward_group, train

SHAPE_CLASSES = ("disk", "square", "triangle", "ring", "cross", "bar")

# RGB base colors; confusable pairs share one.
_CLASS_COLORS = (
    (0.80, 0.25, 0.22),  # disk
    (0.24, 0.72, 0.28),  # square
    (0.24, 0.72, 0.28),  # triangle
    (0.80, 0.25, 0.22),  # ring
    (0.25, 0.35, 0.85),  # cross
    (0.25, 0.35, 0.85),  # bar
)


@dataclass
class ShapesConfig:
    size: int = 100
    seed: int = 0
    canvas: int = 32
    num_classes: int = 6
    min_objects: int = 1
    max_objects: int = 3
    min_radius: int = 6
    max_radius: int = 9
    color_noise: float = 0.06
    background_noise: float = 0.08


# -- shape stencils -----------------------------------------------------------


def _disk(r: int) -> np.ndarray:
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    return dy * dy + dx * dx <= r * r


def _square(r: int) -> np.ndarray:
    return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)


def _triangle(r: int) -> np.ndarray:
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    half = (dy + r) / 2.0
    return np.abs(dx) <= half


def _ring(r: int) -> np.ndarray:
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    d2 = dy * dy + dx * dx
    return (d2 <= r * r) & (d2 > (r - 3) * (r - 3))


def _cross(r: int) -> np.ndarray:
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    return (np.abs(dy) <= 2) | (np.abs(dx) <= 2)


def _bar(r: int) -> np.ndarray:
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    return np.abs(dy) <= 2


_STENCILS: tuple[Callable[[int], np.ndarray], ...] = (
    _disk, _square, _triangle, _ring, _cross, _bar)


def _render_object(cls: int, r: int, rng: np.random.Generator) -> np.ndarray:
    stencil = _STENCILS[cls](r)
    if cls == 5 and rng.random() < 0.5:  # bars come in both orientations
        stencil = stencil.T
    return stencil


def generate_dataset(config: ShapesConfig) -> list[ImageSample]:
    """Deterministic synthetic samples: image, multi-hot label, pixel mask."""
    if config.size < 1:
        raise ContractError(f"dataset size must be >= 1, got {config.size}")
    rng = np.random.default_rng(config.seed)
    n = config.canvas
    samples = []
    for idx in range(config.size):
        base = rng.uniform(0.35, 0.55)
        coarse = rng.uniform(-config.background_noise, config.background_noise,
                             size=(n // 4, n // 4))
        texture = coarse.repeat(4, axis=0).repeat(4, axis=1)
        fine = rng.uniform(-config.background_noise, config.background_noise,
                           size=(n, n))
        gray = base + texture + fine
        image = np.stack([gray, gray, gray])
        image += rng.normal(0.0, 0.02, size=image.shape)

        mask = np.zeros((n, n), dtype=np.uint8)
        count = int(rng.integers(config.min_objects, config.max_objects + 1))
        classes = rng.choice(config.num_classes, size=count, replace=False)
        placed = []
        for cls in classes:
            for _ in range(40):
                r = int(rng.integers(config.min_radius, config.max_radius + 1))
                cy = int(rng.integers(r, n - r))
                cx = int(rng.integers(r, n - r))
                stencil = _render_object(int(cls), r, rng)
                ys, xs = np.nonzero(stencil)
                ys, xs = ys + cy - r, xs + cx - r
                if mask[ys, xs].any():
                    continue
                mask[ys, xs] = cls + 1
                color = np.array(_CLASS_COLORS[cls]) * rng.uniform(0.8, 1.2)
                pix = color[:, None] + rng.normal(
                    0.0, config.color_noise, size=(3, ys.size))
                image[:, ys, xs] = pix
                placed.append(int(cls))
                break
        if not placed:
            raise ContractError("failed to place any object; canvas too small "
                                "for the configured shape sizes")
        label = np.zeros(config.num_classes)
        label[sorted(set(placed))] = 1.0
        image = np.clip(image, 0.0, 1.0)
        samples.append(ImageSample(id=idx, image=Tensor(image), label=label,
                                   gt_mask=mask))
    return samples


# -- disk format ---------------------------------------------------------------


def save_dataset(samples: Sequence[ImageSample], out_dir: str | os.PathLike) -> None:
    """PPM images + PGM masks + one tab-separated manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        name = f"images/{s.id:06d}.ppm"
        rgb = np.round(s.image.data.transpose(1, 2, 0) * 255).astype(np.uint8)
        write_ppm(out / name, rgb)
        write_pgm(out / "masks" / f"{s.id:06d}.pgm", s.gt_mask)
        ids = ",".join(str(c + 1) for c in np.flatnonzero(s.label))
        lines.append(f"{s.id}\t{name}\t{ids}\n")
    with open(out / "manifest.tsv", "w", encoding="ascii") as fh:
        fh.writelines(lines)


def load_dataset(data_dir: str | os.PathLike,
                 num_classes: int = 6) -> list[ImageSample]:
    """Read a dataset directory back; manifest errors carry line numbers."""
    root = Path(data_dir)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest.tsv under {root}")
    samples = []
    with open(manifest, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{manifest}:{lineno}: expected 3 tab-separated "
                                f"fields, got {len(parts)}")
            try:
                sample_id = int(parts[0])
                class_ids = [int(c) for c in parts[2].split(",") if c]
            except ValueError as exc:
                raise DataError(f"{manifest}:{lineno}: {exc}") from exc
            if not class_ids:
                raise DataError(f"{manifest}:{lineno}: no classes listed")
            if any(c < 1 or c > num_classes for c in class_ids):
                raise DataError(f"{manifest}:{lineno}: class id out of range")
            rgb = read_ppm(root / parts[1])
            image = rgb.astype(np.float64).transpose(2, 0, 1) / 255.0
            mask_path = root / "masks" / f"{sample_id:06d}.pgm"
            gt = read_pgm(mask_path) if mask_path.exists() else None
            label = np.zeros(num_classes)
            label[[c - 1 for c in class_ids]] = 1.0
            samples.append(ImageSample(id=sample_id, image=Tensor(image),
                                       label=label, gt_mask=gt))
    return samples


# -- mIoU ----------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-class IoU (background first; NaN when a class is absent from both
    prediction and ground truth), their mean, and the raw pixel tallies."""

    iou: np.ndarray  # (L+1,)
    miou: float
    intersection: np.ndarray  # (L+1,) pixel counts
    union: np.ndarray  # (L+1,)


class IoUAccumulator:
    """Streaming intersection/union tallies over many mask pairs."""

    def __init__(self, num_classes: int, ignore_value: int = IGNORE):
        self.num_classes = num_classes
        self.ignore_value = ignore_value
        self.intersection = np.zeros(num_classes + 1, dtype=np.int64)
        self.union = np.zeros(num_classes + 1, dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
        valid = (pred != self.ignore_value) & (gt != self.ignore_value)
        p, g = pred[valid], gt[valid]
        for c in range(self.num_classes + 1):
            pc, gc = p == c, g == c
            self.intersection[c] += int((pc & gc).sum())
            self.union[c] += int((pc | gc).sum())

    def report(self) -> EvalReport:
        iou = np.full(self.num_classes + 1, np.nan)
        defined = self.union > 0
        iou[defined] = self.intersection[defined] / self.union[defined]
        miou = float(np.nanmean(iou)) if defined.any() else float("nan")
        return EvalReport(iou=iou, miou=miou,
                          intersection=self.intersection.copy(),
                          union=self.union.copy())


def miou(pred: np.ndarray, gt: np.ndarray, ignore_value: int = IGNORE,
         num_classes: int = 6) -> EvalReport:
    """Single-pair IoU report; classes absent from both sides are excluded
    from the mean."""
    acc = IoUAccumulator(num_classes, ignore_value)
    acc.update(np.asarray(pred), np.asarray(gt))
    return acc.report()


# -- model evaluation and the ablation harness ---------------------------------

CAM_SOURCES = ("m", "g", "ens")


def evaluate_pseudo_labels(result: TrainResult, eval_set: Sequence[ImageSample],
                           config: TrainConfig) -> dict[str, EvalReport]:
    """Score pseudo-labels from all three CAM sources against ground truth.

    Evaluation groups are greedy like training ones but keep the remainder,
    and the GNN runs in deterministic eval mode.
    """
    accs = {src: IoUAccumulator(config.num_classes) for src in CAM_SOURCES}
    rng = np.random.default_rng([config.seed, 3])
    with no_grad():
        for group in eval_iterator(eval_set, config.k, rng):
            fwd = forward_group(group, result.backbone, result.gnn, config,
                                seed=0, mode="eval")
            for sample, inter_map, out in zip(group, fwd.inter_maps,
                                              fwd.node_outputs):
                stack = build_cam_stack(sample.id, inter_map, out.class_map,
                                        sample.label)
                image_hw = sample.image.shape[1:]
                for src in CAM_SOURCES:
                    pseudo = make_pseudo_label(stack.by_source(src),
                                               sample.label, config.theta_fg,
                                               config.theta_bg, image_hw,
                                               provenance=src)
                    accs[src].update(pseudo.mask, sample.gt_mask)
    return {src: acc.report() for src, acc in accs.items()}


@dataclass
class AblationRow:
    name: str
    cam_source: str
    miou: float
    report: EvalReport = field(repr=False, default=None)


def ablation_harness(train_set: Sequence[ImageSample],
                     eval_set: Sequence[ImageSample],
                     base_config: TrainConfig,
                     variants: Sequence[tuple[str, dict]]) -> list[AblationRow]:
    """Train each distinct variant config once (shared seed via base_config)
    and score its pseudo-labels.

    A variant is (name, overrides); the special override ``cam_source``
    selects which head's CAMs are scored ("m", "g", or "ens", the default)
    and does not trigger a separate training, so the three source rows of
    one configuration come from a single trained model.
    """
    rows = []
    cache: dict = {}
    for name, overrides in variants:
        source = overrides.get("cam_source", "ens")
        if source not in CAM_SOURCES:
            raise ContractError(f"unknown cam_source {source!r}")
        cfg_overrides = {k: v for k, v in overrides.items() if k != "cam_source"}
        key = tuple(sorted(cfg_overrides.items()))
        if key not in cache:
            cfg = replace(base_config, **cfg_overrides)
            result = train(train_set, cfg)
            cache[key] = evaluate_pseudo_labels(result, eval_set, cfg)
        report = cache[key][source]
        rows.append(AblationRow(name=name, cam_source=source,
                                miou=report.miou, report=report))
    return rows


def default_variants() -> list[tuple[str, dict]]:
    """The diagnostic grid: group size, steps, dropout thresholds, dropout
    removal, and the three CAM sources of the default model."""
    return [
        ("full_model", {}),
        ("K=3", {"k": 3}),
        ("K=5", {"k": 5}),
        ("K=6", {"k": 6}),
        ("T=2", {"t_steps": 2}),
        ("T=4", {"t_steps": 4}),
        ("T=5", {"t_steps": 5}),
        ("dr=0.8,dd=0.9", {"delta_d": 0.9}),
        ("dr=0.8,dd=0.5", {"delta_d": 0.5}),
        ("dr=0.6,dd=0.7", {"delta_r": 0.6}),
        ("dr=0.4,dd=0.7", {"delta_r": 0.4}),
        ("no_dropout", {"dropout": False}),
        ("intermediate_output", {"cam_source": "m"}),
        ("graph_output", {"cam_source": "g"}),
        ("self_ensembling", {"cam_source": "ens"}),
    ]


def format_table(rows: Sequence[AblationRow]) -> str:
    """Aligned plain-text table."""
    name_w = max(len("variant"), *(len(r.name) for r in rows))
    lines = [f"{'variant':<{name_w}}  {'source':<6}  {'mIoU':>7}"]
    lines.append("-" * (name_w + 17))
    for r in rows:
        lines.append(f"{r.name:<{name_w}}  {r.cam_source:<6}  {r.miou:>7.4f}")
    return "\n".join(lines)


def format_csv(rows: Sequence[AblationRow]) -> str:
    out = ["variant,source,miou"]
    for r in rows:
        out.append(f"{r.name},{r.cam_source},{r.miou:.6f}")
    return "\n".join(out) + "\n"
