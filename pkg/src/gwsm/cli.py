"""Command-line driver: data generation, training, CAM/pseudo-label export,
evaluation, the diagnostic harness, and the affinity cost benchmark.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .camgen import build_cam_stack, make_pseudo_label, save_heatmap, \
    save_overlay, save_pseudo_label
from .checkpoint import config_from_items, config_to_text, parse_config_text, \
    restore_model, save_checkpoint
from .dataeval import IoUAccumulator, ShapesConfig, ablation_harness, \
    default_variants, evaluate_pseudo_labels, format_csv, format_table, \
    generate_dataset, load_dataset, save_dataset
from .errors import ContractError, DataError, NumericError, ShapeError
from .gnn import MultCounter, count_costs, edge_affinity_full, \
    edge_affinity_lowrank
from .grouping import eval_iterator
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainResult, forward_group, train


class _Parser(argparse.ArgumentParser):
    """argparse flavor whose usage failures exit with code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path: str | None, seed: int | None) -> TrainConfig:
    if path is None:
        config = TrainConfig()
    else:
        text = Path(path).read_text(encoding="utf-8")
        config = config_from_items(parse_config_text(text, source=path))
    if seed is not None:
        items = config.as_dict()
        items["seed"] = seed
        config = TrainConfig(**items)
    return config


def _echo_config(config: TrainConfig) -> None:
    parts = []
    for line in config_to_text(config).splitlines():
        key, value = (p.strip() for p in line.split("=", 1))
        parts.append(f"{key}={value}")
    print("config: " + " ".join(parts))


def _restore(ckpt: str):
    if not Path(ckpt).exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    return restore_model(ckpt)


def _foreach_eval_image(ckpt: str, data_dir: str):
    """Yield (sample, cam_stack) for every image, groups in eval mode."""
    config, backbone, gnn_params = _restore(ckpt)
    dataset = load_dataset(data_dir, num_classes=config.num_classes)
    result = TrainResult(backbone=backbone, gnn=gnn_params)
    rng = np.random.default_rng([config.seed, 3])
    with no_grad():
        for group in eval_iterator(dataset, config.k, rng):
            fwd = forward_group(group, result.backbone, result.gnn, config,
                                seed=0, mode="eval")
            for sample, inter_map, out in zip(group, fwd.inter_maps,
                                              fwd.node_outputs):
                yield config, sample, build_cam_stack(
                    sample.id, inter_map, out.class_map, sample.label)


def cmd_gen_data(args) -> int:
    config = ShapesConfig(size=args.size, seed=args.seed, canvas=args.canvas)
    samples = generate_dataset(config)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    _echo_config(config)
    dataset = load_dataset(args.data, num_classes=config.num_classes)
    result = train(dataset, config)
    named = result.backbone.named_parameters() + result.gnn.named_parameters()
    save_checkpoint(args.out, config, named)
    log_path = args.log or (args.out + ".log")
    with open(log_path, "w", encoding="ascii") as fh:
        for record in result.log:
            fh.write(json.dumps(record) + "\n")
    final = result.log[-1] if result.log else {}
    print(f"trained {config.epochs} epochs; final loss "
          f"{final.get('loss', float('nan')):.4f}; checkpoint {args.out}")
    return 0


def cmd_cam(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wanted = set(int(i) for i in args.ids.split(",")) if args.ids else None
    sources = ("m", "g", "ens") if args.source == "all" else (args.source,)
    n = 0
    for config, sample, stack in _foreach_eval_image(args.ckpt, args.data):
        if wanted is not None and sample.id not in wanted:
            continue
        for src in sources:
            cams = stack.by_source(src)
            for c in np.flatnonzero(sample.label):
                save_heatmap(out / f"{sample.id:06d}_cls{c + 1}_{src}.pgm",
                             cams[c])
                save_overlay(out / f"{sample.id:06d}_cls{c + 1}_{src}.ppm",
                             sample.image.data, cams[c])
                n += 1
    print(f"wrote {n} heatmaps to {out}")
    return 0


def cmd_pseudo(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for config, sample, stack in _foreach_eval_image(args.ckpt, args.data):
        theta_fg = args.theta_fg if args.theta_fg is not None else config.theta_fg
        theta_bg = args.theta_bg if args.theta_bg is not None else config.theta_bg
        pseudo = make_pseudo_label(stack.by_source(args.source), sample.label,
                                   theta_fg, theta_bg, sample.image.shape[1:],
                                   provenance=args.source)
        save_pseudo_label(out / f"{sample.id:06d}.pgm", pseudo)
        n += 1
    print(f"wrote {n} pseudo-label masks to {out}")
    return 0


def cmd_eval(args) -> int:
    from .imageio import read_pgm

    dataset = load_dataset(args.data)
    acc = IoUAccumulator(num_classes=6)
    for sample in dataset:
        pred_path = Path(args.pred) / f"{sample.id:06d}.pgm"
        if not pred_path.exists():
            raise DataError(f"missing prediction mask {pred_path}")
        if sample.gt_mask is None:
            raise DataError(f"dataset sample {sample.id} has no ground truth")
        acc.update(read_pgm(pred_path), sample.gt_mask)
    report = acc.report()
    names = ["background", "disk", "square", "triangle", "ring", "cross", "bar"]
    print(f"{'class':<12}{'IoU':>8}")
    for name, value in zip(names, report.iou):
        shown = "-" if np.isnan(value) else f"{value:.4f}"
        print(f"{name:<12}{shown:>8}")
    print(f"{'mIoU':<12}{report.miou:>8.4f}")
    if args.csv:
        with open(args.csv, "w", encoding="ascii") as fh:
            fh.write("class,iou\n")
            for name, value in zip(names, report.iou):
                fh.write(f"{name},{'' if np.isnan(value) else f'{value:.6f}'}\n")
            fh.write(f"miou,{report.miou:.6f}\n")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config, args.seed)
    train_set = load_dataset(args.data, num_classes=config.num_classes)
    eval_set = load_dataset(args.eval_data, num_classes=config.num_classes)
    rows = ablation_harness(train_set, eval_set, config, default_variants())
    table = format_table(rows)
    print(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table + "\n", encoding="ascii")
    (out / "ablation.csv").write_text(format_csv(rows), encoding="ascii")
    return 0


def _bench_case(w: int, h: int, c: int, d: int, reps: int = 3) -> dict:
    costs = count_costs(w, h, c, d)
    rng = np.random.default_rng(0)
    wh = w * h
    h_i = Tensor(rng.normal(size=(wh, c)))
    h_j = Tensor(rng.normal(size=(wh, c)))
    p = Tensor(rng.normal(size=(c, c // d)))
    q = Tensor(rng.normal(size=(c, c // d)))
    w_full = Tensor(p.data @ q.data.T)

    counter_lr = MultCounter()
    edge_affinity_lowrank(h_i, h_j, p, q, counter=counter_lr)
    counter_full = MultCounter()
    edge_affinity_full(h_i, h_j, w_full, counter=counter_full)

    with no_grad():
        t0 = time.perf_counter()
        for _ in range(reps):
            edge_affinity_lowrank(h_i, h_j, p, q)
        t_lr = (time.perf_counter() - t0) / reps
        t0 = time.perf_counter()
        for _ in range(reps):
            edge_affinity_full(h_i, h_j, w_full)
        t_full = (time.perf_counter() - t0) / reps
    return {**costs, "counted_lowrank": counter_lr.total,
            "counted_full": counter_full.total,
            "time_full_s": t_full, "time_lowrank_s": t_lr,
            "w": w, "h": h, "c": c, "d": d}


def cmd_bench_edge(args) -> int:
    if args.cases:
        cases = []
        for case in args.cases.split(";"):
            parts = [int(x) for x in case.split(",")]
            if len(parts) != 4:
                raise ContractError(f"case must be W,H,C,d, got {case!r}")
            cases.append(tuple(parts))
    else:
        cases = [(2, 2, 4, 2), (4, 4, 16, 4), (4, 4, 64, 4),
                 (8, 8, 64, 4), (2, 2, 512, 4)]
    header = (f"{'W':>3} {'H':>3} {'C':>4} {'d':>2} "
              f"{'mults_full':>12} {'mults_lowrank':>14} "
              f"{'counted':>12} {'match':>6} "
              f"{'params_full':>12} {'params_lowrank':>14} "
              f"{'t_full_ms':>10} {'t_lowrank_ms':>12}")
    print(header)
    for w, h, c, d in cases:
        r = _bench_case(w, h, c, d)
        match = "yes" if (r["counted_lowrank"] == r["mults_lowrank"]
                          and r["counted_full"] == r["mults_full"]) else "NO"
        print(f"{w:>3} {h:>3} {c:>4} {d:>2} "
              f"{r['mults_full']:>12} {r['mults_lowrank']:>14} "
              f"{r['counted_lowrank']:>12} {match:>6} "
              f"{r['params_full']:>12} {r['params_lowrank']:>14} "
              f"{r['time_full_s'] * 1e3:>10.3f} {r['time_lowrank_s'] * 1e3:>12.3f}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="gwsm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=32)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="JSONL training log path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("cam", help="export CAM heatmaps and overlays")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", choices=["m", "g", "ens", "all"], default="ens")
    p.add_argument("--ids", default=None, help="comma-separated sample ids")
    p.set_defaults(fn=cmd_cam)

    p = sub.add_parser("pseudo", help="export pseudo-label masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", choices=["m", "g", "ens"], default="ens")
    p.add_argument("--theta-fg", type=float, default=None)
    p.add_argument("--theta-bg", type=float, default=None)
    p.set_defaults(fn=cmd_pseudo)

    p = sub.add_parser("eval", help="score prediction masks against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the diagnostic variant table")
    p.add_argument("--data", required=True, help="training dataset dir")
    p.add_argument("--eval-data", required=True, help="evaluation dataset dir")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench-edge",
                       help="affinity cost benchmark: counts and wall-clock")
    p.add_argument("--cases", default=None,
                   help="semicolon-separated W,H,C,d tuples")
    p.set_defaults(fn=cmd_bench_edge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ContractError, ShapeError) as exc:
        print(f"gwsm: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"gwsm: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"gwsm: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
