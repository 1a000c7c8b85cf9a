"""Command-line orchestration: train, match, eval, inspect, stereogram.

Outputs are written atomically (temp file + rename) after all computation
succeeds, so failed runs leave no partial files behind.
"""

import argparse
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cost_volume import (
    build_dsi_census,
    build_dsi_learned,
    build_dsi_sad,
    derive_right_dsi,
    write_dsi,
)
from .disparity import consistency_check, fill_invalid, pad_to_full, subpixel_refine, wta
from .evaluation import combine_reports, make_random_dot_stereogram, n_pixel_error
from .imaging import (
    DisparityMap,
    encode_kitti_disparity,
    load_image,
    read_disparity_png,
    write_disparity_png,
    write_image_png,
)
from .network import (
    ConfigError,
    ConvLayer,
    GeometryError,
    build_network,
    count_parameters,
    load_weights,
    natural_patch_size,
    save_weights,
    size_chain,
)
from .sgm import Penalties, aggregate_all
from .training import (
    TrainerConfig,
    generate_patch_pairs,
    read_manifest,
    train,
    write_loss_csv,
)

COST_SOURCES = ("census", "sad", "learned")


@dataclass
class PipelineConfig:
    cost: str = "census"
    weights_path: str = None
    window: int = 5
    d_max: int = 127
    penalties: Penalties = field(default_factory=Penalties)
    consistency_threshold: float = 1.0
    subpixel: bool = True
    fill: bool = True

    def __post_init__(self):
        if self.cost not in COST_SOURCES:
            raise ValueError(f"cost source must be one of {COST_SOURCES}")
        if self.cost == "learned" and not self.weights_path:
            raise ValueError("learned cost needs a weights file")
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")


def run_pipeline(left, right, config, extractor=None):
    """Full matching chain on a normalized image pair.

    cost volume -> 4-direction aggregation -> WTA -> subpixel -> derived
    right volume / WTA -> consistency check -> hole filling -> edge padding.
    Returns (DisparityMap at full resolution, stage timings, raw volume).
    """
    timings = []

    def timed(stage, fn):
        t0 = time.perf_counter()
        result = fn()
        timings.append((stage, time.perf_counter() - t0))
        return result

    if config.cost == "learned":
        if extractor is None:
            raise ValueError("learned cost needs a feature extractor")
        dsi = timed("cost volume (learned)",
                    lambda: build_dsi_learned(left, right, extractor, config.d_max))
    elif config.cost == "sad":
        dsi = timed("cost volume (sad)",
                    lambda: build_dsi_sad(left, right, config.window, config.d_max))
    else:
        dsi = timed("cost volume (census)",
                    lambda: build_dsi_census(left, right, config.window, config.d_max))

    aggregated = timed("sgm aggregation", lambda: aggregate_all(dsi, config.penalties))
    d_left = timed("winner-take-all", lambda: wta(aggregated))
    if config.subpixel:
        d_left = timed("subpixel refinement", lambda: subpixel_refine(aggregated, d_left))
    d_right = timed("right view (inner check)",
                    lambda: wta(derive_right_dsi(aggregated)))
    mask = timed("consistency check",
                 lambda: consistency_check(d_left, d_right, config.consistency_threshold))
    if config.fill:
        result = timed("hole filling", lambda: fill_invalid(d_left, mask))
    else:
        result = DisparityMap(d_left.values, mask)
    result = timed("edge padding", lambda: pad_to_full(result, left.shape))
    return result, timings, dsi


def _atomic_write(path, writer):
    """Run writer(tmp_path) and rename the result into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.",
                               suffix=path.suffix)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_match(args):
    extractor = None
    if args.cost == "learned":
        if not args.weights or not os.path.exists(args.weights):
            raise FileNotFoundError(f"weights file not found: {args.weights}")
        extractor = load_weights(args.weights)
    config = PipelineConfig(
        cost=args.cost,
        weights_path=args.weights,
        window=args.window,
        d_max=args.dmax,
        penalties=Penalties(args.p1, args.p2),
        consistency_threshold=args.consistency_threshold,
        subpixel=not args.no_subpixel,
        fill=not args.no_fill,
    )
    left = load_image(args.left)
    right = load_image(args.right)
    result, timings, dsi = run_pipeline(left, right, config, extractor)
    if args.dump_dsi:
        _atomic_write(args.dump_dsi, lambda tmp: write_dsi(tmp, dsi))
    _atomic_write(args.output, lambda tmp: write_disparity_png(tmp, result))
    for stage, elapsed in timings:
        print(f"{stage:28s} {elapsed * 1000.0:9.1f} ms")
    print(f"wrote {args.output}")
    return 0


def _collect_pairs(est_path, gt_path):
    est_path, gt_path = Path(est_path), Path(gt_path)
    if est_path.is_dir() != gt_path.is_dir():
        raise ValueError("estimate and ground truth must both be files or both directories")
    if not est_path.is_dir():
        return [(est_path, gt_path)]
    gt_names = {p.name: p for p in sorted(gt_path.glob("*.png"))}
    pairs = [(p, gt_names[p.name]) for p in sorted(est_path.glob("*.png")) if p.name in gt_names]
    if not pairs:
        raise ValueError("no estimate/ground-truth PNG pairs with matching names found")
    return pairs


def cmd_eval(args):
    thresholds = tuple(int(t) for t in args.thresholds.split(","))
    pairs = _collect_pairs(args.estimate, args.gt)
    reports = []
    for est_file, gt_file in pairs:
        est = read_disparity_png(est_file)
        gt = read_disparity_png(gt_file)
        reports.append(n_pixel_error(est, gt, thresholds))
    report = combine_reports(reports)
    print(f"evaluated {len(pairs)} disparity map(s)")
    print(report)
    if args.csv:
        _atomic_write(args.csv, report.to_csv)
        print(f"wrote {args.csv}")
    return 0


def cmd_train(args):
    triples = read_manifest(args.manifest)
    if not triples:
        raise ValueError(f"manifest {args.manifest} lists no image triples")
    for triple in triples:
        for path in triple:
            if not os.path.exists(path):
                raise FileNotFoundError(f"manifest references missing file: {path}")

    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(triples))
    n_train = max(1, int(round(len(triples) * args.train_fraction)))
    train_ids = set(order[:n_train].tolist())

    samples = []
    held_out = []
    for i, (left_path, right_path, gt_path) in enumerate(triples):
        left = load_image(left_path)
        right = load_image(right_path)
        gt = read_disparity_png(gt_path)
        bucket = samples if i in train_ids else held_out
        bucket.extend(generate_patch_pairs(left, right, gt, args.patch))
    if not samples:
        raise ValueError("no usable training samples (all pixels invalid or out of bounds)")
    print(f"{len(samples)} training samples from {n_train} image(s); "
          f"{len(held_out)} held-out samples")

    extractor = build_network(args.net, channels=args.channels, seed=args.seed)
    config = TrainerConfig(
        batch_size=args.batch,
        iterations=args.iterations,
        learning_rate=args.lr,
        momentum=args.momentum,
        seed=args.seed,
    )

    checkpoint_every = args.checkpoint_every

    def on_checkpoint(iteration, net):
        path = f"{args.output}.iter{iteration}"
        _atomic_write(path, lambda tmp: save_weights(net, tmp))
        print(f"checkpoint: {path}")

    _, trace = train(
        samples, extractor, config,
        checkpoint_every=checkpoint_every,
        on_checkpoint=on_checkpoint if checkpoint_every else None,
    )
    _atomic_write(args.output, lambda tmp: save_weights(extractor, tmp))
    print(f"final loss {trace[-1][1]:.4f} after {config.iterations} iterations")
    print(f"wrote {args.output}")
    if args.loss_csv:
        _atomic_write(args.loss_csv, lambda tmp: write_loss_csv(tmp, trace))
        print(f"wrote {args.loss_csv}")
    return 0


def cmd_inspect(args):
    extractor = build_network(args.net, channels=args.channels)
    if args.input_size:
        input_size = args.input_size
    else:
        try:
            input_size = natural_patch_size(extractor)
        except GeometryError:
            input_size = 37
    print(f"network: {args.net}")
    for i, block in enumerate(extractor.blocks, start=1):
        op = block.op
        kind = "deconv" if type(op).__name__ == "DeconvLayer" else "conv"
        parts = [f"  {i:2d}  {kind:6s} k={op.kernel_size:<2d} s={op.stride} p={op.padding}"
                 f"  {op.in_channels}->{op.out_channels}"]
        if block.bn is not None:
            parts.append("+BN")
        if block.relu:
            parts.append("+ReLU")
        if op.bias is not None:
            parts.append("+bias")
        print(" ".join(parts))
    print(f"parameters: {count_parameters(extractor)}")
    try:
        chain = size_chain(extractor, input_size)
        print(f"size chain (input {input_size}): " + " -> ".join(str(s) for s in chain))
        verdict = "PASS" if chain[-1] == 1 else "FAIL"
        print(f"geometry check (input {input_size} -> 1x1): {verdict}")
    except GeometryError as exc:
        print(f"size chain (input {input_size}): {exc}")
        print(f"geometry check (input {input_size} -> 1x1): FAIL")
    return 0


def _parse_blocks(specs):
    blocks = []
    for spec in specs or []:
        parts = spec.split(",")
        if len(parts) != 5:
            raise ValueError("--block expects x,y,width,height,disparity")
        blocks.append(tuple(int(p) for p in parts))
    return blocks


def cmd_stereogram(args):
    rows, _, cols = args.size.partition("x")
    rows, cols = int(rows), int(cols)
    field_map = np.full((rows, cols), args.background, dtype=np.int64)
    for x, y, w, h, d in _parse_blocks(args.block):
        field_map[y:y + h, x:x + w] = d
    left, right, gt = make_random_dot_stereogram((rows, cols), field_map, seed=args.seed)
    prefix = args.out_prefix
    _atomic_write(f"{prefix}_left.png", lambda tmp: write_image_png(tmp, left))
    _atomic_write(f"{prefix}_right.png", lambda tmp: write_image_png(tmp, right))
    _atomic_write(f"{prefix}_gt.png", lambda tmp: write_disparity_png(tmp, gt))
    print(f"wrote {prefix}_left.png {prefix}_right.png {prefix}_gt.png")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stereomatch",
        description="Dense stereo matching: learned or classical costs, "
                    "SGM aggregation, and post-processing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="compute a disparity map for a stereo pair")
    p.add_argument("left")
    p.add_argument("right")
    p.add_argument("-o", "--output", required=True, help="output 16-bit disparity PNG")
    p.add_argument("--cost", choices=COST_SOURCES, default="census")
    p.add_argument("--weights", help="weights file for the learned cost")
    p.add_argument("--window", type=int, default=5, help="census/SAD window size")
    p.add_argument("--dmax", type=int, default=127)
    p.add_argument("--p1", type=float, default=30.0)
    p.add_argument("--p2", type=float, default=160.0)
    p.add_argument("--consistency-threshold", type=float, default=1.0)
    p.add_argument("--no-subpixel", action="store_true")
    p.add_argument("--no-fill", action="store_true")
    p.add_argument("--dump-dsi", help="also write the raw cost volume")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="n-pixel error of disparity maps against ground truth")
    p.add_argument("estimate", help="disparity PNG or directory of PNGs")
    p.add_argument("gt", help="ground-truth PNG or directory (matched by file name)")
    p.add_argument("--thresholds", default="2,3,4,5")
    p.add_argument("--csv", help="write the report as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train a feature network from a manifest")
    p.add_argument("manifest", help="text file: left right gt paths per line")
    p.add_argument("--net", required=True, help="preset name or grammar string")
    p.add_argument("-o", "--output", required=True, help="output weights file")
    p.add_argument("--patch", type=int, default=37)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--iterations", type=int, default=40000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inspect", help="layer sizes, parameter count, geometry check")
    p.add_argument("--net", required=True)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--input-size", type=int)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("stereogram", help="generate a random-dot test pair with ground truth")
    p.add_argument("--size", default="128x128", help="ROWSxCOLS")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--background", type=int, default=0)
    p.add_argument("--block", action="append", help="x,y,width,height,disparity (repeatable)")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_stereogram)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, GeometryError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
