"""Operator CLI: table generation, run experiments, theorem check.

Exit codes: 0 ok, 1 failed check, 2 bad configuration, 3 empty corpus,
4 link failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import offline, transport
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, EmptyCorpus, NonDivisible, StacError
from .frame import read_frame, write_pgm
from .sensitivity import average_frequency_gradients, pixel_to_coeff_gradients, read_gradient_map
from .strategy import (
    UpperboundLadder,
    expectation_ratio,
    expectation_ratio_monte_carlo,
    generate_table_levels,
)
from .synth import moving_shapes_sequence
from .tables import QuantTableSet, RegionGrid
from .toyseg import FileOracle, ToySegmenter

EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_EMPTY_CORPUS = 3
EXIT_LINK_FAILURE = 4


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    overrides = {
        key: getattr(args, key, None)
        for key in ("frames", "labels", "out", "tables", "b", "l", "thr",
                    "region", "subsampling", "oracle", "mode", "fps",
                    "mid_level", "seed")
    }
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def cmd_gen_tables(args) -> int:
    try:
        cfg = _load_run_config(args)
        if cfg.b <= 0:
            raise ConfigError("a positive budget b is required")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    paths = sorted(Path(args.gradients).glob("*.sgrd"))
    if not paths:
        print(f"error: no SGRD files in {args.gradients}", file=sys.stderr)
        return EXIT_EMPTY_CORPUS
    try:
        maps = [read_gradient_map(p) for p in paths]
        coeff_maps = [pixel_to_coeff_gradients(m) for m in maps]
        gbar = average_frequency_gradients(coeff_maps)
    except (StacError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY_CORPUS

    m = sum(p.size for p in maps[0].planes)
    ladder = UpperboundLadder.geometric(cfg.b, cfg.l)
    tset = generate_table_levels(gbar, ladder, m)
    if cfg.share_chroma_ladder:
        tset = QuantTableSet(luma=tset.luma, chroma=tset.luma,
                             b_levels=tset.b_levels)
    out = Path(args.out)
    tset.save(out)
    print(f"wrote {out} (digest {tset.digest().hex()}, M={m}, "
          f"{len(maps)} maps)")
    for i in range(tset.level_count):
        print(f"level {i + 1:2d}: B={ladder.levels[i]:12.4f} "
              f"mean q luma={tset.luma[i].steps.mean():6.1f} "
              f"chroma={tset.chroma[i].steps.mean():6.1f}")
    return 0


def _load_frames(cfg: RunConfig):
    frame_dir = Path(cfg.frames)
    paths = sorted(
        p for p in frame_dir.iterdir() if p.suffix in (".pgm", ".ppm")
    )
    if not paths:
        raise EmptyCorpus(f"no PGM/PPM frames in {frame_dir}")
    frames = [
        read_frame(p, frame_id=i + 1, subsampling=cfg.subsampling)
        for i, p in enumerate(paths)
    ]
    truth = None
    if cfg.labels:
        from .flow import SegmentationMap
        from .frame import pad_to_block_multiple, read_pgm

        label_paths = sorted(Path(cfg.labels).glob("*.pgm"))
        if len(label_paths) != len(paths):
            raise ConfigError(
                f"{len(label_paths)} labels for {len(paths)} frames"
            )
        truth = [
            SegmentationMap(pad_to_block_multiple(read_pgm(p)), i + 1)
            for i, p in enumerate(label_paths)
        ]
    return frames, truth


def _make_oracle(cfg: RunConfig):
    if cfg.oracle == "toy":
        return ToySegmenter.from_fixture()
    return FileOracle(cfg.oracle.split(":", 1)[1])


def cmd_run(args) -> int:
    try:
        cfg = _load_run_config(args)
        if not cfg.frames or not cfg.out:
            raise ConfigError("frames and out are required")
        if cfg.b <= 0:
            raise ConfigError("a positive budget b is required")
        frames, truth = _load_frames(cfg)
        oracle = _make_oracle(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except (EmptyCorpus, StacError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY_CORPUS

    rw, rh = cfg.region_wh
    grid = RegionGrid(rw, rh)
    if cfg.tables:
        tables = QuantTableSet.load(cfg.tables)
    else:
        calib = frames[: min(4, len(frames))]
        gbar = offline.corpus_frequency_gradients(calib, oracle)
        m = offline.coefficient_count(frames[0])
        tables, _ = offline.build_table_set(gbar, cfg.b, m,
                                            level_count=cfg.l)

    link = transport.LoopbackLink(oracle, tables, cfg.b)
    device_cfg = transport.DeviceConfig(
        tables=tables,
        b=cfg.b,
        mode=cfg.mode,
        thr=cfg.thr,
        fps=cfg.fps,
        grid=grid,
        mid_level=cfg.mid_level or None,
    )
    report = transport.device_run(frames, link, device_cfg, truth=truth)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.csv").write_text(report.to_csv())
    for frame, seg in zip(frames, report.segmentations):
        write_pgm(out / f"seg_{frame.frame_id:06d}.pgm",
                  seg.classes[: frame.height, : frame.width])
    print(f"mode={report.mode} frames={report.frame_count} "
          f"offloads={report.offload_count} "
          f"uplink={report.up_bytes} B ({report.uplink_kbps:.2f} Kbps) "
          f"offloaded_fps={report.offloaded_fps:.2f}")
    if report.link_lost:
        print("error: link lost, partial results written", file=sys.stderr)
        return EXIT_LINK_FAILURE
    return 0


def cmd_verify_theorem(args) -> int:
    try:
        closed = expectation_ratio(args.m, args.r_max)
    except NonDivisible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    mc = expectation_ratio_monte_carlo(args.m, args.r_max,
                                       samples=args.samples, seed=args.seed)
    rel = abs(mc - closed) / closed if closed else float("inf")
    print(f"closed-form E1/E2 = {closed:.6f}")
    print(f"monte-carlo E1/E2 = {mc:.6f} ({args.samples} samples, "
          f"rel diff {rel:.3%})")
    if args.r_max > 1 and closed >= 1.0:
        print("FAIL: expected ratio < 1 for r_max > 1", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    frames, labels = moving_shapes_sequence(args.frames, args.width,
                                            args.height, seed=args.seed)
    from .frame import write_ppm

    for f, l in zip(frames, labels):
        write_ppm(out / "frames" / f"{f.frame_id:06d}.ppm", f.to_rgb())
        write_pgm(out / "labels" / f"{f.frame_id:06d}.pgm",
                  l.classes[: f.height, : f.width])
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stac",
        description="Gradient-driven adaptive compression experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--b", type=float, help="loss budget B")
    common.add_argument("--l", type=int, help="ladder levels")
    common.add_argument("--thr", type=float, help="PSNR trigger threshold")
    common.add_argument("--region", help="region size in blocks, e.g. 3x3")
    common.add_argument("--subsampling", choices=("420", "444"))
    common.add_argument("--oracle", help="toy or sgrd:<dir>")
    common.add_argument("--mode", help="stac, uniform[:l] or per-frame")
    common.add_argument("--fps", type=float, help="nominal frame rate")
    common.add_argument("--mid-level", type=int, dest="mid_level")
    common.add_argument("--seed", type=int)

    p = sub.add_parser("gen-tables", parents=[common],
                       help="build an STBL table set from SGRD maps")
    p.add_argument("--gradients", required=True, help="SGRD directory")
    p.add_argument("--out", required=True, help="output STBL path")
    p.set_defaults(func=cmd_gen_tables)

    p = sub.add_parser("run", parents=[common],
                       help="drive a frame directory through the pipeline")
    p.add_argument("--frames", help="directory of PGM/PPM frames")
    p.add_argument("--labels", help="directory of PGM label maps")
    p.add_argument("--tables", help="STBL table-set file")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify-theorem",
                       help="closed-form vs Monte-Carlo budget-split ratio")
    p.add_argument("m", type=int)
    p.add_argument("r_max", type=int)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("synth",
                       help="write the bundled moving-shapes fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
