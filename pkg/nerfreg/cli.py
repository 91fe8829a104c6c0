"""
nerfreg command line
Subcommands for every pipeline stage. All commands accept --seed, --config,
--out and --verbose; outputs (including nerfreg.log and the effective
configuration dump) go under --out.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline
from .config import APP_NAME, DATA_DIR, RunConfig, cache_dir, format_config, load_config
from .utils.timing import get_timer

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

DEFAULT_OUT = {
    "synth-data": DATA_DIR,
    "train-reg": Path("runs") / "registration",
    "register": Path("registration.json"),
    "evaluate": Path("runs") / "evaluation",
    "plot": Path("runs") / "plots",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Override the seed of every stage")
    common.add_argument("--config", type=Path, default=None, help="key=value configuration file")
    common.add_argument("--out", type=Path, default=None, help="Output file or directory")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    parser = argparse.ArgumentParser(prog=APP_NAME, description="Registration of NeRF blocks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="Render synthetic two-block objects")
    p.add_argument("--meshes", type=Path, nargs="*", default=[], help="Mesh files (one object each)")

    p = sub.add_parser("train-nerf", parents=[common], help="Train NeRF blocks")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--block", type=Path, help="One block directory")
    group.add_argument("--manifest", type=Path, help="Every block listed in a manifest")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("extract-grid", parents=[common], help="Extract DRGV voxel grids")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", type=Path, help="One NeRF checkpoint")
    group.add_argument("--manifest", type=Path, help="Every block listed in a manifest")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train-reg", parents=[common], help="Train the registration network")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None, help="Registration checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("register", parents=[common], help="Register a source block to a target block")
    p.add_argument("--source", type=Path, required=True, help="NeRF checkpoint or .drgv grid")
    p.add_argument("--target", type=Path, required=True, help="NeRF checkpoint or .drgv grid")
    p.add_argument("--model", type=Path, required=True, help="Registration checkpoint")
    p.add_argument("--gt", type=Path, default=None, help="gt_transform.json for RRE/RTE")
    p.add_argument("--ransac", action="store_true")
    p.add_argument("--render-dir", type=Path, default=None, help="Render aligned novel views here")
    p.add_argument("--dump-points", type=Path, default=None, help="Write source/target feature points (DRGP) here")

    p = sub.add_parser("evaluate", parents=[common], help="Evaluate on the test split of a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--model", type=Path, default=None,
                   help="Registration checkpoint (default: registration.ckpt under --out)")
    p.add_argument("--ransac", action="store_true")

    p = sub.add_parser("plot", parents=[common], help="Plot an evaluation report")
    p.add_argument("--report", type=Path, required=True)
    return parser


def log_directory(out: Path) -> Path:
    """--out itself when it names a directory, else its parent."""
    return out.parent if out.suffix else out


def configure_logging(out: Path, verbose: bool = False):
    log_dir = log_directory(out)
    log_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_dir / f"{APP_NAME}.log", encoding='utf-8'),
            logging.StreamHandler()
        ],
        force=True,
    )


def resolve_config(args) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        for section in (config.synth, config.nerf, config.reg, config.eval):
            section.seed = args.seed
    if getattr(args, "ransac", False):
        config.eval.ransac = True
    return config


def default_out(args) -> Path:
    if args.command == "train-nerf":
        return args.block / "nerf.ckpt" if args.block else args.manifest.parent
    if args.command == "extract-grid":
        return cache_dir() / f"{args.checkpoint.stem}.drgv" if args.checkpoint else cache_dir()
    return Path(DEFAULT_OUT[args.command])


def run_command(args, config: RunConfig) -> int:
    if args.command == "synth-data":
        manifest = pipeline.synth_dataset(args.out, config.synth, args.meshes)
        print(f"Dataset written to {args.out} (manifest {manifest})")

    elif args.command == "train-nerf":
        if args.block:
            pipeline.train_nerf_for_block(args.block, args.out, config.nerf)
            print(f"NeRF checkpoint written to {args.out}")
        else:
            pipeline.train_nerf_for_manifest(pipeline.load_manifest(args.manifest), config.nerf, args.overwrite)

    elif args.command == "extract-grid":
        if args.checkpoint:
            sample = pipeline.extract_grid(args.checkpoint, args.out, config.extract)
            print(f"Voxel grid written to {args.out} ({sample.n_masked} masked voxels)")
        else:
            pipeline.extract_grids_for_manifest(pipeline.load_manifest(args.manifest), config.extract,
                                                args.overwrite)

    elif args.command == "train-reg":
        checkpoint = pipeline.train_registration(pipeline.load_manifest(args.manifest), config.reg, args.out,
                                                 resume=args.resume, max_steps=args.max_steps)
        print(f"Registration checkpoint written to {checkpoint}")

    elif args.command == "register":
        result = pipeline.register(args.source, args.target, args.model, args.out, config, args.gt,
                                   args.render_dir, args.dump_points)
        summary = f"Registration written to {args.out}"
        if result.rre_deg is not None:
            summary += f" (RRE {result.rre_deg:.2f} deg, RTE {result.rte * 100:.2f} x1e-2)"
        print(summary)

    elif args.command == "evaluate":
        model = args.model or args.out / "registration.ckpt"
        report = pipeline.evaluate(pipeline.load_manifest(args.manifest), model, args.out, config.eval)
        for row in report["objects"]:
            print(f"{row['object']:>10}  RRE {row['rre_deg']:8.2f} deg  RTE {row['rte_x100']:8.2f}")
        if report["n_evaluated"]:
            print(f"{'mean':>10}  RRE {report['mean_rre_deg']:8.2f} deg  RTE {report['mean_rte_x100']:8.2f}  "
                  f"({report['n_evaluated']}/{report['n_test']} objects)")

    elif args.command == "plot":
        pipeline.plot_report(args.report, args.out)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Parse, configure logging, run one command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    if args.out is None:
        args.out = default_out(args)
    configure_logging(args.out, args.verbose)

    try:
        config = resolve_config(args)
        effective = format_config(config)
        logger.debug(f"Effective configuration:\n{effective}")
        (log_directory(args.out) / "effective_config.txt").write_text(effective, encoding="utf-8")
        return run_command(args, config)
    except FileNotFoundError as e:
        logger.error(f"Missing input: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        get_timer().log_summary()


if __name__ == "__main__":
    sys.exit(main())
