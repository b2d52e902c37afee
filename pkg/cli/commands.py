"""
Command-line entry point: `mda <subcommand> ...`

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from config.logging_setup import setup_logging
from config.settings import settings
from models.exceptions import MDAError, MissingFusedImageError
from models.schemas import DatasetManifest, InfoConfig, ManifestEntry, TrainConfig
from services.backbone_service import VGGBackbone, load_backbone
from services.dataset_service import export_manifest, load_pair, make_synthetic_pair, read_manifest
from services.fusion_service import FusionService, dump_weights
from services.metric_service import MetricService, parse_metrics, summary_table, write_report
from services.train_service import TrainService
from utils.image_io import save_image

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1"""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair_from_paths(ir: str, vis: str):
    stem = Path(ir).stem
    identifier = stem[:-3] if stem.endswith("_ir") else stem
    return load_pair(ManifestEntry(id=identifier, ir=ir, vis=vis))


def cmd_fuse(args: argparse.Namespace) -> int:
    service = FusionService.from_checkpoint(args.ckpt)
    if args.manifest:
        written = service.fuse_manifest(read_manifest(args.manifest), args.out, gray=args.gray)
    else:
        result = service.fuse_pair(_pair_from_paths(args.ir, args.vis))
        written = service.write_result(result, args.out, gray=args.gray)
    print(f"✓ Wrote {len(written)} file(s) to {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = TrainConfig.from_file(args.config, args.set)
    if args.out:
        cfg = cfg.model_copy(update={"out_dir": args.out})
    result = TrainService(cfg, progress=not args.quiet).train(resume=args.resume)
    print(f"✓ Trained to step {result.final_step}; checkpoint {result.checkpoint}")
    print(f"  Loss log: {result.loss_csv}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = read_manifest(args.manifest, split="eval")
    service = MetricService(parse_metrics(args.metrics))
    try:
        report = service.evaluate_dataset(manifest, args.fused, model_id=args.model_id)
    except MissingFusedImageError as e:
        print(f"✗ No fused image for: {', '.join(e.identifiers)}", file=sys.stderr)
        return EXIT_RUNTIME
    csv_path, json_path = write_report(report, args.out)
    if not args.quiet:
        print(summary_table(report))
    print(f"✓ Report written to {csv_path} and {json_path}")
    return EXIT_OK


def cmd_attn_dump(args: argparse.Namespace) -> int:
    service = FusionService.from_checkpoint(args.ckpt)
    written = service.dump_attention(_pair_from_paths(args.ir, args.vis), args.out)
    print(f"✓ Wrote {len(written)} attention file(s) to {args.out}")
    return EXIT_OK


def cmd_weights_dump(args: argparse.Namespace) -> int:
    cfg = InfoConfig(depth=args.depth)
    backbone = VGGBackbone(load_backbone(args.backbone, args.backbone_seed, max(args.depth, 2)), max(args.depth, 2))
    paths = dump_weights(_pair_from_paths(args.ir, args.vis), backbone, cfg, args.out)
    print(f"✓ Weights written to {paths['json']} and {paths['csv']}")
    return EXIT_OK


def cmd_make_fixtures(args: argparse.Namespace) -> int:
    """Synthetic pairs in the paired_dirs layout plus a manifest.jsonl"""
    root = Path(args.out)
    entries = []
    for i in range(args.n):
        pair = make_synthetic_pair(args.size, args.size, seed=args.seed + i)
        ir_path = save_image(root / "ir" / f"{pair.identifier}.png", pair.ir)
        vis_path = save_image(root / "vis" / f"{pair.identifier}.png", pair.vis)
        entries.append(ManifestEntry(
            id=pair.identifier,
            ir=str(ir_path.relative_to(root)),
            vis=str(vis_path.relative_to(root)),
        ))
    manifest_path = export_manifest(DatasetManifest(root=str(root), entries=entries), root / "manifest.jsonl")
    print(f"✓ Wrote {args.n} synthetic pairs and {manifest_path}")
    return EXIT_OK


def _add_verbosity(parser: argparse.ArgumentParser, default=False) -> None:
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", default=default, help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", default=default, help="warnings only, no progress bars")


def build_parser() -> CliParser:
    parser = CliParser(prog="mda", description="Multi-scale dual-attention infrared/visible image fusion")
    _add_verbosity(parser)
    # per-subcommand -v/-q; SUPPRESS leaves a top-level flag in place
    common = argparse.ArgumentParser(add_help=False)
    _add_verbosity(common, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fuse", parents=[common], help="fuse a pair or every pair of a manifest")
    p.add_argument("--ir", help="infrared image")
    p.add_argument("--vis", help="visible image")
    p.add_argument("--manifest", help="JSON-lines manifest instead of --ir/--vis")
    p.add_argument("--ckpt", required=True, help="parameter archive or checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gray", action="store_true", help="also write the fused Y as <id>_y.png")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--config", default="", help="JSON TrainConfig file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field (repeatable)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out", help="run directory (overrides out_dir; default <MDA_RUNS_DIR>/<config hash>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score fused images against their sources")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fused", required=True, help="directory with <id>_y.png or <id>.png files")
    p.add_argument("--out", required=True, help="report path (.csv; a .json is written beside it)")
    p.add_argument("--metrics", help="comma-separated subset of en,vif,scd,mse,ag,cc,qabf,sd")
    p.add_argument("--model-id", help="model identifier recorded in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-dump", parents=[common], help="write spatial attention grids for one pair")
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("weights-dump", parents=[common], help="write the complementary-information weights of one pair")
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--backbone", default=settings.BACKBONE_SOURCE, help="random, torchvision or an archive path")
    p.add_argument("--backbone-seed", type=int, default=settings.BACKBONE_SEED)
    p.add_argument("--depth", type=int, default=2, choices=range(1, 6), help="VGG stages averaged")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weights_dump)

    p = sub.add_parser("make-fixtures", parents=[common], help="write synthetic registered pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "fuse" and not args.manifest and not (args.ir and args.vis):
        parser.error("fuse needs --ir and --vis, or --manifest")

    setup_logging("DEBUG" if args.verbose else "WARNING" if args.quiet else None)
    try:
        return args.func(args)
    except (MDAError, ValidationError, OSError, ValueError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"✗ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
