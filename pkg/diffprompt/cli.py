"""
Command-line entry point.

Commands run in dependency order:
gen-data -> pretrain -> {train-vae, train-generator} -> tune-prompts -> evaluate,
plus ``ablate {depth,strategy,prompts,baselines}`` and ``report``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from typing import Optional, Sequence
from uuid import uuid4

import torch

from diffprompt import __version__
from diffprompt.core.config import settings
from diffprompt.core.exceptions import DiffPromptException, ErrorCode
from diffprompt.core.logging import configure_logging
from diffprompt.schemas.config import RunConfig
from diffprompt.services.pipeline_service import ABLATIONS, DEPTH_SWEEP, SPLITS, STAGES, run_command

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", *STAGES, "evaluate", "ablate", "report")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="UTF-8 JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="Base seed (u64)")
    common.add_argument("--out", default=None, help="Run output directory")
    common.add_argument("--device", default=None, help="Torch device (cpu)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(prog="diffprompt", description="Desk-scale diffusion-generated prompt tuning")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        cmd = sub.add_parser(command, parents=[common])
        if command == "evaluate":
            cmd.add_argument("--split", choices=SPLITS, default="val")
            cmd.add_argument("--dump-saliency", action="store_true", help="Write decoded saliency maps as PGM")
        elif command == "ablate":
            cmd.add_argument("kind", choices=ABLATIONS)
            cmd.add_argument(
                "--depths", type=int, nargs="+", default=list(DEPTH_SWEEP), help="Prompt depths for the depth sweep"
            )
    return parser


def _error_payload(code: ErrorCode, message: str, correlation_id: str) -> dict:
    return {
        "success": False,
        "error": {
            "code": code.value,
            "message": message,
            "correlation_id": correlation_id,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        },
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    if settings.NUM_THREADS:
        torch.set_num_threads(settings.NUM_THREADS)

    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out_dir=args.out, device=args.device)
        logger.info(
            f"Running {args.command}",
            extra={"command": args.command, "config_hash": cfg.config_hash(), "out_dir": cfg.out_dir},
        )
        run_command(
            args.command,
            cfg,
            split=getattr(args, "split", "val"),
            ablation=getattr(args, "kind", None),
            dump=getattr(args, "dump_saliency", False),
            depths=getattr(args, "depths", DEPTH_SWEEP),
        )
    except DiffPromptException as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        correlation_id = str(uuid4())
        logger.exception(f"Unhandled exception: {exc}", extra={"correlation_id": correlation_id})
        payload = _error_payload(ErrorCode.INTERNAL_UNEXPECTED, "An unexpected error occurred", correlation_id)
        print(json.dumps(payload), file=sys.stderr)
        return 1

    logger.info(f"{args.command} finished", extra={"command": args.command})
    return 0


if __name__ == "__main__":
    sys.exit(main())
