"""
Cloth reconstruction and manipulation - command-line interface.
"""
import argparse
import os
import sys

from dotenv import load_dotenv

# Load environment variables (CLOTH_WORKERS, CLOTH_LOG_DIR, CLOTH_LOG_LEVEL) from .env
load_dotenv()

# Add the project root to the path so the root flow module imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from flow import (create_build_query_flow, create_eval_flow, create_finetune_flow, create_gen_data_flow,
                  create_gradcheck_flow, create_manipulate_flow, create_reconstruct_flow, create_train_flow)
from src.utils.actions import TIERS
from src.utils.config import PRESETS
from src.utils.errors import ConfigError
from src.utils.logger import logger
from src.utils.policy import TARGETS


def parse_overrides(pairs):
    """`--set section.key=value` pairs as a dict."""
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        overrides[key.strip()] = value
    return overrides


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file (dotted keys, e.g. sim.timestep=0.01)")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS),
                        help="Base configuration before --config and --set are applied (default: desk)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", dest="overrides",
                        help="Override one configuration key; repeatable")
    common.add_argument("--workers", "-w", type=int, default=None,
                        help="Worker processes for parallel stages (default: $CLOTH_WORKERS or 1)")
    common.add_argument("--out", "-o", default=None,
                        help="Output directory (default: output/<command>)")
    common.add_argument("--seed", type=int, default=0, help="First seed of a seeded batch (default: 0)")

    parser = argparse.ArgumentParser(description="Cloth mesh reconstruction from top-view depth and "
                                                 "template-based cloth manipulation")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", parents=[common], help="Simulate and render a dataset")
    p.add_argument("--tier", default="mixed", choices=TIERS + ("mixed",),
                   help="Deformation tier; mixed cycles drag, fold, drop by sample index")
    p.add_argument("--count", type=int, required=True, help="Number of samples")

    p = commands.add_parser("train", parents=[common], help="Train the reconstruction network")
    p.add_argument("--data", required=True, help="Dataset directory written by gen-data")

    p = commands.add_parser("eval-recon", parents=[common], help="Per-tier reconstruction report")
    p.add_argument("--data", required=True, help="Dataset directory written by gen-data")
    p.add_argument("--ckpt", help="Model checkpoint")
    p.add_argument("--oracle", action="store_true", help="Score the ground truth itself instead of a model")
    p.add_argument("--tta", action="store_true", help="Score rotation test-time augmentation reconstructions")

    p = commands.add_parser("reconstruct", parents=[common], help="Reconstruct one observation")
    p.add_argument("--depth-file", required=True, help=".rec record or .npy height map in meters")
    p.add_argument("--ckpt", required=True, help="Model checkpoint")
    p.add_argument("--tta", action="store_true", help="Pick the best of eight 45-degree rotations")
    p.add_argument("--refine", type=int, default=0, metavar="N",
                   help="Pixel-wise mesh optimization iterations after inference (default: 0)")

    p = commands.add_parser("finetune", parents=[common], help="Pixel-wise tuning without ground truth")
    p.add_argument("--data", required=True, help="Dataset directory; only depth images are used")
    p.add_argument("--ckpt", required=True, help="Model checkpoint to start from")
    p.add_argument("--epochs", type=int, default=1, help="Tuning epochs (default: 1)")

    p = commands.add_parser("build-query", parents=[common], help="Rank group pairs for a target shape")
    p.add_argument("--target", choices=TARGETS, default=None, help="Target shape (default: policy.target)")

    p = commands.add_parser("manipulate", parents=[common], help="Run the manipulation episode harness")
    p.add_argument("--tier", default="fold", choices=TIERS, help="Initial-state tier (default: fold)")
    p.add_argument("--count", type=int, default=1, help="Number of seeded initial states (default: 1)")
    p.add_argument("--target", choices=TARGETS, default=None, help="Target shape (default: policy.target)")
    p.add_argument("--arms", type=int, choices=(1, 2), default=2, help="Single-arm drag or dual-arm flip")
    p.add_argument("--mesh-source", choices=("gt", "recon"), default="gt",
                   help="Act on the simulator mesh or on a reconstruction")
    p.add_argument("--ckpt", help="Model checkpoint (required with --mesh-source recon)")
    p.add_argument("--query", help="Saved query list; built in this run when omitted")
    p.add_argument("--no-tta", action="store_true", help="Disable test-time rotation for reconstructions")

    p = commands.add_parser("gradcheck", parents=[common], help="Finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=10, help="Random cases per op (default: 10)")
    p.add_argument("--tolerance", type=float, default=None, help="Largest accepted relative error")
    return parser


FLOWS = {
    "gen-data": create_gen_data_flow,
    "train": create_train_flow,
    "eval-recon": create_eval_flow,
    "reconstruct": create_reconstruct_flow,
    "finetune": create_finetune_flow,
    "build-query": create_build_query_flow,
    "gradcheck": create_gradcheck_flow,
}


def create_flow(args):
    if args["command"] == "manipulate":
        return create_manipulate_flow(build_query=args["arms"] == 2 and not args.get("query"))
    return FLOWS[args["command"]]()


def run_command(args):
    """
    Run one command's flow.

    Args:
        args (dict): Parsed command-line arguments

    Returns:
        dict: The shared store after the flow finished; "error" is set on failure
    """
    args = dict(args)
    shared = {"args": args, "outputs": []}
    try:
        args["overrides"] = parse_overrides(args.get("overrides"))
    except ConfigError as e:
        shared["error"] = str(e)
        return shared
    args["out"] = args.get("out") or os.path.join("output", args["command"])

    logger.info(f"{'='*60}")
    logger.info(f"Command: {args['command']}")
    logger.info(f"Output directory: {args['out']}")
    logger.info(f"{'='*60}")
    create_flow(args).run(shared)
    return shared


def main(argv=None):
    """
    Main entry point for the application.

    Returns:
        int: Process exit status
    """
    args = vars(build_parser().parse_args(argv))
    shared = run_command(args)
    if "error" in shared:
        logger.error(f"{args['command']} failed: {shared['error']}")
        print(f"error: {shared['error']}", file=sys.stderr)
        return 1
    if shared.get("summary_text"):
        print(shared["summary_text"])
    for path in shared["outputs"]:
        logger.info(f"Wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
