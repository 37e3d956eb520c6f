"""
slashlab - command-line entry point

    python main.py train --config experiment.json --out runs/acceptance
    python main.py check-freq --mode pulse --m 130 --horizon 129
    python main.py analyze --dump head.sdha --out runs/head
    python main.py ablate --params runs/acceptance/params.sdha --config experiment.json --band cone
    python main.py gradcheck --seed 0
"""
import argparse
import sys
from typing import List, Optional

from config import TOOL_NAME, TOOL_VERSION, settings
from cli.commands import cmd_ablate, cmd_analyze, cmd_check_freq, cmd_gradcheck, cmd_train
from utils.logging_config import LEVELS, get_logger, init_logging
from utils.error_handlers import EXIT_USAGE, safe_execute

logger = get_logger(__name__)

class CliArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the exit-code contract reserves 1 for it"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")

def u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed '{text}'")
    if not (0 <= value < 2 ** 64):
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {text}")
    return value

def lag_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"lags must be a comma list of integers, got '{text}'")

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="Output directory (default: SLASHLAB_OUTPUT_DIR)")
    common.add_argument("--seed", type=u64, help="Seed override (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help="Worker threads (default: SLASHLAB_THREADS)")
    common.add_argument("--format", action="append", choices=["csv", "json"],
                        help="Report format; repeat for both (default: config formats)")
    common.add_argument("--log-level", dest="log_level", type=str.upper, choices=LEVELS, help="Override LOG_LEVEL")

    slash = argparse.ArgumentParser(add_help=False)
    slash.add_argument("--lags", type=lag_list, help="Comma-separated lags to score")
    slash.add_argument("--kappa", type=float, help="Detection threshold")
    slash.add_argument("--excluded-prefix", dest="excluded_prefix", type=int, help="Positions skipped at the start")
    slash.add_argument("--logit-scale", dest="logit_scale", type=float, help="Scale applied to QK^T")
    slash.add_argument("--long-range", dest="long_range", action="store_true",
                       help="Score lags 500..5000 with kappa 1e-3")

    parser = CliArgumentParser(prog=TOOL_NAME, description="Slash-dominant attention head laboratory")
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliArgumentParser)

    train = sub.add_parser("train", parents=[common], help="Two-stage gradient descent on the shallow model")
    train.add_argument("--config", help="Experiment JSON file (default: built-in acceptance experiment)")
    train.add_argument("--gate", action="store_true", help="Exit 3 when the run misses its eps1/eps2 targets")
    train.set_defaults(handler=cmd_train)

    check = sub.add_parser("check-freq", parents=[common], help="Pulse check of a cone band")
    check.add_argument("--mode", choices=["pulse", "classic"], default="pulse")
    check.add_argument("--d-b", "--d", dest="d_b", type=int, help="Band width (classic: full width d)")
    check.add_argument("--m", type=int, help="Number of pulse frequencies")
    check.add_argument("--horizon", "--N", dest="horizon", type=int, required=True, help="Prompt length N")
    check.add_argument("--tolerance", type=float, default=1e-9)
    check.add_argument("--base", type=float, default=10000.0)
    check.set_defaults(handler=cmd_check_freq)

    analyze = sub.add_parser("analyze", parents=[common, slash], help="Analyze a tensor dump")
    analyze.add_argument("--dump", required=True, help="SDHA file with its JSON manifest alongside")
    analyze.add_argument("--config", help="Experiment file, for dumps exported by train")
    analyze.add_argument("--tau", type=float, default=0.95, help="Energy threshold for effective ranks")
    analyze.add_argument("--shuffle", action="store_true", help="Also score a uniform-token prompt per head")
    analyze.set_defaults(handler=cmd_analyze)

    ablate = sub.add_parser("ablate", parents=[common, slash], help="Frequency-band ablation")
    source = ablate.add_mutually_exclusive_group(required=True)
    source.add_argument("--params", help="params.sdha written by train (needs the run's --config)")
    source.add_argument("--dump", help="SDHA dump with pre-RoPE Q and K")
    ablate.add_argument("--config", help="Experiment JSON file")
    ablate.add_argument("--band", action="append",
                        help="none, cone, semantic, high, medium, low, active or indices like 0-9,12; repeatable")
    ablate.add_argument("--prompts", type=int, default=64, help="Prompts drawn for --params")
    ablate.set_defaults(handler=cmd_ablate)

    grad = sub.add_parser("gradcheck", parents=[common], help="Closed-form gradients against finite differences")
    grad.add_argument("--K", type=int, default=2)
    grad.add_argument("--n-in", dest="n_in", type=int, default=4)
    grad.add_argument("--d-b", dest="d_b", type=int, default=20)
    grad.add_argument("--d-x", dest="d_x", type=int, default=4)
    grad.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    grad.add_argument("--points", type=int, default=10)
    grad.add_argument("--h", type=float, default=1e-5)
    grad.set_defaults(handler=cmd_gradcheck)

    return parser

def run_command(args: argparse.Namespace) -> int:
    """Validate the environment settings, then hand over to the command handler"""
    settings.validate()
    logger.debug(f"Running '{args.command}' with settings {settings.get_config_summary()}", extra={"command": args.command})
    return args.handler(args)

def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    init_logging(args.log_level)
    return safe_execute(run_command, args, command=args.command)

if __name__ == "__main__":
    sys.exit(main())
