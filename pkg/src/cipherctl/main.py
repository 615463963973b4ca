"""Main entry point for cipherctl."""

import argparse
import logging
import sys
from pathlib import Path

from .modules.protocol import SlotLayout, online_rotation_indices
from .modules.runner import JobStopped, SimulationWorker
from .utils.errors import CipherCtlError
from .utils.i18n import init_translator, tr
from .utils.settings import RunConfig, Settings, load_config, load_he_presets

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
COMMANDS = ("simulate", "closeness", "precision", "bench", "params")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cipherctl", description=tr("app_description"))
    parser.add_argument("--lang", help=tr("help_lang"))
    parser.add_argument("--log-level", help=tr("help_log_level"))
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=tr(f"help_{name}"))
        cmd.add_argument("config", nargs="?", type=Path, help=tr("help_config"))
        cmd.add_argument("--seed", type=int, help=tr("help_seed"))
        cmd.add_argument("--output-dir", type=Path, help=tr("help_output_dir"))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config is not None else RunConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.output_dir is not None:
        updates["output_dir"] = str(args.output_dir)
    return config.model_copy(update=updates) if updates else config


def print_params(settings: Settings):
    presets = load_he_presets()
    print(tr("params_header", "preset", "ring_dim", "moduli", "bits", "scale", "security"))
    for name, preset in presets.items():
        moduli = preset["moduli"]
        bits = preset["first_mod_bits"] + (moduli - 1) * preset["scale_bits"] if moduli else tr("params_auto")
        print(tr("params_header", name, preset["ring_dim"], moduli or tr("params_auto"), bits, preset["scale_bits"], preset["security"]))
    model = settings.get_plant()
    ctl = settings.get_ctl_config()
    he = settings.check_feasibility(model.m, model.p)
    indices = online_rotation_indices(SlotLayout.of(model.m, model.p, ctl, he.slots), ctl.refresh_period)
    print(tr("params_rotation_keys", len(indices)))


def run(args: argparse.Namespace) -> int:
    settings = Settings(resolve_config(args))
    if args.command == "params":
        print_params(settings)
        return 0
    worker = SimulationWorker(settings)
    out_dir = settings.get_output_dir()
    job = getattr(worker, args.command)
    job(out_dir)
    logger.info(tr("artifacts_written", out_dir))
    return 0


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--lang")
    pre.add_argument("--log-level")
    known, _ = pre.parse_known_args(argv)

    settings = Settings()
    init_translator(known.lang or settings.get_language() or None)
    logging.basicConfig(level=(known.log_level or settings.get_log_level()).upper(), format=LOG_FORMAT)

    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except JobStopped as e:
        logger.warning(tr("stopped", e))
        return 130
    except CipherCtlError as e:
        logger.error(tr("error_prefix", e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
