"""CLI entry point for the CE-HARQ simulator."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ceharq import __version__
from ceharq.config import (
    AppConfig,
    ConfigError,
    SimConfig,
    StopRule,
    ThresholdMode,
    load_config,
    load_sim_config,
    set_config,
)

PRESETS_DIR = Path(__file__).parent / "presets"


def setup_logging(verbose: bool = False) -> None:
    """Configure logging."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler()],
    )


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def resolve_sim_path(name: str) -> Path:
    """A config file path, or the name of a shipped preset."""
    path = Path(name).expanduser()
    if path.exists():
        return path
    preset = PRESETS_DIR / f"{name.removesuffix('.conf')}.conf"
    if preset.exists():
        return preset
    available = ", ".join(sorted(p.stem for p in PRESETS_DIR.glob("*.conf")))
    raise ConfigError(f"Config file not found: {name} (presets: {available})")


def _load_app(args: argparse.Namespace) -> AppConfig:
    config = load_config(Path(args.config) if args.config else None)
    set_config(config)
    return config


def _load_sim(name: str, args: argparse.Namespace) -> SimConfig:
    sim = load_sim_config(resolve_sim_path(name))
    return sim.with_overrides(master_seed=args.seed, trials=args.trials)


def _out_root(args: argparse.Namespace, config: AppConfig) -> Path:
    return Path(args.out_dir).expanduser() if args.out_dir else config.get_out_dir()


def _workers(args: argparse.Namespace, config: AppConfig) -> int:
    return args.workers if args.workers is not None else config.get_workers()


def cmd_simulate(args: argparse.Namespace) -> None:
    """Run one experiment config."""
    from ceharq.core.harness import avg_rounds_experiment, run_experiment

    config = _load_app(args)
    sim = _load_sim(args.sim_config, args)
    out_dir = _out_root(args, config) / sim.label
    workers = _workers(args, config)

    if sim.stop_rule == StopRule.TARGET_BLER:
        avg_rounds_experiment(sim, config, out_dir, workers)
    else:
        run_experiment(sim, config, out_dir, workers)


def cmd_compare(args: argparse.Namespace) -> None:
    """Run several configs on common random numbers."""
    from ceharq.core.harness import compare

    config = _load_app(args)
    sims = [_load_sim(name, args) for name in args.sim_configs]
    out_dir = _out_root(args, config) / (args.name or "compare")
    result = compare(sims, config, out_dir, _workers(args, config))
    print(result.frame.to_string(index=False))


def cmd_ablation(args: argparse.Namespace) -> None:
    """Compare tuned tau* against compressing every round."""
    from ceharq.core.harness import ablation

    config = _load_app(args)
    sim = _load_sim(args.sim_config, args)
    result = ablation(sim, config, _out_root(args, config) / "ablation", _workers(args, config))
    print(result.frame.to_string(index=False))


def cmd_threshold_search(args: argparse.Namespace) -> None:
    """Build a tau* table by grid search or from a P_e table."""
    from ceharq.core.harness import build_family, build_phy, run_threshold_search
    from ceharq.core.threshold import PeTable, analytic_threshold_table

    logger = logging.getLogger(__name__)
    config = _load_app(args)
    sim = _load_sim(args.sim_config, args)
    workers = _workers(args, config)

    if args.method == "analytic":
        if not sim.pe_table:
            raise ConfigError(
                "--method analytic needs pe_table in the config; see `ceharq pe-table`"
            )
        phy = build_phy(sim, config)
        table = analytic_threshold_table(
            sim.snr_list,
            sim.rounds,
            float(phy.rate),
            phy.k,
            PeTable.from_csv(Path(sim.pe_table).expanduser()),
            margin_bits=config.threshold.margin_bits,
            resolution=config.threshold.bisection_resolution,
        )
    else:
        if sim.threshold_mode == ThresholdMode.PER_ROUND:
            logger.warning("Grid search selects one tau per SNR; per_round mode reuses it")
        phy = build_phy(sim, config)
        table = run_threshold_search(sim, config, phy, build_family(sim), workers)

    default = _out_root(args, config) / sim.label / "thresholds.csv"
    output = Path(args.output) if args.output else default
    output.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(output)
    logger.info(f"Threshold table written to {output}")
    for entry in table.entries:
        suffix = f" (round {entry.round_index})" if entry.round_index is not None else ""
        print(f"{entry.snr_db:+.2f} dB{suffix}: tau* = {entry.tau:.4f}")


def cmd_pe_table(args: argparse.Namespace) -> None:
    """Estimate P_e(S, R) for the PHY and every MAC rate."""
    from ceharq.core.harness import build_family, build_phy
    from ceharq.core.threshold import build_pe_table

    logger = logging.getLogger(__name__)
    config = _load_app(args)
    sim = _load_sim(args.sim_config, args)

    table = build_pe_table(
        build_phy(sim, config),
        build_family(sim),
        sim.snr_list,
        sim.trials,
        seed=sim.master_seed,
        workers=_workers(args, config),
        chunk_size=config.simulation.chunk_size,
        progress=config.simulation.progress,
    )
    default = _out_root(args, config) / sim.label / "pe_table.csv"
    output = Path(args.output) if args.output else default
    output.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(output)
    logger.info(f"P_e table written to {output}")


def cmd_bounds(args: argparse.Namespace) -> None:
    """Tabulate capacity and the compressed-error rate bound."""
    from ceharq.core.reports import bounds_frame

    try:
        frame = bounds_frame(args.snr, args.tau, args.distortion)
    except ValueError as e:
        raise ConfigError(f"Invalid bounds grid: {e}") from e
    if args.output:
        frame.to_csv(args.output, index=False)
    else:
        frame.to_csv(sys.stdout, index=False)


def cmd_init(args: argparse.Namespace) -> None:
    """Initialize the run registry and config."""
    from ceharq.models.database import get_engine, init_db

    logger = logging.getLogger(__name__)
    config = _load_app(args)

    db_path = config.get_database_path()
    get_engine(db_path)
    init_db()
    logger.info(f"Database initialized at: {db_path}")

    config_dir = Path.home() / ".ceharq"
    config_file = config_dir / "config.yaml"
    if not config_file.exists():
        config_dir.mkdir(parents=True, exist_ok=True)
        example_config = Path(__file__).parent.parent.parent / "config.yaml.example"
        if example_config.exists():
            config_file.write_text(example_config.read_text())
            logger.info(f"Config created at: {config_file}")
        else:
            logger.info(f"Create config at: {config_file}")


def cmd_runs(args: argparse.Namespace) -> None:
    """List recent experiment runs."""
    from sqlalchemy import select

    from ceharq.models import ExperimentRun
    from ceharq.models.database import get_engine, get_session, init_db

    config = _load_app(args)
    get_engine(config.get_database_path())
    init_db()

    with get_session() as session:
        runs = session.scalars(
            select(ExperimentRun).order_by(ExperimentRun.created_at.desc()).limit(args.limit)
        ).all()
        if not runs:
            print("No runs recorded")
        for run in runs:
            line = (
                f"{run.created_at:%Y-%m-%d %H:%M}  {run.id[:8]}  {run.label:<20} "
                f"{run.protocol:<8} {run.phy:<14} K={run.k} N={run.n} D={run.max_rounds} "
                f"trials={run.trials} [{run.status.value}] {run.out_dir or ''}"
            )
            if run.error_message:
                line += f" {run.error_message}"
            print(line)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ceharq",
        description="Link-level simulator for compressed-error HARQ",
    )
    parser.add_argument("-V", "--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-c", "--config", help="Path to config.yaml")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")
    parser.add_argument("--seed", type=int, help="Override master_seed")
    parser.add_argument("--trials", type=int, help="Override trials per SNR point")
    parser.add_argument("--out-dir", help="Results directory")
    parser.add_argument("--workers", type=int, help="Worker processes")

    subparsers = parser.add_subparsers(dest="command", help="Commands")

    # Simulate command
    simulate_parser = subparsers.add_parser("simulate", help="Run one experiment config")
    simulate_parser.add_argument("sim_config", help="Config file or preset name")
    simulate_parser.set_defaults(func=cmd_simulate)

    # Compare command
    compare_parser = subparsers.add_parser("compare", help="Paired comparison of configs")
    compare_parser.add_argument("sim_configs", nargs="+", help="Config files or preset names")
    compare_parser.add_argument("--name", help="Comparison directory name")
    compare_parser.set_defaults(func=cmd_compare)

    # Threshold search command
    threshold_parser = subparsers.add_parser("threshold-search", help="Build a tau* table")
    threshold_parser.add_argument("sim_config", help="Config file or preset name")
    threshold_parser.add_argument(
        "--method", choices=["grid", "analytic"], default="grid", help="Selection method"
    )
    threshold_parser.add_argument("-o", "--output", help="Output CSV path")
    threshold_parser.set_defaults(func=cmd_threshold_search)

    # P_e table command
    pe_parser = subparsers.add_parser("pe-table", help="Estimate the P_e(S, R) table")
    pe_parser.add_argument("sim_config", help="Config file or preset name")
    pe_parser.add_argument("-o", "--output", help="Output CSV path")
    pe_parser.set_defaults(func=cmd_pe_table)

    # Bounds command
    bounds_parser = subparsers.add_parser("bounds", help="Capacity and rate bounds as CSV")
    bounds_parser.add_argument("--snr", type=_parse_floats, default=[0.0], help="SNR list in dB")
    bounds_parser.add_argument("--tau", type=_parse_floats, default=[0.05], help="Sparsity list")
    bounds_parser.add_argument(
        "--distortion", type=_parse_floats, default=[0.0], help="Distortion list"
    )
    bounds_parser.add_argument("-o", "--output", help="Output CSV path (default stdout)")
    bounds_parser.set_defaults(func=cmd_bounds)

    # Ablation command
    ablation_parser = subparsers.add_parser("ablation", help="tau* against tau = 1")
    ablation_parser.add_argument(
        "sim_config", nargs="?", default="ablation", help="Config file or preset name"
    )
    ablation_parser.set_defaults(func=cmd_ablation)

    # Init command
    init_parser = subparsers.add_parser("init", help="Initialize database and config")
    init_parser.set_defaults(func=cmd_init)

    # Runs command
    runs_parser = subparsers.add_parser("runs", help="List recorded runs")
    runs_parser.add_argument("-n", "--limit", type=int, default=20, help="Number of runs")
    runs_parser.set_defaults(func=cmd_runs)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command is None:
        parser.print_help()
        return 1

    setup_logging(args.verbose)
    try:
        args.func(args)
    except ConfigError as e:
        logging.getLogger(__name__).error(str(e))
        print(f"Configuration error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
