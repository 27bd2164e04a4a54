import argparse
import logging
from typing import Any, Dict, List, Optional, Sequence

import anyio
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from .config import AppSettings, ExperimentConfig
from .errors import ConfigError, LovmeError
from .experiment import COMMAND_STAGES, ExperimentRunner, pipeline_stages
from .themes import get_banner, get_theme
from .utils import format_error, format_success

console = Console()

COMMANDS = {
    "train": "Train the base network (writes weights.tnlw, weights_config.json and train_log.csv)",
    "lovme": "Per-sample LoVME chains on the test split",
    "mc-dropout": "Uniform MC-dropout baseline on the test split",
    "ground-truth": "Retrained-ensemble ground truth on the test split",
    "eval": "ROC/AUC, bands, rejection and correlation from stored reports",
    "oracle-check": "Exact enumeration on a tiny network vs LoVME",
    "run": "Full pipeline: train, estimators, eval (and oracle check if enabled)",
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    """One subcommand per stage; every ExperimentConfig field is also a flag."""
    parser = argparse.ArgumentParser(prog="lovme", description="Loss-variance uncertainty over thinned networks.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, help_text in COMMANDS.items():
        sub = subparsers.add_parser(command, help=help_text, description=help_text)
        sub.add_argument("--config", help="key=value config file")
        sub.add_argument("--manifest", help="reuse the config recorded in a run manifest")
        sub.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        group = sub.add_argument_group("experiment settings")
        for name, field in ExperimentConfig.model_fields.items():
            group.add_argument(
                _flag(name),
                dest=name,
                default=None,
                metavar=name.upper(),
                help=f"(default: {field.default})",
            )
    return parser


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, Any] = {
        name: getattr(args, name) for name in ExperimentConfig.model_fields if getattr(args, name) is not None
    }
    if args.manifest:
        base = ExperimentConfig.from_manifest(args.manifest)
        try:
            return ExperimentConfig.model_validate({**base.model_dump(), **overrides})
        except ValidationError as e:
            raise ConfigError(f"invalid configuration:\n{e}") from e
    return ExperimentConfig.load(args.config, overrides)


def stages_for(command: str, config: ExperimentConfig) -> List[str]:
    return pipeline_stages(config) if command == "run" else COMMAND_STAGES[command]


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def render_training(runner: ExperimentRunner) -> None:
    if runner.trainer and runner.trainer.history:
        first, last = runner.trainer.history[0], runner.trainer.history[-1]
        console.print(
            f"[primary]Training[/primary] loss {first.train_loss:.4f} -> {last.train_loss:.4f}, "
            f"accuracy [metric]{last.train_accuracy:.3f}[/metric]"
        )
    if runner.beta is not None:
        console.print(f"[primary]beta[/primary] = [metric]{runner.beta:.6g}[/metric], eta = {runner.config.eta:g}")


def render_summary(runner: ExperimentRunner) -> None:
    """The comparison table: uncorrected AUC next to each estimator's corrections."""
    if not runner.summaries:
        return
    quantiles = [repr(float(q)) for q in runner.config.rejection_quantiles]
    table = Table(title="Macro AUC", header_style="header")
    table.add_column("Estimator", style="primary")
    table.add_column("Subset")
    table.add_column("AUC", justify="right")
    table.add_column("Optimistic", justify="right")
    table.add_column("Pessimistic", justify="right")
    for q in quantiles:
        table.add_column(f"Rejected q={q}", justify="right")
    table.add_column("Pearson r", justify="right")
    for name, summary in runner.summaries.items():
        r = summary.correlation.pearson_r_below_cutoff if summary.correlation else None
        for subset, breakdown in (("pooled", summary.pooled), ("perturbed", summary.perturbed)):
            if breakdown is None:
                continue
            table.add_row(
                name,
                subset,
                _fmt(breakdown.auc),
                _fmt(breakdown.auc_optimistic),
                _fmt(breakdown.auc_pessimistic),
                *(_fmt(breakdown.auc_rejected.get(q)) for q in quantiles),
                _fmt(r) if subset == "pooled" else "-",
            )
    console.print(table)


def render_oracle(runner: ExperimentRunner) -> None:
    if not runner.oracle_rows:
        return
    table = Table(title="Exact enumeration vs LoVME", header_style="header")
    for column in ("beta", "eta", "E[L] exact", "E[L] LoVME", "Var[L] exact", "Var[L] LoVME", "rel. err", "d2 logZ"):
        table.add_column(column, justify="right")
    for row in runner.oracle_rows:
        table.add_row(
            f"{row.beta:g}",
            f"{row.eta:g}",
            f"{row.exact_mean_loss:.5f}",
            f"{row.lovme_mean_loss:.5f}",
            f"{row.exact_var_loss:.5g}",
            f"{row.lovme_var_loss:.5g}",
            f"{row.rel_error_var:.2%}",
            f"{row.var_via_logZ:.5g}",
        )
    console.print(table)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        settings = AppSettings.load()
        console.push_theme(get_theme(settings.theme))
        if args.verbose:
            console.print(Panel(get_banner(settings.theme), style="primary"))
        config = load_config(args)
        runner = ExperimentRunner(config)
        anyio.run(runner.run, stages_for(args.command, config))
    except LovmeError as e:
        console.print(format_error(str(e)))
        return e.exit_code
    except KeyboardInterrupt:
        console.print("\n[warning]Interrupted[/warning]")
        return 130

    render_training(runner)
    render_summary(runner)
    render_oracle(runner)
    console.print(format_success(f"{args.command} finished; artifacts in {runner.store.root}"))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
