"""
Runs configured experiments and writes their results.

A run directory holds ``rounds.csv`` (one row per round) and ``summary.json``.
``compare`` lines several runs up by round index for plotting, and
``verify_accounting`` works out per-message compression rates from a config alone.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from evofed import __version__
from evofed.baselines import run_baseline_rounds
from evofed.config import ExperimentConfig, loadConfig
from evofed.federation import load_data, run_rounds
from evofed.fitness_codec import RAW32, CodecScheme, byte_size
from evofed.logger import get_logger
from evofed.nn_core import ArchSpec

logger = get_logger("evofed")

ROUND_COLUMNS = ["t", "accuracy", "loss", "uplink_bytes_total", "downlink_bytes_total", "wall_ms"]

# (|theta|, N, K, claimed compression) of the configurations the method was published with
PUBLISHED_INSTANCES = [
    (11_000, 128, 1, 0.988),
    (2_300_000, 32, 50, 0.997),
]

METHOD_NOTES = {
    "evofed": "uplink is the encoded fitness matrix; downlink is the float32 global fitness per participant plus catch-up and full-model resyncs",
    "fedavg": "uplink and downlink are the float32 model",
    "fed-sparse": "clients transmit the top-k components of the update theta' - theta as (float32 value, uint32 index) pairs",
    "fed-quant": "clients transmit the update theta' - theta quantized per layer with a float32 (min, max) pair",
    "plain-es": "fitness is the negated task loss on one seeded minibatch, centered per column",
}


class MissingRunError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunSummary:
    method: str
    rounds: int
    final_accuracy: float
    max_accuracy: float
    uplink_bytes_total: int
    downlink_bytes_total: int
    bytes_to_target: Dict[str, Optional[int]]
    notes: str
    version: str
    config: Dict = field(default_factory=dict)


def rounds_table(records) -> pd.DataFrame:
    rows = [
        {
            "t": r.t,
            "accuracy": r.accuracy,
            "loss": r.loss,
            "uplink_bytes_total": r.uplink_total,
            "downlink_bytes_total": r.downlink_bytes,
            "wall_ms": r.wall_ms,
        }
        for r in records
    ]
    return pd.DataFrame(rows, columns=ROUND_COLUMNS).astype({"accuracy": float, "loss": float})


def bytes_to_target(table: pd.DataFrame, targets: Sequence[float]) -> Dict[str, Optional[int]]:
    """Cumulative uplink bytes at the first evaluation reaching each target accuracy."""
    cumulative = table["uplink_bytes_total"].cumsum()
    reached = {}
    for target in targets:
        hits = table.index[table["accuracy"] >= target]
        reached[f"{target:g}"] = int(cumulative[hits[0]]) if len(hits) else None
    return reached


def summarize(cfg: ExperimentConfig, table: pd.DataFrame, raw_config: Dict) -> RunSummary:
    evaluated = table["accuracy"].dropna()
    return RunSummary(
        method=cfg.method,
        rounds=cfg.rounds,
        final_accuracy=float(evaluated.iloc[-1]),
        max_accuracy=float(evaluated.max()),
        uplink_bytes_total=int(table["uplink_bytes_total"].sum()),
        downlink_bytes_total=int(table["downlink_bytes_total"].sum()),
        bytes_to_target=bytes_to_target(table, cfg.target_accuracies),
        notes=METHOD_NOTES[cfg.method],
        version=__version__,
        config=raw_config,
    )


def output_directory(cfg: ExperimentConfig, output_root: Optional[Union[str, Path]] = None) -> Path:
    root = output_root if output_root is not None else os.environ.get("EVOFED_OUTPUT_ROOT")
    if root:
        return Path(root) / Path(cfg.output_dir).name
    return Path(cfg.output_dir)


def execute(cfg: ExperimentConfig):
    """The RoundRecords of one configured run."""
    if cfg.method == "evofed":
        return run_rounds(cfg)
    return run_baseline_rounds(cfg)


def run(
    config_path: Optional[Union[str, Path]] = None,
    output_root: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
) -> Path:
    """Loads and validates a config, runs it and writes rounds.csv and summary.json; returns the run directory."""
    raw_config = loadConfig(config_path)
    cfg = ExperimentConfig.from_dict(raw_config)
    if workers is not None:
        cfg = dataclasses.replace(cfg, workers=workers)
    out_dir = output_directory(cfg, output_root)
    logger.info(f"Running {cfg.method} for {cfg.rounds} rounds, writing to {out_dir}")

    table = rounds_table(execute(cfg))
    summary = summarize(cfg, table, raw_config)

    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "rounds.csv", index=False)
    with open(out_dir / "summary.json", "w") as f:
        json.dump(dataclasses.asdict(summary), f, indent=2)
    logger.info(
        f"Finished {cfg.method}: final accuracy {summary.final_accuracy:.4f}, uplink {summary.uplink_bytes_total} bytes"
    )
    return out_dir


def _load_run(run_dir: Path):
    summary_path = run_dir / "summary.json"
    rounds_path = run_dir / "rounds.csv"
    if not summary_path.is_file():
        raise MissingRunError(f"{run_dir} has no summary.json, is it a finished run?")
    if not rounds_path.is_file():
        raise MissingRunError(f"{run_dir} has no rounds.csv, is it a finished run?")
    with open(summary_path) as f:
        summary = json.load(f)
    return summary, pd.read_csv(rounds_path)


def compare(
    run_dirs: Sequence[Union[str, Path]], out: Optional[Union[str, Path]] = None
) -> pd.DataFrame:
    """
    Aligns runs on the round index: per run the accuracy and the cumulative uplink and
    downlink bytes. Writes comparison.csv to ``out`` (a file or directory) if given.
    """
    if len(run_dirs) < 2:
        raise ValueError(f"comparing needs at least two runs, got {len(run_dirs)}")
    columns = {}
    seen: Dict[str, int] = {}
    for run_dir in map(Path, run_dirs):
        summary, table = _load_run(run_dir)
        label = f"{summary['method']}:{run_dir.name}"
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}#{seen[label]}"
        table = table.set_index("t")
        columns[f"{label}_accuracy"] = table["accuracy"]
        columns[f"{label}_uplink_cumulative"] = table["uplink_bytes_total"].cumsum()
        columns[f"{label}_downlink_cumulative"] = table["downlink_bytes_total"].cumsum()
    comparison = pd.DataFrame(columns)
    comparison.index.name = "t"
    if out is not None:
        out = Path(out)
        if out.is_dir():
            out = out / "comparison.csv"
        comparison.to_csv(out)
        logger.info(f"Wrote comparison of {len(run_dirs)} runs to {out}")
    return comparison


@dataclass(frozen=True)
class AccountingReport:
    num_params: int
    population: int
    partitions: int
    scheme: str
    fitness_bytes: int
    model_bytes: int
    compression: float
    claimed: Optional[float] = None

    @property
    def degenerate(self) -> bool:
        return self.compression <= 0

    @property
    def reproduces_claim(self) -> Optional[bool]:
        if self.claimed is None:
            return None
        return self.compression >= self.claimed


def accounting_report(
    num_params: int,
    population: int,
    partitions: int,
    scheme: CodecScheme = RAW32,
    claimed: Optional[float] = None,
) -> AccountingReport:
    """Compression 1 - fitness bytes / full-model bytes of a single upload."""
    fitness = byte_size(scheme, population, partitions)
    model = 4 * num_params
    compression = 1.0 - fitness / model
    report = AccountingReport(
        num_params, population, partitions, str(scheme), fitness, model, compression, claimed
    )
    if report.degenerate:
        logger.warning(
            f"{partitions} partitions with a population of {population} send {fitness} bytes, more than the {model} byte model"
        )
    return report


def config_num_params(cfg: ExperimentConfig) -> int:
    ds = cfg.dataset
    if ds.kind == "blobs":
        return ArchSpec.mlp(ds.features, cfg.hidden, ds.classes, cfg.activation).num_params
    train, _ = load_data(cfg)
    arch = ArchSpec.mlp(train.num_features, cfg.hidden, train.num_classes, cfg.activation)
    return arch.num_params


def verify_accounting(cfg: ExperimentConfig) -> List[AccountingReport]:
    """The configured instance followed by the published ones and whether their claimed rates hold."""
    reports = [accounting_report(config_num_params(cfg), cfg.population, cfg.partitions, cfg.codec)]
    for num_params, population, partitions, claimed in PUBLISHED_INSTANCES:
        reports.append(accounting_report(num_params, population, partitions, RAW32, claimed))
    return reports


def format_report(report: AccountingReport) -> str:
    line = (
        f"|theta|={report.num_params} N={report.population} K={report.partitions} {report.scheme}: "
        f"{report.fitness_bytes} of {report.model_bytes} bytes, compression {100 * report.compression:.2f}%"
    )
    if report.degenerate:
        line += " (degenerate: fitness is larger than the model)"
    if report.claimed is not None:
        verdict = "reproduced" if report.reproduces_claim else "NOT reproduced"
        line += f", claimed >= {100 * report.claimed:.1f}% {verdict}"
    return line
