# dicp_components/experiment.py
"""Localisation sweeps over scenes and noise scales, and their reports."""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import openpyxl
import pandas as pd
from openpyxl.styles import Font, PatternFill
from rich.table import Table

from .config import section, write_json_document
from .dicp_core import IcpConfig
from .errors import ConfigError, DataError, NumericalError
from .mask_trainer import (
    MODES,
    ModeMetrics,
    RunRecord,
    TrainConfig,
    TrainSample,
    evaluate_mask,
    summarize_runs,
    train_mask,
)
from .mask_weighting import WeightMask, load_mask
from .radar_extract import DetectorConfig
from .scene import SceneSpec, generate_scene, load_scene_specs, standard_suite

logger = logging.getLogger(__name__)

MASK_SOURCES = ("none", "trained", "file")
SUMMARY_COLUMNS = [
    "sigma",
    "mode",
    "rmse_long_m",
    "rmse_lat_m",
    "rmse_head_deg",
    "converged_pct",
    "accurate_pct",
    "bias_long_m",
    "bias_lat_m",
    "bias_head_deg",
    "runs",
]
ERROR_COMPONENTS = ("err_long_m", "err_lat_m", "err_head_deg")


def _substream_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


@dataclass
class SummaryRow:
    sigma: float
    metrics: ModeMetrics

    def to_dict(self) -> Dict[str, Any]:
        row = self.metrics.to_dict()
        row["sigma"] = self.sigma
        return {column: row[column] for column in SUMMARY_COLUMNS}


@dataclass
class ExperimentReport:
    rows: List[SummaryRow] = field(default_factory=list)
    records: List[RunRecord] = field(default_factory=list)
    seed: int = 0
    mask_source: str = "none"

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [row.to_dict() for row in self.rows], columns=SUMMARY_COLUMNS
        )

    def runs_frame(self) -> pd.DataFrame:
        columns = list(RunRecord.__dataclass_fields__)
        return pd.DataFrame([r.__dict__ for r in self.records], columns=columns)

    def row(self, sigma: float, mode: str) -> ModeMetrics:
        for row in self.rows:
            if row.sigma == float(sigma) and row.metrics.mode == mode:
                return row.metrics
        raise KeyError((sigma, mode))

    def boxplot(self) -> Dict[str, Any]:
        """Quartiles of each error component over converged runs"""
        data: Dict[str, Any] = {}
        for row in self.rows:
            runs = [
                r
                for r in self.records
                if r.sigma == row.sigma and r.mode == row.metrics.mode and r.converged
            ]
            errors = np.array(
                [[getattr(r, c) for c in ERROR_COMPONENTS] for r in runs],
                dtype=np.float64,
            ).reshape(-1, len(ERROR_COMPONENTS))
            stats = {}
            for k, component in enumerate(ERROR_COMPONENTS):
                column = errors[:, k]
                if column.size == 0:
                    stats[component] = {"count": 0}
                    continue
                q = np.quantile(column, [0.0, 0.25, 0.5, 0.75, 1.0])
                stats[component] = {
                    "count": int(column.size),
                    "min": float(q[0]),
                    "q1": float(q[1]),
                    "median": float(q[2]),
                    "q3": float(q[3]),
                    "max": float(q[4]),
                }
            data.setdefault(f"{row.sigma:g}", {})[row.metrics.mode] = stats
        return data

    def export(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.summary_frame().to_csv(out / "summary.csv", index=False, encoding="utf-8")
        self.runs_frame().to_csv(out / "runs.csv", index=False, encoding="utf-8")
        write_json_document(self.boxplot(), out / "boxplot.json")
        export_workbook(self, out / "summary.xlsx")
        logger.info("Report written to %s", out)
        return out


def export_workbook(report: ExperimentReport, path) -> Path:
    """Summary sheet first, then per-run records.

    Sweeps without a single converged run are shown in red.
    """
    path = Path(path)
    wb = openpyxl.Workbook()
    wb.remove(wb.active)

    header_fill = PatternFill(
        start_color="1F4E78", end_color="1F4E78", fill_type="solid"
    )
    header_font = Font(color="FFFFFF", bold=True)
    failed_fill = PatternFill(
        start_color="FFE6E6", end_color="FFE6E6", fill_type="solid"
    )
    failed_font = Font(color="FF0000")

    sheets = (
        ("Summary", report.summary_frame()),
        ("Runs", report.runs_frame()),
    )
    for name, frame in sheets:
        ws = wb.create_sheet(name)
        for col, header in enumerate(frame.columns, 1):
            cell = ws.cell(row=1, column=col, value=header)
            cell.fill = header_fill
            cell.font = header_font
        for row, values in enumerate(frame.itertuples(index=False), 2):
            for col, value in enumerate(values, 1):
                if isinstance(value, float) and math.isnan(value):
                    value = None
                elif isinstance(value, (np.bool_, np.integer, np.floating)):
                    value = value.item()
                ws.cell(row=row, column=col, value=value)
            if name == "Summary" and frame.iloc[row - 2]["converged_pct"] == 0.0:
                for col in range(1, len(frame.columns) + 1):
                    ws.cell(row=row, column=col).fill = failed_fill
                    ws.cell(row=row, column=col).font = failed_font

        for column in ws.columns:
            longest = max(
                len(str(cell.value)) for cell in column if cell.value is not None
            )
            ws.column_dimensions[column[0].column_letter].width = min(longest + 2, 50)

    wb.save(path)
    return path


def summary_table(report: ExperimentReport) -> Table:
    table = Table(title=f"Localisation summary (mask: {report.mask_source})")
    for header in (
        "sigma", "mode", "long [m]", "lat [m]", "head [deg]", "conv %", "acc %"
    ):
        table.add_column(header, justify="right")
    for row in report.rows:
        m = row.metrics
        table.add_row(
            f"{row.sigma:g}",
            m.mode,
            f"{m.rmse_long_m:.4f}",
            f"{m.rmse_lat_m:.4f}",
            f"{m.rmse_head_deg:.3f}",
            f"{m.converged_pct:.1f}",
            f"{m.accurate_pct:.1f}",
        )
    return table


def _scene_mask(
    index: int,
    sample: TrainSample,
    mask_source: str,
    seed: int,
    train_cfg: TrainConfig,
    mask: Optional[WeightMask],
) -> Tuple[WeightMask, str]:
    """Mask for one scene, and why training failed (empty on success)"""
    if mask_source == "file":
        return mask, ""
    if mask_source == "none":
        return WeightMask.constant(train_cfg.geometry, 1.0), ""
    logger.info("Training mask for scene %d", index)
    try:
        result = train_mask(sample, train_cfg, seed=_substream_seed(seed, index))
    except (DataError, NumericalError) as e:
        logger.warning("Scene %d: training failed, weighted runs fail: %s", index, e)
        return WeightMask.constant(train_cfg.geometry, 1.0), str(e)
    if result.all_skipped:
        logger.warning("Scene %d: no epoch passed the good-sample filter", index)
    return result.mask, ""


def failed_run(record: RunRecord, failure: str) -> RunRecord:
    return replace(
        record,
        err_long_m=math.nan,
        err_lat_m=math.nan,
        err_head_deg=math.nan,
        step_norm=math.inf,
        iterations=0,
        converged=False,
        accurate=False,
        failure=failure,
    )


def _failed_scene(
    index: int, sigmas: Sequence[float], trials: int, failure: str
) -> List[RunRecord]:
    template = RunRecord(
        sample=index,
        trial=0,
        mode=MODES[0],
        sigma=0.0,
        init_x=0.0,
        init_y=0.0,
        init_heading_deg=0.0,
        err_long_m=math.nan,
        err_lat_m=math.nan,
        err_head_deg=math.nan,
        step_norm=math.inf,
        iterations=0,
        converged=False,
        accurate=False,
        failure=failure,
    )
    return [
        replace(template, trial=t, mode=mode, sigma=float(sigma))
        for sigma in sigmas
        for t in range(int(trials))
        for mode in MODES
    ]


def run_experiment(
    scenes: Sequence[SceneSpec],
    mask_source: str,
    sigmas: Sequence[float],
    trials: int,
    cfg: Optional[IcpConfig],
    seed: int,
    train_cfg: Optional[TrainConfig] = None,
    mask_path=None,
    workers: int = 1,
    dist: str = "uniform",
    detector: Optional[DetectorConfig] = None,
) -> ExperimentReport:
    """Evaluate weighted against unweighted localisation on every scene and sigma"""
    if not scenes:
        raise ConfigError("run_experiment needs at least one scene")
    if not sigmas:
        raise ConfigError("run_experiment needs at least one noise scale")
    if int(trials) < 1:
        raise ConfigError(
            "trials must be >= 1; an experiment without trials has no report"
        )
    if mask_source not in MASK_SOURCES:
        raise ConfigError(
            f"Unknown mask source {mask_source!r}; use one of {MASK_SOURCES}"
        )
    train_cfg = train_cfg or TrainConfig()
    cfg = cfg or IcpConfig.evaluation_defaults()

    file_mask = None
    if mask_source == "file":
        if mask_path is None:
            raise ConfigError("mask source 'file' needs a mask path")
        file_mask = load_mask(mask_path)

    records: List[RunRecord] = []
    for i, spec in enumerate(scenes):
        logger.info("Generating scene %d of %d", i + 1, len(scenes))
        try:
            sample = TrainSample.from_scene(generate_scene(spec), detector)
        except (DataError, NumericalError) as e:
            logger.warning("Scene %d unusable, its runs are failures: %s", i, e)
            records.extend(_failed_scene(i, sigmas, trials, str(e)))
            continue
        mask, failure = _scene_mask(i, sample, mask_source, seed, train_cfg, file_mask)
        for j, sigma in enumerate(sigmas):
            logger.info("Scene %d: sweeping sigma=%g with %d trials", i, sigma, trials)
            evaluation = evaluate_mask(
                mask,
                [sample],
                float(sigma),
                int(trials),
                seed=_substream_seed(seed, i, j),
                cfg=cfg,
                dist=dist,
                workers=workers,
            )
            for record in evaluation.records:
                record.sample = i
                if failure and record.mode == "weighted":
                    record = failed_run(record, failure)
                records.append(record)

    rows = []
    for sigma in sigmas:
        for mode in MODES:
            subset = [r for r in records if r.sigma == float(sigma) and r.mode == mode]
            rows.append(SummaryRow(float(sigma), summarize_runs(subset, mode)))
    return ExperimentReport(
        rows=rows, records=records, seed=seed, mask_source=mask_source
    )


def parse_sigmas(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(
            f"--sigmas must be comma-separated numbers, got {text!r}"
        ) from None
    if not values or any(v < 0 or not math.isfinite(v) for v in values):
        raise ConfigError(f"--sigmas needs finite values >= 0, got {text!r}")
    return values


class EvalComponent:
    """``dicp eval``: run the sweep and write the report directory"""

    def __init__(self, settings: Dict[str, Any]):
        self.settings = settings

    @staticmethod
    def add_arguments(parser) -> None:
        parser.add_argument("--scenes", help="scenes JSON (standard suite if omitted)")
        parser.add_argument("--suite-size", type=int, default=1, dest="suite_size")
        parser.add_argument("--sigmas", default="0,1,2,3,4")
        parser.add_argument("--trials", type=int, default=200)
        parser.add_argument("--mask", choices=MASK_SOURCES, default="none")
        parser.add_argument("--mask-file", dest="mask_file")
        parser.add_argument("--dist", choices=("uniform", "normal"), default="uniform")
        parser.add_argument("--workers", type=int, default=1)
        parser.add_argument(
            "--from-detections",
            action="store_true",
            dest="from_detections",
            help="use BFAR detections of the rendered scans as source clouds",
        )
        parser.add_argument("--out", required=True, help="report directory")

    def run(self, args) -> ExperimentReport:
        if args.mask == "file" and not args.mask_file:
            raise ConfigError("--mask file needs --mask-file")
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        specs = (
            load_scene_specs(args.scenes)
            if args.scenes
            else standard_suite(args.suite_size, args.seed)
        )
        document = self.settings
        cfg = IcpConfig.from_dict(
            {**IcpConfig.evaluation_defaults().to_dict(), **section(document, "icp")}
        )
        train_cfg = TrainConfig.from_dict(section(document, "train"))
        detector = None
        if args.from_detections:
            detector = DetectorConfig.from_dict(section(document, "detector"))

        report = run_experiment(
            specs,
            args.mask,
            parse_sigmas(args.sigmas),
            args.trials,
            cfg,
            args.seed,
            train_cfg=train_cfg,
            mask_path=args.mask_file,
            workers=args.workers,
            dist=args.dist,
            detector=detector,
        )
        if not report.records:
            raise DataError("The sweep produced no runs")
        report.export(args.out)
        return report
