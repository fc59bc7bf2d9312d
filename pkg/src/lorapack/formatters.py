"""Formatters for lorapack output - CSV tables, JSON reports, terminal tables."""

import csv
import io
import json
from collections.abc import Sequence
from typing import Any, Optional

from rich.table import Table

from lorapack import FORMAT_VERSION, __version__
from lorapack.models import BitReport, ErrorReport, LayerBits, ProjectionPoint, Strategy

BIT_COLUMNS = ["layer", "weights", "code_bits", "scale_bits", "zp_bits", "avg_bits"]
PROJECTION_COLUMNS = ["n_adapters", "bytes_fp16", "bytes_quantized"]
SWEEP_COLUMNS = [
    "label",
    "strategy",
    "rho",
    "bits_high",
    "static_h",
    "b_orientation",
    "a_orientation",
    "seed",
    "layers",
    "mean_h",
    "mean_rel_error",
    "max_rel_error",
    "mean_abs_error",
    "avg_bits",
]

AGGREGATE_ROW = "TOTAL"


def format_float(value: Optional[float]) -> str:
    """Shortest round-tripping text for a float; empty for None."""
    if value is None:
        return ""
    return repr(float(value))


def _write_csv(columns: list[str], rows: Sequence[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buffer.getvalue()


def _bit_row(bits: LayerBits) -> list[Any]:
    return [
        bits.layer_name,
        bits.weights,
        bits.code_bits,
        bits.scale_bits,
        bits.zp_bits,
        format_float(bits.avg_bits),
    ]


def bit_report_csv(report: BitReport) -> str:
    """BitReport as CSV: one row per layer, then a TOTAL row.

    An empty report renders as the header line only.
    """
    rows = [_bit_row(layer) for layer in report.layers]
    if report.layers:
        total = report.total
        total.layer_name = AGGREGATE_ROW
        rows.append(_bit_row(total))
    return _write_csv(BIT_COLUMNS, rows)


def projection_csv(points: Sequence[ProjectionPoint]) -> str:
    """Memory projection curve as CSV."""
    return _write_csv(
        PROJECTION_COLUMNS,
        [[p.n_adapters, p.bytes_fp16, p.bytes_quantized] for p in points],
    )


def _sweep_row(report: ErrorReport) -> list[Any]:
    cfg = report.config
    uses_rho = (
        not cfg.strategy.is_baseline
        and cfg.strategy is not Strategy.SVD_STATIC_H
        and (cfg.static_h is None or cfg.strategy is Strategy.SVD_RATIO)
    )
    return [
        cfg.label,
        cfg.strategy.value,
        format_float(cfg.rho) if uses_rho else "",
        cfg.bits_high,
        "" if cfg.static_h is None else cfg.static_h,
        cfg.b_orientation.short,
        cfg.a_orientation.short,
        cfg.seed if cfg.strategy.uses_seed else "",
        len(report.layers),
        format_float(report.mean_h),
        format_float(report.mean_rel_error),
        format_float(report.max_rel_error),
        format_float(report.mean_abs_error),
        format_float(report.avg_bits),
    ]


def sweep_csv(reports: Sequence[ErrorReport]) -> str:
    """One CSV row per configuration of a comparison sweep.

    The seed column is filled only for strategies that consume randomness.
    """
    return _write_csv(SWEEP_COLUMNS, [_sweep_row(report) for report in reports])


def quantize_report(error: ErrorReport, bits: BitReport) -> dict[str, Any]:
    """JSON document written next to a .lqz artifact."""
    document = error.to_json_dict()
    document["bits"] = bits.to_json_dict()
    document["format_version"] = FORMAT_VERSION
    document["tool_version"] = __version__
    return document


def bit_report_json(report: BitReport) -> dict[str, Any]:
    """BitReport with version fields."""
    document = report.to_json_dict()
    document["format_version"] = FORMAT_VERSION
    return document


def to_json(document: Any) -> str:
    """Stable JSON rendering used for every report on disk and on stdout."""
    return json.dumps(document, indent=2, sort_keys=True)


def create_bits_table(report: BitReport) -> Table:
    """Human-readable summary of a BitReport for the stderr console."""
    table = Table(title="Bit accounting", show_header=True, box=None, padding=(0, 2))
    table.add_column("Layer", style="bold cyan")
    table.add_column("Weights", justify="right")
    table.add_column("Code", justify="right")
    table.add_column("Scale", justify="right")
    table.add_column("Zero point", justify="right")
    table.add_column("AvgBits", justify="right", style="green")

    for layer in report.layers:
        table.add_row(
            layer.layer_name,
            f"{layer.weights:,}",
            f"{layer.code_bits:,}",
            f"{layer.scale_bits:,}",
            f"{layer.zp_bits:,}",
            f"{layer.avg_bits:.4f}",
        )
    if report.layers:
        total = report.total
        table.add_row(
            "[bold]total",
            f"{total.weights:,}",
            f"{total.code_bits:,}",
            f"{total.scale_bits:,}",
            f"{total.zp_bits:,}",
            f"[bold]{total.avg_bits:.4f}",
        )
    return table


def create_error_table(report: ErrorReport) -> Table:
    """Per-layer reconstruction errors for the stderr console."""
    table = Table(title=f"Reconstruction error ({report.label})", box=None, padding=(0, 2))
    table.add_column("Layer", style="bold cyan")
    table.add_column("r", justify="right")
    table.add_column("h", justify="right")
    table.add_column("Abs error", justify="right")
    table.add_column("Rel error", justify="right")
    table.add_column("AvgBits", justify="right", style="green")

    for layer in report.layers:
        rel = "n/a" if layer.rel_error is None else f"{layer.rel_error:.4e}"
        table.add_row(
            layer.layer_name,
            str(layer.rank),
            str(layer.h),
            f"{layer.abs_error:.4e}",
            rel,
            f"{layer.avg_bits:.4f}",
        )
    return table
