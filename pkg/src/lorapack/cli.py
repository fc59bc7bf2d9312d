"""CLI interface for lorapack."""

import logging
import sys
import time
from pathlib import Path
from typing import NoReturn, Optional

import click
import numpy as np
from numpy.typing import NDArray
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress, SpinnerColumn, TextColumn

from lorapack import __version__
from lorapack.errors import ConfigError, ContainerFormatError, LorapackError
from lorapack.formatters import (
    bit_report_csv,
    bit_report_json,
    create_bits_table,
    create_error_table,
    projection_csv,
    quantize_report,
    sweep_csv,
    to_json,
)
from lorapack.models import (
    AdapterContainer,
    LoraAdapter,
    Orientation,
    QuantConfig,
    RunManifest,
    Strategy,
)
from lorapack.pipeline import (
    ContainerQuantizer,
    compare_methods,
    reconstruct_adapter,
    reconstruct_factors,
    sweep_configs,
)
from lorapack.quant.accounting import (
    avg_bits,
    avg_bits_by_artifact,
    fp16_bits,
    projection_curve,
    walk_payload,
)
from lorapack.synthetic import SyntheticSpec, synthesize_container
from lorapack.tensor_store import (
    adapter_header_bytes,
    read_container,
    read_quantized,
    read_tensors,
    write_container,
    write_quantized,
    write_tensors,
)
from lorapack.utils import parse_float_range, parse_int_range

logger = logging.getLogger(__name__)

# Diagnostics only; standard output carries data.
console = Console(stderr=True)

PRESETS = {
    "2@0.8": (2, 0.8),
    "2@0.9": (2, 0.9),
    "3@0.8": (3, 0.8),
    "3@0.9": (3, 0.9),
}
STRATEGY_NAMES = [s.value for s in Strategy]
ORIENTATIONS = ["col", "row"]
DEFAULT_COMPARE_STRATEGIES = "svd_ratio,norm_split,random_split,prune,low_rtn1,baseline_rtn,baseline_bin"

# Largest layer (m * n) exported by reconstruct --dense.
DENSE_ELEMENT_LIMIT = 1 << 24


def configure_logging(verbosity: int) -> None:
    """Route log records to the stderr console (-v INFO, -vv DEBUG)."""
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    handler = RichHandler(console=console, show_path=False, show_time=verbosity >= 2)
    logging.basicConfig(level=level, format="%(message)s", handlers=[handler], force=True)


def abort(error: BaseException) -> NoReturn:
    """Print the error and exit: 2 for invalid configuration, 1 otherwise."""
    code = 2 if isinstance(error, ConfigError) else 1
    console.print(f"[red]Error:[/red] {error}", style="bold")
    if logger.isEnabledFor(logging.DEBUG):
        console.print_exception()
    sys.exit(code)


def load_adapters(input_path: Optional[str], synthesize: Optional[str]) -> tuple[AdapterContainer, str]:
    """Read --input or generate --synthesize; returns the container and its provenance."""
    if (input_path is None) == (synthesize is None):
        raise ConfigError("Give exactly one of --input or --synthesize")
    if synthesize is not None:
        spec = SyntheticSpec.from_string(synthesize)
        return synthesize_container(spec), f"synthetic:{synthesize}"
    assert input_path is not None
    return read_container(input_path), input_path


def write_manifest(
    primary: Path,
    command: str,
    config: dict[str, object],
    inputs: list[str],
    outputs: list[str],
    seed: Optional[int],
    started: float,
) -> Path:
    """Write '<primary>.manifest.json' describing this run."""
    manifest = RunManifest(
        command=command,
        config=config,
        inputs=inputs,
        outputs=outputs,
        seed=seed,
        duration_seconds=max(time.time() - started, 0.0),
    )
    path = primary.with_name(primary.name + ".manifest.json")
    path.write_text(manifest.to_json() + "\n", encoding="utf-8")
    return path


def build_config(
    ratio: Optional[float],
    bits_high: Optional[int],
    preset: Optional[str],
    group_size: int,
    opt_steps: int,
    lr: float,
    strategy: str,
    static_h: Optional[int],
    seed: int,
    b_orientation: str,
    a_orientation: str,
) -> QuantConfig:
    """Merge a preset with explicit flags; explicit flags win."""
    preset_bits, preset_rho = PRESETS[preset] if preset else (2, 0.9)
    return QuantConfig(
        rho=preset_rho if ratio is None else ratio,
        bits_high=preset_bits if bits_high is None else bits_high,
        group_size=group_size,
        opt_steps=opt_steps,
        learning_rate=lr,
        strategy=Strategy(strategy),
        static_h=static_h,
        seed=seed,
        b_orientation=Orientation.from_string(b_orientation),
        a_orientation=Orientation.from_string(a_orientation),
    )


@click.group()
@click.version_option(version=__version__, prog_name="lorapack")
@click.option("-v", "--verbose", count=True, help="Log progress to stderr (-vv for debug)")
def cli(verbose: int) -> None:
    """lorapack - Mixed-precision quantization of LoRA adapters."""
    configure_logging(verbose)


@cli.command()
@click.option("--input", "-i", "input_path", type=click.Path(dir_okay=False), help="Adapter container (.qla)")
@click.option("--synthesize", help="Generate adapters instead: m,n,r,layers,seed[,decay]")
@click.option("--output", "-o", "output_path", type=click.Path(dir_okay=False), required=True, help="Quantized artifact (.lqz)")
@click.option("--ratio", type=float, help="Variance ratio rho in (0, 1] [default: 0.9]")
@click.option("--bits-high", type=int, help="Bits of the high sub-LoRA: 2, 3, 4 or 16 [default: 2]")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), help="Headline configuration bits@rho")
@click.option("--group-size", type=int, default=128, show_default=True, help="Weights per quantization group")
@click.option("--opt-steps", type=int, default=100, show_default=True, help="STE gradient steps per rank pair")
@click.option("--lr", type=float, default=1e-3, show_default=True, help="STE learning rate")
@click.option("--strategy", type=click.Choice(STRATEGY_NAMES), default="svd_ratio", show_default=True)
@click.option("--static-h", type=int, help="Fixed split rank for svd_static_h and native splits")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for random_split")
@click.option("--b-orientation", type=click.Choice(ORIENTATIONS), default="col", show_default=True)
@click.option("--a-orientation", type=click.Choice(ORIENTATIONS), default="row", show_default=True)
@click.option("--threads", type=int, help="Worker threads (overrides LORAPACK_THREADS)")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), help="JSON report path [default: <output>.report.json]")
@click.option("--json", "output_json", is_flag=True, help="Also print the JSON report to stdout")
def quantize(
    input_path: Optional[str],
    synthesize: Optional[str],
    output_path: str,
    ratio: Optional[float],
    bits_high: Optional[int],
    preset: Optional[str],
    group_size: int,
    opt_steps: int,
    lr: float,
    strategy: str,
    static_h: Optional[int],
    seed: int,
    b_orientation: str,
    a_orientation: str,
    threads: Optional[int],
    report_path: Optional[str],
    output_json: bool,
) -> None:
    """Quantize every adapter of a container into a .lqz artifact.

    Writes the artifact, a JSON report (per-layer h, errors and AvgBits) and a
    run manifest. Exit codes: 0 success, 1 malformed input, 2 invalid config.
    """
    started = time.time()
    try:
        config = build_config(
            ratio, bits_high, preset, group_size, opt_steps, lr, strategy,
            static_h, seed, b_orientation, a_orientation,
        )
        container, source = load_adapters(input_path, synthesize)
        quantizer = ContainerQuantizer(config, threads)

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
            transient=True,
        ) as progress:
            progress.add_task(description=f"Quantizing {len(container)} layer(s) as {config.label}...", total=None)
            artifact, errors = quantizer.run(container)

        output = Path(output_path)
        write_quantized(output, artifact)
        report = quantize_report(errors, avg_bits(artifact.adapters))
        report_file = Path(report_path) if report_path else output.with_name(output.name + ".report.json")
        report_file.write_text(to_json(report) + "\n", encoding="utf-8")
        write_manifest(
            output, "quantize", config.to_json_dict(), [source],
            [str(output), str(report_file)], config.seed, started,
        )

        if output_json:
            click.echo(to_json(report))
        console.print(create_error_table(errors))
        console.print(
            f"[green]✓[/green] Wrote [cyan]{output}[/cyan] "
            f"(AvgBits {report['aggregate']['avg_bits']:.4f}) in {time.time() - started:.2f}s"
        )
    except (LorapackError, OSError, ValueError) as e:
        abort(e)


@cli.command()
@click.option("--input", "-i", "input_path", type=click.Path(dir_okay=False), required=True, help="Quantized artifact (.lqz)")
@click.option("--output", "-o", "output_path", type=click.Path(dir_okay=False), required=True, help="Dequantized adapters (.qla)")
@click.option("--dtype", type=click.Choice(["F32", "F16"]), default="F32", show_default=True, help="Storage dtype")
@click.option("--reference", type=click.Path(dir_okay=False), help="Source .qla to measure reconstruction error against")
@click.option("--dense", "dense_path", type=click.Path(dir_okay=False), help="Also write the dense m x n deltas here")
@click.option("--threads", type=int, help="Worker threads (overrides LORAPACK_THREADS)")
def reconstruct(
    input_path: str,
    output_path: str,
    dtype: str,
    reference: Optional[str],
    dense_path: Optional[str],
    threads: Optional[int],
) -> None:
    """Dequantize a .lqz artifact back to factor pairs.

    B_high|B_low are concatenated into one m x r' factor and A_high;A_low into
    r' x n. With --reference the error report is printed as JSON on stdout.
    """
    started = time.time()
    try:
        artifact = read_quantized(input_path)
        adapters = []
        for q in artifact.adapters:
            b, a = reconstruct_factors(q)
            adapters.append(LoraAdapter(q.layer_name, b, a))
        metadata = dict(artifact.metadata)
        metadata["quantized_as"] = artifact.config.label
        output = Path(output_path)
        write_container(AdapterContainer(adapters=adapters, metadata=metadata), output, dtype)
        outputs = [str(output)]

        if dense_path:
            tensors: dict[str, NDArray[np.float32]] = {}
            for q in artifact.adapters:
                if q.rows * q.cols > DENSE_ELEMENT_LIMIT:
                    raise ConfigError(
                        f"Layer {q.layer_name} is {q.rows}x{q.cols}; dense export is limited "
                        f"to {DENSE_ELEMENT_LIMIT} elements"
                    )
                tensors[f"{q.layer_name}.delta"] = reconstruct_adapter(q).astype("<f4")
            write_tensors(dense_path, tensors, {"quantized_as": artifact.config.label})
            outputs.append(dense_path)

        inputs = [input_path]
        if reference:
            source = read_container(reference)
            errors = ContainerQuantizer(artifact.config, threads).evaluate(source, artifact)
            click.echo(to_json(quantize_report(errors, avg_bits(artifact.adapters))))
            inputs.append(reference)

        write_manifest(
            output, "reconstruct", artifact.config.to_json_dict(), inputs, outputs,
            artifact.config.seed, started,
        )
        console.print(f"[green]✓[/green] Reconstructed {len(adapters)} layer(s) into [cyan]{output}[/cyan]")
    except (LorapackError, OSError, ValueError) as e:
        abort(e)


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--format", "output_format", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.option("--check-payload", is_flag=True, help="Cross-check the accounting against a walk of the packed payload")
@click.option("--table", is_flag=True, help="Also show a summary table on stderr")
def report(inputs: tuple[str, ...], output_format: str, check_payload: bool, table: bool) -> None:
    """Print the AvgBits accounting of one or more .lqz artifacts.

    Several artifacts are reported per artifact plus pooled.
    """
    try:
        artifacts = {path: read_quantized(path).adapters for path in inputs}
        if len(artifacts) == 1:
            bits = avg_bits(next(iter(artifacts.values())))
        else:
            bits = avg_bits_by_artifact(artifacts)

        if check_payload:
            for path, adapters in artifacts.items():
                walked = walk_payload(path).total
                declared = avg_bits(adapters).total
                if walked.total_bits != declared.total_bits or walked.weights != declared.weights:
                    raise ContainerFormatError(
                        f"{path}: payload holds {walked.total_bits} bits, "
                        f"metadata accounts for {declared.total_bits}"
                    )

        if output_format == "json":
            click.echo(to_json(bit_report_json(bits)))
        else:
            click.echo(bit_report_csv(bits), nl=False)
        if table:
            console.print(create_bits_table(bits))
    except (LorapackError, OSError, ValueError) as e:
        abort(e)


@cli.command()
@click.option("--input", "-i", "input_path", type=click.Path(dir_okay=False), help="Adapter container (.qla)")
@click.option("--synthesize", help="Generate adapters instead: m,n,r,layers,seed[,decay]")
@click.option("--strategies", default=DEFAULT_COMPARE_STRATEGIES, show_default=True, help="Comma-separated strategy names")
@click.option("--ratios", default="0.9", show_default=True, help="rho values: '0.8,0.9' or 'start:stop:step'")
@click.option("--bits", "bits_list", default="2", show_default=True, help="bits_high values, e.g. '2,3'")
@click.option("--static-h", "static_hs", default="", help="Static h values: '1-12' or '2,4'")
@click.option("--orientations", default="col-row", show_default=True, help="B-A grouping layouts, e.g. 'col-row,row-col'")
@click.option("--seeds", default="0", show_default=True, help="Seeds for random_split, e.g. '0-4'")
@click.option("--group-size", type=int, default=128, show_default=True)
@click.option("--opt-steps", type=int, default=100, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--threads", type=int, help="Worker threads (overrides LORAPACK_THREADS)")
@click.option("--output", "-o", "output_path", type=click.Path(dir_okay=False), help="CSV path [default: stdout]")
def compare(
    input_path: Optional[str],
    synthesize: Optional[str],
    strategies: str,
    ratios: str,
    bits_list: str,
    static_hs: str,
    orientations: str,
    seeds: str,
    group_size: int,
    opt_steps: int,
    lr: float,
    threads: Optional[int],
    output_path: Optional[str],
) -> None:
    """Sweep strategies x ratios x bits (x static h x layouts x seeds) into a CSV."""
    started = time.time()
    try:
        try:
            strategy_list = [Strategy(s.strip()) for s in strategies.split(",") if s.strip()]
        except ValueError as e:
            raise ConfigError(f"Unknown strategy in {strategies!r}") from e
        layouts = []
        for pair in orientations.split(","):
            parts = pair.strip().split("-")
            if len(parts) != 2:
                raise ConfigError(f"Orientation pair must look like 'col-row', got {pair!r}")
            layouts.append((Orientation.from_string(parts[0]), Orientation.from_string(parts[1])))

        configs = sweep_configs(
            strategy_list,
            parse_float_range(ratios) if ratios.strip() else [],
            parse_int_range(bits_list),
            parse_int_range(static_hs) if static_hs.strip() else [],
            layouts,
            parse_int_range(seeds),
            group_size=group_size,
            opt_steps=opt_steps,
            learning_rate=lr,
        )
        container, source = load_adapters(input_path, synthesize)
        logger.info(f"Running {len(configs)} configuration(s) over {len(container)} layer(s)")
        csv_text = sweep_csv(compare_methods(container, configs, threads))

        if output_path:
            output = Path(output_path)
            output.write_text(csv_text, encoding="utf-8")
            write_manifest(
                output, "compare", {"configs": [c.to_json_dict() for c in configs]},
                [source], [str(output)], None, started,
            )
            console.print(f"[green]✓[/green] Wrote {len(configs)} row(s) to [cyan]{output}[/cyan]")
        else:
            click.echo(csv_text, nl=False)
    except (LorapackError, OSError, ValueError) as e:
        abort(e)


@cli.command()
@click.option("--input", "-i", "input_path", type=click.Path(dir_okay=False), required=True, help="Quantized artifact (.lqz)")
@click.option("--base-bytes", type=int, default=0, show_default=True, help="Size of the base model in bytes")
@click.option("--max-adapters", type=int, default=100, show_default=True)
@click.option("--step", type=int, default=10, show_default=True)
@click.option("--output", "-o", "output_path", type=click.Path(dir_okay=False), help="CSV path [default: stdout]")
def project(input_path: str, base_bytes: int, max_adapters: int, step: int, output_path: Optional[str]) -> None:
    """Project memory for N adapters loaded next to the base model, fp16 vs quantized.

    Adapter terms include each container's framing bytes.
    """
    started = time.time()
    try:
        if max_adapters < 0 or step < 1:
            raise ConfigError("--max-adapters must be >= 0 and --step >= 1")
        artifact = read_quantized(input_path)
        shapes = [(q.layer_name, q.rows, q.cols, q.rank) for q in artifact.adapters]
        points = projection_curve(
            fp16_bits_total=fp16_bits((m, n, r) for _, m, n, r in shapes),
            quantized_bits_total=avg_bits(artifact.adapters).total.total_bits,
            counts=list(range(0, max_adapters + 1, step)),
            base_bytes=base_bytes,
            fp16_header_bytes=adapter_header_bytes(shapes),
            quantized_header_bytes=read_tensors(input_path).header_bytes,
        )
        csv_text = projection_csv(points)
        if output_path:
            output = Path(output_path)
            output.write_text(csv_text, encoding="utf-8")
            write_manifest(
                output, "project", {"base_bytes": base_bytes, "max_adapters": max_adapters, "step": step},
                [input_path], [str(output)], None, started,
            )
        else:
            click.echo(csv_text, nl=False)
    except (LorapackError, OSError, ValueError) as e:
        abort(e)


@cli.command()
@click.option("--spec", "spec_text", required=True, help="m,n,r,layers,seed[,decay]")
@click.option("--output", "-o", "output_path", type=click.Path(dir_okay=False), required=True, help="Adapter container (.qla)")
@click.option("--dtype", type=click.Choice(["F32", "F16"]), default="F32", show_default=True)
def synthesize(spec_text: str, output_path: str, dtype: str) -> None:
    """Write a synthetic adapter container with geometric singular-value decay."""
    started = time.time()
    try:
        spec = SyntheticSpec.from_string(spec_text)
        output = Path(output_path)
        write_container(synthesize_container(spec), output, dtype)
        write_manifest(
            output, "synthesize", {"spec": spec_text, "dtype": dtype}, [], [str(output)],
            spec.seed, started,
        )
        console.print(f"[green]✓[/green] Wrote {spec.layers} synthetic layer(s) to [cyan]{output}[/cyan]")
    except (LorapackError, OSError, ValueError) as e:
        abort(e)


def main() -> None:
    """Entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
