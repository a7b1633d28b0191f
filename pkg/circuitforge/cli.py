"""Command-line entry point: circuitforge <command> [flags].

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import sys
from pathlib import Path

from circuitforge import __version__
from circuitforge.batch_processing import (
    load_regime_models,
    load_task_pair_sets,
    train_and_save,
    train_regimes,
)
from circuitforge.bootstrap import BootstrapPlan
from circuitforge.errors import CircuitForgeError, TrainingDiverged
from circuitforge.evaluate import build_table2, discovery_work_law
from circuitforge.geommlp import ACTIVATION_CODES, LayerSpec, describe, load_model
from circuitforge.manifest import RunManifest
from circuitforge.mnistdata import data_file_paths, load_mnist, resolve_data_dir
from circuitforge.patching import Circuit, discover
from circuitforge.save import (
    load_json,
    save_circuit_dot,
    save_json,
    save_plot_data,
    save_table_csv,
)
from circuitforge.settings import (
    default_activation,
    default_edge_epsilon,
    default_k,
    default_layer_spacing,
    default_n_resamples,
    default_sample_size,
    default_seed,
    default_tasks,
    default_widths,
    regime_defaults,
)
from circuitforge.train import Regime, RegimeConfig

logger = logging.getLogger("circuitforge")


def int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _number(text, cast, kind):
    try:
        return cast(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected {kind}, got '{text}'") from e


def positive_int(text):
    value = _number(text, int, "an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def nonnegative_int(text):
    value = _number(text, int, "an integer")
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def positive_float(text):
    value = _number(text, float, "a number")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def nonnegative_float(text):
    value = _number(text, float, "a number")
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def sample_size(text):
    value = _number(text, int, "an integer")
    if value < 2:
        raise argparse.ArgumentTypeError(f"must be at least 2, got {value}")
    return value


def widths(text):
    values = int_list(text)
    if len(values) < 3:
        raise argparse.ArgumentTypeError(f"need input, at least one hidden and output width, got {values}")
    if min(values) < 1:
        raise argparse.ArgumentTypeError(f"widths must be positive, got {values}")
    return values


def positive_int_list(text):
    values = int_list(text)
    if min(values) < 1:
        raise argparse.ArgumentTypeError(f"values must be positive, got {values}")
    return values


def digit_value(text):
    value = _number(text, int, "an integer")
    if not 0 <= value <= 9:
        raise argparse.ArgumentTypeError(f"must be a digit 0-9, got {value}")
    return value


def name_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def configure_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _record_data_inputs(manifest, data_dir):
    for path in data_file_paths(data_dir).values():
        manifest.add_input(path)


def _plan(args):
    return BootstrapPlan(args.n_resamples, args.sample_size, args.seed)


def cmd_train(args):
    data_dir = resolve_data_dir(args.data_dir)
    train_data, test_data = load_mnist(data_dir)
    spec = LayerSpec(args.widths, args.layer_spacing)
    regime = "vanilla" if args.regime == "all" else args.regime
    base_cfg = RegimeConfig.from_config(
        regime,
        lam=args.lam,
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        swap_interval=args.swap_interval,
        seed=args.seed,
    )
    manifest = RunManifest("train", vars_snapshot(args), {"base": args.seed})
    _record_data_inputs(manifest, data_dir)
    try:
        if args.regime == "all":
            out_dir = Path(args.out_dir)
            written = train_regimes(base_cfg, list(Regime), train_data, test_data, spec, args.activation, out_dir)
            manifest_path = out_dir / "manifest.json"
        else:
            out = Path(args.out or f"model_{regime}.gmlp")
            report = Path(args.report or f"train_report_{regime}.json")
            _, _, written = train_and_save(base_cfg, train_data, test_data, spec, args.activation, out, report)
            manifest_path = out.with_name("manifest.json")
    except TrainingDiverged as e:
        if args.regime == "all":
            report = Path(args.out_dir) / f"train_report_{e.report.regime}.json"
        else:
            report = Path(args.report or f"train_report_{regime}.json")
        cfg = base_cfg.with_regime(e.report.regime)
        save_json({"config": cfg.to_dict(), "error": str(e), **e.report.to_dict()}, report)
        logger.error("Training diverged at step %s, partial report written to %s", e.step, report)
        return 1
    for path in written:
        manifest.add_output(path)
    manifest.write(manifest_path)
    return 0


def cmd_discover(args):
    data_dir = resolve_data_dir(args.data_dir)
    model = load_model(args.model)
    _, test_data = load_mnist(data_dir)
    overrides = {}
    if args.clean is not None or args.corrupted is not None:
        if args.clean is None or args.corrupted is None:
            raise CircuitForgeError("--clean and --corrupted must be given together")
        overrides[args.task] = (args.clean, args.corrupted)
    (pair_set,) = load_task_pair_sets(test_data, [args.task], overrides)
    plan = BootstrapPlan(max(args.resample_index + 1, 1), args.sample_size, args.seed)
    report = discover(model, pair_set, plan, args.resample_index, args.k, args.epsilon)

    manifest = RunManifest("discover", vars_snapshot(args), {"bootstrap": args.seed})
    manifest.add_input(args.model)
    _record_data_inputs(manifest, data_dir)
    report_path = save_json({"task": pair_set.task_name, **report.to_dict()}, args.report)
    circuit_path = save_json(report.circuit.to_dict(), args.circuit or Path(report_path).with_name("circuit.json"))
    logger.info(
        "Circuit for %s: %d edges, sparsity %.4f, discovered in %.3f s",
        pair_set.task_name,
        len(report.circuit.edges),
        report.circuit_sparsity,
        report.discovery_time_s,
    )
    manifest.add_output(report_path)
    manifest.add_output(circuit_path)
    manifest.write(Path(report_path).with_name("manifest.json"))
    return 0


def cmd_bench(args):
    data_dir = resolve_data_dir(args.data_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models, reports, model_inputs = load_regime_models(args.model_dir)
    _, test_data = load_mnist(data_dir)
    pair_sets = load_task_pair_sets(test_data, args.tasks)
    plan = _plan(args)

    manifest = RunManifest("bench", vars_snapshot(args), {"bootstrap": args.seed})
    for path in model_inputs:
        manifest.add_input(path)
    _record_data_inputs(manifest, data_dir)

    metric_rows, compute_rows = build_table2(
        models,
        pair_sets,
        plan,
        args.k,
        args.epsilon,
        train_reports=reports,
        timing_samples=test_data.pixels,
        workers=args.workers,
    )
    table = {
        "plan": {"n_resamples": plan.n_resamples, "sample_size": plan.sample_size, "seed": plan.seed},
        "k": args.k,
        "edge_epsilon": args.epsilon,
        "rows": [row.to_dict() for row in metric_rows],
    }
    outputs = [
        save_json(table, out_dir / "table2.json"),
        save_table_csv([row.to_csv_record() for row in metric_rows], out_dir / "table2.csv"),
    ]
    if compute_rows:
        outputs.append(save_json({"rows": [row.to_dict() for row in compute_rows]}, out_dir / "compute.json"))
    outputs.extend(save_plot_data(table["rows"], out_dir))
    if args.scaling_widths:
        law = discovery_work_law(args.scaling_widths, seed=args.seed, input_dim=test_data.pixels.shape[1])
        logger.info("Discovery time vs scored sites: R^2 = %.4f", law["r_squared"])
        outputs.append(save_json(law, out_dir / "discovery_law.json"))
    for path in outputs:
        manifest.add_output(path)
    manifest.write(out_dir / "manifest.json")
    return 0


def cmd_render(args):
    try:
        circuit = Circuit.from_dict(load_json(args.circuit))
    except ValueError as e:
        raise CircuitForgeError(f"Malformed circuit file {args.circuit}: {e}") from e
    path = save_circuit_dot(circuit, args.dot)
    logger.info("Wrote %d kept edges to %s", len(circuit.edges), path)
    return 0


def cmd_describe(args):
    summary = describe(load_model(args.model), args.epsilon)
    for key, value in summary.items():
        print(f"{key}: {value}")
    return 0


def cmd_plot_data(args):
    table = load_json(args.table)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in save_plot_data(table["rows"], out_dir):
        logger.info("Wrote %s", path)
    return 0


def cmd_validate_data(args):
    train_data, test_data = load_mnist(args.data_dir)
    for ds in (train_data, test_data):
        counts = ", ".join(f"{digit}: {count}" for digit, count in enumerate(ds.digit_counts()))
        logger.info("%s: %d samples (%s)", ds.split_tag, len(ds), counts)
    return 0


def vars_snapshot(args):
    """JSON-safe copy of the parsed flags."""
    return {key: (str(value) if isinstance(value, Path) else value) for key, value in vars(args).items() if key != "func"}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="circuitforge",
        description="Train geometric MLPs under five regularization regimes and discover task circuits by activation patching.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log debug output.")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_dir_arg(p):
        p.add_argument("--data-dir", help="Directory with the four MNIST IDX files (fallback: CIRCUITFORGE_DATA_DIR).")

    def seed_arg(p):
        p.add_argument("--seed", type=int, default=default_seed)

    def discovery_args(p):
        p.add_argument("--k", type=positive_int, default=default_k, help="Neurons kept per hidden layer.")
        p.add_argument("--epsilon", type=nonnegative_float, default=default_edge_epsilon, help="Edge existence threshold on |w|.")
        p.add_argument("--sample-size", type=sample_size, default=default_sample_size)

    p = sub.add_parser("train", help="Train one regime, or all five with --regime all.")
    data_dir_arg(p)
    seed_arg(p)
    p.add_argument("--regime", choices=[r.value for r in Regime] + ["all"], default="bimt")
    p.add_argument("--lambda", dest="lam", type=nonnegative_float, default=float(regime_defaults["lambda"]))
    p.add_argument("--steps", type=positive_int, default=int(regime_defaults["steps"]))
    p.add_argument("--batch-size", type=positive_int, default=int(regime_defaults["batch_size"]))
    p.add_argument("--learning-rate", type=positive_float, default=float(regime_defaults["learning_rate"]))
    p.add_argument("--swap-interval", type=positive_int, default=int(regime_defaults["swap_interval"]))
    p.add_argument("--widths", type=widths, default=default_widths)
    p.add_argument("--layer-spacing", type=positive_float, default=default_layer_spacing)
    p.add_argument("--activation", choices=sorted(ACTIVATION_CODES), default=default_activation)
    p.add_argument("--out", help="Model file for a single regime.")
    p.add_argument("--report", help="TrainReport JSON for a single regime.")
    p.add_argument("--out-dir", default=".", help="Output directory for --regime all.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("discover", help="Discover a circuit on one bootstrap resample of a task.")
    data_dir_arg(p)
    seed_arg(p)
    discovery_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--task", default=default_tasks[0])
    p.add_argument("--clean", type=digit_value)
    p.add_argument("--corrupted", type=digit_value)
    p.add_argument("--resample-index", type=nonnegative_int, default=0)
    p.add_argument("--report", default="discovery.json")
    p.add_argument("--circuit", help="Circuit JSON output (default: circuit.json next to the report).")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("bench", help="Bootstrap the comparison table over all five regimes.")
    data_dir_arg(p)
    seed_arg(p)
    discovery_args(p)
    p.add_argument("--model-dir", default=".")
    p.add_argument("--tasks", type=name_list, default=default_tasks)
    p.add_argument("--n-resamples", type=positive_int, default=default_n_resamples)
    p.add_argument("--workers", type=positive_int, default=1)
    p.add_argument("--scaling-widths", type=positive_int_list, help="Also fit discovery time against scored sites for these hidden widths.")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="Write a circuit as a DOT graph.")
    p.add_argument("--circuit", required=True)
    p.add_argument("--dot", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("describe", help="Print a model's spec, parameter count and nonzero edge count.")
    p.add_argument("--model", required=True)
    p.add_argument("--epsilon", type=nonnegative_float, default=default_edge_epsilon)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("plot-data", help="Write scatter point files from a table2.json.")
    p.add_argument("--table", default="table2.json")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("validate-data", help="Check the MNIST files and log per-digit counts.")
    data_dir_arg(p)
    p.set_defaults(func=cmd_validate_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except (CircuitForgeError, OSError, ValueError, IndexError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
