#!/usr/bin/env python3
"""
trellis_cli.py
--------------

Command-line pipeline: sample -> fit-surrogate -> search -> report.

Subcommands:
    gen-dataset     write the configured synthetic dataset          -> dataset.json
    sample          train N_s random architectures                  -> archive.jsonl
    fit-surrogate   cross-validate DT / RF / GP, keep the best      -> surrogate.joblib, surrogate_report.json
    search          genetic search on the surrogate, retrain best   -> history.jsonl, result.json, best_model.pt
    report          convergence table, holdout KTau/MSE, operation frequencies (+ optional plots)

Every command records its config and artifacts in <out>/manifest.json.

Exit codes: 0 success, 1 usage, 2 data error, 3 evaluation failure.

Usage:
    python trellis_cli.py sample --config configs/default.yaml --out output
    python trellis_cli.py fit-surrogate --out output
    python trellis_cli.py search --out output
    python trellis_cli.py report --out output --plot
"""

import argparse
import json
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

import evo_search
import surrogate
import trainer
from external_eval import EvaluatorRequest, ProtocolError, external_evaluate, to_fitness_record
from graph_datasets import (
    Dataset,
    GraphSet,
    generate_graph_set,
    generate_sbm,
    load_dataset,
    save_dataset,
)
from gt_model import count_parameters, load_checkpoint
from run_config import RunConfig, load_run_config
from search_space import DEFAULT_TABLE, ArchitectureEncoding, decode, sample_uniform

__version__ = "0.1.0"

EXIT_USAGE, EXIT_DATA, EXIT_EVALUATION = 1, 2, 3


class EvaluationFailure(RuntimeError):
    pass


def _banner(title: str):
    print("=" * 80)
    print(title)
    print("=" * 80)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# --- Manifest -------------------------------------------------------------------------

def update_manifest(out_dir: Union[str, Path], command: str, config: RunConfig,
                    artifacts: Dict[str, Union[str, Path]], started_at: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest.update({
        "tool_version": __version__,
        "seed": config.seed,
        "config": config.snapshot(),
        "operation_table": DEFAULT_TABLE.to_dict(),
    })
    manifest.setdefault("commands", {})[command] = {
        "started_at": started_at,
        "finished_at": _now(),
        "artifacts": {name: str(p) for name, p in artifacts.items()},
    }
    path.write_text(json.dumps(manifest, indent=2))
    return path


# --- Datasets -------------------------------------------------------------------------

def build_dataset(config: RunConfig) -> Dataset:
    if config.dataset.kind == "sbm":
        return generate_sbm(config.sbm)
    if config.dataset.kind == "graph_set":
        return generate_graph_set(config.graph_set)
    return load_dataset(config.dataset.path)


def resolve_dataset(config: RunConfig, out_dir: Path,
                    dataset_path: Optional[Union[str, Path]] = None) -> Tuple[Dataset, Path]:
    """Explicit path, then the configured file, then <out>/dataset.json (generated if missing)."""
    if dataset_path is not None:
        return load_dataset(dataset_path), Path(dataset_path)
    if config.dataset.kind == "file":
        return load_dataset(config.dataset.path), Path(config.dataset.path)
    path = out_dir / "dataset.json"
    if path.exists():
        return load_dataset(path), path
    dataset = build_dataset(config)
    save_dataset(dataset, path)
    print(f"✅ Generated {config.dataset.kind} dataset → {path}")
    return dataset, path


def cmd_gen_dataset(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    started = _now()
    out_dir = Path(out_dir)
    dataset = build_dataset(config)
    path = save_dataset(dataset, out_dir / "dataset.json")
    if isinstance(dataset, GraphSet):
        labels = dataset.labels()
        print(f"Graphs: {len(dataset.graphs)}   positive fraction: {labels.mean():.3f}")
    else:
        print(f"Nodes: {dataset.n}   edges: {len(dataset.edges)}   "
              f"classes: {int(dataset.node_labels.max()) + 1}")
    print(f"✅ Dataset saved → {path}")
    update_manifest(out_dir, "gen-dataset", config, {"dataset": path}, started)
    return path


# --- sample ---------------------------------------------------------------------------

def sample_plan(config: RunConfig) -> List[Tuple[str, ArchitectureEncoding]]:
    """All N_s (id, encoding) pairs, drawn up front so a resumed run sees the same plan."""
    rng = np.random.default_rng(config.seed)
    return [(f"s{i:04d}", sample_uniform(DEFAULT_TABLE, rng))
            for i in range(config.sample.num_samples)]


def _evaluate_in_process(config: RunConfig, dataset: Dataset,
                         plan: Sequence[Tuple[str, ArchitectureEncoding]], workers: int,
                         archive: Callable[[trainer.FitnessRecord], None]):
    def run(sample_id, encoding):
        record = trainer.fitness(encoding, dataset, config.dataset.task, config.train,
                                 config.dataset.metric, model_config=config.model)
        record.id = sample_id
        return record

    for record in Parallel(n_jobs=workers, return_as="generator")(
        delayed(run)(sample_id, enc) for sample_id, enc in plan
    ):
        archive(record)


def _evaluate_external(config: RunConfig, dataset_path: Path, evaluator_cmd: str,
                       plan: Sequence[Tuple[str, ArchitectureEncoding]], workers: int,
                       archive: Callable[[trainer.FitnessRecord], None]):
    requests = [
        EvaluatorRequest(
            id=sample_id,
            encoding=enc.to_list(),
            budget={"max_steps": config.train.max_steps, "seed": config.train.seed},
            dataset_path=str(dataset_path.resolve()),
            task=config.dataset.task,
        )
        for sample_id, enc in plan
    ]
    chunks = [requests[w::workers] for w in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(
                external_evaluate, evaluator_cmd, chunk, config.dataset.metric,
                timeout_floor=config.sample.timeout_floor,
                initial_timeout=config.sample.initial_timeout,
                verbose=True,
                on_response=lambda request, response: archive(to_fitness_record(request, response)),
            )
            for chunk in chunks if chunk
        ]
        for future in futures:
            future.result()


def cmd_sample(config: RunConfig, out_dir: Union[str, Path],
               dataset_path: Optional[Union[str, Path]] = None,
               workers: Optional[int] = None, evaluator_cmd: Optional[str] = None) -> Path:
    started = _now()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    archive_path = out_dir / "archive.jsonl"
    workers = workers or config.sample.workers
    evaluator_cmd = evaluator_cmd or config.sample.evaluator_cmd

    dataset, dataset_path = resolve_dataset(config, out_dir, dataset_path)
    done = {r.id for r in surrogate.read_archive_records(archive_path)}
    plan = [(sid, enc) for sid, enc in sample_plan(config) if sid not in done]

    _banner("SURROGATE SAMPLING")
    print(f"Dataset: {dataset_path}   task: {config.dataset.task}   metric: {config.dataset.metric}")
    print(f"Samples: {config.sample.num_samples} planned, {len(done)} already archived, "
          f"{len(plan)} to run ({workers} worker{'s' if workers > 1 else ''})")

    lock = threading.Lock()
    diverged = 0

    def archive(record: trainer.FitnessRecord):
        nonlocal diverged
        with lock:
            surrogate.append_archive_record(archive_path, record)
            diverged += record.diverged
            flag = "  ⚠️ diverged" if record.diverged else ""
            print(f"  {record.id}  {str(record.encoding.to_list()):22} "
                  f"{record.metric_name} {record.value:.3f}  ({record.wall_time:.1f}s){flag}")

    if evaluator_cmd:
        _evaluate_external(config, dataset_path, evaluator_cmd, plan, workers, archive)
    else:
        _evaluate_in_process(config, dataset, plan, workers, archive)

    print(f"\n✅ Archive saved → {archive_path}")
    update_manifest(out_dir, "sample", config,
                    {"dataset": dataset_path, "archive": archive_path}, started)
    if plan and diverged == len(plan):
        raise EvaluationFailure(f"All {len(plan)} sampled architectures diverged")
    return archive_path


# --- fit-surrogate --------------------------------------------------------------------

def cmd_fit_surrogate(config: RunConfig, archive_path: Union[str, Path],
                      out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    started = _now()
    out_dir = Path(out_dir)
    archive = surrogate.load_archive(archive_path)
    sc = config.surrogate

    _banner("SURROGATE SELECTION")
    print(f"Archive: {len(archive)} records   metric: {archive.metric_name}   folds: {sc.folds}")
    model, report = surrogate.select_best(archive, folds=sc.folds, seed=sc.seed, kinds=sc.kinds)

    holdout_n = int(round(sc.holdout_fraction * len(archive)))
    if holdout_n >= 2 and len(archive) - holdout_n >= 2:
        scores = surrogate.holdout_scores(report.selected, archive, sc.holdout_fraction, sc.seed)
        report.holdout_ktau, report.holdout_mse = scores["ktau"], scores["mse"]

    print("\nCV MSE (mean +/- sd):")
    for kind, stats in report.cv_mse.items():
        marker = "  <- selected" if kind == report.selected else ""
        print(f"  {kind:25} {stats['mean']:.5f} (+/- {stats['std']:.5f}){marker}")
    if report.holdout_ktau is not None:
        print(f"\n{'Holdout KTau':25} {report.holdout_ktau:.3f}")
        print(f"{'Holdout MSE':25} {report.holdout_mse:.5f}")

    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = surrogate.save_surrogate(model, out_dir / "surrogate.joblib")
    report_path = out_dir / "surrogate_report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2))
    print(f"\n✅ Surrogate saved → {model_path}")
    print(f"✅ Report saved → {report_path}")
    update_manifest(out_dir, "fit-surrogate", config,
                    {"archive": archive_path, "surrogate": model_path, "report": report_path},
                    started)
    return model_path, report_path


# --- search ---------------------------------------------------------------------------

def cmd_search(config: RunConfig, surrogate_path: Union[str, Path], out_dir: Union[str, Path],
               dataset_path: Optional[Union[str, Path]] = None) -> Tuple[Path, Path]:
    started = _now()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = surrogate.load_surrogate(surrogate_path)
    dataset, dataset_path = resolve_dataset(config, out_dir, dataset_path)

    _banner("EVOLUTIONARY SEARCH")
    sc = config.search
    print(f"Population {sc.population_size}   generations {sc.generations}   "
          f"p_c {sc.crossover_prob}   p_m {sc.mutation_prob:.3f}   scope {sc.scope}")
    best, state, history = evo_search.run_search(sc, DEFAULT_TABLE, model)
    predicted = model.predict(best)

    history_path = out_dir / "history.jsonl"
    history_path.write_text("".join(json.dumps(row) + "\n" for row in history))
    for row in history[:: max(1, len(history) // 10)]:
        print(f"  gen {row['generation']:4d}   best {row['best_pred']:.4f}   "
              f"mean {row['mean_pred']:.4f}")

    _banner("RETRAINING BEST ARCHITECTURE")
    spec = decode(best)
    for line in spec.describe():
        print(f"  {line}")
    checkpoint = out_dir / "best_model.pt"
    record = evo_search.retrain_best(best, dataset, config.dataset.task, config.retrain,
                                     config.dataset.metric, model_config=config.model,
                                     checkpoint_path=checkpoint)
    parameters = count_parameters(load_checkpoint(checkpoint)) if checkpoint.exists() else None

    print(f"\n{'Predicted ' + model.metric_name:25} {predicted:.4f}")
    print(f"{'Retrained ' + record.metric_name:25} {record.value:.4f}"
          f"{'  ⚠️ diverged' if record.diverged else ''}")
    if parameters is not None:
        print(f"{'Parameters':25} {parameters}")

    result = {
        "encoding": best.to_list(),
        "spec": spec.to_dict(),
        "architecture": spec.describe(),
        "parameters": parameters,
        "predicted": predicted,
        "minimize": model.minimize,
        "retrained": record.to_dict(),
        "final_population": [ind.to_dict() for ind in state.population],
        "checkpoint": str(checkpoint) if checkpoint.exists() else None,
    }
    result_path = out_dir / "result.json"
    result_path.write_text(json.dumps(result, indent=2))
    print(f"\n✅ History saved → {history_path}")
    print(f"✅ Result saved → {result_path}")
    artifacts = {"surrogate": surrogate_path, "history": history_path, "result": result_path}
    if checkpoint.exists():
        artifacts["checkpoint"] = checkpoint
    update_manifest(out_dir, "search", config, artifacts, started)
    return history_path, result_path


# --- report ---------------------------------------------------------------------------

def read_history(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if path.stat().st_size == 0:
        return pd.DataFrame(columns=["generation", "best_pred", "mean_pred"])
    return pd.read_json(path, lines=True, dtype=False, convert_dates=False,
                        keep_default_dates=False)


def _plot(report_dir: Path, convergence: pd.DataFrame, operations: Optional[pd.DataFrame]):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        import seaborn as sns
    except ImportError as e:
        print(f"⚠️  matplotlib/seaborn not available ({e}), skipping plot generation")
        return

    if len(convergence):
        plt.figure(figsize=(8, 5))
        plt.plot(convergence["generation"], convergence["best_pred"], label="best predicted")
        plt.plot(convergence["generation"], convergence["mean_pred"], label="mean predicted")
        plt.xlabel("Generation", fontsize=12)
        plt.ylabel("Predicted fitness", fontsize=12)
        plt.title("Search convergence", fontsize=14)
        plt.legend()
        plt.tight_layout()
        plot_file = report_dir / "convergence.png"
        plt.savefig(plot_file, dpi=300, bbox_inches="tight")
        plt.close()
        print(f"✅ Convergence plot saved to: {plot_file}")

    if operations is not None:
        table = operations.assign(
            option=operations.groupby("gene").cumcount()
        ).pivot(index="gene", columns="option", values="frequency")
        plt.figure(figsize=(10, 5))
        sns.heatmap(table, annot=True, fmt=".2f", cmap="Blues",
                    cbar_kws={"label": "Frequency in top architectures"})
        plt.xlabel("Operation index", fontsize=12)
        plt.ylabel("Gene", fontsize=12)
        plt.title("Operations chosen by the top architectures", fontsize=14)
        plt.tight_layout()
        plot_file = report_dir / "top_operations.png"
        plt.savefig(plot_file, dpi=300, bbox_inches="tight")
        plt.close()
        print(f"✅ Operation heatmap saved to: {plot_file}")


def cmd_report(config: RunConfig, history_path: Union[str, Path], archive_path: Union[str, Path],
               out_dir: Union[str, Path], result_path: Optional[Union[str, Path]] = None,
               surrogate_path: Optional[Union[str, Path]] = None, plot: bool = False,
               compare: bool = False) -> Path:
    started = _now()
    out_dir = Path(out_dir)
    report_dir = out_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    artifacts: Dict[str, Path] = {}
    summary: Dict = {}

    _banner("SEARCH REPORT")
    history = read_history(history_path)
    convergence = history.reindex(columns=["generation", "best_pred", "mean_pred"])
    conv_file = report_dir / "convergence.csv"
    convergence.to_csv(conv_file, index=False)
    artifacts["convergence"] = conv_file
    summary["generations"] = int(len(convergence))
    if len(convergence) == 0:
        print("No generations recorded in the search history.")
    else:
        last = convergence.iloc[-1]
        print(f"{'Generations':25} {len(convergence)}")
        print(f"{'Final best predicted':25} {last['best_pred']:.4f}")
        print(f"{'Final mean predicted':25} {last['mean_pred']:.4f}")

    archive = surrogate.load_archive(archive_path)
    sc = config.surrogate
    if surrogate_path is not None:
        kind = surrogate.load_surrogate(surrogate_path).kind
    else:
        kind = surrogate.select_best(archive, sc.folds, sc.seed, sc.kinds)[1].selected
    quality = surrogate.holdout_scores(kind, archive, fraction=0.2, seed=sc.seed)
    quality["kind"] = kind
    summary["surrogate_holdout"] = quality
    print(f"\nSurrogate ({kind}) on a {quality['holdout_size']}-point holdout:")
    print(f"  {'KTau':25} {quality['ktau']:.3f}")
    print(f"  {'MSE':25} {quality['mse']:.5f}")

    if compare:
        comparison = surrogate.compare_surrogates(archive, seed=sc.seed, kinds=sc.kinds)
        comp_file = report_dir / "surrogate_comparison.csv"
        comparison.to_csv(comp_file, index=False)
        artifacts["surrogate_comparison"] = comp_file
        print("\nSurrogate comparison (10% holdouts, 10 runs):")
        for _, row in comparison.iterrows():
            print(f"  {row['kind']:25} MSE {row['mse_mean']:.5f} (+/- {row['mse_std']:.5f})   "
                  f"KTau {row['ktau_mean']:.3f} (+/- {row['ktau_std']:.3f})")

    operations = None
    if result_path is not None:
        result = json.loads(Path(result_path).read_text())
        spec = decode(ArchitectureEncoding(tuple(result["encoding"])))
        print("\nBest architecture:")
        for line in spec.describe():
            print(f"  {line}")
        arch_file = report_dir / "architecture.txt"
        arch_file.write_text("\n".join(spec.describe()) + "\n")
        artifacts["architecture"] = arch_file
        summary["best"] = {"encoding": result["encoding"], "predicted": result["predicted"],
                           "retrained": result["retrained"]}

        population = [
            evo_search.Individual(ArchitectureEncoding(tuple(ind["encoding"])), ind["predicted"],
                                  ind["generation"], ind["audit_index"])
            for ind in result["final_population"]
        ]
        operations = evo_search.operation_frequencies(population, result["minimize"])
        ops_file = report_dir / "top_operations.csv"
        operations.to_csv(ops_file, index=False)
        artifacts["top_operations"] = ops_file

    if plot:
        _plot(report_dir, convergence, operations)

    summary_file = report_dir / "report.json"
    summary_file.write_text(json.dumps(summary, indent=2))
    artifacts["summary"] = summary_file
    print(f"\n✅ Report saved → {report_dir}")
    update_manifest(out_dir, "report", config, artifacts, started)
    return report_dir


# --- Entry point ----------------------------------------------------------------------

class _UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _UsageParser(description="Surrogate-assisted evolutionary graph Transformer search")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="Run config YAML (default: built-in defaults)")
        p.add_argument("--seed", type=int, default=None, help="Override every seed in the config")
        p.add_argument("--out", default="output", help="Output directory (default: output)")
        return p

    common(sub.add_parser("gen-dataset", help="Write the configured synthetic dataset"))

    p = common(sub.add_parser("sample", help="Train and archive random architectures"))
    p.add_argument("--dataset", default=None, help="Dataset JSON (default: <out>/dataset.json)")
    p.add_argument("--workers", type=int, default=None, help="Concurrent evaluations")
    p.add_argument("--evaluator-cmd", default=None, help="External JSON-lines worker command")

    p = common(sub.add_parser("fit-surrogate", help="Select and fit the surrogate model"))
    p.add_argument("--archive", default=None, help="Sample archive (default: <out>/archive.jsonl)")

    p = common(sub.add_parser("search", help="Run the search and retrain the best architecture"))
    p.add_argument("--surrogate", default=None, help="Surrogate file (default: <out>/surrogate.joblib)")
    p.add_argument("--dataset", default=None, help="Dataset JSON (default: <out>/dataset.json)")

    p = common(sub.add_parser("report", help="Summarize a finished run"))
    p.add_argument("--history", default=None, help="Search history (default: <out>/history.jsonl)")
    p.add_argument("--archive", default=None, help="Sample archive (default: <out>/archive.jsonl)")
    p.add_argument("--result", default=None, help="Search result (default: <out>/result.json if present)")
    p.add_argument("--surrogate", default=None, help="Surrogate file (default: <out>/surrogate.joblib if present)")
    p.add_argument("--compare-surrogates", action="store_true",
                   help="Repeated 10%% holdout comparison of every surrogate kind")
    p.add_argument("--plot", action="store_true", help="Generate convergence and operation plots")
    return parser


def _default(value, out: Path, name: str, must_exist: bool = False):
    if value is not None:
        return value
    path = out / name
    return path if path.exists() or not must_exist else None


def run(args) -> None:
    config = load_run_config(args.config, seed=args.seed)
    out = Path(args.out)
    if args.command == "gen-dataset":
        cmd_gen_dataset(config, out)
    elif args.command == "sample":
        if args.workers is not None and args.workers < 1:
            raise ValueError(f"--workers must be >= 1, got {args.workers}")
        cmd_sample(config, out, args.dataset, args.workers, args.evaluator_cmd)
    elif args.command == "fit-surrogate":
        cmd_fit_surrogate(config, _default(args.archive, out, "archive.jsonl"), out)
    elif args.command == "search":
        cmd_search(config, _default(args.surrogate, out, "surrogate.joblib"), out, args.dataset)
    elif args.command == "report":
        cmd_report(
            config,
            _default(args.history, out, "history.jsonl"),
            _default(args.archive, out, "archive.jsonl"),
            out,
            result_path=_default(args.result, out, "result.json", must_exist=True),
            surrogate_path=_default(args.surrogate, out, "surrogate.joblib", must_exist=True),
            plot=args.plot,
            compare=args.compare_surrogates,
        )


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        run(args)
    except (ProtocolError, EvaluationFailure, *trainer.DIVERGENCE_ERRORS) as e:
        print(f"⚠️  Evaluation failure: {e}", file=sys.stderr)
        return EXIT_EVALUATION
    except (ValueError, OSError, KeyError) as e:
        print(f"⚠️  Data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
