"""
Command-line entry point.

    agentic-moe train --expert all --seed 7
    agentic-moe gate --set 2 --backend replay
    agentic-moe bench --set 1 --seed 7 --out runs/set1
"""
import argparse
import hashlib
import importlib.metadata
import json
import os
import platform
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from src.backends import make_backend
from src.bench import SimSetSpec, load_sim_set, run_pairwise_search, run_simulation_set
from src.config import (
    DATA_DIR,
    DEFAULT_OUTPUT_DIR,
    GATE_FIXTURES_PATH,
    MODEL_SUBDIR,
    Settings,
    load_settings,
    read_config_tree,
)
from src.errors import (
    ConfigError,
    ExportError,
    GateError,
    MissingCredentialError,
    ModelFileError,
    MoeError,
    TrainingDivergedError,
    UnknownExpertError,
    UntrainedExpertError,
)
from src.experts import (
    ExpertRecord,
    TrainConfig,
    infer,
    load_registry,
    records_by_name,
    registry_rows,
    save_registry,
)
from src.export import dump_json, export_accuracy, export_results, export_search, write_files
from src.gate import combine, decide, evaluate_gate_accuracy, library_cards, load_fixtures
from src.netmodel import check_feasibility, derive_rng, generate_state, joint_metrics
from src.objectives import evaluate_utility
from src.training import train_experts
from src.uncertainty import ErrorModel

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 3
EXIT_GATE = 4
EXIT_TRAINING = 5
EXIT_UNKNOWN_EXPERT = 6
EXIT_CREDENTIAL = 7
EXIT_OUTPUT = 8
EXIT_MODEL = 9

# most specific first: UnknownExpertError and MissingCredentialError are gate errors
EXIT_CODES = (
    (UnknownExpertError, EXIT_UNKNOWN_EXPERT),
    (MissingCredentialError, EXIT_CREDENTIAL),
    (ConfigError, EXIT_CONFIG),
    (GateError, EXIT_GATE),
    (TrainingDivergedError, EXIT_TRAINING),
    (UntrainedExpertError, EXIT_MODEL),
    (ModelFileError, EXIT_MODEL),
    (ExportError, EXIT_OUTPUT),
)

RECORD_CASSETTE = "replay_cassette.json"

# arguments that only say where output goes; kept out of the manifest
_LOCATION_ARGS = {"out", "models", "func"}
_VERSIONED_PACKAGES = ("numpy", "torch", "pandas", "pydantic", "langchain-groq")


def exit_code_for(error: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(error, cls):
            return code
    return EXIT_ERROR


# --- Shared plumbing ---

class Context:
    """Settings, registry and paths shared by every command."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        overrides: Dict[str, Any] = {}
        if getattr(args, "full_scale", False):
            overrides["training"] = {"desk_scale": False}
        self.config_path = Path(args.config) if args.config else None
        self.settings: Settings = load_settings(self.config_path, overrides)
        self.config = self.settings.system
        self.train_cfg = TrainConfig.model_validate(self.settings.training)
        self.out_dir = Path(args.out) if args.out else DEFAULT_OUTPUT_DIR
        self.model_dir = Path(args.models) if getattr(args, "models", None) else self.out_dir / MODEL_SUBDIR
        self.workers = args.workers or self.settings.bench.workers or os.cpu_count() or 1
        self.error_model = ErrorModel.from_config(
            self.config,
            m_samples=self.settings.uncertainty.m_samples,
            tail_overrides=self.settings.uncertainty.tail_overrides,
        )
        self._records: Optional[List[ExpertRecord]] = None

    @property
    def records(self) -> List[ExpertRecord]:
        if self._records is None:
            self._records = load_registry(self.model_dir, self.config, train_cfg=self.train_cfg)
        return self._records

    def select(self, names: Sequence[str]) -> List[ExpertRecord]:
        if not names or list(names) == ["all"]:
            return list(self.records)
        by_name = records_by_name(self.records)
        unknown = [n for n in names if n not in by_name]
        if unknown:
            raise UnknownExpertError(f"Unknown expert(s): {', '.join(unknown)}")
        return [by_name[n] for n in names]

    def backend(self, cards):
        all_cards = library_cards(self.records)
        cassette = Path(self.args.cassette) if self.args.cassette else None
        if self.args.record and cassette is None:
            cassette = self.out_dir / RECORD_CASSETTE
        return make_backend(
            self.args.backend, cards, all_cards, self.settings.gate, cassette, record=self.args.record
        )

    def test_states(self) -> int:
        bench = self.settings.bench
        return bench.full_test_states if self.args.full_scale else bench.test_states

    def gate_log(self) -> Path:
        return self.out_dir / "logs" / "gate_log.json"


def config_digest(path: Optional[Path]) -> str:
    tree = read_config_tree(path)
    return hashlib.sha256(json.dumps(tree, sort_keys=True).encode("utf-8")).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in _VERSIONED_PACKAGES:
        try:
            versions[name] = importlib.metadata.version(name)
        except importlib.metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def run_manifest(ctx: Context) -> Dict[str, Any]:
    """Enough to rerun the command: arguments, config hash, seed and package versions."""
    args = {k: v for k, v in sorted(vars(ctx.args).items()) if k not in _LOCATION_ARGS}
    return {
        "command": ctx.args.command,
        "args": args,
        "config_sha256": config_digest(ctx.config_path),
        "seed": getattr(ctx.args, "seed", None),
        "versions": package_versions(),
    }


def write_manifest(ctx: Context) -> None:
    write_files(ctx.out_dir, {"manifest.json": dump_json(run_manifest(ctx))})


def require_seed(args: argparse.Namespace) -> int:
    if args.seed is None:
        raise ConfigError(f"'{args.command}' needs an explicit --seed")
    return args.seed


def _train_missing(ctx: Context, records: Sequence[ExpertRecord]) -> None:
    missing = [r for r in records if not r.trained]
    if not missing:
        return
    if not ctx.args.train_missing:
        names = ", ".join(r.name for r in missing)
        raise UntrainedExpertError(f"No model files in {ctx.model_dir} for: {names} (train them or pass --train-missing)")
    print(f"ℹ️  Training {len(missing)} missing experts")
    train_experts(missing, ctx.train_cfg, ctx.config, require_seed(ctx.args), ctx.workers)
    save_registry(missing, ctx.model_dir)


def _query(args: argparse.Namespace, spec: Optional[SimSetSpec]) -> str:
    if args.query_file:
        return Path(args.query_file).read_text(encoding="utf-8").strip()
    if args.query:
        return args.query
    if spec is not None and spec.query:
        return spec.query
    raise ConfigError("No query given: pass --query, --query-file or a --set with a query")


def _print_json(document: Any) -> None:
    print(json.dumps(document, indent=2, sort_keys=True))


# --- Commands ---

def cmd_train(ctx: Context) -> int:
    seed = require_seed(ctx.args)
    records = ctx.select(ctx.args.expert)
    train_experts(records, ctx.train_cfg, ctx.config, seed, ctx.workers)
    manifest_path = save_registry(records, ctx.model_dir)

    traces = pd.DataFrame(
        [
            {"expert": r.name, "epoch": epoch, "validation_loss": loss}
            for r in records
            for epoch, loss in enumerate(r.parameters.loss_trace)
        ],
        columns=["expert", "epoch", "validation_loss"],
    )
    write_files(ctx.out_dir, {"loss_traces.csv": traces.to_csv(index=False)})
    write_manifest(ctx)
    print(f"✅ Saved {len(records)} experts ({manifest_path})")
    return EXIT_OK


def cmd_infer(ctx: Context) -> int:
    (record,) = ctx.select([ctx.args.expert])
    if not record.trained:
        raise UntrainedExpertError(f"{record.name} has no model file in {ctx.model_dir}")
    seed = ctx.args.seed if ctx.args.seed is not None else 0
    state = generate_state(ctx.config, derive_rng(seed))
    alloc = infer(record, state, ctx.config)
    metrics = joint_metrics(state, alloc, ctx.config)
    report = check_feasibility(alloc, ctx.config)
    _print_json(
        {
            "expert": record.name,
            "seed": seed,
            "allocation": {"p_tx": alloc.p_tx.tolist(), "p_co": float(alloc.p_co), "f_co": alloc.f_co.tolist()},
            "utility": float(evaluate_utility(record.utility_spec.nominal(), metrics)),
            "r_joint": metrics.r_joint.tolist(),
            "t_joint": metrics.t_joint.tolist(),
            "feasible": report.feasible,
            "violated": list(report.violated),
        }
    )
    return EXIT_OK


def cmd_gate(ctx: Context) -> int:
    spec = load_sim_set(ctx.args.set) if ctx.args.set is not None else None
    indices = spec.library if spec is not None and spec.library else None
    cards = library_cards(ctx.records, indices)
    query = _query(ctx.args, spec)
    decision = decide(ctx.backend(cards), cards, query, log_file=ctx.gate_log())
    _print_json(
        {"selection": decision.as_dict(), "interpretation": decision.interpretation, "latency_s": decision.latency_s}
    )

    if ctx.args.apply:
        # run the mixture on one seeded state when the selected experts are trained
        members = [r for r in ctx.records if r.name in decision.selected_names]
        if all(r.trained for r in members):
            state = generate_state(ctx.config, derive_rng(ctx.args.seed or 0))
            alloc = combine(decision, [infer(r, state, ctx.config) for r in members], ctx.config)
            _print_json({"p_tx": alloc.p_tx.tolist(), "f_co": alloc.f_co.tolist()})
        else:
            print("ℹ️  Selected experts are not trained; skipping the allocation")
    return EXIT_OK


def cmd_accuracy(ctx: Context, spec: Optional[SimSetSpec] = None) -> int:
    fixtures_path = GATE_FIXTURES_PATH
    if ctx.args.fixtures:
        fixtures_path = Path(ctx.args.fixtures)
    elif spec is not None and spec.fixtures:
        fixtures_path = DATA_DIR / spec.fixtures
    try:
        fixtures = load_fixtures(fixtures_path)
    except (OSError, ValueError) as e:
        raise ConfigError(f"Cannot read gate fixtures {fixtures_path}: {e}") from e
    if spec is not None and spec.fixture_source:
        fixtures = [f for f in fixtures if f.source == spec.fixture_source]

    cards = library_cards(ctx.records)
    report = evaluate_gate_accuracy(ctx.backend(cards), fixtures, cards, log_file=ctx.gate_log())
    export_accuracy(report, ctx.out_dir)
    write_manifest(ctx)
    print(
        f"✅ Gate accuracy: {report.selection_exact_rate:.0%} selection-exact, "
        f"{report.full_match_rate:.0%} full match, {report.failures} failures over {report.total} queries"
    )
    return EXIT_OK


def cmd_bench(ctx: Context) -> int:
    seed = require_seed(ctx.args)
    spec = load_sim_set(ctx.args.set)
    if spec.fixtures:
        return cmd_accuracy(ctx, spec)

    wanted = set(spec.library) | set(spec.benchmarks)
    records = [r for r in ctx.records if r.index in wanted]
    _train_missing(ctx, records)
    cards = library_cards(records, spec.library)
    run = run_simulation_set(
        spec,
        ctx.backend(cards),
        ctx.records,
        ctx.config,
        seed,
        model=ctx.error_model,
        test_states=ctx.test_states(),
        workers=ctx.workers,
        weight_grid=ctx.settings.bench.weight_grid,
        log_file=ctx.gate_log(),
        append_state_summary=ctx.settings.gate.append_state_summary,
    )
    export_results(run, ctx.out_dir)
    write_manifest(ctx)
    return EXIT_OK


def cmd_search(ctx: Context) -> int:
    seed = require_seed(ctx.args)
    spec = load_sim_set(ctx.args.set)
    if not spec.library or spec.fixtures:
        raise ConfigError(f"Simulation set {spec.set_id} has no expert library to search")
    records = [r for r in ctx.records if r.index in set(spec.library)]
    _train_missing(ctx, records)
    run = run_pairwise_search(
        spec,
        ctx.records,
        ctx.config,
        seed,
        model=ctx.error_model,
        test_states=ctx.test_states(),
        workers=ctx.workers,
        weight_grid=ctx.settings.bench.weight_grid,
    )
    export_search(run, ctx.out_dir)
    write_manifest(ctx)
    return EXIT_OK


def cmd_export_registry(ctx: Context) -> int:
    rows = registry_rows(ctx.records)
    write_files(ctx.out_dir, {"registry.json": dump_json(rows)})
    write_manifest(ctx)
    print(f"✅ Exported {len(rows)} registry rows to {ctx.out_dir}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "gate": cmd_gate,
    "bench": cmd_bench,
    "search": cmd_search,
    "accuracy": cmd_accuracy,
    "export-registry": cmd_export_registry,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: bundled configuration)")
    common.add_argument("--seed", type=int, help="master seed; required for train, bench and search")
    common.add_argument("--full-scale", action="store_true", help="full-size networks, training and test sets")
    common.add_argument("--out", help=f"output directory (default: {DEFAULT_OUTPUT_DIR})")
    common.add_argument("--models", help="model directory (default: <out>/models)")
    common.add_argument("--workers", type=int, help="worker threads (default: logical cores)")
    common.add_argument("--backend", choices=["rule", "replay", "http"], default="rule", help="gate backend")
    common.add_argument("--cassette", help="replay cassette (default: bundled cassette)")
    common.add_argument("--record", action="store_true", help="append http exchanges to the cassette (default: <out>/replay_cassette.json)")

    parser = argparse.ArgumentParser(
        prog="agentic-moe", description="LLM-gated mixture of optimization experts for MU-MIMO networks"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train experts and save model files")
    p.add_argument("--expert", nargs="+", default=["all"], help="expert names or 'all'")

    p = sub.add_parser("infer", parents=[common], help="run one expert on a seeded state")
    p.add_argument("--expert", required=True)

    p = sub.add_parser("gate", parents=[common], help="ask the gate for a decision")
    p.add_argument("--set", type=int, help="use this simulation set's library (and query)")
    p.add_argument("--query")
    p.add_argument("--query-file")
    p.add_argument("--apply", action="store_true", help="also run the selected mixture on a seeded state")

    for name, text in (("bench", "run a simulation set"), ("search", "exhaustive pairwise table")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--set", type=int, required=True)
        p.add_argument("--train-missing", action="store_true", help="train experts without model files first")
        p.add_argument("--fixtures", help="gate fixture corpus for accuracy sets")

    p = sub.add_parser("accuracy", parents=[common], help="score the gate against reference decisions")
    p.add_argument("--fixtures", help=f"fixture corpus (default: {GATE_FIXTURES_PATH.name})")

    sub.add_parser("export-registry", parents=[common], help="write the expert registry table")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except MoeError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
