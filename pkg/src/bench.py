"""
Simulation-set harness.

Per trial: draw seeded test states, ask the gate for a decision on the set's
query, run the selected experts, combine them and score every candidate
(library experts, held-out benchmarks, optional pairwise search, the agentic
solution) on the same states and the same uncertainty realizations.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.config import SIM_SETS_DIR
from src.errors import ConfigError, GateError, MissingCredentialError, UntrainedExpertError
from src.experts import ExpertRecord, infer
from src.gate import GateDecision, combine, combine_weighted, decide, library_cards
from src.netmodel import Allocation, StateBatch, SystemConfig, check_feasibility, derive_rng, generate_batch
from src.objectives import DELAY_FAMILIES, UtilitySpec
from src.uncertainty import ErrorModel, Realizations, batch_utility, draw_realizations


class SimSetSpec(BaseModel):
    """One simulation set: library scope, held-out benchmarks, query and the metrics to report."""

    model_config = ConfigDict(extra="forbid")

    set_id: int
    title: str = ""
    query: Optional[str] = None
    library: List[int] = Field(default_factory=list)
    benchmarks: List[int] = Field(default_factory=list)
    x_metric: Optional[str] = None
    y_metric: Optional[str] = None
    bar_metrics: List[str] = Field(default_factory=list)
    trials: int = Field(10, ge=1)
    seeds: Optional[List[int]] = None
    test_states: Optional[int] = Field(None, ge=1)
    exhaustive: bool = True
    # gate-accuracy sets point at a fixture corpus instead of a query
    fixtures: Optional[str] = None
    fixture_source: Optional[str] = None
    reference: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        if set(self.library) & set(self.benchmarks):
            raise ValueError("library and benchmarks must be disjoint")
        if any(not 1 <= i <= 30 for i in self.library + self.benchmarks):
            raise ValueError("expert indices must lie in 1..30")
        if self.fixtures is None:
            if not self.query or not self.library or not self.x_metric or not self.y_metric:
                raise ValueError("a simulation set needs a query, a library and both axis metrics")
            for key in self.metric_keys:
                try:
                    UtilitySpec.from_metric_key(key)
                except KeyError as e:
                    raise ValueError(str(e)) from e
        if self.seeds is not None and len(self.seeds) != self.trials:
            raise ValueError("one seed per trial")
        return self

    @property
    def metric_keys(self) -> List[str]:
        keys = [k for k in (self.x_metric, self.y_metric) if k]
        return keys + [k for k in self.bar_metrics if k not in keys]

    @property
    def metrics(self) -> List[UtilitySpec]:
        return [UtilitySpec.from_metric_key(k) for k in self.metric_keys]


def load_sim_set(ref: Union[int, str, Path]) -> SimSetSpec:
    """Loads data/sim_sets/set<N>.json for an integer, else the given path."""
    path = SIM_SETS_DIR / f"set{ref}.json" if isinstance(ref, int) or str(ref).isdigit() else Path(ref)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return SimSetSpec.model_validate(json.load(f))
    except FileNotFoundError as e:
        raise ConfigError(f"Simulation set not found: {path}") from e
    except (json.JSONDecodeError, ValueError) as e:
        raise ConfigError(f"Invalid simulation set {path}: {e}") from e


@dataclass
class CandidateResult:
    candidate_id: str
    kind: str  # expert | benchmark | pair | agentic
    members: Tuple[int, ...]
    weights: Tuple[float, ...]
    medians: Dict[str, float]
    means: Dict[str, float]
    feasible: bool
    violated: Tuple[str, ...] = ()


@dataclass
class TrialTiming:
    end_to_end_s: float = 0.0
    gate_latency_s: float = 0.0
    inference_s: float = 0.0


@dataclass
class TrialResult:
    trial: int
    seed: int
    decision: Optional[GateDecision]
    error: Optional[str]
    candidates: List[CandidateResult]
    agentic: Optional[CandidateResult]
    timing: TrialTiming = field(default_factory=TrialTiming)

    @property
    def feasible(self) -> bool:
        return self.agentic is not None and self.agentic.feasible


@dataclass
class RunResult:
    spec: SimSetSpec
    seed: int
    trials: List[TrialResult] = field(default_factory=list)

    @property
    def feasibility_accuracy(self) -> float:
        return sum(t.feasible for t in self.trials) / len(self.trials) if self.trials else 0.0


def candidate_id(members: Sequence[int], weights: Sequence[float]) -> str:
    if len(members) == 1:
        return str(members[0])
    return "+".join(str(m) for m in members) + "@" + "/".join(f"{w:g}" for w in weights)


class MetricEvaluator:
    """
    Scores allocations on one trial's test states.

    Nominal metrics use the true parameters; robust metrics use one set of M
    realizations per state drawn up front and shared by every candidate.
    """

    def __init__(
        self,
        batch: StateBatch,
        metrics: Sequence[UtilitySpec],
        config: SystemConfig,
        model: ErrorModel,
        rng: np.random.Generator,
    ):
        self.batch = batch
        self.metrics = list(metrics)
        self.config = config
        self.model = model
        self.realizations: Optional[Realizations] = (
            draw_realizations(batch, model, rng) if any(m.robust for m in self.metrics) else None
        )

    def per_state(self, alloc: Allocation) -> Dict[str, np.ndarray]:
        return {
            m.metric_key: batch_utility(
                m, self.batch, alloc, self.config, use_true=True, realizations=self.realizations, model=self.model
            )
            for m in self.metrics
        }

    def evaluate(self, cid: str, kind: str, members, weights, alloc: Allocation) -> CandidateResult:
        values = self.per_state(alloc)
        medians = {k: float(np.median(v)) for k, v in values.items()}
        with np.errstate(invalid="ignore"):
            means = {k: float(np.mean(v)) for k, v in values.items()}
        report = check_feasibility(alloc, self.config)
        violated = list(report.violated)
        for m in self.metrics:
            if m.family in DELAY_FAMILIES and not medians[m.metric_key] <= self.config.t_feas:
                violated.append(f"T:{m.metric_key}")
        return CandidateResult(
            candidate_id=cid,
            kind=kind,
            members=tuple(members),
            weights=tuple(float(w) for w in weights),
            medians=medians,
            means=means,
            feasible=not violated,
            violated=tuple(violated),
        )


def _require_trained(records: Sequence[ExpertRecord]) -> None:
    missing = [r.name for r in records if r.parameters is None]
    if missing:
        raise UntrainedExpertError(f"Experts without trained parameters: {', '.join(missing)}")


def _run_jobs(jobs, workers: int) -> List[CandidateResult]:
    if workers <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: job(), jobs))


def exhaustive_pairwise(
    library: Sequence[ExpertRecord],
    allocations: Dict[int, Allocation],
    evaluator: MetricEvaluator,
    config: SystemConfig,
    weight_grid: Sequence[float] = (),
    workers: int = 1,
) -> List[CandidateResult]:
    """
    Every library expert alone and every unordered pair at 0.5/0.5 (A + A(A-1)/2
    candidates), plus extra (w, 1-w) splits from the weight grid. Fixed order.
    """
    _require_trained(library)
    splits = [(0.5, 0.5)] + [(w, 1.0 - w) for w in weight_grid if 0 < w < 1 and w != 0.5]
    jobs = []
    for record in library:
        alloc = allocations[record.index]
        jobs.append(lambda r=record, a=alloc: evaluator.evaluate(str(r.index), "expert", (r.index,), (1.0,), a))
    for a, b in combinations(library, 2):
        for weights in splits:
            members = (a.index, b.index)

            def job(members=members, weights=weights):
                alloc = combine_weighted(weights, [allocations[m] for m in members], config)
                return evaluator.evaluate(candidate_id(members, weights), "pair", members, weights, alloc)

            jobs.append(job)
    return _run_jobs(jobs, workers)


def run_simulation_set(
    spec: SimSetSpec,
    backend,
    records: Sequence[ExpertRecord],
    config: SystemConfig,
    seed: int,
    model: Optional[ErrorModel] = None,
    test_states: int = 256,
    workers: int = 1,
    weight_grid: Sequence[float] = (),
    log_file: Optional[Path] = None,
    append_state_summary: bool = False,
) -> RunResult:
    """Runs every trial of a simulation set; a gate failure marks its trial failed and the run goes on."""
    by_index = {r.index: r for r in records}
    library = [by_index[i] for i in sorted(spec.library)]
    benchmarks = [by_index[i] for i in sorted(spec.benchmarks)]
    _require_trained(library + benchmarks)
    cards = library_cards(library)
    model = model or ErrorModel.from_config(config)
    n_states = spec.test_states or test_states

    print(f"🚀 Starting: simulation set {spec.set_id} ({spec.trials} trials, {len(library)} library experts)")
    start = time.time()
    run = RunResult(spec=spec, seed=seed)
    for t in range(spec.trials):
        trial_seed = spec.seeds[t] if spec.seeds else t
        rng = derive_rng(seed, spec.set_id, trial_seed)
        batch = generate_batch(config, rng, n_states)
        evaluator = MetricEvaluator(batch, spec.metrics, config, model, rng)
        allocations = {r.index: infer(r, batch, config) for r in library + benchmarks}

        t0 = time.perf_counter()
        try:
            decision = decide(
                backend,
                cards,
                spec.query,
                state=batch.state(0),
                append_state_summary=append_state_summary,
                log_file=log_file,
            )
        except MissingCredentialError:
            raise
        except GateError as e:
            print(f"❌ Trial {t}: gate failed: {e}")
            run.trials.append(
                TrialResult(t, trial_seed, None, str(e), [], None, TrialTiming(time.perf_counter() - t0, 0.0, 0.0))
            )
            continue

        t_inf = time.perf_counter()
        members = [r for r in library if r.name in decision.selected_names]
        member_allocs = [infer(r, batch, config) for r in members]
        inference_s = time.perf_counter() - t_inf
        agentic_alloc = combine(decision, member_allocs, config)
        timing = TrialTiming(time.perf_counter() - t0, decision.latency_s, inference_s)

        member_ids = tuple(r.index for r in members)
        agentic = evaluator.evaluate(
            "agentic", "agentic", member_ids, decision.selected_weights, agentic_alloc
        )

        candidates = [
            evaluator.evaluate(str(r.index), "benchmark", (r.index,), (1.0,), allocations[r.index])
            for r in benchmarks
        ]
        if spec.exhaustive:
            candidates = exhaustive_pairwise(library, allocations, evaluator, config, weight_grid, workers) + candidates
        else:
            candidates = [
                evaluator.evaluate(str(r.index), "expert", (r.index,), (1.0,), allocations[r.index]) for r in library
            ] + candidates

        status = "✅" if agentic.feasible else "❌"
        print(f"{status} Trial {t}: {decision.as_dict()} feasible={agentic.feasible}")
        run.trials.append(TrialResult(t, trial_seed, decision, None, candidates, agentic, timing))

    print(
        f"✅ Finished: simulation set {spec.set_id} in {time.time() - start:.2f}s, "
        f"feasibility accuracy {run.feasibility_accuracy:.0%}"
    )
    return run


def run_pairwise_search(
    spec: SimSetSpec,
    records: Sequence[ExpertRecord],
    config: SystemConfig,
    seed: int,
    model: Optional[ErrorModel] = None,
    test_states: int = 256,
    workers: int = 1,
    weight_grid: Sequence[float] = (),
) -> RunResult:
    """Exhaustive pairwise table of a set's library without consulting the gate."""
    by_index = {r.index: r for r in records}
    library = [by_index[i] for i in sorted(spec.library)]
    _require_trained(library)
    model = model or ErrorModel.from_config(config)
    n_states = spec.test_states or test_states

    print(f"🚀 Starting: pairwise search over {len(library)} experts of set {spec.set_id}")
    start = time.time()
    run = RunResult(spec=spec, seed=seed)
    for t in range(spec.trials):
        trial_seed = spec.seeds[t] if spec.seeds else t
        rng = derive_rng(seed, spec.set_id, trial_seed)
        batch = generate_batch(config, rng, n_states)
        evaluator = MetricEvaluator(batch, spec.metrics, config, model, rng)
        allocations = {r.index: infer(r, batch, config) for r in library}
        candidates = exhaustive_pairwise(library, allocations, evaluator, config, weight_grid, workers)
        run.trials.append(TrialResult(t, trial_seed, None, None, candidates, None))
    print(f"✅ Finished: pairwise search of set {spec.set_id} in {time.time() - start:.2f}s")
    return run


def matching_candidate(trial: TrialResult) -> Optional[CandidateResult]:
    """The exhaustive-table entry with the agentic selection and weights, if the table has one."""
    if trial.agentic is None:
        return None
    cid = candidate_id(trial.agentic.members, trial.agentic.weights)
    return next((c for c in trial.candidates if c.candidate_id == cid), None)
