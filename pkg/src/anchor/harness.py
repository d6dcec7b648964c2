"""Dataset ingestion, evaluation protocols, caching, and run orchestration."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Sequence

from .abduction import AbductionState, build_factor_pool
from .config import PipelineConfig
from .domain import (
    Condition,
    FactorSpace,
    Scenario,
    dump_space,
    load_space,
    normalize_text,
    validate_factor_space,
)
from .errors import LengthMismatch, SchemaError
from .gateway import Gateway
from .inference import Decision, PosteriorReport, infer
from .mapping import MappingResult, map_condition
from .structuring import build_hierarchy

logger = logging.getLogger(__name__)

EPS_SAME_DEFAULT = 1e-9

# all cache and report writes funnel through one lock
_WRITE_LOCK = threading.Lock()


class DatasetKind(Enum):
    PAIRWISE = "pairwise"
    DECISION = "decision"


class PairwiseGold(Enum):
    CONTEXT1 = "Context1"
    CONTEXT2 = "Context2"
    SAME = "Same"


class PairwisePrediction(Enum):
    CONTEXT1 = "Context1"
    CONTEXT2 = "Context2"
    SAME = "Same"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class PairwiseInstance:
    scenario: Scenario
    condition1: Condition
    condition2: Condition
    gold: PairwiseGold


@dataclass(frozen=True)
class DecisionInstance:
    scenario: Scenario
    condition: Condition
    gold: Decision  # O1 or O2


@dataclass
class MetricsReport:
    n_instances: int
    coverage: float
    unknown_rate: float
    per_class_f1: dict[str, float] = field(default_factory=dict)
    micro_avg_f1: Optional[float] = None
    accuracy: Optional[float] = None
    balanced_accuracy: Optional[float] = None
    cost: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_instances": self.n_instances,
            "coverage": self.coverage,
            "unknown_rate": self.unknown_rate,
            "per_class_f1": dict(self.per_class_f1),
            "micro_avg_f1": self.micro_avg_f1,
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "unknown_scoring": "Unknown predictions count as wrong for every class",
            "cost": self.cost,
        }

    def render_table(self) -> str:
        lines = [f"{'instances':<18}{self.n_instances}"]
        lines.append(f"{'coverage':<18}{self.coverage:.4f}")
        lines.append(f"{'unknown_rate':<18}{self.unknown_rate:.4f}")
        for name, value in self.per_class_f1.items():
            lines.append(f"{'F1 ' + name:<18}{value:.4f}")
        if self.micro_avg_f1 is not None:
            lines.append(f"{'micro_avg_f1':<18}{self.micro_avg_f1:.4f}")
        if self.accuracy is not None:
            lines.append(f"{'accuracy':<18}{self.accuracy:.4f}")
        if self.balanced_accuracy is not None:
            lines.append(f"{'balanced_acc':<18}{self.balanced_accuracy:.4f}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Dataset loading (line-delimited JSON records)
# ---------------------------------------------------------------------------


def condition_id(scenario_id: str, text: str) -> str:
    digest = hashlib.sha256(f"{scenario_id}|{normalize_text(text)}".encode()).hexdigest()
    return "c" + digest[:12]


def _require(record: dict[str, Any], fields: Sequence[str], line: int) -> None:
    for name in fields:
        if name not in record or record[name] is None:
            raise SchemaError(f"missing field {name!r}", line)
        if name != "scenario" and isinstance(record[name], str) and not record[name].strip():
            raise SchemaError(f"empty field {name!r}", line)


def load_dataset(path: str, kind: DatasetKind) -> list[Any]:
    """Parse one instance per line, rejecting malformed records by line number."""
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.readlines()
    instances: list[Any] = []
    for number, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", number) from exc
        if not isinstance(record, dict):
            raise SchemaError("record must be a JSON object", number)

        base_fields = ["scenario_id", "scenario", "outcome1", "outcome2", "gold"]
        if kind is DatasetKind.PAIRWISE:
            _require(record, base_fields + ["condition1", "condition2"], number)
            try:
                gold = PairwiseGold(record["gold"])
            except ValueError as exc:
                raise SchemaError(f"bad gold label {record['gold']!r}", number) from exc
            scenario = Scenario(id=record["scenario_id"], description=record["scenario"],
                                outcome1=record["outcome1"], outcome2=record["outcome2"])
            instances.append(PairwiseInstance(
                scenario=scenario,
                condition1=Condition(
                    id=condition_id(scenario.id, record["condition1"]),
                    text=record["condition1"], scenario_id=scenario.id),
                condition2=Condition(
                    id=condition_id(scenario.id, record["condition2"]),
                    text=record["condition2"], scenario_id=scenario.id),
                gold=gold,
            ))
        else:
            _require(record, base_fields + ["condition"], number)
            if record["gold"] not in (Decision.O1.value, Decision.O2.value):
                raise SchemaError(f"bad gold label {record['gold']!r}", number)
            scenario = Scenario(id=record["scenario_id"], description=record["scenario"],
                                outcome1=record["outcome1"], outcome2=record["outcome2"])
            instances.append(DecisionInstance(
                scenario=scenario,
                condition=Condition(
                    id=condition_id(scenario.id, record["condition"]),
                    text=record["condition"], scenario_id=scenario.id),
                gold=Decision(record["gold"]),
            ))
    if not instances:
        logger.warning("dataset %s contained no instances", path)
    return instances


# ---------------------------------------------------------------------------
# Evaluation protocols
# ---------------------------------------------------------------------------


def classify_pairwise(report1: PosteriorReport, report2: PosteriorReport,
                      eps_same: float = EPS_SAME_DEFAULT) -> PairwisePrediction:
    """Order the two contexts by their outcome1 posteriors.

    Unknown when either report abstained; Same when the posteriors differ by
    at most ``eps_same``.
    """
    if report1.abstained or report2.abstained:
        return PairwisePrediction.UNKNOWN
    p1, p2 = report1.p_final, report2.p_final
    assert p1 is not None and p2 is not None
    if p1 - p2 > eps_same:
        return PairwisePrediction.CONTEXT1
    if p2 - p1 > eps_same:
        return PairwisePrediction.CONTEXT2
    return PairwisePrediction.SAME


def _f1(tp: int, fp: int, fn: int) -> float:
    denominator = 2 * tp + fp + fn
    return 2 * tp / denominator if denominator else 0.0


def evaluate_pairwise(predictions: Sequence[PairwisePrediction],
                      golds: Sequence[PairwiseGold]) -> MetricsReport:
    """One-vs-rest F1 per class plus the global micro average.

    Unknown predictions are wrong for every class: they add a false negative
    to their gold class and no true positive anywhere.
    """
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(golds)} golds")
    classes = [PairwiseGold.CONTEXT1.value, PairwiseGold.CONTEXT2.value,
               PairwiseGold.SAME.value]
    tp = {name: 0 for name in classes}
    fp = {name: 0 for name in classes}
    fn = {name: 0 for name in classes}
    unknowns = 0
    for prediction, gold in zip(predictions, golds):
        if prediction is PairwisePrediction.UNKNOWN:
            unknowns += 1
            fn[gold.value] += 1
            continue
        if prediction.value == gold.value:
            tp[gold.value] += 1
        else:
            fp[prediction.value] += 1
            fn[gold.value] += 1
    per_class = {name: _f1(tp[name], fp[name], fn[name]) for name in classes}
    total_tp = sum(tp.values())
    total_fp = sum(fp.values())
    total_fn = sum(fn.values())
    micro = _f1(total_tp, total_fp, total_fn)
    n = len(predictions)
    coverage = (n - unknowns) / n if n else 0.0
    return MetricsReport(
        n_instances=n,
        coverage=coverage,
        unknown_rate=1.0 - coverage,
        per_class_f1=per_class,
        micro_avg_f1=micro,
    )


class DecisionMode(Enum):
    ARGMAX = "argmax"
    THRESHOLD = "threshold"


def evaluate_decision(reports: Sequence[PosteriorReport], golds: Sequence[Decision],
                      tau_dec: float = 0.9,
                      mode: DecisionMode = DecisionMode.ARGMAX) -> MetricsReport:
    """Argmax accuracy, or thresholded support labeling with balanced accuracy.

    In threshold mode the gold O1 plays the role of "supported" and a claim
    is predicted supported only when its posterior strictly exceeds tau_dec;
    an abstained report never supports.
    """
    if len(reports) != len(golds):
        raise LengthMismatch(f"{len(reports)} reports vs {len(golds)} golds")
    n = len(reports)
    unknowns = sum(1 for report in reports if report.abstained)
    coverage = (n - unknowns) / n if n else 0.0
    metrics = MetricsReport(n_instances=n, coverage=coverage,
                            unknown_rate=1.0 - coverage)
    if mode is DecisionMode.ARGMAX:
        correct = 0
        for report, gold in zip(reports, golds):
            if report.abstained or report.decision is Decision.UNKNOWN:
                continue
            if report.decision is gold:
                correct += 1
        metrics.accuracy = correct / n if n else 0.0
        return metrics

    recalls = []
    for positive in (Decision.O1, Decision.O2):
        total = sum(1 for gold in golds if gold is positive)
        if total == 0:
            continue
        hits = 0
        for report, gold in zip(reports, golds):
            if gold is not positive:
                continue
            p = report.p_final if (report.p_final is not None and not report.abstained) else 0.0
            supported = p > tau_dec
            if (positive is Decision.O1) == supported:
                hits += 1
        recalls.append(hits / total)
    metrics.balanced_accuracy = sum(recalls) / len(recalls) if recalls else 0.0
    return metrics


# ---------------------------------------------------------------------------
# Factor-space cache and pipeline runs
# ---------------------------------------------------------------------------


def _embedder_signature(gateway: Gateway) -> str:
    return f"{type(gateway.embedder).__name__}:{gateway.embedder.dim}"


def space_cache_path(cache_dir: str, scenario: Scenario, config: PipelineConfig,
                     gateway: Gateway) -> str:
    extra = json.dumps({
        "scenario": [scenario.description, scenario.outcome1, scenario.outcome2],
        "embedder": _embedder_signature(gateway),
    }, sort_keys=True)
    digest = config.space_digest(extra=extra)
    safe_id = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in scenario.id)
    return os.path.join(cache_dir, "spaces", f"{safe_id}-{digest}.json")


def load_or_build_space(gateway: Gateway, scenario: Scenario, config: PipelineConfig,
                        cache_dir: Optional[str] = None) -> FactorSpace:
    """Cache-through factor-space construction, keyed by scenario and the
    config sections that shape the space."""
    path = None
    if cache_dir:
        path = space_cache_path(cache_dir, scenario, config, gateway)
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as handle:
                return load_space(handle.read())
    state = build_factor_pool(gateway, scenario, config.abduction,
                              config.inference, config.prompt_dir)
    space = build_hierarchy(gateway, scenario, state, config)
    problems = validate_factor_space(space)
    if problems:
        raise AssertionError(f"structuring produced an invalid space: {problems}")
    if path:
        with _WRITE_LOCK:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w", encoding="utf-8") as handle:
                handle.write(dump_space(space))
    return space


@dataclass
class RunResult:
    metrics: MetricsReport
    failures: dict[str, str]
    mappings: dict[str, MappingResult]
    reports: dict[str, PosteriorReport]
    elapsed: float


def _group_instances(instances: Sequence[Any]) -> dict[str, dict[str, Any]]:
    """scenario id -> {scenario, conditions: {cid: Condition}, instances: [...]}"""
    groups: dict[str, dict[str, Any]] = {}
    for instance in instances:
        scenario = instance.scenario
        group = groups.setdefault(scenario.id, {
            "scenario": scenario, "conditions": {}, "instances": []})
        group["instances"].append(instance)
        if isinstance(instance, PairwiseInstance):
            for condition in (instance.condition1, instance.condition2):
                group["conditions"][condition.id] = condition
        else:
            group["conditions"][instance.condition.id] = instance.condition
    return groups


def run_pipeline(
    gateway: Gateway,
    instances: Sequence[Any],
    kind: DatasetKind,
    config: PipelineConfig,
    cache_dir: Optional[str] = None,
    eps_same: float = EPS_SAME_DEFAULT,
    mode: DecisionMode = DecisionMode.ARGMAX,
    out_dir: Optional[str] = None,
) -> RunResult:
    """Build (or load) each scenario's space, map and infer every condition,
    and score the dataset.  A scenario that fails is recorded and skipped;
    the rest of the run proceeds."""
    config.validate()
    started = time.time()
    groups = _group_instances(instances)
    failures: dict[str, str] = {}
    mappings: dict[str, MappingResult] = {}
    reports: dict[str, PosteriorReport] = {}
    lock = threading.Lock()

    def process(scenario_id: str) -> None:
        group = groups[scenario_id]
        scenario: Scenario = group["scenario"]
        try:
            space = load_or_build_space(gateway, scenario, config, cache_dir)

            def handle(item: tuple[str, Condition]) -> tuple[str, MappingResult, PosteriorReport]:
                cid, condition = item
                mapping = map_condition(gateway, space, scenario, condition, config)
                report = infer(gateway, scenario, space.factors, mapping,
                               config.inference, config.prompt_dir)
                return cid, mapping, report

            handled = gateway.map_concurrent(handle, sorted(group["conditions"].items()))
            with lock:
                for cid, mapping, report in handled:
                    mappings[cid] = mapping
                    reports[cid] = report
        except Exception as exc:  # per-scenario isolation
            with lock:
                failures[scenario_id] = f"{type(exc).__name__}: {exc}"

    ordered_ids = list(groups)
    if config.max_concurrency > 1 and len(ordered_ids) > 1:
        with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
            list(pool.map(process, ordered_ids))
    else:
        for scenario_id in ordered_ids:
            process(scenario_id)

    scored = [
        instance for instance in instances
        if instance.scenario.id not in failures
    ]
    if kind is DatasetKind.PAIRWISE:
        predictions = [
            classify_pairwise(reports[i.condition1.id], reports[i.condition2.id], eps_same)
            for i in scored
        ]
        metrics = evaluate_pairwise(predictions, [i.gold for i in scored])
    else:
        metrics = evaluate_decision(
            [reports[i.condition.id] for i in scored],
            [i.gold for i in scored],
            tau_dec=config.decision.tau_dec,
            mode=mode,
        )
    metrics.cost = gateway.ledger.snapshot()
    elapsed = time.time() - started
    metrics.cost["elapsed_seconds"] = elapsed

    result = RunResult(metrics=metrics, failures=failures,
                       mappings=mappings, reports=reports, elapsed=elapsed)
    if out_dir:
        write_run_artifacts(out_dir, result)
    return result


def write_run_artifacts(out_dir: str, result: RunResult) -> None:
    with _WRITE_LOCK:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as handle:
            json.dump(result.metrics.to_dict(), handle, indent=2)
        with open(os.path.join(out_dir, "cost.json"), "w", encoding="utf-8") as handle:
            json.dump(result.metrics.cost, handle, indent=2)
        with open(os.path.join(out_dir, "failures.json"), "w", encoding="utf-8") as handle:
            json.dump(result.failures, handle, indent=2)
        with open(os.path.join(out_dir, "posteriors.jsonl"), "w", encoding="utf-8") as handle:
            for cid in sorted(result.reports):
                report = result.reports[cid]
                handle.write(json.dumps({
                    "condition_id": cid,
                    "p_nb": report.p_nb,
                    "p_cbn": report.p_cbn,
                    "p_final": report.p_final,
                    "abstained": report.abstained,
                    "decision": report.decision.value,
                }) + "\n")


# ---------------------------------------------------------------------------
# Coverage curve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    n_factors: int
    unknown_rate: float
    micro_f1: float


def unknown_rate_curve(
    gateway: Gateway,
    scenario: Scenario,
    instances: Sequence[PairwiseInstance],
    factor_counts: Sequence[int],
    config: PipelineConfig,
    eps_same: float = EPS_SAME_DEFAULT,
) -> list[CurvePoint]:
    """Re-run structuring, mapping, and inference with the pool truncated to
    its first n factors (generation order), for each requested n."""
    if list(factor_counts) != sorted(factor_counts):
        raise ValueError("factor_counts must be ascending")
    state = build_factor_pool(gateway, scenario, config.abduction,
                              config.inference, config.prompt_dir)
    conditions: dict[str, Condition] = {}
    for instance in instances:
        conditions[instance.condition1.id] = instance.condition1
        conditions[instance.condition2.id] = instance.condition2

    points: list[CurvePoint] = []
    for count in factor_counts:
        truncated = AbductionState(round=state.round, pool=state.pool[:count],
                                   stopped_reason=state.stopped_reason)
        space = build_hierarchy(gateway, scenario, truncated, config)
        reports: dict[str, PosteriorReport] = {}
        for cid, condition in sorted(conditions.items()):
            mapping = map_condition(gateway, space, scenario, condition, config)
            reports[cid] = infer(gateway, scenario, space.factors, mapping,
                                 config.inference, config.prompt_dir)
        predictions = [
            classify_pairwise(reports[i.condition1.id], reports[i.condition2.id], eps_same)
            for i in instances
        ]
        metrics = evaluate_pairwise(predictions, [i.gold for i in instances])
        points.append(CurvePoint(
            n_factors=count,
            unknown_rate=metrics.unknown_rate,
            micro_f1=metrics.micro_avg_f1 or 0.0,
        ))
    return points


def cost_report(run_dir: str, baseline_dir: Optional[str] = None) -> dict[str, Any]:
    """Summarize a run's ledger, optionally normalized by a baseline run."""
    with open(os.path.join(run_dir, "cost.json"), "r", encoding="utf-8") as handle:
        cost = json.load(handle)
    summary: dict[str, Any] = {
        "total_calls": cost.get("total_calls", 0),
        "total_tokens": cost.get("total_tokens", 0),
        "elapsed_seconds": cost.get("elapsed_seconds", 0.0),
        "calls_by_tag": cost.get("calls", {}),
    }
    if baseline_dir:
        with open(os.path.join(baseline_dir, "cost.json"), "r", encoding="utf-8") as handle:
            base = json.load(handle)
        for ratio_key, key in (("tokens_vs_baseline", "total_tokens"),
                               ("time_vs_baseline", "elapsed_seconds"),
                               ("calls_vs_baseline", "total_calls")):
            denominator = base.get(key) or 0
            summary[ratio_key] = (cost.get(key, 0) / denominator) if denominator else None
    return summary
