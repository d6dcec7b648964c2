"""Command-line surface tying the pipeline together.

Subcommands: build-space, map, infer, eval, curve, cost-report.  Provider
endpoints come from ANCHOR_* environment variables; ``--mock-playbook``
swaps in the offline scripted provider for network-free runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Any, Optional

from .config import PipelineConfig, load_config
from .domain import Condition, Scenario, dump_space, load_space
from .errors import AnchorError
from .gateway import Gateway, HashEmbedder, embedder_from_env, gateway_from_env
from .harness import (
    DatasetKind,
    DecisionMode,
    cost_report,
    condition_id,
    load_dataset,
    load_or_build_space,
    run_pipeline,
    unknown_rate_curve,
)
from .inference import infer
from .mapping import MappingResult, map_condition
from .mock import ScriptedChatProvider


def _build_gateway(args: argparse.Namespace, config: PipelineConfig) -> Gateway:
    if getattr(args, "mock_playbook", None):
        with open(args.mock_playbook, "r", encoding="utf-8") as handle:
            playbook = json.load(handle)
        chat = ScriptedChatProvider(playbook)
        if os.environ.get("ANCHOR_EMBED_MODEL"):
            embedder = embedder_from_env()
        else:
            embedder = HashEmbedder(config.structuring.embed_dim)
        return Gateway(chat_provider=chat, embedder=embedder,
                       max_concurrency=config.max_concurrency)
    return gateway_from_env(max_concurrency=config.max_concurrency)


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return PipelineConfig()


def _scenario_from_record(record: dict[str, Any]) -> Scenario:
    return Scenario(id=record["scenario_id"], description=record.get("scenario", ""),
                    outcome1=record["outcome1"], outcome2=record["outcome2"])


def _cmd_build_space(args: argparse.Namespace) -> int:
    config = _load_config(args)
    gateway = _build_gateway(args, config)
    kind = DatasetKind(args.kind)
    instances = load_dataset(args.dataset, kind)
    seen: set[str] = set()
    for instance in instances:
        scenario = instance.scenario
        if scenario.id in seen:
            continue
        seen.add(scenario.id)
        space = load_or_build_space(gateway, scenario, config, args.cache_dir)
        if args.cache_dir:
            print(f"{scenario.id}: {len(space.factors)} factors, "
                  f"{len(space.clusters)} clusters (cached)")
        else:
            print(dump_space(space))
    return 0


def _cmd_map(args: argparse.Namespace) -> int:
    config = _load_config(args)
    gateway = _build_gateway(args, config)
    with open(args.space_file, "r", encoding="utf-8") as handle:
        space = load_space(handle.read())
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        with open(args.conditions_file, "r", encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                record = json.loads(line)
                scenario = _scenario_from_record(record)
                condition = Condition(
                    id=condition_id(scenario.id, record["condition"]),
                    text=record["condition"], scenario_id=scenario.id)
                result = map_condition(gateway, space, scenario, condition, config)
                out.write(json.dumps({
                    "scenario_id": scenario.id,
                    "scenario": scenario.description,
                    "outcome1": scenario.outcome1,
                    "outcome2": scenario.outcome2,
                    "condition_id": condition.id,
                    "condition": condition.text,
                    "candidates": sorted(result.candidates),
                    "votes": result.votes,
                    "voted": sorted(result.voted),
                    "final": sorted(result.final),
                    "final_texts": sorted(space.factors[fid].text for fid in result.final),
                    "abstained": result.abstained,
                    "seed": result.seed,
                }) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    config = _load_config(args)
    gateway = _build_gateway(args, config)
    with open(args.space_file, "r", encoding="utf-8") as handle:
        space = load_space(handle.read())
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        with open(args.mapping_file, "r", encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                record = json.loads(line)
                scenario = _scenario_from_record(record)
                mapping = MappingResult(
                    condition_id=record["condition_id"],
                    candidates=frozenset(record["candidates"]),
                    votes=record["votes"],
                    voted=frozenset(record["voted"]),
                    final=frozenset(record["final"]),
                    abstained=record["abstained"],
                    seed=record.get("seed", 0),
                )
                report = infer(gateway, scenario, space.factors, mapping,
                               config.inference, config.prompt_dir)
                out.write(json.dumps({
                    "condition_id": mapping.condition_id,
                    "p_nb": report.p_nb,
                    "p_cbn": report.p_cbn,
                    "p_final": report.p_final,
                    "abstained": report.abstained,
                    "decision": report.decision.value,
                }) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    gateway = _build_gateway(args, config)
    kind = DatasetKind(args.protocol)
    instances = load_dataset(args.dataset, kind)
    mode = DecisionMode.ARGMAX
    if args.tau_dec is not None or args.mode == "threshold":
        mode = DecisionMode.THRESHOLD
    if args.tau_dec is not None:
        config = replace(config, decision=replace(config.decision, tau_dec=args.tau_dec))
    result = run_pipeline(gateway, instances, kind, config,
                          cache_dir=args.cache_dir, eps_same=args.eps_same,
                          mode=mode, out_dir=args.out_dir)
    print(result.metrics.render_table())
    if result.failures:
        print("\nfailed scenarios:")
        for scenario_id, error in result.failures.items():
            print(f"  {scenario_id}: {error}")
    return 0


def _cmd_curve(args: argparse.Namespace) -> int:
    config = _load_config(args)
    gateway = _build_gateway(args, config)
    instances = load_dataset(args.dataset, DatasetKind.PAIRWISE)
    counts = [int(part) for part in args.counts.split(",") if part.strip()]
    by_scenario: dict[str, list[Any]] = {}
    scenarios: dict[str, Scenario] = {}
    for instance in instances:
        by_scenario.setdefault(instance.scenario.id, []).append(instance)
        scenarios[instance.scenario.id] = instance.scenario

    rows = []
    for scenario_id, group in by_scenario.items():
        points = unknown_rate_curve(gateway, scenarios[scenario_id], group,
                                    counts, config, eps_same=args.eps_same)
        for point in points:
            rows.append({
                "scenario_id": scenario_id,
                "n_factors": point.n_factors,
                "unknown_rate": point.unknown_rate,
                "micro_f1": point.micro_f1,
            })
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for row in rows:
            out.write(json.dumps(row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _cmd_cost_report(args: argparse.Namespace) -> int:
    summary = cost_report(args.run_dir, baseline_dir=args.baseline)
    print(json.dumps(summary, indent=2))
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file mirroring PipelineConfig")
    parser.add_argument("--mock-playbook",
                        help="run offline against a scripted-provider playbook file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchor",
        description="Factor-space construction, condition mapping, and "
                    "aggregated Bayesian inference.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("build-space", help="build and cache factor spaces")
    p.add_argument("dataset")
    p.add_argument("--kind", choices=["pairwise", "decision"], default="pairwise")
    p.add_argument("--cache-dir")
    _add_common(p)
    p.set_defaults(func=_cmd_build_space)

    p = subparsers.add_parser("map", help="map conditions onto a persisted space")
    p.add_argument("space_file")
    p.add_argument("conditions_file")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=_cmd_map)

    p = subparsers.add_parser("infer", help="posterior inference over mapped factors")
    p.add_argument("space_file")
    p.add_argument("mapping_file")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=_cmd_infer)

    p = subparsers.add_parser("eval", help="run a full evaluation protocol")
    p.add_argument("protocol", choices=["pairwise", "decision"])
    p.add_argument("dataset")
    p.add_argument("--tau-dec", type=float, default=None)
    p.add_argument("--mode", choices=["argmax", "threshold"], default="argmax")
    p.add_argument("--eps-same", type=float, default=1e-9)
    p.add_argument("--cache-dir")
    p.add_argument("--out-dir")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = subparsers.add_parser("curve", help="coverage vs factor-count curve")
    p.add_argument("dataset")
    p.add_argument("--counts", required=True, help="comma-separated factor counts")
    p.add_argument("--eps-same", type=float, default=1e-9)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=_cmd_curve)

    p = subparsers.add_parser("cost-report", help="summarize a run's cost ledger")
    p.add_argument("run_dir")
    p.add_argument("--baseline")
    p.set_defaults(func=_cmd_cost_report)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (AnchorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
