"""Condition-to-factor mapping: coarse-to-fine retrieval over the hierarchy,
vote filtering over repeated selections, and a final reflective pass."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .domain import Condition, FactorSpace, Scenario, normalize_text
from .errors import ParseError
from .gateway import Gateway, Tag, build_request
from .prompts import load_template


@dataclass(frozen=True)
class MappingResult:
    """Outcome of mapping one condition: every stage's survivors.

    Invariants: final is a subset of voted, voted of candidates;
    ``abstained`` holds exactly when final is empty.  ``seed`` records the
    candidate presentation order used in the vote prompts.
    """

    condition_id: str
    candidates: frozenset[str]
    votes: dict[str, int]
    voted: frozenset[str]
    final: frozenset[str]
    abstained: bool
    seed: int


def vote_threshold(rounds: int, vote_ratio: float) -> int:
    """Votes needed to keep a candidate: ceil(vote_ratio * rounds)."""
    return math.ceil(vote_ratio * rounds)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    norm = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if norm == 0.0:
        return 0.0
    return float(np.dot(a, b)) / norm


def _top_k(scored: list[tuple[float, str]], k: int) -> list[str]:
    # ties break on ascending id so retrieval is stable across runs
    ranked = sorted(scored, key=lambda pair: (-pair[0], pair[1]))
    return [fid for _, fid in ranked[:k]]


def retrieve_candidates(
    gateway: Gateway,
    space: FactorSpace,
    condition: Condition,
    k1: int,
    k2: int,
) -> list[str]:
    """Top clusters by prototype similarity, top factors within each, plus
    the top of the unclustered pool; returns deduplicated ids in rank order."""
    if not space.clusters and not space.unclustered:
        raise ValueError("factor space has no clusters and no unclustered factors")
    condition_vec = gateway.embed([condition.text])[0]

    embeddings: dict[str, np.ndarray] = {}

    def similarity_to(fid: str) -> float:
        if fid not in embeddings:
            embeddings[fid] = gateway.embed([space.factors[fid].text])[0]
        return cosine_similarity(condition_vec, embeddings[fid])

    # batch-embed all member texts once; exact search over a few hundred ids
    all_ids = list(space.factors.keys())
    if all_ids:
        vectors = gateway.embed([space.factors[fid].text for fid in all_ids])
        embeddings.update(dict(zip(all_ids, vectors)))

    cluster_scores: list[tuple[float, int]] = []
    for index, cluster in enumerate(space.clusters):
        if cluster.prototype is None:
            continue
        score = cosine_similarity(condition_vec, np.asarray(cluster.prototype))
        cluster_scores.append((score, index))
    cluster_scores.sort(key=lambda pair: (-pair[0], pair[1]))

    candidates: list[str] = []
    seen: set[str] = set()
    for _, index in cluster_scores[:k1]:
        cluster = space.clusters[index]
        scored = [(similarity_to(fid), fid) for fid in cluster.members]
        for fid in _top_k(scored, k2):
            if fid not in seen:
                seen.add(fid)
                candidates.append(fid)
    if space.unclustered:
        scored = [(similarity_to(fid), fid) for fid in space.unclustered]
        for fid in _top_k(scored, k2):
            if fid not in seen:
                seen.add(fid)
                candidates.append(fid)
    return candidates


def vote_filter(
    gateway: Gateway,
    scenario: Scenario,
    condition: Condition,
    candidates: Sequence[str],
    space: FactorSpace,
    rounds: int,
    vote_ratio: float,
    temperature: float = 0.5,
    retries: int = 20,
    seed: int = 0,
    prompt_dir: Optional[str] = None,
) -> tuple[dict[str, int], frozenset[str]]:
    """Tally repeated selections and keep candidates at or above threshold.

    A selection round whose response never parses contributes nothing; if
    every round fails the voted set is empty.
    """
    if rounds < 1:
        raise ValueError(f"rounds={rounds} must be >= 1")
    if not candidates:
        raise ValueError("candidates must be non-empty")
    template = load_template("map_vote", prompt_dir)
    presented = list(candidates)
    random.Random(f"{seed}:{condition.id}").shuffle(presented)
    texts = [space.factors[fid].text for fid in presented]
    by_norm = {normalize_text(text): fid for text, fid in zip(texts, presented)}
    user = template.render_user(
        scenario=scenario.description or "(no scenario context)",
        condition=condition.text,
        candidates=json.dumps(texts),
    )

    def one_round(nonce: int) -> list[str]:
        request = build_request(template, user, temperature, Tag.MAP_VOTE, nonce=nonce)
        try:
            selection: list[str] = gateway.chat_structured(request, retries)
        except ParseError:
            return []
        ids = []
        for name in selection:
            fid = by_norm.get(normalize_text(name))
            if fid is not None:
                ids.append(fid)
        return ids

    selections = gateway.map_concurrent(one_round, range(rounds))
    votes = {fid: 0 for fid in candidates}
    for selection in selections:
        for fid in set(selection):
            votes[fid] += 1
    threshold = vote_threshold(rounds, vote_ratio)
    voted = frozenset(fid for fid, count in votes.items() if count >= threshold)
    return votes, voted


def reflective_refine(
    gateway: Gateway,
    condition: Condition,
    voted: frozenset[str],
    space: FactorSpace,
    temperature: float = 0.5,
    retries: int = 20,
    prompt_dir: Optional[str] = None,
) -> frozenset[str]:
    """One lenient keep-list pass over the voted set.

    Precision-only: an empty voted set returns immediately with no model
    call, and a response that never parses keeps the voted set intact.
    """
    if not voted:
        return frozenset()
    template = load_template("reflect", prompt_dir)
    ordered = sorted(voted)
    texts = [space.factors[fid].text for fid in ordered]
    by_norm = {normalize_text(text): fid for text, fid in zip(texts, ordered)}
    user = template.render_user(condition=condition.text, factors=json.dumps(texts))
    request = build_request(template, user, temperature, Tag.REFLECT)
    try:
        keep: list[str] = gateway.chat_structured(request, retries)
    except ParseError:
        return voted
    kept = {by_norm[normalize_text(name)] for name in keep
            if normalize_text(name) in by_norm}
    return frozenset(kept & voted)


def map_condition(
    gateway: Gateway,
    space: FactorSpace,
    scenario: Scenario,
    condition: Condition,
    config: PipelineConfig,
) -> MappingResult:
    """Retrieve, vote-filter, refine; abstain when nothing survives.

    An empty factor space abstains without issuing any model call.
    """
    seed = config.mapping.shuffle_seed
    if space.is_empty():
        return MappingResult(condition_id=condition.id, candidates=frozenset(),
                             votes={}, voted=frozenset(), final=frozenset(),
                             abstained=True, seed=seed)
    candidates = retrieve_candidates(gateway, space, condition,
                                     config.mapping.k1, config.mapping.k2)
    if not candidates:
        return MappingResult(condition_id=condition.id, candidates=frozenset(),
                             votes={}, voted=frozenset(), final=frozenset(),
                             abstained=True, seed=seed)
    votes, voted = vote_filter(
        gateway, scenario, condition, candidates, space,
        config.mapping.rounds, config.mapping.vote_ratio,
        config.inference.temperature, config.inference.elicit_retries,
        seed=seed, prompt_dir=config.prompt_dir)
    final = reflective_refine(
        gateway, condition, voted, space,
        config.inference.temperature, config.inference.elicit_retries,
        config.prompt_dir)
    return MappingResult(
        condition_id=condition.id,
        candidates=frozenset(candidates),
        votes=votes,
        voted=voted,
        final=final,
        abstained=not final,
        seed=seed,
    )
