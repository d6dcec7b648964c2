"""Iterative factor-pool growth: generate sentences, harvest factors, merge,
then label the pool by repeated voting."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .config import AbductionConfig, InferenceConfig
from .domain import Factor, FactorLabel, Scenario, dedupe_normalized, factor_id, normalize_text
from .errors import DomainError, ParseError, TransportError
from .gateway import Gateway, Tag, build_request, parse_numbered_list
from .prompts import load_template


class StopReason(Enum):
    TARGET_REACHED = "TargetReached"
    MAX_ROUNDS = "MaxRounds"


@dataclass(frozen=True)
class AbductionState:
    """Pool snapshot when growth stopped: factors keep generation order."""

    round: int
    pool: tuple[Factor, ...]
    stopped_reason: StopReason
    label_tallies: dict[str, dict[str, int]] = field(default_factory=dict)


def self_consistency_error_bound(m: int, q: float) -> float:
    """Majority-vote error bound exp(-2 m (q - 1/2)^2) for single-vote accuracy q."""
    if m < 1:
        raise DomainError(f"vote count m={m} must be >= 1")
    if not (0.5 < q <= 1.0):
        raise DomainError(f"single-vote accuracy q={q} must lie in (0.5, 1]")
    return math.exp(-2.0 * m * (q - 0.5) ** 2)


def generate_sentences(
    gateway: Gateway,
    scenario: Scenario,
    batch: int,
    temperature: float = 0.5,
    nonce: int = 0,
    prompt_dir: Optional[str] = None,
) -> list[str]:
    """One generation call asking for ``batch`` contrastive sentences.

    Over-generation is truncated to the first ``batch`` parsed lines; list
    numbering is stripped.
    """
    if batch < 1:
        raise ValueError(f"batch={batch} must be >= 1")
    template = load_template("sentence_gen", prompt_dir)
    user = template.render_user(
        scenario=scenario.description or "(no scenario context)",
        outcome1=scenario.outcome1,
        outcome2=scenario.outcome2,
        batch=str(batch),
    )
    request = build_request(template, user, temperature, Tag.SENTENCE_GEN, nonce=nonce)
    raw = gateway.chat(request)
    return parse_numbered_list(raw)[:batch]


def harvest_factors(
    gateway: Gateway,
    sentences: Sequence[str],
    temperature: float = 0.5,
    retries: int = 20,
    nonce: int = 0,
    prompt_dir: Optional[str] = None,
) -> list[str]:
    """Extract candidate factor texts from a sentence batch.

    Candidates are deduplicated on normalized text; a batch whose extraction
    never parses yields no candidates for this round.
    """
    if not sentences:
        raise ValueError("sentences must be non-empty")
    template = load_template("factor_extract", prompt_dir)
    numbered = "\n".join(f"{i + 1}. {s}" for i, s in enumerate(sentences))
    request = build_request(template, template.render_user(sentences=numbered),
                            temperature, Tag.FACTOR_EXTRACT, nonce=nonce)
    try:
        texts: list[str] = gateway.chat_structured(request, retries)
    except ParseError:
        return []
    return dedupe_normalized(texts)


def merge_validated(pool: Sequence[Factor], candidates: Sequence[str]) -> tuple[Factor, ...]:
    """Union new candidate texts into the pool, dropping normalized duplicates."""
    merged = list(pool)
    seen = {normalize_text(f.text) for f in pool}
    for text in candidates:
        norm = normalize_text(text)
        if not norm or norm in seen:
            continue
        seen.add(norm)
        merged.append(Factor(id=factor_id(text), text=norm))
    return tuple(merged)


def vote_factor_labels(
    gateway: Gateway,
    scenario: Scenario,
    factors: Sequence[Factor],
    m: int,
    temperature: float = 0.5,
    retries: int = 20,
    prompt_dir: Optional[str] = None,
) -> tuple[dict[str, FactorLabel], dict[str, dict[str, int]]]:
    """Majority label per factor over m repeated queries.

    m is forced odd.  A query that never parses contributes a neutral vote,
    and any tie for the top count resolves to neutral, so a factor whose
    queries all fail lands on neutral.
    """
    if m < 1:
        raise ValueError(f"label vote count m={m} must be >= 1")
    if m % 2 == 0:
        m += 1
    template = load_template("label_vote", prompt_dir)

    def one_vote(args: tuple[Factor, int]) -> FactorLabel:
        factor, nonce = args
        user = template.render_user(
            scenario=scenario.description or "(no scenario context)",
            outcome1=scenario.outcome1,
            outcome2=scenario.outcome2,
            factor=factor.text,
        )
        request = build_request(template, user, temperature, Tag.LABEL_VOTE, nonce=nonce)
        try:
            payload: dict[str, FactorLabel] = gateway.chat_structured(request, retries)
        except ParseError:
            return FactorLabel.NEUTRAL
        by_norm = {normalize_text(name): label for name, label in payload.items()}
        return by_norm.get(normalize_text(factor.text), FactorLabel.NEUTRAL)

    jobs = [(factor, nonce) for factor in factors for nonce in range(m)]
    votes = gateway.map_concurrent(one_vote, jobs)

    labels: dict[str, FactorLabel] = {}
    tallies: dict[str, dict[str, int]] = {}
    for index, factor in enumerate(factors):
        counts = Counter(votes[index * m:(index + 1) * m])
        tallies[factor.id] = {label.value: counts.get(label, 0) for label in FactorLabel}
        top = max(counts.values())
        winners = [label for label, count in counts.items() if count == top]
        labels[factor.id] = winners[0] if len(winners) == 1 else FactorLabel.NEUTRAL
    return labels, tallies


def build_factor_pool(gateway: Gateway, scenario: Scenario,
                      abduction: AbductionConfig, inference: InferenceConfig,
                      prompt_dir: Optional[str] = None) -> AbductionState:
    """Grow the pool round by round until the target size or the round cap,
    then label every factor.  A transport failure consumes its round."""
    pool: tuple[Factor, ...] = ()
    rounds_used = 0
    reason = StopReason.MAX_ROUNDS
    for round_index in range(1, abduction.max_rounds + 1):
        if len(pool) >= abduction.n_target:
            reason = StopReason.TARGET_REACHED
            break
        nonce = round_index - 1
        try:
            sentences = generate_sentences(
                gateway, scenario, abduction.batch, inference.temperature,
                nonce=nonce, prompt_dir=prompt_dir)
            candidates = harvest_factors(
                gateway, sentences, inference.temperature, inference.elicit_retries,
                nonce=nonce, prompt_dir=prompt_dir) if sentences else []
        except TransportError:
            candidates = []
        pool = merge_validated(pool, candidates)
        rounds_used = round_index
    else:
        if len(pool) >= abduction.n_target:
            reason = StopReason.TARGET_REACHED

    if not pool:
        return AbductionState(round=rounds_used, pool=(), stopped_reason=reason)

    labels, tallies = vote_factor_labels(
        gateway, scenario, pool, abduction.label_votes,
        inference.temperature, inference.elicit_retries, prompt_dir)
    labeled = tuple(
        Factor(id=f.id, text=f.text, label=labels[f.id]) for f in pool)
    return AbductionState(round=rounds_used, pool=labeled,
                          stopped_reason=reason, label_tallies=tallies)
