"""Posterior inference over mapped factors.

Two models share one parameter set: a conditional-independence product model
(every factor a direct child of the outcome) and a latent-augmented network
(outcome -> latent -> factor) whose evidence likelihood factorizes per latent
group, so exact marginalization collapses to a closed form linear in the
evidence size.  A literal enumeration oracle backs the closed form in tests.

All probability computations run in log space and normalize through
``_posterior_from_logs``, which is built so that swapping the roles of the
two outcomes maps a posterior p to 1 - p without rounding drift.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Sequence

from .config import InferenceConfig
from .domain import Factor, FactorLabel, Provenance, Scenario, normalize_text
from .errors import DomainError, ParseError, SizeError
from .gateway import ChatRequest, Gateway, Tag
from .mapping import MappingResult
from .prompts import load_template

LABEL_PRIORS = {
    FactorLabel.SUPPORTS_O1: 0.75,
    FactorLabel.NEUTRAL: 0.50,
    FactorLabel.SUPPORTS_O2: 0.25,
}

PHI_CHUNK = 40  # factors per elicitation query

OUTCOME_CPT_MAX_LATENTS = 20
BRUTEFORCE_MAX_LATENTS = 10
BRUTEFORCE_MAX_FACTORS = 14


class Decision(Enum):
    O1 = "O1"
    O2 = "O2"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class LatentVariable:
    """A binary concept mediating its member factors.

    ``p_given_o1``/``p_given_o2`` are P(latent active | outcome); members is
    the latent's cell of the factor partition.
    """

    name: str
    members: tuple[str, ...]
    p_given_o1: float
    p_given_o2: float

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError(f"latent {self.name!r}: members must be non-empty")


@dataclass(frozen=True)
class LatentBayesModel:
    """Shared parameterization for both posterior models.

    ``factor_params`` maps factor id to its likelihood strength theta (the
    elicited per-factor posterior under the symmetric-channel reading).  An
    empty ``latents`` tuple degenerates the model to the independence form.
    """

    scenario_id: str
    factor_params: dict[str, float]
    latents: tuple[LatentVariable, ...] = ()
    outcome_prior: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for latent in self.latents:
            for fid in latent.members:
                if fid in seen:
                    raise ValueError(f"factor {fid} assigned to two latents")
                seen.add(fid)
                if fid not in self.factor_params:
                    raise ValueError(f"latent member {fid} has no factor parameter")
        if self.latents and seen != set(self.factor_params):
            missing = sorted(set(self.factor_params) - seen)
            raise ValueError(f"latent partition does not cover factors: {missing}")


@dataclass(frozen=True)
class EvidenceSet:
    """Factor ids observed active; everything else is marginalized out."""

    active: frozenset[str]

    @classmethod
    def of(cls, ids: Sequence[str]) -> "EvidenceSet":
        return cls(active=frozenset(ids))


@dataclass(frozen=True)
class PosteriorReport:
    p_nb: Optional[float]
    p_cbn: Optional[float]
    p_final: Optional[float]
    abstained: bool
    decision: Decision


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------


def _logaddexp(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def _posterior_from_logs(log_l1: float, log_l2: float) -> float:
    """p = L1 / (L1 + L2) from log likelihoods.

    Evaluated so that exchanging the arguments returns exactly 1 - p: the
    branch keeps the division on the >= 0.5 side, where the complement is
    computed without rounding (Sterbenz).
    """
    x = log_l1 - log_l2
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    return 1.0 - 1.0 / (1.0 + math.exp(x))


def _check_open_unit(value: float, what: str) -> None:
    if not (0.0 < value < 1.0):
        raise DomainError(f"{what} must lie strictly inside (0, 1), got {value}")


def smooth_probability(p: float, clamp: float) -> float:
    """Clamp a probability into [clamp, 1 - clamp]."""
    if not (0.0 <= p <= 1.0):
        raise DomainError(f"probability {p} outside [0, 1]")
    if not (0.0 < clamp < 0.5):
        raise DomainError(f"clamp {clamp} outside (0, 0.5)")
    return min(1.0 - clamp, max(clamp, p))


def init_factor_priors_from_labels(labels: dict[str, FactorLabel]) -> dict[str, float]:
    """Label-initialized strengths: supports-first 0.75, neutral 0.5, opposed 0.25."""
    return {fid: LABEL_PRIORS[label] for fid, label in labels.items()}


def nb_posterior(model: LatentBayesModel, evidence: EvidenceSet) -> float:
    """Posterior for outcome1 under the conditional-independence product form."""
    if not evidence.active:
        raise ValueError("empty evidence: caller must abstain instead")
    if not evidence.active <= set(model.factor_params):
        raise ValueError("evidence references unknown factors")
    ids = sorted(evidence.active)
    for fid in ids:
        _check_open_unit(model.factor_params[fid], f"theta[{fid}]")
    if len(ids) == 1:
        # single observation: the ratio reduces algebraically to theta itself
        return model.factor_params[ids[0]]
    log_l1 = 0.0
    log_l2 = 0.0
    for fid in ids:
        theta = model.factor_params[fid]
        log_l1 += math.log(theta)
        log_l2 += math.log(1.0 - theta)
    return _posterior_from_logs(log_l1, log_l2)


def latent_cpt_from_counts(c1: float, c2: float, c_neutral: float,
                           epsilon: float) -> tuple[float, float]:
    """Conditionals for one latent from its members' label counts.

    Neutral members split evenly between the two sides; the Laplace count
    ``epsilon`` keeps the denominator positive when all counts are zero.
    """
    if min(c1, c2, c_neutral) < 0:
        raise DomainError("label counts must be non-negative")
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    smoothed1 = c1 + 0.5 * c_neutral + epsilon
    smoothed2 = c2 + 0.5 * c_neutral + epsilon
    total = smoothed1 + smoothed2
    return smoothed1 / total, smoothed2 / total


def outcome_cpt_from_latents(
    latents: Sequence[LatentVariable],
) -> dict[tuple[int, ...], float]:
    """P(outcome1 | latent assignment) for every assignment, by Bayes' rule.

    Latents are conditionally independent given the outcome, so each row is
    the normalized product of the per-latent conditionals.
    """
    k = len(latents)
    if k > OUTCOME_CPT_MAX_LATENTS:
        raise DomainError(f"{k} latents exceeds the 2^{OUTCOME_CPT_MAX_LATENTS} table guard")
    for latent in latents:
        _check_open_unit(latent.p_given_o1, f"p_given_o1[{latent.name}]")
        _check_open_unit(latent.p_given_o2, f"p_given_o2[{latent.name}]")
    table: dict[tuple[int, ...], float] = {}
    for assignment in itertools.product((0, 1), repeat=k):
        log_l1 = 0.0
        log_l2 = 0.0
        for latent, value in zip(latents, assignment):
            p1 = latent.p_given_o1 if value else 1.0 - latent.p_given_o1
            p2 = latent.p_given_o2 if value else 1.0 - latent.p_given_o2
            log_l1 += math.log(p1)
            log_l2 += math.log(p2)
        table[assignment] = _posterior_from_logs(log_l1, log_l2)
    return table


def _check_cbn_model(model: LatentBayesModel, evidence: EvidenceSet) -> None:
    if not evidence.active <= set(model.factor_params):
        raise ValueError("evidence references unknown factors")
    if evidence.active and not model.latents:
        raise ValueError("latent model required: no latent covers the evidence")
    for fid, theta in model.factor_params.items():
        _check_open_unit(theta, f"theta[{fid}]")
    for latent in model.latents:
        _check_open_unit(latent.p_given_o1, f"p_given_o1[{latent.name}]")
        _check_open_unit(latent.p_given_o2, f"p_given_o2[{latent.name}]")


def cbn_log_likelihoods(model: LatentBayesModel, evidence: EvidenceSet) -> tuple[float, float]:
    """log P(evidence | outcome) for both outcomes via the per-group closed form.

    Each latent whose group contains observed factors contributes
    ``alpha * prod(theta) + (1 - alpha) * prod(1 - theta)``; groups without
    observed factors marginalize out and contribute exactly 1.
    """
    _check_cbn_model(model, evidence)
    log_l1 = 0.0
    log_l2 = 0.0
    for latent in model.latents:
        observed = sorted(fid for fid in latent.members if fid in evidence.active)
        if not observed:
            continue
        sum_log_theta = 0.0
        sum_log_comp = 0.0
        for fid in observed:
            theta = model.factor_params[fid]
            sum_log_theta += math.log(theta)
            sum_log_comp += math.log(1.0 - theta)
        for which, alpha in ((1, latent.p_given_o1), (2, latent.p_given_o2)):
            term = _logaddexp(
                math.log(alpha) + sum_log_theta,
                math.log(1.0 - alpha) + sum_log_comp,
            )
            if which == 1:
                log_l1 += term
            else:
                log_l2 += term
    return log_l1, log_l2


def cbn_posterior(model: LatentBayesModel, evidence: EvidenceSet) -> float:
    """Posterior for outcome1 under the latent-augmented network, exactly."""
    log_l1, log_l2 = cbn_log_likelihoods(model, evidence)
    return _posterior_from_logs(log_l1, log_l2)


def cbn_posterior_bruteforce(model: LatentBayesModel, evidence: EvidenceSet) -> float:
    """Test oracle: enumerate every latent assignment and every value of the
    unobserved factors, sum the joint, normalize.  Shares no code path with
    the closed form beyond the parameter containers."""
    k = len(model.latents)
    n_factors = len(model.factor_params)
    if k > BRUTEFORCE_MAX_LATENTS:
        raise SizeError(f"{k} latents exceeds the enumeration guard")
    if n_factors > BRUTEFORCE_MAX_FACTORS:
        raise SizeError(f"{n_factors} factors exceeds the enumeration guard")
    _check_cbn_model(model, evidence)

    parent_index: dict[str, int] = {}
    for index, latent in enumerate(model.latents):
        for fid in latent.members:
            parent_index[fid] = index
    all_ids = sorted(model.factor_params)
    unobserved = [fid for fid in all_ids if fid not in evidence.active]
    observed = [fid for fid in all_ids if fid in evidence.active]

    totals = [0.0, 0.0]
    for outcome in (0, 1):
        prior = model.outcome_prior[outcome]
        for assignment in itertools.product((0, 1), repeat=k):
            weight = prior
            for latent, value in zip(model.latents, assignment):
                alpha = latent.p_given_o1 if outcome == 0 else latent.p_given_o2
                weight *= alpha if value else 1.0 - alpha
            for fid in observed:
                theta = model.factor_params[fid]
                active = assignment[parent_index[fid]]
                weight *= theta if active else 1.0 - theta
            for values in itertools.product((0, 1), repeat=len(unobserved)):
                term = weight
                for fid, fvalue in zip(unobserved, values):
                    theta = model.factor_params[fid]
                    active = assignment[parent_index[fid]]
                    p_active = theta if active else 1.0 - theta
                    term *= p_active if fvalue else 1.0 - p_active
                totals[outcome] += term
    denominator = totals[0] + totals[1]
    if denominator <= 0.0:
        raise DomainError("joint probability vanished; parameters out of range")
    return totals[0] / denominator


class SharedLatentStats(NamedTuple):
    covariance: float
    joint_11: float
    marginal_a: float
    marginal_b: float


def shared_latent_covariance(beta: float, theta_a: float, theta_b: float) -> SharedLatentStats:
    """Covariance two factors inherit from one latent parent, plus the joint
    and marginals behind it.  Positive whenever both strengths sit on the
    same side of 1/2."""
    for value, name in ((beta, "beta"), (theta_a, "theta_a"), (theta_b, "theta_b")):
        _check_open_unit(value, name)
    joint = beta * theta_a * theta_b + (1.0 - beta) * (1.0 - theta_a) * (1.0 - theta_b)
    marginal_a = beta * theta_a + (1.0 - beta) * (1.0 - theta_a)
    marginal_b = beta * theta_b + (1.0 - beta) * (1.0 - theta_b)
    covariance = beta * (1.0 - beta) * (2.0 * theta_a - 1.0) * (2.0 * theta_b - 1.0)
    return SharedLatentStats(covariance, joint, marginal_a, marginal_b)


def implied_lr_and_log_odds_bound(
    phis: Sequence[float],
    true_lrs: Optional[Sequence[float]] = None,
) -> tuple[list[float], Optional[float]]:
    """Likelihood ratios implied by per-factor strengths, and the additive
    log-odds error bound against reference ratios.  Diagnostic only."""
    lrs: list[float] = []
    for phi in phis:
        _check_open_unit(phi, "phi")
        lrs.append(phi / (1.0 - phi))
    if true_lrs is None:
        return lrs, None
    if len(true_lrs) != len(phis):
        raise DomainError("true_lrs must align with phis")
    bound = 0.0
    for lr, true_lr in zip(lrs, true_lrs):
        if true_lr <= 0:
            raise DomainError("reference likelihood ratios must be positive")
        bound += abs(math.log(lr) - math.log(true_lr))
    return lrs, bound


def aggregate_lop(p_nb: float, p_cbn: float, w_nb: float, w_cbn: float) -> float:
    """Fixed-weight convex combination of the two model posteriors."""
    if w_nb < 0 or w_cbn < 0 or abs(w_nb + w_cbn - 1.0) > 1e-9:
        raise DomainError(f"weights ({w_nb}, {w_cbn}) must be non-negative and sum to 1")
    return w_nb * p_nb + w_cbn * p_cbn


def aggregate_bma(nb_pair: tuple[float, float], cbn_pair: tuple[float, float]) -> float:
    """Model-averaged posterior with evidence approximated by the product of
    each model's two outcome posteriors, under a uniform model prior."""
    for pair in (nb_pair, cbn_pair):
        if abs(pair[0] + pair[1] - 1.0) > 1e-9:
            raise DomainError(f"posterior pair {pair} must sum to 1")
    evidence_nb = 0.5 * nb_pair[0] * nb_pair[1]
    evidence_cbn = 0.5 * cbn_pair[0] * cbn_pair[1]
    total = evidence_nb + evidence_cbn
    if total <= 0.0:
        raise DomainError("both evidence approximations vanished")
    return (evidence_nb * nb_pair[0] + evidence_cbn * cbn_pair[0]) / total


# ---------------------------------------------------------------------------
# Parameter elicitation
# ---------------------------------------------------------------------------


def _scenario_text(scenario: Scenario) -> str:
    return scenario.description if scenario.description.strip() else "(no scenario context)"


def elicit_factor_posteriors(
    gateway: Gateway,
    scenario: Scenario,
    factors: Sequence[Factor],
    config: InferenceConfig,
    prompt_dir: Optional[str] = None,
) -> dict[str, tuple[float, Provenance]]:
    """Per-factor strengths from the model, label-initialized on any gap.

    Queries are chunked; a chunk that never parses falls back to the label
    priors for its factors, as does any factor missing from a parsed reply.
    Every returned value is smoothed into the clamp interval.
    """
    if not factors:
        raise ValueError("factors must be non-empty")
    template = load_template("phi_elicit", prompt_dir)
    priors = {
        factor.id: LABEL_PRIORS[factor.label if factor.label is not None else FactorLabel.NEUTRAL]
        for factor in factors
    }
    results: dict[str, tuple[float, Provenance]] = {}
    for start in range(0, len(factors), PHI_CHUNK):
        chunk = factors[start:start + PHI_CHUNK]
        prior_text = json.dumps({f.text: priors[f.id] for f in chunk})
        user = template.render_user(
            scenario=_scenario_text(scenario),
            outcome1=scenario.outcome1,
            outcome2=scenario.outcome2,
            prior_text=prior_text,
            factors=json.dumps([f.text for f in chunk]),
        )
        request = ChatRequest(
            system=template.system,
            turns=tuple(
                turn for pair in template.examples for turn in
                (("user", pair[0]), ("assistant", pair[1]))
            ) + (("user", user),),
            temperature=config.temperature,
            tag=Tag.PHI_ELICIT,
        )
        try:
            payload: dict[str, float] = gateway.chat_structured(request, config.elicit_retries)
        except ParseError:
            payload = {}
        by_norm = {normalize_text(name): value for name, value in payload.items()}
        for factor in chunk:
            value = by_norm.get(normalize_text(factor.text))
            if value is None:
                results[factor.id] = (
                    smooth_probability(priors[factor.id], config.clamp),
                    Provenance.LABEL_INITIALIZED,
                )
            else:
                results[factor.id] = (
                    smooth_probability(value, config.clamp),
                    Provenance.ELICITED,
                )
    return results


def discover_latents(
    gateway: Gateway,
    factors: Sequence[Factor],
    config: InferenceConfig,
    prompt_dir: Optional[str] = None,
) -> list[tuple[str, tuple[str, ...]]]:
    """Partition the factors into named latent groups.

    Repairs applied to the raw reply: names outside the factor set are
    dropped, a factor claimed twice stays with its first latent, factors the
    reply omits are collected under ``ResidualLat``, and a reply that never
    parses collapses to a single ``AllLat`` group.
    """
    if not factors:
        raise ValueError("factors must be non-empty")
    by_norm = {normalize_text(f.text): f.id for f in factors}
    all_ids = [f.id for f in factors]
    template = load_template("latent_discover", prompt_dir)
    user = template.render_user(factors=json.dumps([f.text for f in factors]))
    request = ChatRequest(
        system=template.system,
        turns=tuple(
            turn for pair in template.examples for turn in
            (("user", pair[0]), ("assistant", pair[1]))
        ) + (("user", user),),
        temperature=config.temperature,
        tag=Tag.LATENT_DISCOVER,
    )
    try:
        raw: list[tuple[str, list[str]]] = gateway.chat_structured(request, config.elicit_retries)
    except ParseError:
        return [("AllLat", tuple(all_ids))]

    assigned: set[str] = set()
    partition: list[tuple[str, tuple[str, ...]]] = []
    used_names: set[str] = set()
    for name, member_texts in raw:
        members: list[str] = []
        for text in member_texts:
            fid = by_norm.get(normalize_text(text))
            if fid is None or fid in assigned:
                continue
            assigned.add(fid)
            members.append(fid)
        if not members:
            continue
        unique = name
        suffix = 2
        while unique in used_names:
            unique = f"{name} ({suffix})"
            suffix += 1
        used_names.add(unique)
        partition.append((unique, tuple(members)))
    leftover = [fid for fid in all_ids if fid not in assigned]
    if leftover:
        partition.append(("ResidualLat", tuple(leftover)))
    if not partition:
        return [("AllLat", tuple(all_ids))]
    return partition


def _counts_for(members: Sequence[str], factors_by_id: dict[str, Factor]) -> tuple[int, int, int]:
    c1 = c2 = cn = 0
    for fid in members:
        label = factors_by_id[fid].label
        if label is FactorLabel.SUPPORTS_O1:
            c1 += 1
        elif label is FactorLabel.SUPPORTS_O2:
            c2 += 1
        else:
            cn += 1
    return c1, c2, cn


def elicit_latent_conditionals(
    gateway: Gateway,
    scenario: Scenario,
    partition: Sequence[tuple[str, tuple[str, ...]]],
    factors_by_id: dict[str, Factor],
    config: InferenceConfig,
    prompt_dir: Optional[str] = None,
) -> dict[str, tuple[float, float]]:
    """Per-latent conditional pair (given outcome1, given outcome2).

    Latents the reply omits fall back to label-count estimates; a reply that
    never parses sends every latent to the count fallback.  All values are
    smoothed into the clamp interval.
    """
    if not partition:
        raise ValueError("partition must be non-empty")
    template = load_template("latent_elicit", prompt_dir)
    latents_json = json.dumps([
        {"name": name, "factors": [factors_by_id[fid].text for fid in members]}
        for name, members in partition
    ])
    user = template.render_user(
        latents=latents_json, outcome1=scenario.outcome1, outcome2=scenario.outcome2)
    request = ChatRequest(
        system=template.system,
        turns=tuple(
            turn for pair in template.examples for turn in
            (("user", pair[0]), ("assistant", pair[1]))
        ) + (("user", user),),
        temperature=config.temperature,
        tag=Tag.LATENT_ELICIT,
    )
    try:
        payload: dict[str, tuple[float, float]] = gateway.chat_structured(
            request, config.elicit_retries)
    except ParseError:
        payload = {}
    out: dict[str, tuple[float, float]] = {}
    for name, members in partition:
        pair = payload.get(name)
        if pair is None:
            c1, c2, cn = _counts_for(members, factors_by_id)
            pair = latent_cpt_from_counts(c1, c2, cn, config.epsilon_smooth)
        out[name] = (
            smooth_probability(pair[0], config.clamp),
            smooth_probability(pair[1], config.clamp),
        )
    return out


def build_models(
    gateway: Gateway,
    scenario: Scenario,
    factors: Sequence[Factor],
    config: InferenceConfig,
    prompt_dir: Optional[str] = None,
) -> tuple[LatentBayesModel, LatentBayesModel]:
    """Elicit parameters and return the (independence, latent) model pair."""
    phi = elicit_factor_posteriors(gateway, scenario, factors, config, prompt_dir)
    factor_params = {fid: value for fid, (value, _) in phi.items()}
    nb_model = LatentBayesModel(scenario_id=scenario.id, factor_params=factor_params)

    factors_by_id = {f.id: f for f in factors}
    partition = discover_latents(gateway, factors, config, prompt_dir)
    pairs = elicit_latent_conditionals(
        gateway, scenario, partition, factors_by_id, config, prompt_dir)
    latents = tuple(
        LatentVariable(name=name, members=members,
                       p_given_o1=pairs[name][0], p_given_o2=pairs[name][1])
        for name, members in partition
    )
    cbn_model = LatentBayesModel(
        scenario_id=scenario.id, factor_params=factor_params, latents=latents)
    return nb_model, cbn_model


def infer(
    gateway: Gateway,
    scenario: Scenario,
    factors_by_id: dict[str, Factor],
    mapping_result: MappingResult,
    config: InferenceConfig,
    prompt_dir: Optional[str] = None,
) -> PosteriorReport:
    """Full per-condition inference: parameters, both posteriors, aggregation.

    An abstained mapping short-circuits to an unknown report with no model
    queries.  After aggregation the report abstains again when neither
    outcome reaches the confidence floor ``tau``.
    """
    if mapping_result.abstained or not mapping_result.final:
        return PosteriorReport(p_nb=None, p_cbn=None, p_final=None,
                               abstained=True, decision=Decision.UNKNOWN)
    ordered = [factors_by_id[fid] for fid in sorted(mapping_result.final)]
    nb_model, cbn_model = build_models(gateway, scenario, ordered, config, prompt_dir)
    evidence = EvidenceSet.of([f.id for f in ordered])
    p_nb = nb_posterior(nb_model, evidence)
    p_cbn = cbn_posterior(cbn_model, evidence)
    if config.aggregator == "BMA":
        p_final = aggregate_bma((p_nb, 1.0 - p_nb), (p_cbn, 1.0 - p_cbn))
    else:
        p_final = aggregate_lop(p_nb, p_cbn, config.w_nb, config.w_cbn)
    abstained = max(p_final, 1.0 - p_final) < config.tau
    if abstained or p_final == 0.5:
        decision = Decision.UNKNOWN
    elif p_final > 0.5:
        decision = Decision.O1
    else:
        decision = Decision.O2
    return PosteriorReport(p_nb=p_nb, p_cbn=p_cbn, p_final=p_final,
                           abstained=abstained, decision=decision)
