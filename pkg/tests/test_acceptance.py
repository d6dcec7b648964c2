"""Acceptance suite: every release criterion at its stated tolerance.

Each test prints one PASS line on success (run with ``pytest -s`` to see
them); a failing assertion is the corresponding FAIL.  Nothing here touches
the network: the end-to-end criterion runs with sockets disabled.
"""

from __future__ import annotations

import json
import math
import os
import socket
import time

import numpy as np

from anchor.abduction import self_consistency_error_bound
from anchor.config import load_config
from anchor.domain import FactorLabel
from anchor.gateway import Gateway, HashEmbedder
from anchor.harness import (
    DatasetKind,
    PairwiseGold,
    PairwisePrediction,
    condition_id,
    evaluate_pairwise,
    load_dataset,
    run_pipeline,
    unknown_rate_curve,
)
from anchor.inference import (
    EvidenceSet,
    LatentBayesModel,
    LatentVariable,
    aggregate_bma,
    aggregate_lop,
    cbn_log_likelihoods,
    cbn_posterior,
    cbn_posterior_bruteforce,
    init_factor_priors_from_labels,
    latent_cpt_from_counts,
    nb_posterior,
    outcome_cpt_from_latents,
    shared_latent_covariance,
)
from anchor.mapping import vote_threshold
from anchor.mock import ScriptedChatProvider

from conftest import random_latent_model

HERE = os.path.dirname(__file__)
GOLDEN_DATASET = os.path.join(HERE, "data", "golden_pairwise.jsonl")
GOLDEN_PLAYBOOK = os.path.join(HERE, "data", "golden_playbook.json")
GOLDEN_CONFIG = os.path.join(HERE, "data", "golden_config.json")

PATHOGEN_CONDITION = ("Hot water helps in killing any potential foodborne "
                      "pathogens or microbes present in the noodles.")
FOOD_SAFETY_FACTOR = "food safety (reduces risk of foodborne illness)"


def _passed(line: str) -> None:
    print(f"ACCEPTANCE PASS: {line}")


def _golden_gateway() -> Gateway:
    with open(GOLDEN_PLAYBOOK, "r", encoding="utf-8") as handle:
        playbook = json.load(handle)
    config = load_config(GOLDEN_CONFIG)
    return Gateway(chat_provider=ScriptedChatProvider(playbook),
                   embedder=HashEmbedder(config.structuring.embed_dim),
                   max_concurrency=config.max_concurrency)


def test_cbn_oracle_equivalence():
    rng = np.random.default_rng(12345)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        model, evidence = random_latent_model(rng, max_latents=4, max_factors=10)
        gap = abs(cbn_posterior(model, evidence) -
                  cbn_posterior_bruteforce(model, evidence))
        worst = max(worst, gap)
        assert gap <= 1e-9
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0
    _passed(f"closed-form vs enumeration oracle on 1000 random models, "
            f"max gap {worst:.2e} <= 1e-9 in {elapsed:.1f}s")


def test_nb_closed_form():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        thetas = rng.uniform(0.01, 0.99, size=n)
        params = {f"f{i}": float(thetas[i]) for i in range(n)}
        model = LatentBayesModel(scenario_id="s", factor_params=params)
        direct = float(np.prod(thetas) / (np.prod(thetas) + np.prod(1.0 - thetas)))
        assert abs(nb_posterior(model, EvidenceSet.of(list(params))) - direct) <= 1e-12
    for theta in (0.25, 0.5, 0.6180339887498949, 0.99):
        single = LatentBayesModel(scenario_id="s", factor_params={"f": theta})
        assert nb_posterior(single, EvidenceSet.of(["f"])) == theta
    _passed("independence posterior matches direct product form to 1e-12 on "
            "1000 draws; single factor returns theta bit-exactly")


def test_theorem_worked_example():
    model = LatentBayesModel(
        scenario_id="s", factor_params={"f": 0.9},
        latents=(LatentVariable("L", ("f",), 0.8, 0.2),))
    evidence = EvidenceSet.of(["f"])
    log_l1, log_l2 = cbn_log_likelihoods(model, evidence)
    assert abs(math.exp(log_l1) - 0.74) <= 1e-12
    assert abs(math.exp(log_l2) - 0.26) <= 1e-12
    assert abs(cbn_posterior(model, evidence) - 0.74) <= 1e-12
    assert abs(cbn_posterior_bruteforce(model, evidence) - 0.74) <= 1e-12
    _passed("one latent (0.8, 0.2) with strength 0.9 yields likelihoods "
            "(0.74, 0.26) and posterior 0.74 to 1e-12")


def test_covariance_proposition():
    grid = np.linspace(0.05, 0.95, 10)
    for beta in grid:
        for ta in grid:
            for tb in grid:
                stats = shared_latent_covariance(float(beta), float(ta), float(tb))
                enumerated = stats.joint_11 - stats.marginal_a * stats.marginal_b
                assert abs(stats.covariance - enumerated) <= 1e-12
                if ta > 0.5 and tb > 0.5:
                    assert stats.covariance > 0
    _passed("shared-latent covariance closed form equals enumerated joint to "
            "1e-12 on the 10x10x10 grid; positive whenever both strengths > 1/2")


def test_outcome_cpt_lemma():
    rng = np.random.default_rng(2)
    for _ in range(200):
        k = int(rng.integers(1, 5))
        latents = [
            LatentVariable(f"L{i}", (f"f{i}",),
                           float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.01, 0.99)))
            for i in range(k)
        ]
        table = outcome_cpt_from_latents(latents)
        mirrored = outcome_cpt_from_latents([
            LatentVariable(l.name, l.members, l.p_given_o2, l.p_given_o1)
            for l in latents])
        for assignment, row in table.items():
            p1 = math.prod(l.p_given_o1 if bit else 1 - l.p_given_o1
                           for l, bit in zip(latents, assignment))
            p2 = math.prod(l.p_given_o2 if bit else 1 - l.p_given_o2
                           for l, bit in zip(latents, assignment))
            assert abs(row - p1 / (p1 + p2)) <= 1e-12
            assert row + mirrored[assignment] == 1.0
    flat = LatentVariable("F", ("f0",), 0.37, 0.37)
    informative = LatentVariable("I", ("f1",), 0.9, 0.2)
    table = outcome_cpt_from_latents([informative, flat])
    for bit in (0, 1):
        assert table[(0, bit)] == table[(0, 0)]
        assert table[(1, bit)] == table[(1, 0)]
    _passed("outcome-CPT rows match the Bayes ratio to 1e-12 with exact "
            "row complements; equal-conditional latents cancel exactly")


def test_appendix_initialization():
    priors = init_factor_priors_from_labels({
        "a": FactorLabel.SUPPORTS_O1,
        "b": FactorLabel.NEUTRAL,
        "c": FactorLabel.SUPPORTS_O2,
    })
    assert priors == {"a": 0.75, "b": 0.50, "c": 0.25}
    assert latent_cpt_from_counts(2, 1, 1, 0.5) == (0.6, 0.4)
    _passed("label priors are exactly (0.75, 0.50, 0.25); "
            "count CPT for (2,1,1) with eps 0.5 is exactly (0.6, 0.4)")


def test_aggregation():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        p_nb, p_cbn = (float(x) for x in rng.uniform(0, 1, size=2))
        w = float(rng.uniform(0, 1))
        pooled = aggregate_lop(p_nb, p_cbn, w, 1.0 - w)
        assert min(p_nb, p_cbn) - 1e-12 <= pooled <= max(p_nb, p_cbn) + 1e-12
        assert aggregate_lop(p_nb, p_cbn, 1.0, 0.0) == p_nb
    assert abs(aggregate_bma((0.9, 0.1), (0.5, 0.5)) - 0.6059) <= 1e-4
    _passed("pooled posterior brackets its inputs on 1000 draws; unit weight "
            "reproduces the independence model exactly; model-averaging hand "
            "example is 0.6059 +/- 1e-4")


def test_self_consistency_bound():
    assert abs(self_consistency_error_bound(3, 0.8) - 0.58275) <= 1e-5
    for m in range(1, 30):
        assert self_consistency_error_bound(m + 1, 0.75) < \
            self_consistency_error_bound(m, 0.75)
    qs = np.linspace(0.51, 1.0, 50)
    values = [self_consistency_error_bound(5, float(q)) for q in qs]
    assert all(b < a for a, b in zip(values, values[1:]))
    _passed("vote-error bound is 0.58275 +/- 1e-5 at (m=3, q=0.8) and "
            "strictly decreasing in m and q")


def test_vote_threshold_and_subset_chain():
    assert vote_threshold(3, 0.5) == 2
    config = load_config(GOLDEN_CONFIG)
    instances = load_dataset(GOLDEN_DATASET, DatasetKind.PAIRWISE)
    result = run_pipeline(_golden_gateway(), instances, DatasetKind.PAIRWISE, config)
    assert result.mappings
    for mapping in result.mappings.values():
        assert mapping.final <= mapping.voted <= mapping.candidates
    _passed(f"threshold(3, 0.5) = 2; final within voted within candidates on "
            f"all {len(result.mappings)} golden mappings")


def test_end_to_end_golden_run(tmp_path, monkeypatch):
    def no_network(*args, **kwargs):
        raise AssertionError("network access attempted during the golden run")

    monkeypatch.setattr(socket, "socket", no_network)
    monkeypatch.setattr(socket, "create_connection", no_network)

    config = load_config(GOLDEN_CONFIG)
    instances = load_dataset(GOLDEN_DATASET, DatasetKind.PAIRWISE)
    started = time.perf_counter()
    first = run_pipeline(_golden_gateway(), instances, DatasetKind.PAIRWISE,
                         config, cache_dir=str(tmp_path / "cache"))
    warm = run_pipeline(_golden_gateway(), instances, DatasetKind.PAIRWISE,
                        config, cache_dir=str(tmp_path / "cache"))
    fresh = run_pipeline(_golden_gateway(), instances, DatasetKind.PAIRWISE, config)
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0

    assert first.failures == {}
    for other in (warm, fresh):
        assert {c: r.p_final for c, r in first.reports.items()} == \
            {c: r.p_final for c, r in other.reports.items()}
        assert {c: r.p_nb for c, r in first.reports.items()} == \
            {c: r.p_nb for c, r in other.reports.items()}
        assert first.metrics.per_class_f1 == other.metrics.per_class_f1
        assert first.metrics.micro_avg_f1 == other.metrics.micro_avg_f1
        assert first.metrics.coverage == other.metrics.coverage

    pathogen = condition_id("noodles", PATHOGEN_CONDITION)
    mapping = first.mappings[pathogen]
    assert not mapping.abstained and mapping.final
    from anchor.harness import load_or_build_space
    noodles = next(i.scenario for i in instances if i.scenario.id == "noodles")
    space = load_or_build_space(_golden_gateway(), noodles, config,
                                str(tmp_path / "cache"))
    mapped_texts = {space.factors[fid].text for fid in mapping.final}
    assert FOOD_SAFETY_FACTOR in mapped_texts
    _passed(f"golden run deterministic across fresh and warm-cache runs with "
            f"no network in {elapsed:.1f}s; pathogen condition maps to "
            f"{sorted(mapped_texts)}")


def test_random_guess_calibration():
    rng = np.random.default_rng(314)
    classes = [PairwiseGold.CONTEXT1, PairwiseGold.CONTEXT2, PairwiseGold.SAME]
    golds = [classes[int(i)] for i in rng.integers(0, 3, size=10_000)]
    predictions = [PairwisePrediction(classes[int(i)].value)
                   for i in rng.integers(0, 3, size=10_000)]
    metrics = evaluate_pairwise(predictions, golds)
    assert abs(metrics.micro_avg_f1 - 0.333) <= 0.02
    _passed(f"uniform random predictions over balanced classes score micro F1 "
            f"{metrics.micro_avg_f1:.4f} = 0.333 +/- 0.02 over 10k draws")


def test_unknown_rate_curve():
    config = load_config(GOLDEN_CONFIG)
    instances = [i for i in load_dataset(GOLDEN_DATASET, DatasetKind.PAIRWISE)
                 if i.scenario.id == "noodles"]
    points = unknown_rate_curve(_golden_gateway(), instances[0].scenario,
                                instances, [0, 2, 4, 6, 8], config)
    rates = [p.unknown_rate for p in points]
    assert rates[0] == 1.0
    assert all(later <= earlier for earlier, later in zip(rates, rates[1:]))
    _passed(f"unknown rate {rates} is 1.0 at n=0 and non-increasing in n")
