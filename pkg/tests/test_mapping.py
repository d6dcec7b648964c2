"""Coarse-to-fine retrieval, vote filtering, reflective refinement."""

from __future__ import annotations

import json

import pytest

from anchor.config import config_from_dict
from anchor.domain import Condition, Factor, FactorCluster, FactorLabel, FactorSpace, Scenario
from anchor.gateway import Gateway, ScriptedEmbedder, Tag
from anchor.mapping import (
    map_condition,
    reflective_refine,
    retrieve_candidates,
    vote_filter,
    vote_threshold,
)

from conftest import FnChatProvider

SCENARIO = Scenario(id="s1", description="A student is preparing for final exams.",
                    outcome1="Studying more helps.", outcome2="Studying more hurts.")
CONDITION = Condition(id="c1", text="The student spends more time in the library.",
                      scenario_id="s1")


def _factor(text):
    return Factor.from_text(text, label=FactorLabel.NEUTRAL)


def _space(clusters, unclustered, factors):
    return FactorSpace(scenario_id="s1", clusters=tuple(clusters),
                       unclustered=tuple(f.id for f in unclustered),
                       factors={f.id: f for f in factors})


class TestVoteThreshold:
    def test_default_profile(self):
        assert vote_threshold(3, 0.5) == 2

    def test_rounding_up(self):
        assert vote_threshold(4, 0.5) == 2
        assert vote_threshold(5, 0.5) == 3

    def test_unanimity_ratio(self):
        assert vote_threshold(3, 1.0) == 3


class TestRetrieveCandidates:
    def test_small_cluster_fully_returned(self):
        factors = [_factor("alpha"), _factor("beta"), _factor("gamma")]
        space = _space(
            [FactorCluster(theme="t", members=tuple(f.id for f in factors),
                           prototype=(1.0, 0.0))],
            [], factors)
        vectors = {f.text: [1.0, 0.0] for f in factors}
        vectors[CONDITION.text] = [1.0, 0.0]
        gw = Gateway(chat_provider=FnChatProvider(lambda r: ""),
                     embedder=ScriptedEmbedder(vectors, dim=2))
        candidates = retrieve_candidates(gw, space, CONDITION, k1=3, k2=5)
        assert set(candidates) == {f.id for f in factors}

    def test_top_cluster_selected_by_prototype(self):
        a = [_factor("a one"), _factor("a two")]
        b = [_factor("b one"), _factor("b two")]
        space = _space(
            [FactorCluster(theme="A", members=tuple(f.id for f in a),
                           prototype=(1.0, 0.0)),
             FactorCluster(theme="B", members=tuple(f.id for f in b),
                           prototype=(0.0, 1.0))],
            [], a + b)
        vectors = {"a one": [1.0, 0.0], "a two": [0.9, 0.1],
                   "b one": [0.0, 1.0], "b two": [0.1, 0.9],
                   CONDITION.text: [1.0, 0.0]}
        gw = Gateway(chat_provider=FnChatProvider(lambda r: ""),
                     embedder=ScriptedEmbedder(vectors, dim=2))
        candidates = retrieve_candidates(gw, space, CONDITION, k1=1, k2=5)
        assert set(candidates) == {f.id for f in a}

    def test_unclustered_pool_searched_separately(self):
        clustered = [_factor("in cluster")]
        loose = [_factor("loose one"), _factor("loose two"), _factor("loose three")]
        space = _space(
            [FactorCluster(theme="A", members=(clustered[0].id,), prototype=(1.0, 0.0))],
            loose, clustered + loose)
        vectors = {
            "in cluster": [1.0, 0.0],
            "loose one": [0.8, 0.2], "loose two": [0.7, 0.3], "loose three": [-1.0, 0.0],
            CONDITION.text: [1.0, 0.0],
        }
        gw = Gateway(chat_provider=FnChatProvider(lambda r: ""),
                     embedder=ScriptedEmbedder(vectors, dim=2))
        candidates = retrieve_candidates(gw, space, CONDITION, k1=1, k2=2)
        texts = {space.factors[fid].text for fid in candidates}
        assert texts == {"in cluster", "loose one", "loose two"}

    def test_similarity_ties_break_on_ascending_id(self):
        factors = sorted([_factor(f"tied {i}") for i in range(4)], key=lambda f: f.id)
        space = _space(
            [FactorCluster(theme="t", members=tuple(f.id for f in factors),
                           prototype=(1.0, 0.0))],
            [], factors)
        vectors = {f.text: [1.0, 0.0] for f in factors}
        vectors[CONDITION.text] = [1.0, 0.0]
        gw = Gateway(chat_provider=FnChatProvider(lambda r: ""),
                     embedder=ScriptedEmbedder(vectors, dim=2))
        candidates = retrieve_candidates(gw, space, CONDITION, k1=1, k2=2)
        assert candidates == [factors[0].id, factors[1].id]

    def test_empty_space_rejected(self, hash_gateway):
        space = _space([], [], [])
        with pytest.raises(ValueError):
            retrieve_candidates(hash_gateway, space, CONDITION, k1=1, k2=1)


LIBRARY_FACTORS = [_factor("Better time management"), _factor("More stress"),
                   _factor("Increased social activities")]
LIBRARY_SPACE = _space(
    [FactorCluster(theme="Study", members=tuple(f.id for f in LIBRARY_FACTORS),
                   prototype=(1.0, 0.0))],
    [], LIBRARY_FACTORS)


def _vote_gateway(selector):
    def respond(request):
        assert request.tag in (Tag.MAP_VOTE, Tag.REFLECT)
        if request.tag is Tag.MAP_VOTE:
            return "Final answer: " + json.dumps({"answer": selector(request.nonce)})
        return "Final answer: " + json.dumps(selector(request.nonce))

    return Gateway(chat_provider=FnChatProvider(respond),
                   embedder=ScriptedEmbedder({}, dim=2))


class TestVoteFilter:
    def test_threshold_keeps_majority_selections(self):
        gw = _vote_gateway(lambda nonce: ["Better time management"])
        votes, voted = vote_filter(
            gw, SCENARIO, CONDITION, [f.id for f in LIBRARY_FACTORS],
            LIBRARY_SPACE, rounds=3, vote_ratio=0.5, retries=2)
        assert votes[LIBRARY_FACTORS[0].id] == 3
        assert votes[LIBRARY_FACTORS[2].id] == 0
        assert voted == {LIBRARY_FACTORS[0].id}

    def test_single_selection_below_threshold_excluded(self):
        gw = _vote_gateway(
            lambda nonce: ["More stress"] if nonce == 0 else ["Better time management"])
        votes, voted = vote_filter(
            gw, SCENARIO, CONDITION, [f.id for f in LIBRARY_FACTORS],
            LIBRARY_SPACE, rounds=3, vote_ratio=0.5, retries=2)
        assert votes[LIBRARY_FACTORS[1].id] == 1
        assert LIBRARY_FACTORS[1].id not in voted
        assert LIBRARY_FACTORS[0].id in voted

    def test_all_rounds_failing_gives_empty_voted(self):
        gw = Gateway(chat_provider=FnChatProvider(lambda r: "never parses"),
                     embedder=ScriptedEmbedder({}, dim=2))
        votes, voted = vote_filter(
            gw, SCENARIO, CONDITION, [f.id for f in LIBRARY_FACTORS],
            LIBRARY_SPACE, rounds=3, vote_ratio=0.5, retries=2)
        assert voted == frozenset()
        assert all(count == 0 for count in votes.values())

    def test_votes_bounded_by_rounds(self):
        gw = _vote_gateway(lambda nonce: ["Better time management", "More stress"])
        votes, _ = vote_filter(
            gw, SCENARIO, CONDITION, [f.id for f in LIBRARY_FACTORS],
            LIBRARY_SPACE, rounds=4, vote_ratio=0.75, retries=2)
        assert all(0 <= count <= 4 for count in votes.values())

    def test_selection_outside_candidates_ignored(self):
        gw = _vote_gateway(lambda nonce: ["Better time management", "Nonexistent"])
        votes, voted = vote_filter(
            gw, SCENARIO, CONDITION, [f.id for f in LIBRARY_FACTORS],
            LIBRARY_SPACE, rounds=3, vote_ratio=0.5, retries=2)
        assert set(votes) == {f.id for f in LIBRARY_FACTORS}
        assert voted == {LIBRARY_FACTORS[0].id}


BIKE_FACTORS = [_factor("Increased bike usage"), _factor("Higher car sales"),
                _factor("More traffic jams")]
BIKE_SPACE = _space(
    [FactorCluster(theme="Traffic", members=tuple(f.id for f in BIKE_FACTORS),
                   prototype=(1.0, 0.0))],
    [], BIKE_FACTORS)
BIKE_CONDITION = Condition(id="c2", text="City implements a bike-sharing program.",
                           scenario_id="s1")


class TestReflectiveRefine:
    def test_keep_list_applied(self):
        gw = _vote_gateway(
            lambda nonce: ["Increased bike usage", "More traffic jams"])
        voted = frozenset(f.id for f in BIKE_FACTORS)
        final = reflective_refine(gw, BIKE_CONDITION, voted, BIKE_SPACE, retries=2)
        assert final == {BIKE_FACTORS[0].id, BIKE_FACTORS[2].id}

    def test_unknown_keep_names_ignored(self):
        gw = _vote_gateway(lambda nonce: ["Increased bike usage", "Not A Factor"])
        voted = frozenset([BIKE_FACTORS[0].id, BIKE_FACTORS[1].id])
        final = reflective_refine(gw, BIKE_CONDITION, voted, BIKE_SPACE, retries=2)
        assert final == {BIKE_FACTORS[0].id}

    def test_empty_voted_short_circuits(self):
        gw = Gateway(chat_provider=FnChatProvider(
            lambda r: pytest.fail("no call expected")),
            embedder=ScriptedEmbedder({}, dim=2))
        assert reflective_refine(gw, BIKE_CONDITION, frozenset(), BIKE_SPACE) == frozenset()
        assert gw.ledger.total_calls() == 0

    def test_parse_failure_keeps_voted(self):
        gw = Gateway(chat_provider=FnChatProvider(lambda r: "not a list"),
                     embedder=ScriptedEmbedder({}, dim=2))
        voted = frozenset(f.id for f in BIKE_FACTORS)
        assert reflective_refine(gw, BIKE_CONDITION, voted, BIKE_SPACE, retries=2) == voted


class TestMapCondition:
    def _gateway(self, select):
        vectors = {f.text: [1.0, 0.0] for f in LIBRARY_FACTORS}
        vectors[CONDITION.text] = [1.0, 0.0]

        def respond(request):
            if request.tag is Tag.MAP_VOTE:
                return "Final answer: " + json.dumps({"answer": select})
            if request.tag is Tag.REFLECT:
                return "Final answer: " + json.dumps(select)
            raise AssertionError(request.tag)

        return Gateway(chat_provider=FnChatProvider(respond),
                       embedder=ScriptedEmbedder(vectors, dim=2))

    def _config(self):
        return config_from_dict({"structuring": {"embed_dim": 2},
                                 "inference": {"elicit_retries": 2}})

    def test_subset_chain_and_result(self):
        gw = self._gateway(["Better time management"])
        result = map_condition(gw, LIBRARY_SPACE, SCENARIO, CONDITION, self._config())
        assert result.final <= result.voted <= result.candidates
        assert result.final == {LIBRARY_FACTORS[0].id}
        assert not result.abstained

    def test_empty_votes_abstain(self):
        gw = self._gateway([])
        result = map_condition(gw, LIBRARY_SPACE, SCENARIO, CONDITION, self._config())
        assert result.abstained
        assert result.final == frozenset()
        # refinement must not run on an empty voted set
        tags = [r.tag for r in gw.chat_provider.requests]
        assert Tag.REFLECT not in tags

    def test_deterministic(self):
        first = map_condition(self._gateway(["More stress"]), LIBRARY_SPACE,
                              SCENARIO, CONDITION, self._config())
        second = map_condition(self._gateway(["More stress"]), LIBRARY_SPACE,
                               SCENARIO, CONDITION, self._config())
        assert first == second

    def test_empty_space_abstains_without_calls(self):
        gw = self._gateway([])
        space = _space([], [], [])
        result = map_condition(gw, space, SCENARIO, CONDITION, self._config())
        assert result.abstained
        assert gw.ledger.total_calls() == 0

    def test_seed_recorded(self):
        config = config_from_dict({"structuring": {"embed_dim": 2},
                                   "mapping": {"shuffle_seed": 42},
                                   "inference": {"elicit_retries": 2}})
        gw = self._gateway(["Better time management"])
        result = map_condition(gw, LIBRARY_SPACE, SCENARIO, CONDITION, config)
        assert result.seed == 42

    def test_shuffle_seed_changes_presentation_order(self):
        def prompt_for(seed):
            config = config_from_dict({"structuring": {"embed_dim": 2},
                                       "mapping": {"shuffle_seed": seed},
                                       "inference": {"elicit_retries": 2}})
            gw = self._gateway(["Better time management"])
            map_condition(gw, LIBRARY_SPACE, SCENARIO, CONDITION, config)
            votes = [r for r in gw.chat_provider.requests if r.tag is Tag.MAP_VOTE]
            return votes[0].turns[-1][1]

        prompts = {prompt_for(seed) for seed in range(6)}
        assert len(prompts) > 1  # order is seed-driven, not fixed
        assert prompt_for(3) == prompt_for(3)  # and stable per seed
