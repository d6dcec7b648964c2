"""Domain types: normalization, invariants, space validation, persistence."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchor.config import AbductionConfig, PipelineConfig, config_from_dict
from anchor.domain import (
    Condition,
    Factor,
    FactorCluster,
    FactorLabel,
    FactorSpace,
    Provenance,
    Scenario,
    SpaceStats,
    dedupe_normalized,
    dump_space,
    factor_id,
    load_space,
    normalize_text,
    validate_factor_space,
)
from anchor.errors import ConfigError


class TestNormalization:
    def test_case_fold_and_whitespace(self):
        assert normalize_text("  Pace   Consistency \n") == "pace consistency"

    def test_unicode_fold(self):
        assert normalize_text("Straße") == normalize_text("STRASSE")

    def test_factor_id_is_stable_under_formatting(self):
        assert factor_id("Heart Rate") == factor_id("  heart   rate ")

    def test_distinct_texts_distinct_ids(self):
        assert factor_id("heart rate") != factor_id("heart rates")

    def test_dedupe_normalized(self):
        assert dedupe_normalized(["X", "x ", "y"]) == ["X", "y"]


class TestTypeInvariants:
    def test_scenario_rejects_equal_outcomes(self):
        with pytest.raises(ValueError):
            Scenario(id="s", description="d", outcome1="Same Thing", outcome2="same  thing")

    def test_scenario_allows_empty_description(self):
        s = Scenario(id="s", description="", outcome1="a", outcome2="b")
        assert s.description == ""

    def test_condition_requires_text(self):
        with pytest.raises(ValueError):
            Condition(id="c", text="   ", scenario_id="s")

    def test_factor_phi_bounds(self):
        with pytest.raises(ValueError):
            Factor(id="f", text="t", phi=1.5)

    def test_cluster_requires_members(self):
        with pytest.raises(ValueError):
            FactorCluster(theme="t", members=())


def _space(clusters, unclustered, factors):
    return FactorSpace(scenario_id="s", clusters=tuple(clusters),
                       unclustered=tuple(unclustered),
                       factors={f.id: f for f in factors})


def _factors(*texts):
    return [Factor.from_text(t, label=FactorLabel.NEUTRAL) for t in texts]


class TestValidateFactorSpace:
    def test_well_formed_space(self):
        f = _factors("a", "b", "c", "d")
        space = _space(
            [FactorCluster(theme="t1", members=(f[0].id, f[1].id)),
             FactorCluster(theme="t2", members=(f[2].id, f[3].id))],
            [], f)
        assert validate_factor_space(space) == []

    def test_duplicate_membership(self):
        f = _factors("a", "b")
        space = _space(
            [FactorCluster(theme="t1", members=(f[0].id,)),
             FactorCluster(theme="t2", members=(f[0].id, f[1].id))],
            [], f)
        assert f"duplicate membership: {f[0].id}" in validate_factor_space(space)

    def test_dangling_reference(self):
        f = _factors("a")
        space = _space([FactorCluster(theme="t", members=(f[0].id, "f9"))], [], f)
        assert "dangling reference: f9" in validate_factor_space(space)

    def test_unassigned_factor(self):
        f = _factors("a", "b")
        space = _space([FactorCluster(theme="t", members=(f[0].id,))], [], f)
        assert f"unassigned factor: {f[1].id}" in validate_factor_space(space)


_text = st.text(alphabet="abcdefgh XYZ", min_size=1, max_size=12).filter(
    lambda s: normalize_text(s))


@st.composite
def factor_spaces(draw):
    texts = draw(st.lists(_text, min_size=1, max_size=8,
                          unique_by=lambda t: normalize_text(t)))
    factors = []
    for text in texts:
        label = draw(st.sampled_from(list(FactorLabel)))
        phi = draw(st.one_of(st.none(), st.floats(min_value=0.0, max_value=1.0,
                                                  allow_nan=False)))
        provenance = None if phi is None else draw(st.sampled_from(list(Provenance)))
        factors.append(Factor.from_text(text, label=label, phi=phi, provenance=provenance))
    split = draw(st.integers(min_value=0, max_value=len(factors)))
    clustered, unclustered = factors[:split], factors[split:]
    clusters = []
    if clustered:
        proto = draw(st.one_of(st.none(), st.lists(
            st.floats(min_value=-2, max_value=2, allow_nan=False),
            min_size=3, max_size=3)))
        clusters.append(FactorCluster(
            theme=draw(_text), members=tuple(f.id for f in clustered),
            prototype=tuple(proto) if proto is not None else None))
    return FactorSpace(
        scenario_id="s1",
        clusters=tuple(clusters),
        unclustered=tuple(f.id for f in unclustered),
        factors={f.id: f for f in factors},
        stats=SpaceStats(rounds_used=draw(st.integers(0, 5)),
                         factors_generated=len(factors),
                         clusters_found=len(clusters)),
    )


class TestPersistence:
    @settings(max_examples=60, deadline=None)
    @given(factor_spaces())
    def test_round_trip_identity(self, space):
        assert load_space(dump_space(space)) == space

    def test_round_trip_preserves_float_bits(self):
        f = Factor.from_text("x", label=FactorLabel.NEUTRAL,
                             phi=0.1234567890123456789, provenance=Provenance.ELICITED)
        space = _space([FactorCluster(theme="t", members=(f.id,),
                                      prototype=(0.1 + 0.2, -1e-17))], [], [f])
        restored = load_space(dump_space(space))
        assert restored.factors[f.id].phi == f.phi
        assert restored.clusters[0].prototype == space.clusters[0].prototype

    def test_version_gate(self):
        with pytest.raises(ValueError):
            load_space('{"version": 99}')


class TestPipelineConfig:
    def test_defaults(self):
        config = PipelineConfig()
        config.validate()
        assert config.abduction == AbductionConfig(n_target=80, batch=10,
                                                   max_rounds=20, label_votes=3)
        assert (config.mapping.k1, config.mapping.k2) == (3, 5)
        assert config.mapping.alpha == 0.5
        assert (config.mapping.rounds, config.mapping.vote_ratio) == (3, 0.5)
        assert config.inference.epsilon_smooth == 0.5
        assert config.inference.elicit_retries == 20
        assert config.inference.temperature == 0.5
        assert config.decision.tau_dec == 0.9

    def test_long_context_profile(self):
        profile = PipelineConfig().long_context()
        a = profile.abduction
        assert (a.n_target, a.batch, a.max_rounds) == (40, 5, 10)

    def test_lop_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            config_from_dict({"inference": {"w_nb": 0.8, "w_cbn": 0.3}})

    def test_bma_ignores_weight_sum(self):
        config = config_from_dict(
            {"inference": {"w_nb": 0.8, "w_cbn": 0.3, "aggregator": "BMA"}})
        assert config.inference.aggregator == "BMA"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"mapping": {"k3": 1}})

    def test_bounds(self):
        with pytest.raises(ConfigError):
            config_from_dict({"inference": {"clamp": 0.6}})
        with pytest.raises(ConfigError):
            config_from_dict({"mapping": {"vote_ratio": 0.0}})

    def test_space_digest_changes_with_n_target(self):
        base = PipelineConfig()
        changed = config_from_dict({"abduction": {"n_target": 40}})
        assert base.space_digest() != changed.space_digest()
