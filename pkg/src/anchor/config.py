"""Pipeline configuration with defaults matching the standard run profile."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class AbductionConfig:
    n_target: int = 80
    batch: int = 10
    max_rounds: int = 20
    label_votes: int = 3  # forced odd by the voting stage


@dataclass(frozen=True)
class StructuringConfig:
    clustering_enabled: bool = True
    reduction_backend: str = "pca"  # or "umap" when the optional package is installed
    clustering_backend: str = "hdbscan"
    embed_dim: int = 384


@dataclass(frozen=True)
class MappingConfig:
    k1: int = 3
    k2: int = 5
    alpha: float = 0.5
    rounds: int = 3
    vote_ratio: float = 0.5
    shuffle_seed: int = 0  # candidate presentation order; recorded per mapping


@dataclass(frozen=True)
class InferenceConfig:
    epsilon_smooth: float = 0.5  # Laplace count for latent CPTs from label counts
    clamp: float = 0.01  # probability clamp keeping parameters away from {0, 1}
    tau: float = 0.0  # abstain when max(p, 1-p) < tau
    w_nb: float = 0.5
    w_cbn: float = 0.5
    aggregator: str = "LOP"  # or "BMA"
    elicit_retries: int = 20
    temperature: float = 0.5


@dataclass(frozen=True)
class DecisionConfig:
    tau_dec: float = 0.9  # fact-checking support threshold (strict >)


@dataclass(frozen=True)
class PipelineConfig:
    abduction: AbductionConfig = field(default_factory=AbductionConfig)
    structuring: StructuringConfig = field(default_factory=StructuringConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    max_concurrency: int = 4
    prompt_dir: str | None = None

    def validate(self) -> None:
        a, m, i, d = self.abduction, self.mapping, self.inference, self.decision
        checks = [
            (a.n_target >= 0, "abduction.n_target must be >= 0"),
            (a.batch >= 1, "abduction.batch must be >= 1"),
            (a.max_rounds >= 1, "abduction.max_rounds must be >= 1"),
            (a.label_votes >= 1, "abduction.label_votes must be >= 1"),
            (m.k1 >= 1, "mapping.k1 must be >= 1"),
            (m.k2 >= 1, "mapping.k2 must be >= 1"),
            (0.0 <= m.alpha <= 1.0, "mapping.alpha must lie in [0, 1]"),
            (m.rounds >= 1, "mapping.rounds must be >= 1"),
            (0.0 < m.vote_ratio <= 1.0, "mapping.vote_ratio must lie in (0, 1]"),
            (i.epsilon_smooth > 0.0, "inference.epsilon_smooth must be positive"),
            (0.0 < i.clamp < 0.5, "inference.clamp must lie in (0, 0.5)"),
            (0.0 <= i.tau < 1.0, "inference.tau must lie in [0, 1)"),
            (0.0 <= i.w_nb <= 1.0, "inference.w_nb must lie in [0, 1]"),
            (0.0 <= i.w_cbn <= 1.0, "inference.w_cbn must lie in [0, 1]"),
            (i.aggregator in ("LOP", "BMA"), "inference.aggregator must be LOP or BMA"),
            (i.elicit_retries >= 1, "inference.elicit_retries must be >= 1"),
            (0.0 < d.tau_dec < 1.0, "decision.tau_dec must lie in (0, 1)"),
            (self.max_concurrency >= 1, "max_concurrency must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if i.aggregator == "LOP" and abs(i.w_nb + i.w_cbn - 1.0) > 1e-9:
            raise ConfigError("inference weights must sum to 1 under LOP")

    def long_context(self) -> "PipelineConfig":
        """Profile for long-document inputs: smaller pool, shorter loop."""
        return replace(self, abduction=AbductionConfig(n_target=40, batch=5, max_rounds=10,
                                                       label_votes=self.abduction.label_votes))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def space_digest(self, extra: str = "") -> str:
        """Digest over the sections that determine factor-space construction."""
        payload = json.dumps(
            {
                "abduction": asdict(self.abduction),
                "structuring": asdict(self.structuring),
                "extra": extra,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _merge_section(cls: type, data: dict[str, Any], section: str) -> Any:
    payload = data.get(section, {})
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {section!r} must be a mapping")
    valid = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
    unknown = set(payload) - valid
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**payload)


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    config = PipelineConfig(
        abduction=_merge_section(AbductionConfig, data, "abduction"),
        structuring=_merge_section(StructuringConfig, data, "structuring"),
        mapping=_merge_section(MappingConfig, data, "mapping"),
        inference=_merge_section(InferenceConfig, data, "inference"),
        decision=_merge_section(DecisionConfig, data, "decision"),
        max_concurrency=data.get("max_concurrency", 4),
        prompt_dir=data.get("prompt_dir"),
    )
    config.validate()
    return config


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a JSON object")
    return config_from_dict(data)
