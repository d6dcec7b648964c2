"""Core domain types shared by every pipeline stage.

Everything here is immutable after construction and safe to share across
concurrent tasks.  Probabilities are plain 64-bit floats; comparisons in
tests use an absolute tolerance of 1e-9 unless a tighter one is stated.
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional

SPACE_DOCUMENT_VERSION = 1

_WHITESPACE_RE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Canonical form used for factor dedup: case-fold, collapse whitespace, trim."""
    folded = unicodedata.normalize("NFKC", text).casefold()
    return _WHITESPACE_RE.sub(" ", folded).strip()


def factor_id(text: str) -> str:
    """Stable content-hash id of a factor's normalized text."""
    digest = hashlib.sha256(normalize_text(text).encode("utf-8")).hexdigest()
    return "f" + digest[:16]


class FactorLabel(Enum):
    SUPPORTS_O1 = "SupportsO1"
    SUPPORTS_O2 = "SupportsO2"
    NEUTRAL = "Neutral"


class Provenance(Enum):
    ELICITED = "Elicited"
    LABEL_INITIALIZED = "LabelInitialized"


@dataclass(frozen=True)
class Scenario:
    """A decision setting contrasting two competing outcomes.

    The description may be empty (fact-checking style inputs); the two
    outcome statements must differ after normalization.
    """

    id: str
    description: str
    outcome1: str
    outcome2: str

    def __post_init__(self) -> None:
        if normalize_text(self.outcome1) == normalize_text(self.outcome2):
            raise ValueError(f"scenario {self.id!r}: outcomes must differ")


@dataclass(frozen=True)
class Condition:
    """A downstream condition to be mapped onto the factor space."""

    id: str
    text: str
    scenario_id: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"condition {self.id!r}: text must be non-empty")


@dataclass(frozen=True)
class Factor:
    """One atomic evidence statement with its support label and strength.

    ``phi`` is the elicited probability that the factor, when active, favors
    outcome1; it is absent until elicitation (or label initialization) runs.
    """

    id: str
    text: str
    label: Optional[FactorLabel] = None
    phi: Optional[float] = None
    provenance: Optional[Provenance] = None

    def __post_init__(self) -> None:
        if self.phi is not None and not (0.0 <= self.phi <= 1.0):
            raise ValueError(f"factor {self.id!r}: phi={self.phi} outside [0, 1]")

    @classmethod
    def from_text(cls, text: str, **kwargs: Any) -> "Factor":
        return cls(id=factor_id(text), text=normalize_text(text), **kwargs)


@dataclass(frozen=True)
class FactorCluster:
    """A themed group of factors plus its retrieval prototype vector."""

    theme: str
    members: tuple[str, ...]
    prototype: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError(f"cluster {self.theme!r}: members must be non-empty")


@dataclass(frozen=True)
class SpaceStats:
    rounds_used: int = 0
    factors_generated: int = 0
    clusters_found: int = 0


@dataclass(frozen=True)
class FactorSpace:
    """Two-level factor hierarchy for one scenario.

    ``factors`` preserves generation order (used when the harness truncates
    the pool for coverage curves).  Clusters plus the unclustered pool must
    partition the factor table; ``validate_factor_space`` checks this.
    """

    scenario_id: str
    clusters: tuple[FactorCluster, ...]
    unclustered: tuple[str, ...]
    factors: dict[str, Factor]
    stats: SpaceStats = field(default_factory=SpaceStats)

    def ordered_ids(self) -> list[str]:
        return list(self.factors.keys())

    def is_empty(self) -> bool:
        return not self.factors


def validate_factor_space(space: FactorSpace) -> list[str]:
    """Return a description of every structural invariant violation.

    An empty list means the space is well-formed.  Never raises; each
    violation names the offending factor id.
    """
    violations: list[str] = []
    seen: set[str] = set()
    referenced: list[str] = []
    for cluster in space.clusters:
        referenced.extend(cluster.members)
    referenced.extend(space.unclustered)

    for fid in referenced:
        if fid in seen:
            violations.append(f"duplicate membership: {fid}")
        seen.add(fid)
        if fid not in space.factors:
            violations.append(f"dangling reference: {fid}")

    for fid in space.factors:
        if fid not in seen:
            violations.append(f"unassigned factor: {fid}")

    norms: dict[str, str] = {}
    for fid, factor in space.factors.items():
        norm = normalize_text(factor.text)
        if norm in norms:
            violations.append(f"duplicate text: {fid} vs {norms[norm]}")
        else:
            norms[norm] = fid
    return violations


def _factor_to_doc(factor: Factor) -> dict[str, Any]:
    return {
        "id": factor.id,
        "text": factor.text,
        "label": factor.label.value if factor.label is not None else None,
        "phi": factor.phi,
        "provenance": factor.provenance.value if factor.provenance is not None else None,
    }


def _factor_from_doc(doc: dict[str, Any]) -> Factor:
    return Factor(
        id=doc["id"],
        text=doc["text"],
        label=FactorLabel(doc["label"]) if doc.get("label") is not None else None,
        phi=doc.get("phi"),
        provenance=Provenance(doc["provenance"]) if doc.get("provenance") is not None else None,
    )


def space_to_document(space: FactorSpace) -> dict[str, Any]:
    """Self-describing persistence form; floats survive decimal round-trip."""
    return {
        "version": SPACE_DOCUMENT_VERSION,
        "scenario_id": space.scenario_id,
        "clusters": [
            {
                "theme": c.theme,
                "members": list(c.members),
                "prototype": list(c.prototype) if c.prototype is not None else None,
            }
            for c in space.clusters
        ],
        "unclustered": list(space.unclustered),
        "factors": {fid: _factor_to_doc(f) for fid, f in space.factors.items()},
        "stats": {
            "rounds_used": space.stats.rounds_used,
            "factors_generated": space.stats.factors_generated,
            "clusters_found": space.stats.clusters_found,
        },
    }


def space_from_document(doc: dict[str, Any]) -> FactorSpace:
    version = doc.get("version")
    if version != SPACE_DOCUMENT_VERSION:
        raise ValueError(f"unsupported factor-space document version: {version!r}")
    return FactorSpace(
        scenario_id=doc["scenario_id"],
        clusters=tuple(
            FactorCluster(
                theme=c["theme"],
                members=tuple(c["members"]),
                prototype=tuple(c["prototype"]) if c.get("prototype") is not None else None,
            )
            for c in doc["clusters"]
        ),
        unclustered=tuple(doc["unclustered"]),
        factors={fid: _factor_from_doc(f) for fid, f in doc["factors"].items()},
        stats=SpaceStats(
            rounds_used=doc["stats"]["rounds_used"],
            factors_generated=doc["stats"]["factors_generated"],
            clusters_found=doc["stats"]["clusters_found"],
        ),
    )


def dump_space(space: FactorSpace) -> str:
    return json.dumps(space_to_document(space), indent=2, sort_keys=False)


def load_space(text: str) -> FactorSpace:
    return space_from_document(json.loads(text))


def dedupe_normalized(texts: Iterable[str]) -> list[str]:
    """Drop later entries whose normalized form was already seen."""
    seen: set[str] = set()
    kept: list[str] = []
    for text in texts:
        norm = normalize_text(text)
        if norm and norm not in seen:
            seen.add(norm)
            kept.append(text)
    return kept
