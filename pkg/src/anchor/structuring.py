"""Turns the flat labeled pool into the two-level hierarchy: embed, reduce,
density-cluster, theme, prune, and compute cluster prototypes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .abduction import AbductionState
from .config import PipelineConfig
from .domain import (
    Factor,
    FactorCluster,
    FactorSpace,
    Scenario,
    SpaceStats,
    normalize_text,
)
from .errors import BackendError, DomainError, ParseError
from .gateway import Gateway, Tag, build_request, parse_theme
from .prompts import load_template


@dataclass(frozen=True)
class ReductionParams:
    n_components: int
    n_neighbors: int
    metric: str = "cosine"


@dataclass(frozen=True)
class ClusterParams:
    min_cluster_size: int
    metric: str = "euclidean"


def derive_reduction_params(n_factors: int) -> ReductionParams:
    if n_factors < 2:
        raise DomainError(f"need at least 2 factors to reduce, got {n_factors}")
    return ReductionParams(
        n_components=min(50, max(10, n_factors // 5)),
        n_neighbors=min(15, n_factors - 1),
    )


def derive_cluster_params(n_factors: int) -> ClusterParams:
    return ClusterParams(min_cluster_size=max(2, n_factors // 20))


# ---------------------------------------------------------------------------
# Pluggable reduction / clustering backends
# ---------------------------------------------------------------------------


def _pca_reduce(vectors: list[np.ndarray], params: ReductionParams) -> list[np.ndarray]:
    """Deterministic linear reduction: center, project on top singular vectors.

    Serves as the offline stand-in for a neighborhood-based reducer; signs are
    fixed so repeated runs give identical output.  When the target dimension
    is not below the input dimension the inputs pass through unchanged.
    """
    matrix = np.vstack(vectors)
    n, dim = matrix.shape
    if params.n_components >= dim:
        return [v.copy() for v in vectors]
    centered = matrix - matrix.mean(axis=0)
    try:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise BackendError(f"svd failed: {exc}") from exc
    available = min(params.n_components, vt.shape[0])
    components = vt[:available]
    # orient each direction so its largest-magnitude entry is positive
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    reduced = centered @ components.T
    if available < params.n_components:
        padding = np.zeros((n, params.n_components - available))
        reduced = np.hstack([reduced, padding])
    return [reduced[i] for i in range(n)]


def _umap_reduce(vectors: list[np.ndarray], params: ReductionParams) -> list[np.ndarray]:
    try:
        import umap  # type: ignore
    except ImportError as exc:
        raise BackendError("umap backend requested but umap-learn is not installed") from exc
    reducer = umap.UMAP(
        n_components=params.n_components,
        n_neighbors=params.n_neighbors,
        metric=params.metric,
        random_state=42,
    )
    reduced = reducer.fit_transform(np.vstack(vectors))
    return [np.asarray(reduced[i], dtype=np.float64) for i in range(len(vectors))]


REDUCTION_BACKENDS: dict[str, Callable[[list[np.ndarray], ReductionParams], list[np.ndarray]]] = {
    "pca": _pca_reduce,
    "umap": _umap_reduce,
}


def reduce_embeddings(vectors: Sequence[np.ndarray], params: ReductionParams,
                      backend: str = "pca") -> list[np.ndarray]:
    if len(vectors) < 2:
        raise DomainError("need at least 2 vectors to reduce")
    matrix = [np.asarray(v, dtype=np.float64) for v in vectors]
    for vector in matrix:
        if not np.all(np.isfinite(vector)):
            raise DomainError("embeddings must be finite")
    if backend not in REDUCTION_BACKENDS:
        raise BackendError(f"unknown reduction backend: {backend!r}")
    reduced = REDUCTION_BACKENDS[backend](matrix, params)
    if len(reduced) != len(vectors):
        raise BackendError("reduction backend changed the vector count")
    return reduced


def _hdbscan_cluster(reduced: list[np.ndarray],
                     params: ClusterParams) -> tuple[list[list[int]], list[int]]:
    from sklearn.cluster import HDBSCAN

    matrix = np.vstack(reduced)
    if matrix.shape[0] < params.min_cluster_size:
        return [], list(range(matrix.shape[0]))
    try:
        labels = HDBSCAN(min_cluster_size=params.min_cluster_size,
                         metric=params.metric).fit_predict(matrix)
    except Exception as exc:
        raise BackendError(f"clustering failed: {exc}") from exc
    groups: dict[int, list[int]] = {}
    noise: list[int] = []
    for index, label in enumerate(labels):
        if label < 0:
            noise.append(index)
        else:
            groups.setdefault(int(label), []).append(index)
    clusters = [groups[label] for label in sorted(groups)]
    return clusters, noise


CLUSTERING_BACKENDS: dict[str, Callable[[list[np.ndarray], ClusterParams],
                                        tuple[list[list[int]], list[int]]]] = {
    "hdbscan": _hdbscan_cluster,
}


def cluster_factors(reduced: Sequence[np.ndarray], params: ClusterParams,
                    backend: str = "hdbscan") -> tuple[list[list[int]], list[int]]:
    """Group row indexes into density clusters; the rest is noise.

    Clusters are disjoint, each at least ``min_cluster_size`` strong, and
    together with the noise list they cover every input index.
    """
    if len(reduced) < 2:
        raise DomainError("need at least 2 vectors to cluster")
    if backend not in CLUSTERING_BACKENDS:
        raise BackendError(f"unknown clustering backend: {backend!r}")
    vectors = [np.asarray(v, dtype=np.float64) for v in reduced]
    clusters, noise = CLUSTERING_BACKENDS[backend](vectors, params)
    for members in clusters:
        if len(members) < params.min_cluster_size:
            raise BackendError("backend emitted a cluster below min_cluster_size")
    covered = sorted(i for members in clusters for i in members) + sorted(noise)
    if sorted(covered) != list(range(len(reduced))):
        raise BackendError("backend did not partition the input indexes")
    return clusters, noise


# ---------------------------------------------------------------------------
# Theming, pruning, prototypes
# ---------------------------------------------------------------------------


def theme_clusters(
    gateway: Gateway,
    clusters: Sequence[Sequence[Factor]],
    temperature: float = 0.5,
    retries: int = 20,
    prompt_dir: Optional[str] = None,
) -> list[str]:
    """One concise theme per cluster; duplicates get a numeric suffix and a
    cluster whose response never parses falls back to ``Cluster <k>``."""
    template = load_template("theme", prompt_dir)
    themes: list[str] = []
    used: set[str] = set()
    for index, members in enumerate(clusters):
        if not members:
            raise ValueError("clusters must be non-empty")
        user = template.render_user(factors=json.dumps([f.text for f in members]))
        request = build_request(template, user, temperature, Tag.THEME, nonce=index)
        theme: Optional[str] = None
        for _ in range(max(1, retries)):
            raw = gateway.chat(request)
            try:
                theme = parse_theme(raw)
                break
            except ParseError:
                continue
        if theme is None:
            theme = f"Cluster {index + 1}"
        unique = theme
        suffix = 2
        while unique.casefold() in used:
            unique = f"{theme} ({suffix})"
            suffix += 1
        used.add(unique.casefold())
        themes.append(unique)
    return themes


def prune_redundancy(
    gateway: Gateway,
    themed: Sequence[tuple[str, Sequence[Factor]]],
    temperature: float = 0.5,
    retries: int = 20,
    prompt_dir: Optional[str] = None,
) -> list[tuple[str, list[Factor]]]:
    """Ask for a keep-list per cluster and drop the rest.

    Keep-list names outside the cluster are ignored; an empty effective
    keep-list (or a response that never parses) leaves the cluster unpruned.
    """
    template = load_template("prune", prompt_dir)
    pruned: list[tuple[str, list[Factor]]] = []
    for index, (theme, members) in enumerate(themed):
        user = template.render_user(
            theme=theme, factors=json.dumps([f.text for f in members]))
        request = build_request(template, user, temperature, Tag.REFLECT, nonce=index)
        try:
            keep_texts: list[str] = gateway.chat_structured(request, retries)
        except ParseError:
            pruned.append((theme, list(members)))
            continue
        keep_norms = {normalize_text(t) for t in keep_texts}
        kept = [f for f in members if normalize_text(f.text) in keep_norms]
        pruned.append((theme, kept if kept else list(members)))
    return pruned


def cluster_prototype(theme_vec: np.ndarray, member_vecs: Sequence[np.ndarray],
                      alpha: float) -> np.ndarray:
    """Blend of theme embedding and member mean, in the original space."""
    if len(member_vecs) == 0:
        raise DomainError("prototype needs at least one member vector")
    if not (0.0 <= alpha <= 1.0):
        raise DomainError(f"alpha={alpha} outside [0, 1]")
    mean = np.mean(np.vstack(member_vecs), axis=0)
    return alpha * np.asarray(theme_vec, dtype=np.float64) + (1.0 - alpha) * mean


def _single_cluster_space(scenario: Scenario, factors: Sequence[Factor],
                          gateway: Gateway, stats: SpaceStats) -> FactorSpace:
    embeds = gateway.embed([f.text for f in factors])
    prototype = np.mean(np.vstack(embeds), axis=0)
    cluster = FactorCluster(
        theme="default",
        members=tuple(f.id for f in factors),
        prototype=tuple(float(x) for x in prototype),
    )
    return FactorSpace(
        scenario_id=scenario.id,
        clusters=(cluster,),
        unclustered=(),
        factors={f.id: f for f in factors},
        stats=stats,
    )


def build_hierarchy(
    gateway: Gateway,
    scenario: Scenario,
    state: AbductionState,
    config: PipelineConfig,
    clustering_enabled: Optional[bool] = None,
) -> FactorSpace:
    """Full structuring pass over a labeled pool.

    Small pools (below twice the derived minimum cluster size) and disabled
    clustering both collapse to a single ``default`` cluster whose prototype
    is the member mean.  If the density step marks everything noise, the same
    fallback applies so retrieval never starves.
    """
    factors = list(state.pool)
    if clustering_enabled is None:
        clustering_enabled = config.structuring.clustering_enabled
    n = len(factors)
    if n == 0:
        return FactorSpace(scenario_id=scenario.id, clusters=(), unclustered=(),
                           factors={}, stats=SpaceStats(rounds_used=state.round))

    cluster_params = derive_cluster_params(n)
    base_stats = SpaceStats(rounds_used=state.round, factors_generated=n, clusters_found=0)
    if not clustering_enabled or n < 2 * cluster_params.min_cluster_size:
        return _single_cluster_space(scenario, factors, gateway, base_stats)

    embeds = gateway.embed([f.text for f in factors])
    reduced = reduce_embeddings(
        embeds, derive_reduction_params(n), backend=config.structuring.reduction_backend)
    cluster_indexes, noise_indexes = cluster_factors(
        reduced, cluster_params, backend=config.structuring.clustering_backend)
    if not cluster_indexes:
        return _single_cluster_space(scenario, factors, gateway, base_stats)

    member_groups = [[factors[i] for i in members] for members in cluster_indexes]
    themes = theme_clusters(
        gateway, member_groups, config.inference.temperature,
        config.inference.elicit_retries, config.prompt_dir)
    pruned = prune_redundancy(
        gateway, list(zip(themes, member_groups)), config.inference.temperature,
        config.inference.elicit_retries, config.prompt_dir)

    embed_by_id = {factors[i].id: embeds[i] for i in range(n)}
    theme_vecs = gateway.embed([theme for theme, _ in pruned])
    clusters: list[FactorCluster] = []
    surviving: set[str] = set()
    for (theme, members), theme_vec in zip(pruned, theme_vecs):
        member_vecs = [embed_by_id[f.id] for f in members]
        prototype = cluster_prototype(theme_vec, member_vecs, config.mapping.alpha)
        clusters.append(FactorCluster(
            theme=theme,
            members=tuple(f.id for f in members),
            prototype=tuple(float(x) for x in prototype),
        ))
        surviving.update(f.id for f in members)

    noise_ids = tuple(factors[i].id for i in noise_indexes)
    surviving.update(noise_ids)
    table = {f.id: f for f in factors if f.id in surviving}
    return FactorSpace(
        scenario_id=scenario.id,
        clusters=tuple(clusters),
        unclustered=noise_ids,
        factors=table,
        stats=SpaceStats(rounds_used=state.round, factors_generated=n,
                         clusters_found=len(clusters)),
    )
