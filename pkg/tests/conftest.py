"""Shared test doubles."""

from __future__ import annotations

from typing import Callable, Optional

import pytest

from anchor.gateway import ChatRequest, Gateway, HashEmbedder


class FnChatProvider:
    """Provider backed by a plain function of the request; records calls."""

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self.fn = fn
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> tuple[str, Optional[dict[str, int]]]:
        self.requests.append(request)
        return self.fn(request), None


def make_gateway(fn: Callable[[ChatRequest], str], dim: int = 16,
                 embedder=None, max_concurrency: int = 1) -> Gateway:
    return Gateway(
        chat_provider=FnChatProvider(fn),
        embedder=embedder or HashEmbedder(dim),
        max_concurrency=max_concurrency,
    )


@pytest.fixture
def hash_gateway() -> Gateway:
    def no_chat(request: ChatRequest) -> str:
        raise AssertionError(f"unexpected chat call: {request.tag}")

    return make_gateway(no_chat)


def random_latent_model(rng, max_latents: int = 4, max_factors: int = 10,
                        clamp: float = 0.01):
    """Random smoothed-parameter latent model plus a random evidence set."""
    from anchor.inference import EvidenceSet, LatentBayesModel, LatentVariable

    k = int(rng.integers(1, max_latents + 1))
    n = int(rng.integers(max(1, k), max_factors + 1))
    ids = [f"f{i}" for i in range(n)]
    params = {fid: float(rng.uniform(clamp, 1.0 - clamp)) for fid in ids}
    owners = list(rng.integers(0, k, size=n))
    for latent_index in range(k):  # every latent needs at least one member
        if latent_index not in owners:
            owners[int(rng.integers(0, n))] = latent_index
    latents = []
    for latent_index in range(sorted(set(owners))[-1] + 1):
        members = tuple(fid for fid, owner in zip(ids, owners) if owner == latent_index)
        if not members:
            continue
        latents.append(LatentVariable(
            name=f"L{latent_index}",
            members=members,
            p_given_o1=float(rng.uniform(clamp, 1.0 - clamp)),
            p_given_o2=float(rng.uniform(clamp, 1.0 - clamp)),
        ))
    model = LatentBayesModel(scenario_id="s", factor_params=params,
                             latents=tuple(latents))
    evidence = EvidenceSet.of([fid for fid in ids if rng.random() < 0.5])
    return model, evidence
