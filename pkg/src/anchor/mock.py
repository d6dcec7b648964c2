"""Offline chat-provider doubles.

Two flavors:

* :class:`ReplayChatProvider` — verbatim responses keyed by (tag, request
  digest).  A missing fixture raises; golden tests must not silently degrade.
* :class:`ScriptedChatProvider` — a pure function of the request driven by a
  per-scenario playbook plus deterministic text rules, used for end-to-end
  runs where enumerating every digest up front is impractical.
"""

from __future__ import annotations

import json
import re
from typing import Any, Optional, Sequence

from .errors import MockFixtureMissing
from .gateway import ChatRequest, Tag, request_digest

_STOPWORDS = {
    "the", "and", "that", "this", "with", "from", "have", "has", "are", "was",
    "were", "been", "being", "for", "not", "but", "its", "their", "would",
    "could", "should", "than", "then", "them", "they", "will", "can", "may",
    "much", "more", "most", "very", "into", "over", "under", "such", "when",
    "where", "while", "because", "about", "after", "before", "does", "doing",
    "present", "any", "also", "helps", "help",
}

_TOKEN_RE = re.compile(r"[a-z]{4,}")


def text_tokens(text: str) -> set[str]:
    """Case-folded alphabetic tokens of length >= 4, minus stopwords."""
    return {tok for tok in _TOKEN_RE.findall(text.casefold()) if tok not in _STOPWORDS}


def keyword_overlap(condition_text: str, factor_text: str) -> bool:
    return bool(text_tokens(condition_text) & text_tokens(factor_text))


class ReplayChatProvider:
    """Replays fixture text keyed by (tag, canonical request digest)."""

    def __init__(self, fixtures: dict[str, str]):
        # keys are "<TagValue>:<digest>"
        self.fixtures = dict(fixtures)

    @staticmethod
    def key_for(request: ChatRequest) -> str:
        return f"{request.tag.value}:{request_digest(request)}"

    def complete(self, request: ChatRequest) -> tuple[str, Optional[dict[str, int]]]:
        key = self.key_for(request)
        if key not in self.fixtures:
            raise MockFixtureMissing(f"no fixture for {key} (tag={request.tag.value})")
        return self.fixtures[key], None


def _last_user_turn(request: ChatRequest) -> str:
    for role, text in reversed(request.turns):
        if role == "user":
            return text
    return ""


def _extract_field(text: str, name: str) -> str:
    match = re.search(rf"^{name}: (.*)$", text, re.MULTILINE)
    return match.group(1).strip() if match else ""


def _extract_json_array(text: str) -> list[str]:
    decoder = json.JSONDecoder()
    best: list[str] = []
    for pos, char in enumerate(text):
        if char != "[":
            continue
        try:
            value, _ = decoder.raw_decode(text, pos)
        except ValueError:
            continue
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            best = value
    return best


class ScriptedChatProvider:
    """Deterministic responder driven by a playbook.

    The playbook maps a scenario description to its script::

        {
          "scenarios": {
            "<scenario description>": {
              "rounds": [["sentence mentioning 'factor a'", ...], ...],
              "labels": {"factor a": "Outcome1", ...},
              "label_votes": {"factor a": ["Outcome1", "Outcome2", "Both"]},
              "phi": {"factor a": 0.8, ...},
              "latents": [{"name": "SomeLat", "factors": ["factor a", ...]}],
              "latent_probs": {"SomeLat": [0.8, 0.2]},
              "themes": [{"members": ["factor a", ...], "theme": "Some Theme"}],
              "map_extra": {"<condition substring>": ["factor a"]},
              "map_block": {"<condition substring>": ["factor b"]},
              "reflect_drop": {"<condition substring>": ["factor c"]}
            }
          }
        }

    Sentences embed factor names in single quotes; factor extraction returns
    exactly the quoted spans, so the pool a script produces is explicit.
    Mapping votes use keyword overlap between condition and factor text,
    adjusted by the per-condition ``map_extra``/``map_block`` lists.
    """

    def __init__(self, playbook: dict[str, Any]):
        self.scenarios: dict[str, dict[str, Any]] = playbook.get("scenarios", {})

    # -- scenario lookup ----------------------------------------------------

    def _script_for(self, text: str) -> dict[str, Any]:
        scenario = _extract_field(text, "Scenario")
        if scenario in self.scenarios:
            return self.scenarios[scenario]
        for description, script in self.scenarios.items():
            if description and description in text:
                return script
        return {}

    @staticmethod
    def _condition_overrides(script: dict[str, Any], key: str,
                             condition: str) -> list[str]:
        for needle, names in script.get(key, {}).items():
            if needle in condition:
                return list(names)
        return []

    # -- per-tag responses --------------------------------------------------

    def complete(self, request: ChatRequest) -> tuple[str, Optional[dict[str, int]]]:
        text = _last_user_turn(request)
        handler = {
            Tag.SENTENCE_GEN: self._sentences,
            Tag.FACTOR_EXTRACT: self._factors,
            Tag.LABEL_VOTE: self._label,
            Tag.THEME: self._theme,
            Tag.MAP_VOTE: self._map_vote,
            Tag.REFLECT: self._reflect,
            Tag.PHI_ELICIT: self._phi,
            Tag.LATENT_DISCOVER: self._latents,
            Tag.LATENT_ELICIT: self._latent_probs,
        }[request.tag]
        return handler(request, text), None

    def _sentences(self, request: ChatRequest, text: str) -> str:
        script = self._script_for(text)
        rounds: Sequence[Sequence[str]] = script.get("rounds", [])
        index = request.nonce
        lines = rounds[index] if index < len(rounds) else ["Nothing further stands out."]
        return "\n".join(f"{i + 1}. {line}" for i, line in enumerate(lines))

    def _factors(self, request: ChatRequest, text: str) -> str:
        names = re.findall(r"'([^']+)'", text)
        return "Final answer: " + json.dumps(names)

    def _label(self, request: ChatRequest, text: str) -> str:
        script = self._script_for(text)
        factor = _extract_field(text, "Factor")
        votes = script.get("label_votes", {}).get(factor)
        if votes:
            word = votes[request.nonce % len(votes)]
        else:
            word = script.get("labels", {}).get(factor, "Both")
        return f"Final answer: {json.dumps({factor: word})}"

    def _theme(self, request: ChatRequest, text: str) -> str:
        members = set(_extract_json_array(text))
        for script in self.scenarios.values():
            for entry in script.get("themes", []):
                if set(entry["members"]) == members:
                    return entry["theme"]
        first = sorted(members)[0] if members else "misc"
        return " ".join(word.capitalize() for word in first.split()[:2])

    def _map_vote(self, request: ChatRequest, text: str) -> str:
        script = self._script_for(text)
        condition = _extract_field(text, "Condition")
        candidates = _extract_json_array(text)
        extra = self._condition_overrides(script, "map_extra", condition)
        block = self._condition_overrides(script, "map_block", condition)
        selected = [
            name for name in candidates
            if name not in block and (name in extra or keyword_overlap(condition, name))
        ]
        return "Final answer: " + json.dumps({"answer": selected})

    def _reflect(self, request: ChatRequest, text: str) -> str:
        factors = _extract_json_array(text)
        if text.startswith("Theme:"):
            # redundancy pruning: scripts may name duplicates to drop
            script_drop: list[str] = []
            for script in self.scenarios.values():
                script_drop.extend(script.get("prune_drop", []))
            kept = [name for name in factors if name not in script_drop]
        else:
            # the refinement prompt carries no scenario line; search every script
            condition = _extract_field(text, "Condition")
            drop: list[str] = []
            for script in self.scenarios.values():
                drop.extend(self._condition_overrides(script, "reflect_drop", condition))
            kept = [name for name in factors if name not in drop]
        return "Final answer: " + json.dumps(kept)

    def _phi(self, request: ChatRequest, text: str) -> str:
        script = self._script_for(text)
        factors = _extract_json_array(text)
        phi_map = script.get("phi", {})
        labels = script.get("labels", {})
        defaults = {"Outcome1": 0.75, "Outcome2": 0.25}
        estimates = {
            name: phi_map.get(name, defaults.get(labels.get(name, ""), 0.5))
            for name in factors
        }
        return "Final answer: " + json.dumps(estimates)

    def _latents(self, request: ChatRequest, text: str) -> str:
        # the discovery prompt lists only factors; match entries from every script
        factors = set(_extract_json_array(text))
        latents = []
        for script in self.scenarios.values():
            for entry in script.get("latents", []):
                members = [name for name in entry["factors"] if name in factors]
                if members:
                    latents.append({"name": entry["name"], "factors": members})
        if not latents:
            latents = [{"name": "MainLat", "factors": sorted(factors)}]
        return "Final answer: " + json.dumps({"latents": latents})

    def _latent_probs(self, request: ChatRequest, text: str) -> str:
        names = re.findall(r'"name"\s*:\s*"([^"]+)"', text)
        merged: dict[str, list[float]] = {}
        for script in self.scenarios.values():
            merged.update(script.get("latent_probs", {}))
        pairs = {name: merged.get(name, [0.7, 0.3]) for name in names}
        return "Final answer: " + json.dumps(pairs)
