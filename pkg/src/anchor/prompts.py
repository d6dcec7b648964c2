"""Embedded prompt templates, overridable from a prompt directory.

Each template bundles a system instruction, optional few-shot turns, and a
user-turn format string.  A config ``prompt_dir`` may override any template
with a JSON file named ``<template>.json`` holding the same three fields.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError


@dataclass(frozen=True)
class PromptTemplate:
    system: str
    examples: tuple[tuple[str, str], ...]
    user_template: str

    def render_user(self, **kwargs: str) -> str:
        return self.user_template.format(**kwargs)


_SENTENCE_GEN = PromptTemplate(
    system=(
        "You are an AI assistant that helps people make decisions. Generate the "
        "requested number of diverse supporting or refuting sentences for the given "
        "scenario, comparing the two outcomes. Cover varied reasoning chains and "
        "broad aspects. Answer with a numbered list only."
    ),
    examples=(
        (
            "Scenario: Alice is training for a marathon.\n"
            "Outcome: Running on a treadmill improves her endurance.\n"
            "Opposite Outcome: Running on a treadmill does not improve her endurance.\n"
            "Generate 2 sentences.",
            "1. Treadmill training allows Alice to maintain a consistent pace and monitor "
            "heart rate, boosting her aerobic capacity.\n"
            "2. The treadmill's adjustable incline simulates hill workouts, increasing leg "
            "strength and stamina.",
        ),
        (
            "Scenario: Bob studies every evening.\n"
            "Outcome: Studying in short, focused bursts enhances retention.\n"
            "Opposite Outcome: Studying in short, focused bursts does not enhance retention.\n"
            "Generate 2 sentences.",
            "1. Brief study sessions with breaks prevent mental fatigue and improve "
            "long-term recall.\n"
            "2. Frequent reviews in small intervals reinforce memory pathways, aiding "
            "retention.",
        ),
    ),
    user_template=(
        "Scenario: {scenario}\n"
        "Outcome: {outcome1}\n"
        "Opposite Outcome: {outcome2}\n"
        "Generate {batch} sentences."
    ),
)

_FACTOR_EXTRACT = PromptTemplate(
    system=(
        "Extract distinct factors from these sentences. Think step by step about what "
        "factors are mentioned, then provide your final answer as a JSON array."
    ),
    examples=(
        (
            "Extract distinct factors from these sentences as a JSON array.\n"
            "1. Treadmill training allows maintaining a consistent pace and monitoring "
            "heart rate, boosting aerobic capacity.\n"
            "2. The treadmill's adjustable incline simulates hill workouts, increasing "
            "leg strength and stamina.",
            "Let me analyze these sentences to identify the key factors:\n"
            "- Pace consistency (ability to maintain steady speed)\n"
            "- Heart rate monitoring (tracking cardiovascular response)\n"
            "- Adjustable incline (variable difficulty/terrain simulation)\n"
            "- Leg strength (muscle development)\n"
            'Final answer: ["Pace consistency","Heart rate monitoring",'
            '"Adjustable incline","Leg strength"]',
        ),
        (
            "Extract distinct factors from these sentences as a JSON array.\n"
            "1. Group work requires coordination between team members.\n"
            "2. Individual tasks allow for personal control and efficiency.",
            "Let me identify the key factors from these sentences:\n"
            "- Coordination requirements (need for team synchronization)\n"
            "- Personal control (individual autonomy)\n"
            "- Efficiency (productivity/effectiveness)\n"
            "- Team collaboration (working together)\n"
            'Final answer: ["Coordination requirements","Personal control",'
            '"Efficiency","Team collaboration"]',
        ),
    ),
    user_template="Extract distinct factors from these sentences as a JSON array.\n{sentences}",
)

_LABEL_VOTE = PromptTemplate(
    system=(
        "Decide which outcome the factor supports. Reason briefly (1-2 sentences), then "
        "provide your final answer as a JSON object. Keep the explanation as short as "
        "possible, no extra commentary."
    ),
    examples=(
        (
            "Scenario: Alice trains for a marathon.\n"
            "Outcome1: Treadmill running improves endurance.\n"
            "Outcome2: Treadmill running does not improve endurance.\n"
            "Factor: Pace consistency\n"
            "Decide which outcome this factor supports: Outcome1, Outcome2, or Both. "
            "Think step by step, then answer in JSON.",
            "Pace consistency forces a steady speed, building aerobic capacity and "
            "sustained effort.\n"
            'Final answer: {"Pace consistency": "Outcome1"}',
        ),
        (
            "Scenario: Alice trains for a marathon.\n"
            "Outcome1: Treadmill running improves endurance.\n"
            "Outcome2: Treadmill running does not improve endurance.\n"
            "Factor: Weather conditions\n"
            "Decide which outcome this factor supports: Outcome1, Outcome2, or Both. "
            "Think step by step, then answer in JSON.",
            "Treadmill gives consistent conditions, yet outdoor weather readies race "
            "adaptability.\n"
            'Final answer: {"Weather conditions": "Both"}',
        ),
    ),
    user_template=(
        "Scenario: {scenario}\n"
        "Outcome1: {outcome1}\n"
        "Outcome2: {outcome2}\n"
        "Factor: {factor}\n"
        "Decide which outcome this factor supports: Outcome1, Outcome2, or Both. "
        "Think step by step, then answer in JSON."
    ),
)

_THEME = PromptTemplate(
    system=(
        "Generate a concise English theme name (1-3 words) that captures the common "
        "topic of these factors. Return only the theme name, no explanation."
    ),
    examples=(
        (
            'Generate a theme name for these related factors:\n'
            '["energy expenditure", "energy transfer efficiency"]',
            "Energy Efficiency",
        ),
        (
            'Generate a theme name for these related factors:\n'
            '["precision control", "better control (accuracy)"]',
            "Control Precision",
        ),
    ),
    user_template="Generate a theme name for these related factors:\n{factors}",
)

_PRUNE = PromptTemplate(
    system=(
        "You are deduplicating a list of factors that belong to one theme. Remove "
        "entries that are semantic duplicates of another entry; keep every factor that "
        "adds distinct meaning. Think briefly, then provide 'Final answer:' followed by "
        "a JSON array of the factors to keep, copied verbatim from the list."
    ),
    examples=(
        (
            "Theme: Energy Efficiency\n"
            'Factors: ["energy efficiency", "energy efficiency (overall)", "energy cost"]\n'
            "Task: Keep the distinct factors, drop semantic duplicates.",
            '"energy efficiency (overall)" restates "energy efficiency"; "energy cost" '
            "is distinct.\n"
            'Final answer: ["energy efficiency", "energy cost"]',
        ),
    ),
    user_template=(
        "Theme: {theme}\n"
        "Factors: {factors}\n"
        "Task: Keep the distinct factors, drop semantic duplicates."
    ),
)

_MAP_VOTE = PromptTemplate(
    system=(
        "You are an expert at analyzing logical relationships between conditions and "
        "factors. Given a condition and a list of candidate factors, select factors "
        "that have reasonable connections to the condition. Be inclusive rather than "
        "restrictive."
    ),
    examples=(
        (
            "Scenario: A student is preparing for final exams.\n"
            "Condition: The student spends more time in the library.\n"
            'Candidate factors: ["Better time management", "More stress", '
            '"Increased social activities"]\n'
            "Task: Select the factor list that is most reasonably related to the given "
            "condition. Think step by step about each factor's relevance, then provide "
            "your selection. Please respond with your reasoning followed by "
            '"Final answer:" and a JSON object in this exact format: '
            '{"answer": ["factor1", "factor2", ...]}.',
            "Let me analyze each factor:\n"
            '- "Better time management": Spending more time in the library suggests the '
            "student is organizing their study schedule better and dedicating focused "
            "time to studying. This is directly related.\n"
            '- "More stress": While exam preparation can be stressful, spending more '
            "time in the library is typically a positive study behavior, not "
            "necessarily indicating increased stress.\n"
            '- "Increased social activities": Libraries are generally quiet study '
            "spaces, not social venues. More library time would likely mean less "
            "social activities.\n"
            'Final answer: {"answer": ["Better time management"]}',
        ),
        (
            "Scenario: A company introduces remote working policies.\n"
            "Condition: Employees can work from home twice a week.\n"
            'Candidate factors: ["Improved work-life balance", "Reduced office costs", '
            '"More commuting"]\n'
            "Task: Select the factor list that is most reasonably related to the given "
            "condition. Think step by step about each factor's relevance, then provide "
            "your selection. Please respond with your reasoning followed by "
            '"Final answer:" and a JSON object in this exact format: '
            '{"answer": ["factor1", "factor2", ...]}.',
            "Let me evaluate each factor:\n"
            '- "Improved work-life balance": Working from home twice a week allows '
            "employees to save commute time, have more flexibility, and better "
            "integrate work with personal life. This is directly related.\n"
            '- "Reduced office costs": With employees working from home part-time, the '
            "company needs less office space, utilities, and resources. This is a "
            "logical consequence.\n"
            '- "More commuting": This is contradictory; working from home twice a week '
            "would actually reduce commuting, not increase it.\n"
            'Final answer: {"answer": ["Improved work-life balance","Reduced office costs"]}',
        ),
    ),
    user_template=(
        "Scenario: {scenario}\n"
        "Condition: {condition}\n"
        "Candidate factors: {candidates}\n"
        "Task: Select the factor list that is most reasonably related to the given "
        "condition. Think step by step about each factor's relevance, then provide "
        "your selection. Please respond with your reasoning followed by "
        '"Final answer:" and a JSON object in this exact format: '
        '{{"answer": ["factor1", "factor2", ...]}}.'
    ),
)

_REFLECT = PromptTemplate(
    system=(
        "You are performing a self-reflection task. Given a condition and a list of "
        "initially selected factors, review each factor with a LENIENT approach. Keep "
        "factors that have ANY reasonable connection to the condition. Only remove "
        "factors that are clearly irrelevant or contradictory. When uncertain, err on "
        "the side of keeping the factor. Think step by step about each factor, then "
        "provide your reasoning followed by 'Final answer:' and a JSON array of the "
        "factors to keep."
    ),
    examples=(
        (
            "Condition: City implements a bike-sharing program.\n"
            'Initially selected factors: ["Increased bike usage", "Higher car sales", '
            '"More traffic jams"]\n'
            "Task: Review and keep factors reasonably related to the condition. Think "
            "step by step about each factor's relevance, then 'Final answer:' with a "
            "JSON array.",
            '"Increased bike usage" is the direct result of more shared bikes, keep it.\n'
            '"Higher car sales" has no clear link to bike sharing, remove it.\n'
            '"More traffic jams" could occur if road space shifts to bikes and cars '
            "interact, keep it.\n"
            'Final answer: ["Increased bike usage", "More traffic jams"]',
        ),
        (
            "Condition: Students study in a quiet library.\n"
            'Initially selected factors: ["Better concentration", "Distractions from '
            'phones", "Improved retention", "Reduced social interaction"]\n'
            "Task: Review and keep factors reasonably related to the condition. Think "
            "step by step about each factor's relevance, then 'Final answer:' with a "
            "JSON array.",
            '"Better concentration" follows from a quiet space aiding focus, keep it.\n'
            '"Distractions from phones" contradicts the library\'s purpose, remove it.\n'
            '"Improved retention" naturally arises from focused study, keep it.\n'
            '"Reduced social interaction" is a likely side-effect of silence, keep it.\n'
            'Final answer: ["Better concentration", "Improved retention", '
            '"Reduced social interaction"]',
        ),
    ),
    user_template=(
        "Condition: {condition}\n"
        "Initially selected factors: {factors}\n"
        "Task: Review and keep factors reasonably related to the condition. Think step "
        "by step about each factor's relevance, then 'Final answer:' with a JSON array."
    ),
)

_PHI_ELICIT = PromptTemplate(
    system=(
        "You estimate probabilities. For each factor value, estimate the probability "
        "(a float between 0 and 1) that it supports the first outcome rather than the "
        "second. Think step by step, then provide 'Final answer:' followed by a JSON "
        "mapping from each factor value to its probability."
    ),
    examples=(
        (
            'Given the scenario: "Comparing LED bulbs vs incandescent bulbs in home '
            'lighting."\n'
            "For each of the following factor values, please estimate the probability "
            "(a float between 0 and 1) that it supports Outcome1 (LED bulbs are more "
            "advantageous) rather than Outcome2 (incandescent bulbs are more "
            "advantageous). Return a JSON mapping.\n"
            "Factor values:\n"
            '["Initial cost per bulb", "Energy consumption per hour", "Lifespan hours", '
            '"Color rendering index", "Warm color temperature", "Instant full '
            'brightness", "Dimmable compatibility", "Mercury content", "Heat '
            'generation", "Availability"]',
            "Thought: LEDs excel in low energy use, longevity, low heat output, and no "
            "mercury, but cost more upfront, may have lower CRI, and vary in warmth, "
            "dimmability, and availability.\n"
            "Final answer:\n"
            '{"Initial cost per bulb": 0.30, "Energy consumption per hour": 0.95, '
            '"Lifespan hours": 0.90, "Color rendering index": 0.25, '
            '"Warm color temperature": 0.40, "Instant full brightness": 0.50, '
            '"Dimmable compatibility": 0.35, "Mercury content": 0.85, '
            '"Heat generation": 0.88, "Availability": 0.45}',
        ),
    ),
    user_template=(
        "Given the scenario: {scenario}\n"
        "For each of the following factor values, please estimate the probability "
        "(a float between 0 and 1) that it supports Outcome1: {outcome1} rather than "
        "Outcome2: {outcome2}.\n"
        "As reference (but not absolute) here are some initial estimates:\n"
        "{prior_text}\n"
        "Think step by step about each factor's relation to the outcomes, and provide "
        "your probability estimates. Return a JSON mapping.\n"
        "Factor values:\n{factors}"
    ),
)

_LATENT_DISCOVER = PromptTemplate(
    system=(
        "Please perform a brief chain-of-thought (step-by-step reasoning) before "
        "outputting the final JSON. You are an AI assistant tasked with identifying "
        "latent variables and assigning each latent only factors drawn from the "
        "provided list. Do NOT output any edges. Return a JSON object with a single "
        "field:\n"
        "  latents: an array of objects, each with:\n"
        "    - name: string\n"
        "    - factors: array of strings (each chosen from the provided Factors list)\n"
        "Ensure the JSON parses correctly and strictly follows this schema."
    ),
    examples=(
        (
            "Please identify latent variables and assign each factor to a latent. Then "
            "return JSON with fields:\n"
            '  latents: [{"name": string, "factors": [...]}, ...]\n'
            'Factors: ["Nutrition", "Vitamins", "Taste", "Convenience"]',
            "Thought: Nutrition and Vitamins both relate to health aspects of food, "
            "while Taste and Convenience relate to user enjoyment and practicality.\n"
            "Final answer:\n"
            '{"latents": [\n'
            '  {"name": "HealthLat",   "factors": ["Nutrition","Vitamins"]},\n'
            '  {"name": "EnjoyLat",    "factors": ["Taste","Convenience"]}\n'
            "]}",
        ),
        (
            "Please identify latent variables and assign each factor to a latent. Then "
            "return JSON with fields:\n"
            '  latents: [{"name": string, "factors": [...]}, ...]\n'
            'Factors: ["Usability", "Security", "Maintainability", "Portability", '
            '"Reliability"]',
            "Thought: Usability and Portability focus on user experience and access, "
            "Reliability and Maintainability focus on software quality over time, and "
            "Security is a distinct concern.\n"
            "Final answer:\n"
            '{"latents": [\n'
            '  {"name": "UXLat",       "factors": ["Usability","Portability"]},\n'
            '  {"name": "QualityLat",  "factors": ["Reliability","Maintainability"]},\n'
            '  {"name": "SecurityLat", "factors": ["Security"]}\n'
            "]}",
        ),
    ),
    user_template=(
        "Please identify latent variables and assign each factor to a latent. Then "
        "return JSON with fields:\n"
        '  latents: [{{"name": string, "factors": [...]}}, ...]\n'
        "Factors: {factors}"
    ),
)

_LATENT_ELICIT = PromptTemplate(
    system=(
        "Please perform a brief chain-of-thought (step-by-step) before outputting the "
        "final JSON. You will be given a list of latents (each with its name and the "
        "factor descriptions it groups) and two competing outcomes. Think through the "
        "semantic content of the factors relative to the outcomes, and estimate for "
        "each latent a probability pair [p1, p0]:\n"
        "  - p1 = probability the latent supports Outcome1\n"
        "  - p0 = probability the latent supports Outcome2\n"
        'Begin your answer with "Thought:" to show your reasoning, then output exactly '
        "a JSON object mapping each latent name to its [p1, p0] (no extra text)."
    ),
    examples=(
        (
            "Latents with factors:\n"
            '[{"name":"Performance", "factors":["Faster processing","Efficient '
            'resource use"]},\n'
            ' {"name":"Stability",   "factors":["Crash reports","Memory leaks"]}]\n'
            "Outcome1: The system improves performance.\n"
            "Outcome2: The system does not improve performance.",
            "Thought: The Performance latent groups factors that directly indicate "
            "faster and more efficient operation, which strongly supports Outcome1. "
            "The Stability latent lists issues that undermine reliability, which "
            "indirectly suggests performance might not improve overall.\n"
            "Final answer:\n"
            '{"Performance": [0.85, 0.15], "Stability": [0.30, 0.70]}',
        ),
        (
            "Latents with factors:\n"
            '[{"name":"HealthLat","factors":["Nutrition benefits"]},\n'
            ' {"name":"EnjoyLat", "factors":["Taste appeal","Fun presentation"]}]\n'
            "Outcome1: Healthy eating is fun.\n"
            "Outcome2: Healthy eating is not fun.",
            "Thought: Nutrition benefits relate to health but don't guarantee fun, so "
            "HealthLat feels neutral to slightly positive. EnjoyLat clearly centers on "
            "taste and fun aspects, strongly supporting Outcome1.\n"
            "Final answer:\n"
            '{"HealthLat": [0.55, 0.45], "EnjoyLat": [0.85, 0.15]}',
        ),
    ),
    user_template=(
        "Latents with factors:\n{latents}\n"
        "Outcome1: {outcome1}\n"
        "Outcome2: {outcome2}"
    ),
)

_TEMPLATES: dict[str, PromptTemplate] = {
    "sentence_gen": _SENTENCE_GEN,
    "factor_extract": _FACTOR_EXTRACT,
    "label_vote": _LABEL_VOTE,
    "theme": _THEME,
    "prune": _PRUNE,
    "map_vote": _MAP_VOTE,
    "reflect": _REFLECT,
    "phi_elicit": _PHI_ELICIT,
    "latent_discover": _LATENT_DISCOVER,
    "latent_elicit": _LATENT_ELICIT,
}


def load_template(name: str, prompt_dir: Optional[str] = None) -> PromptTemplate:
    """Return the embedded template, or its override from ``prompt_dir``."""
    if name not in _TEMPLATES:
        raise ConfigError(f"unknown prompt template: {name!r}")
    if prompt_dir:
        path = os.path.join(prompt_dir, f"{name}.json")
        if os.path.exists(path):
            try:
                with open(path, "r", encoding="utf-8") as handle:
                    data = json.load(handle)
                return PromptTemplate(
                    system=data["system"],
                    examples=tuple((u, a) for u, a in data.get("examples", [])),
                    user_template=data["user_template"],
                )
            except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"bad prompt override {path!r}: {exc}") from exc
    return _TEMPLATES[name]
