"""Clinical high-level summaries by map/reduce prompting, plus the two
prompting baselines (TLDR timeline summaries and naive chunk-and-rewrite).
"""

from __future__ import annotations

import enum
import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .keyphrases import KeyPhraseSet
from .llm import FinishReason, Gateway, GatewayError, PromptRequest
from .summaries import ABSENT_SECTION, HighLevelSummary, SummarySystem, TimelineSummary
from .timeline import Timeline, Tokenizer, WhitespaceTokenizer, chunk_text

logger = logging.getLogger(__name__)

NOT_PRESENT = "NOT_PRESENT"
NO_CHANGES_TEXT = "No moments of change were identified in the individual's timeline summary."
USER_MARKER = "=== user ==="
DEFAULT_CONTEXT_BUDGET = 3000
DEFAULT_MAX_NEW_TOKENS = 256

_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


class HighLevelError(RuntimeError):
    pass


class InsufficientClinicalSignal(HighLevelError):
    pass


# --- clinical taxonomy -------------------------------------------------------

class TopicCategory(str, enum.Enum):
    DIAGNOSIS = "DIAGNOSIS"
    INTRA_INTERPERSONAL = "INTRA_INTERPERSONAL"
    MOMENTS_OF_CHANGE = "MOMENTS_OF_CHANGE"

    @property
    def heading(self) -> str:
        return {
            "DIAGNOSIS": "Diagnosis",
            "INTRA_INTERPERSONAL": "Intrapersonal and interpersonal patterns",
            "MOMENTS_OF_CHANGE": "Moments of change",
        }[self.value]


@dataclass(frozen=True)
class ClinicalTopic:
    category: TopicCategory
    name: str
    guidance: str


def _topics(category: TopicCategory, rows: list[tuple[str, str]]) -> list[ClinicalTopic]:
    return [ClinicalTopic(category, name, guidance) for name, guidance in rows]


CLINICAL_TOPICS: tuple[ClinicalTopic, ...] = tuple(
    _topics(TopicCategory.DIAGNOSIS, [
        ("presenting_issues", "Presenting issues: what bothers the person and causes distress, and any triggers."),
        ("mental_health_symptoms", "Mental health symptoms, level of functioning and well-being."),
        ("physical_symptoms", "Physical symptoms."),
        ("risk_assessment", "Risk assessment: previous suicide attempts, intent, access to lethal means, "
                            "hopelessness, social isolation, recent loss, impulsivity, dramatic mood swings."),
        ("motivation_to_change", "Motivation to change."),
        ("lifestyle", "Lifestyle: diet, physical activity, sleep, alcohol, drug or tobacco use, occupation, "
                      "environment, screen time, healthcare practices."),
        ("agency_coping", "Agency, coping mechanisms, strengths and resources: what helps the person, how they "
                          "usually cope with stress and difficulty, resilience."),
        ("meaning_goals", "Meaning, goals and direction in life."),
        ("behaviour", "Behaviour: adaptive and maladaptive behavioural patterns."),
        ("important_events", "Important events: present and past life events, including traumatic ones."),
    ])
    + _topics(TopicCategory.INTRA_INTERPERSONAL, [
        ("main_need", "Main need, wish or desire."),
        ("interpersonal_relationships", "Interpersonal relationships: repeated patterns, conflicts, how others "
                                        "are perceived, social support."),
        ("self_perception", "Self perception and self esteem."),
    ])
    + _topics(TopicCategory.MOMENTS_OF_CHANGE, [
        ("emotion", "Emotion, for example sad or happy."),
        ("arousal_level", "Arousal level, high or low."),
        ("emotion_regulation", "Emotion regulation strategies."),
        ("switches", "Switches: drastic changes in the person's mood."),
        ("escalations", "Escalations: gradual intensification of the person's mood."),
        ("self_understanding", "Self understanding: insight into the self and relationships, and the ability "
                               "to reflect on repeated patterns."),
    ])
)


# --- templates -----------------------------------------------------------------

TEMPLATE_NAMES = (
    "map_topic", "reduce_category", "reduce_combine_main", "reduce_combine_changes",
    "generic_main", "generic_changes", "tldr", "tldr_keyphrases", "tldr_merge",
    "naive_chunk", "naive_rewrite",
)


@dataclass(frozen=True)
class Template:
    name: str
    source: str

    @property
    def parts(self) -> tuple[str, str]:
        system, sep, user = self.source.partition(USER_MARKER)
        if not sep:
            return "", self.source.strip()
        return system.strip(), user.strip()

    def render(self, **values: str) -> tuple[str, str]:
        """Return (system_instruction, user_content) with placeholders filled."""
        def fill(text: str) -> str:
            def sub(m):
                key = m.group(1)
                if key not in values:
                    raise KeyError(f"template {self.name!r} needs a value for {{{{{key}}}}}")
                return values[key]
            return _PLACEHOLDER.sub(sub, text)
        system, user = self.parts
        return fill(system).strip(), fill(user).strip()


@dataclass(frozen=True)
class TemplateSet:
    templates: dict[str, Template]

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "TemplateSet":
        out = {}
        for name in TEMPLATE_NAMES:
            if directory is None:
                src = resources.files("longview.templates").joinpath(f"{name}.txt").read_text("utf-8")
            else:
                src = (Path(directory) / f"{name}.txt").read_text("utf-8")
            out[name] = Template(name, src)
        return cls(out)

    def __getitem__(self, name: str) -> Template:
        return self.templates[name]

    def content_hash(self, names: Sequence[str] | None = None) -> str:
        """sha256 over the named templates (all by default), in sorted order."""
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self.templates):
            h.update(name.encode() + b"\x00" + self.templates[name].source.encode() + b"\x00")
        return h.hexdigest()


# --- variants ------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineVariant:
    keyphrases_enabled: bool = True
    clinical_prompts_enabled: bool = True

    @property
    def name(self) -> str:
        if self.keyphrases_enabled and self.clinical_prompts_enabled:
            return "full"
        parts = []
        if not self.keyphrases_enabled:
            parts.append("-keyphrases")
        if not self.clinical_prompts_enabled:
            parts.append("-clinical-prompts")
        return "".join(parts)

    @property
    def highlevel_templates(self) -> tuple[str, ...]:
        if self.clinical_prompts_enabled:
            return ("map_topic", "reduce_category", "reduce_combine_main", "reduce_combine_changes")
        return ("generic_main", "generic_changes")

    @classmethod
    def parse(cls, name: str) -> "PipelineVariant":
        key = name.strip().replace(" ", "-")
        table = {
            "full": cls(True, True),
            "-keyphrases": cls(False, True),
            "-clinical-prompts": cls(True, False),
            "-keyphrases-clinical-prompts": cls(False, False),
        }
        if key not in table:
            raise ValueError(f"unknown variant {name!r}; expected one of {sorted(table)}")
        return table[key]


def ablation_config(keyphrases_enabled: bool, clinical_prompts_enabled: bool) -> PipelineVariant:
    return PipelineVariant(bool(keyphrases_enabled), bool(clinical_prompts_enabled))


# --- map stage -----------------------------------------------------------------

@dataclass(frozen=True)
class TopicInference:
    topic: ClinicalTopic
    text: str
    present: bool

    def __post_init__(self):
        if not self.present and self.text:
            raise ValueError("an absent topic carries no text")


@dataclass(frozen=True)
class TopicFailure:
    topic: ClinicalTopic
    error: str


@dataclass
class MapResult:
    inferences: list[TopicInference] = field(default_factory=list)
    failures: list[TopicFailure] = field(default_factory=list)

    @property
    def present(self) -> list[TopicInference]:
        return [i for i in self.inferences if i.present]


def _call(gateway: Gateway, template: Template, seed: int | None,
          max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS, **values: str) -> str:
    system, user = template.render(**values)
    resp = gateway.complete(PromptRequest(user, system, max_new_tokens, seed=seed))
    if resp.finish_reason is FinishReason.ERROR:
        raise GatewayError(f"{template.name}: backend returned an error response", resp.backend_id, 1)
    return resp.text.strip()


def map_stage(summary: TimelineSummary, topics: Sequence[ClinicalTopic], gateway: Gateway,
              templates: TemplateSet | None = None, seed: int | None = 0) -> MapResult:
    """One prompt per topic.  Responses containing the sentinel mark the topic absent."""
    if not topics:
        raise ValueError("map_stage needs at least one topic")
    templates = templates or TemplateSet.load()
    tmpl = templates["map_topic"]

    def run(topic: ClinicalTopic):
        try:
            text = _call(gateway, tmpl, seed, summary=summary.text, topic_guidance=topic.guidance)
        except GatewayError as exc:
            return TopicFailure(topic, str(exc))
        if NOT_PRESENT in text or not text:
            return TopicInference(topic, "", False)
        return TopicInference(topic, text, True)

    workers = max(1, min(len(topics), gateway.config.max_concurrency))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(run, topics))
    result = MapResult()
    for o in outcomes:
        (result.failures if isinstance(o, TopicFailure) else result.inferences).append(o)
    if not result.inferences:
        raise HighLevelError(f"all {len(topics)} map prompts failed: {result.failures[0].error}")
    for f in result.failures:
        logger.warning("map prompt for topic %s failed: %s", f.topic.name, f.error)
    return result


# --- reduce stage --------------------------------------------------------------

def reduce_stage(inferences: Sequence[TopicInference], gateway: Gateway,
                 timeline_id: str = "", system: SummarySystem = SummarySystem.THVAE,
                 templates: TemplateSet | None = None, seed: int | None = 0) -> HighLevelSummary:
    """Per-category synthesis, then one combine pass for each output section."""
    templates = templates or TemplateSet.load()
    present = [i for i in inferences if i.present]
    by_cat: dict[TopicCategory, list[TopicInference]] = {}
    for inf in present:
        by_cat.setdefault(inf.topic.category, []).append(inf)
    main_cats = [c for c in (TopicCategory.DIAGNOSIS, TopicCategory.INTRA_INTERPERSONAL) if c in by_cat]
    if not main_cats:
        raise InsufficientClinicalSignal(
            "insufficient clinical signal: no diagnosis or intra/interpersonal inference is present")

    prose = {}
    for cat in TopicCategory:
        if cat in by_cat:
            notes = "\n".join(f"- {i.text}" for i in by_cat[cat])
            prose[cat] = _call(gateway, templates["reduce_category"], seed,
                               summary=notes, topic_guidance=cat.heading)

    main = _call(gateway, templates["reduce_combine_main"], seed,
                 summary="\n\n".join(prose[c] for c in main_cats))
    if TopicCategory.MOMENTS_OF_CHANGE in prose:
        changes = _call(gateway, templates["reduce_combine_changes"], seed,
                        summary=prose[TopicCategory.MOMENTS_OF_CHANGE])
    else:
        changes = NO_CHANGES_TEXT
    return HighLevelSummary(timeline_id, system, main, changes)


def generic_highlevel(summary: TimelineSummary, gateway: Gateway,
                      templates: TemplateSet | None = None, seed: int | None = 0) -> HighLevelSummary:
    """The variant without clinical topics: one generic prompt per section."""
    templates = templates or TemplateSet.load()
    main = _call(gateway, templates["generic_main"], seed, summary=summary.text)
    changes = _call(gateway, templates["generic_changes"], seed, summary=summary.text)
    return HighLevelSummary(summary.timeline_id, summary.system, main, changes)


def high_level_summary(summary: TimelineSummary, gateway: Gateway,
                       variant: PipelineVariant = PipelineVariant(),
                       topics: Sequence[ClinicalTopic] = CLINICAL_TOPICS,
                       templates: TemplateSet | None = None, seed: int | None = 0) -> HighLevelSummary:
    templates = templates or TemplateSet.load()
    if not variant.clinical_prompts_enabled:
        return generic_highlevel(summary, gateway, templates, seed)
    mapped = map_stage(summary, topics, gateway, templates, seed)
    return reduce_stage(mapped.inferences, gateway, summary.timeline_id, summary.system, templates, seed)


# --- baselines -----------------------------------------------------------------

def _budget_chunks(text: str, budget: int, tokenizer: Tokenizer) -> list[str]:
    if len(tokenizer.tokenize(text)) <= budget:
        return [text]
    return [c.text for c in chunk_text(text, budget, tokenizer)]


def tldr_baseline(timeline: Timeline, keyphrases: Sequence[KeyPhraseSet | None], gateway: Gateway,
                  templates: TemplateSet | None = None, context_budget: int = DEFAULT_CONTEXT_BUDGET,
                  tokenizer: Tokenizer | None = None, seed: int | None = 0) -> TimelineSummary:
    """First-person TLDR of the timeline, steered by its key phrases.

    A timeline within ``context_budget`` tokens takes one call.  A longer one
    is split into budget-sized chunks, each summarised, and the chunk
    summaries merged by one more call.
    """
    templates = templates or TemplateSet.load()
    tokenizer = tokenizer or WhitespaceTokenizer()
    phrases = [t for ks in keyphrases if ks is not None for t in ks.texts]
    block = ""
    if phrases:
        _, block = templates["tldr_keyphrases"].render(keyphrases="; ".join(phrases))
    chunks = _budget_chunks(timeline.text, context_budget, tokenizer)
    parts = [_call(gateway, templates["tldr"], seed, chunk=c, keyphrases=block) for c in chunks]
    if len(parts) == 1:
        text = parts[0]
    else:
        text = _call(gateway, templates["tldr_merge"], seed, summary="\n\n".join(parts))
    return TimelineSummary(timeline.timeline_id, SummarySystem.LLM_TLDR, text)


def naive_baseline(timeline: Timeline, gateway: Gateway, templates: TemplateSet | None = None,
                   context_budget: int = DEFAULT_CONTEXT_BUDGET, tokenizer: Tokenizer | None = None,
                   seed: int | None = 0) -> HighLevelSummary:
    """Summarise each chunk, then rewrite the chunk summaries into one document."""
    templates = templates or TemplateSet.load()
    tokenizer = tokenizer or WhitespaceTokenizer()
    chunks = _budget_chunks(timeline.text, context_budget, tokenizer)
    parts = [_call(gateway, templates["naive_chunk"], seed, chunk=c) for c in chunks]
    text = _call(gateway, templates["naive_rewrite"], seed, summary="\n\n".join(parts))
    return HighLevelSummary(timeline.timeline_id, SummarySystem.NAIVE, text, ABSENT_SECTION)
