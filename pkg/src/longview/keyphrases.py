"""Few-shot key-phrase extraction per segment, with alignment back to post text."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .llm import Gateway, PromptRequest
from .timeline import Segment, read_jsonl

ALIGN_THRESHOLD = 0.8

SYSTEM_INSTRUCTION = (
    "Read the social media posts and list the key phrases that indicate the writer's "
    "mental health: mood, relationships, behaviours and events. Copy each phrase "
    "exactly as written. Output one phrase per line and nothing else."
)


@dataclass(frozen=True)
class FewShotExample:
    segment_text: str
    phrases: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "phrases", tuple(self.phrases))
        low = self.segment_text.casefold()
        missing = [p for p in self.phrases if p.casefold() not in low]
        if missing:
            raise ValueError(f"exemplar phrases not found verbatim in its text: {missing}")


@dataclass(frozen=True)
class KeyPhrase:
    text: str
    post_index: int
    char_span: tuple[int, int] | None
    aligned: bool

    def to_dict(self) -> dict:
        return {"text": self.text, "post_index": self.post_index,
                "char_span": list(self.char_span) if self.char_span else None,
                "aligned": self.aligned}

    @classmethod
    def from_dict(cls, d: dict) -> "KeyPhrase":
        span = d.get("char_span")
        return cls(d["text"], int(d["post_index"]), tuple(span) if span else None, bool(d["aligned"]))


@dataclass(frozen=True)
class KeyPhraseSet:
    segment_index: int
    phrases: tuple[KeyPhrase, ...] = field(default_factory=tuple)

    @property
    def texts(self) -> list[str]:
        return [p.text for p in self.phrases]

    def to_record(self, timeline_id: str) -> dict:
        return {"timeline_id": timeline_id, "segment_index": self.segment_index,
                "phrases": [p.to_dict() for p in self.phrases]}

    @classmethod
    def from_record(cls, record: dict) -> "KeyPhraseSet":
        return cls(int(record["segment_index"]),
                   tuple(KeyPhrase.from_dict(p) for p in record["phrases"]))


def load_exemplars(path: str | Path) -> list[FewShotExample]:
    """Exemplar JSONL: ``{"segment_text": str, "phrases": [str, ...]}`` per line."""
    return [FewShotExample(r["segment_text"], tuple(r["phrases"])) for r in read_jsonl(path)]


def load_keyphrases(path: str | Path) -> dict[str, list[KeyPhraseSet]]:
    out: dict[str, list[KeyPhraseSet]] = {}
    for rec in read_jsonl(path):
        out.setdefault(rec["timeline_id"], []).append(KeyPhraseSet.from_record(rec))
    for sets in out.values():
        sets.sort(key=lambda s: s.segment_index)
    return out


def build_keyphrase_prompt(segment: Segment, examples: Sequence[FewShotExample]) -> PromptRequest:
    if not examples:
        raise ValueError("at least one few-shot example is required")
    blocks = tuple((ex.segment_text, "\n".join(ex.phrases)) for ex in examples)
    budget = max(len(out.split()) for _, out in blocks)
    return PromptRequest(
        user_content=segment.text,
        system_instruction=SYSTEM_INSTRUCTION,
        max_new_tokens=max(1, 4 * budget),
        few_shot_blocks=blocks,
    )


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_phrase_list(text: str) -> list[str]:
    phrases = []
    for line in re.split(r"[\n;]", text):
        line = _BULLET.sub("", line).strip().strip('"').strip()
        if line:
            phrases.append(line)
    return phrases


def _normalize(text: str) -> str:
    return " ".join(text.casefold().split())


def _word_grams(word: str) -> list[str]:
    w = f"#{word}#"
    return [w[i:i + 3] for i in range(len(w) - 2)]


def trigram_profile(text: str) -> Counter:
    """Multiset of boundary-padded character 3-grams of each word."""
    grams: Counter = Counter()
    for word in _normalize(text).split():
        grams.update(_word_grams(word))
    return grams


def trigram_overlap(a: Counter, b: Counter) -> float:
    """Dice coefficient between two 3-gram multisets."""
    total = sum(a.values()) + sum(b.values())
    if not total:
        return 0.0
    return 2 * sum((a & b).values()) / total


def _best_window(phrase: str, post: str, threshold: float) -> tuple[float, tuple[int, int] | None]:
    target = trigram_profile(phrase)
    n_target = sum(target.values())
    words = [(m.start(), m.end()) for m in re.finditer(r"\S+", post)]
    profiles = [trigram_profile(post[a:b]) for a, b in words]
    # Each word yields >= 1 gram, and Dice <= 2n/(n + m) for windows of m grams,
    # so longer windows can never reach the threshold.
    max_words = max(1, int(n_target * (2 - threshold) / threshold)) if threshold > 0 else len(words)
    best, best_span = 0.0, None
    for i in range(len(words)):
        grams: Counter = Counter()
        for j in range(i, min(len(words), i + max_words)):
            grams.update(profiles[j])
            score = trigram_overlap(target, grams)
            if score > best:
                best, best_span = score, (words[i][0], words[j][1])
    return best, best_span


def align_phrase(phrase: str, segment: Segment, threshold: float = ALIGN_THRESHOLD) -> KeyPhrase:
    """Anchor an LLM-returned phrase to a span of one of the segment's posts.

    Exact case-insensitive matches win.  Otherwise the word window with the
    highest 3-gram Dice overlap is taken if it reaches ``threshold``; the
    phrase text then becomes the verbatim window so spans always match.
    """
    if not phrase.strip():
        raise ValueError("phrase must be non-empty")
    needle = phrase.casefold()
    for idx, post in enumerate(segment.posts):
        pos = post.text.casefold().find(needle)
        if pos >= 0 and post.text[pos:pos + len(phrase)].casefold() == needle:
            return KeyPhrase(post.text[pos:pos + len(phrase)], idx, (pos, pos + len(phrase)), True)
    best = (0.0, -1, None)
    for idx, post in enumerate(segment.posts):
        score, span = _best_window(phrase, post.text, threshold)
        if score > best[0]:
            best = (score, idx, span)
    score, idx, span = best
    if span is not None and score >= threshold:
        return KeyPhrase(segment.posts[idx].text[span[0]:span[1]], idx, span, True)
    return KeyPhrase(phrase, -1, None, False)


def collect_phrases(segment: Segment, raw_phrases: Sequence[str],
                    threshold: float = ALIGN_THRESHOLD) -> KeyPhraseSet:
    seen = set()
    aligned, unaligned = [], []
    for raw in raw_phrases:
        kp = align_phrase(raw, segment, threshold)
        key = _normalize(kp.text)
        if key in seen:
            continue
        seen.add(key)
        (aligned if kp.aligned else unaligned).append(kp)
    aligned.sort(key=lambda k: (k.post_index, k.char_span))
    return KeyPhraseSet(segment.segment_index, tuple(aligned + unaligned))


def extract_keyphrases(segment: Segment, examples: Sequence[FewShotExample],
                       gateway: Gateway, threshold: float = ALIGN_THRESHOLD) -> KeyPhraseSet:
    response = gateway.complete(build_keyphrase_prompt(segment, examples))
    return collect_phrases(segment, parse_phrase_list(response.text), threshold)


def stub_phrase_responder(request: PromptRequest, words_per_phrase: int = 4) -> str | None:
    """Offline stand-in for the extraction model: the opening words of each post.

    Only answers key-phrase prompts (recognised by their instruction) so it
    can be installed on a shared stub gateway.
    """
    if request.system_instruction != SYSTEM_INSTRUCTION:
        return None
    phrases = []
    for line in request.user_content.splitlines():
        ws = line.split()
        if ws:
            phrases.append(" ".join(ws[:words_per_phrase]).rstrip(".,!?;:"))
    return "\n".join(p for p in phrases if p)
