"""Timelines, mood-phase segmentation and shared text utilities."""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

logger = logging.getLogger(__name__)

# Range of timeline lengths seen in the source corpus; outside it we only warn.
TYPICAL_POSTS_RANGE = (12, 124)
DEFAULT_CHUNK_CUTOFF = 60


class ValidationError(ValueError):
    """Raised when input data violates a structural invariant."""


class MocLabel(str, enum.Enum):
    NONE = "0"
    IS = "IS"
    ISB = "ISB"
    IE = "IE"
    IEP = "IEP"

    @classmethod
    def parse(cls, value: str) -> "MocLabel":
        try:
            return cls(str(value))
        except ValueError:
            raise ValidationError(f"unknown moment-of-change label {value!r}") from None


class MoodPhase(str, enum.Enum):
    NEUTRAL = "NEUTRAL"
    SWITCH = "SWITCH"
    ESCALATION = "ESCALATION"


_PHASE_OF_LABEL = {
    MocLabel.NONE: MoodPhase.NEUTRAL,
    MocLabel.IS: MoodPhase.SWITCH,
    MocLabel.ISB: MoodPhase.SWITCH,
    MocLabel.IE: MoodPhase.ESCALATION,
    MocLabel.IEP: MoodPhase.ESCALATION,
}


def moc_group(label: MocLabel) -> MoodPhase:
    """Map a moment-of-change tag onto the phase used for grouping posts."""
    return _PHASE_OF_LABEL[MocLabel(label)]


@dataclass(frozen=True)
class Post:
    post_id: str
    timestamp: datetime
    text: str
    label: MocLabel

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError(f"post {self.post_id!r} has empty text")
        if not isinstance(self.label, MocLabel):
            object.__setattr__(self, "label", MocLabel.parse(self.label))


@dataclass(frozen=True)
class Timeline:
    timeline_id: str
    user_id: str
    posts: tuple[Post, ...]

    def __post_init__(self):
        object.__setattr__(self, "posts", tuple(self.posts))
        if not self.posts:
            raise ValidationError(f"timeline {self.timeline_id!r} has no posts")
        for prev, cur in zip(self.posts, self.posts[1:]):
            if cur.timestamp < prev.timestamp:
                raise ValidationError(
                    f"timeline {self.timeline_id!r}: post {cur.post_id!r} is older than its predecessor"
                )

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.posts)


def timeline_warnings(timeline: Timeline) -> list[str]:
    """Soft checks that never reject a timeline."""
    lo, hi = TYPICAL_POSTS_RANGE
    n = len(timeline.posts)
    if not lo <= n <= hi:
        return [f"timeline {timeline.timeline_id!r} has {n} posts, outside the typical range [{lo}, {hi}]"]
    return []


@dataclass(frozen=True)
class Segment:
    segment_index: int
    phase: MoodPhase
    posts: tuple[Post, ...]
    source_timeline_id: str

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.posts)


def segment_timeline(timeline: Timeline) -> list[Segment]:
    """Split a timeline into maximal runs of posts sharing one mood phase."""
    if not timeline.posts:
        raise ValidationError("cannot segment an empty timeline")
    segments: list[Segment] = []
    run: list[Post] = []
    phase = None
    for post in timeline.posts:
        p = moc_group(post.label)
        if run and p != phase:
            segments.append(Segment(len(segments), phase, tuple(run), timeline.timeline_id))
            run = []
        run.append(post)
        phase = p
    segments.append(Segment(len(segments), phase, tuple(run), timeline.timeline_id))
    return segments


# --- sentences and chunks ---------------------------------------------------

@dataclass(frozen=True)
class Sentence:
    text: str
    char_span: tuple[int, int]


# A sentence ends at a run of terminal punctuation followed by whitespace.
# No abbreviation handling: "Dr. Who" splits after "Dr.".
_BOUNDARY = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[Sentence]:
    sentences = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        _append_trimmed(sentences, text, start, m.start())
        start = m.end()
    _append_trimmed(sentences, text, start, len(text))
    return sentences


def _append_trimmed(out: list[Sentence], text: str, start: int, end: int) -> None:
    piece = text[start:end]
    stripped = piece.strip()
    if not stripped:
        return
    lead = len(piece) - len(piece.lstrip())
    s = start + lead
    out.append(Sentence(stripped, (s, s + len(stripped))))


def sentence_texts(text: str) -> list[str]:
    return [s.text for s in split_sentences(text)]


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list[str]: ...

    def detokenize(self, tokens: Sequence[str]) -> str: ...


class WhitespaceTokenizer:
    """Fallback tokenizer used when no NLI tokenizer is configured."""

    name = "whitespace"

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def detokenize(self, tokens: Sequence[str]) -> str:
        return " ".join(tokens)


class HuggingFaceTokenizer:
    """Wraps a ``transformers`` tokenizer so chunk sizes follow the NLI model."""

    def __init__(self, name_or_path: str):
        from transformers import AutoTokenizer

        self.name = name_or_path
        self._tok = AutoTokenizer.from_pretrained(name_or_path)

    def tokenize(self, text: str) -> list[str]:
        return self._tok.tokenize(text)

    def detokenize(self, tokens: Sequence[str]) -> str:
        return self._tok.convert_tokens_to_string(list(tokens)).strip()


@dataclass(frozen=True)
class Chunk:
    text: str
    token_count: int


def chunk_text(text: str, cutoff: int = DEFAULT_CHUNK_CUTOFF,
               tokenizer: Tokenizer | None = None) -> list[Chunk]:
    """Greedily pack whole sentences into chunks of at most ``cutoff`` tokens.

    A sentence longer than ``cutoff`` is hard-split at token boundaries.
    """
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    tokenizer = tokenizer or WhitespaceTokenizer()

    chunks: list[Chunk] = []
    buf: list[str] = []
    buf_tokens = 0

    def flush():
        nonlocal buf, buf_tokens
        if buf:
            chunks.append(Chunk(" ".join(buf), buf_tokens))
        buf, buf_tokens = [], 0

    for sent in split_sentences(text):
        toks = tokenizer.tokenize(sent.text)
        if not toks:
            continue
        if len(toks) > cutoff:
            flush()
            for i in range(0, len(toks), cutoff):
                piece = toks[i:i + cutoff]
                chunks.append(Chunk(tokenizer.detokenize(piece), len(piece)))
            continue
        if buf_tokens + len(toks) > cutoff:
            flush()
        buf.append(sent.text)
        buf_tokens += len(toks)
    flush()
    return chunks


# --- JSONL I/O --------------------------------------------------------------

_POST_FIELDS = {"post_id", "timestamp", "text", "moc_label"}
_TIMELINE_FIELDS = {"timeline_id", "user_id", "posts"}


def _parse_timestamp(raw: str) -> datetime:
    ts = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def timeline_from_dict(record: dict) -> Timeline:
    extra = set(record) - _TIMELINE_FIELDS
    if extra:
        logger.warning("ignoring unknown timeline fields %s", sorted(extra))
    try:
        raw_posts = record["posts"]
        tid = str(record["timeline_id"])
        uid = str(record["user_id"])
    except KeyError as exc:
        raise ValidationError(f"timeline record missing field {exc}") from None
    posts = []
    for raw in raw_posts:
        extra = set(raw) - _POST_FIELDS
        if extra:
            logger.warning("ignoring unknown post fields %s", sorted(extra))
        missing = _POST_FIELDS - set(raw)
        if missing:
            raise ValidationError(f"post record in {tid!r} missing {sorted(missing)}")
        posts.append(Post(str(raw["post_id"]), _parse_timestamp(raw["timestamp"]),
                          raw["text"], MocLabel.parse(raw["moc_label"])))
    # Stable: posts sharing a timestamp keep file order.
    posts.sort(key=lambda p: p.timestamp)
    timeline = Timeline(tid, uid, tuple(posts))
    for w in timeline_warnings(timeline):
        logger.warning(w)
    return timeline


def timeline_to_dict(timeline: Timeline) -> dict:
    return {
        "timeline_id": timeline.timeline_id,
        "user_id": timeline.user_id,
        "posts": [
            {
                "post_id": p.post_id,
                "timestamp": p.timestamp.astimezone(timezone.utc).isoformat().replace("+00:00", "Z"),
                "text": p.text,
                "moc_label": p.label.value,
            }
            for p in timeline.posts
        ],
    }


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records)


def load_timelines(path: str | Path) -> list[Timeline]:
    return [timeline_from_dict(r) for r in read_jsonl(path)]


def segmentation_record(timeline: Timeline, segments: Sequence[Segment]) -> dict:
    return {
        "timeline_id": timeline.timeline_id,
        "segments": [
            {
                "segment_index": s.segment_index,
                "phase": s.phase.value,
                "post_ids": [p.post_id for p in s.posts],
            }
            for s in segments
        ],
    }
