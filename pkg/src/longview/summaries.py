"""Summary records shared by the generators, the evaluator and the CLI."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

from .timeline import read_jsonl

# Placeholder for a section a system does not produce (e.g. the naive
# baseline has no changes section).  Metrics treat it as absent.
ABSENT_SECTION = "—"


class SummarySystem(str, enum.Enum):
    THVAE = "thvae"
    LLM_TLDR = "tldr"
    SKELETON_IMPORT = "skeleton"
    EXTERNAL = "external"
    NAIVE = "naive"


@dataclass(frozen=True)
class TimelineSummary:
    timeline_id: str
    system: SummarySystem
    text: str

    def __post_init__(self):
        object.__setattr__(self, "system", SummarySystem(self.system))
        if not self.text.strip():
            raise ValueError(f"empty timeline summary for {self.timeline_id!r}")


@dataclass(frozen=True)
class HighLevelSummary:
    timeline_id: str
    system: SummarySystem
    main_body: str
    changes_section: str

    def __post_init__(self):
        object.__setattr__(self, "system", SummarySystem(self.system))
        if not self.main_body.strip() or not self.changes_section.strip():
            raise ValueError(f"high-level summary for {self.timeline_id!r} has an empty section")

    @property
    def has_changes(self) -> bool:
        return self.changes_section.strip() != ABSENT_SECTION

    @property
    def full_text(self) -> str:
        if self.has_changes:
            return f"{self.main_body}\n\n{self.changes_section}"
        return self.main_body


def summary_record(timeline_id: str, system: SummarySystem, variant: str,
                   timeline_summary: str | None = None,
                   high_level: HighLevelSummary | None = None) -> dict:
    return {
        "timeline_id": timeline_id,
        "system": SummarySystem(system).value,
        "variant": variant,
        "timeline_summary": timeline_summary,
        "main_body": high_level.main_body if high_level else None,
        "changes_section": high_level.changes_section if high_level else None,
    }


def load_summary_records(path: str | Path) -> list[dict]:
    required = {"timeline_id", "system", "variant", "timeline_summary", "main_body", "changes_section"}
    records = list(read_jsonl(path))
    for r in records:
        missing = required - set(r)
        if missing:
            raise ValueError(f"{path}: summary record missing {sorted(missing)}")
    return records
