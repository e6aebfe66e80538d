"""Per-timeline metric reports, run-level aggregation and system comparison."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Sequence

from ..summaries import ABSENT_SECTION, HighLevelSummary, SummarySystem, TimelineSummary
from ..timeline import DEFAULT_CHUNK_CUTOFF, Timeline, chunk_text
from .backends import Embedder, LmScorer, NliScorer
from .core import (
    EvidenceSet,
    coherence_score,
    ea_changes,
    ea_main,
    evidence_intersection,
    fc_expert,
    fc_timeline,
    fluency_ppl,
    intra_nli,
    mhic_sem,
)
from .significance import permutation_test

UNIT_METRICS = ("mhic_sem", "fc_timeline", "fc_expert_m", "fc_expert_c", "fc_expert",
                "ea_m", "ea_c", "intra_nli")
METRICS = UNIT_METRICS + ("coherence", "ppl_timeline", "ppl_high_level")


@dataclass(frozen=True)
class MetricReport:
    timeline_id: str
    system: str
    variant: str
    mhic_sem: float | None = None
    fc_timeline: float | None = None
    fc_expert_m: float | None = None
    fc_expert_c: float | None = None
    fc_expert: float | None = None
    ea_m: float | None = None
    ea_c: float | None = None
    intra_nli: float | None = None
    coherence: float | None = None
    ppl_timeline: float | None = None
    ppl_high_level: float | None = None
    provenance: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in UNIT_METRICS:
            v = getattr(self, name)
            if v is not None and not -1e-12 <= v <= 1 + 1e-12:
                raise ValueError(f"{name}={v} is outside [0, 1]")
        if self.coherence is not None and self.coherence > 0:
            raise ValueError(f"coherence={self.coherence} must be <= 0")
        for name in ("ppl_timeline", "ppl_high_level"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name}={v} must be >= 1")
        object.__setattr__(self, "provenance", dict(self.provenance))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["provenance"] = dict(sorted(self.provenance.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MetricReport keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Backends:
    embedder: Embedder
    nli: NliScorer
    lm: LmScorer | None

    @property
    def ids(self) -> dict[str, str]:
        return {"embedder": self.embedder.backend_id, "nli": self.nli.backend_id,
                "lm": self.lm.backend_id if self.lm is not None else None}


def merge_evidence(records: Iterable[dict], embedder: Embedder) -> dict[str, EvidenceSet]:
    """Evidence JSONL -> one set per timeline.

    Records with an ``annotator`` field are grouped per timeline and merged
    by ``evidence_intersection`` when two or more annotators are present.
    """
    grouped: dict[str, list[EvidenceSet]] = {}
    for r in records:
        grouped.setdefault(r["timeline_id"], []).append(EvidenceSet(r["timeline_id"], tuple(r["evidences"])))
    out = {}
    for tid, sets in grouped.items():
        out[tid] = evidence_intersection(sets, embedder) if len(sets) > 1 else sets[0]
    return out


def _high_level(record: Mapping) -> HighLevelSummary | None:
    if not record.get("main_body"):
        return None
    return HighLevelSummary(record["timeline_id"], record.get("system", "external"),
                            record["main_body"], record.get("changes_section") or ABSENT_SECTION)


def evaluate_record(record: Mapping, backends: Backends, timeline: Timeline | None = None,
                    gold: Mapping | None = None, evidence: EvidenceSet | None = None,
                    chunk_cutoff: int = DEFAULT_CHUNK_CUTOFF) -> MetricReport:
    """Every metric whose inputs are available for one summary record."""
    tid = record["timeline_id"]
    T = TimelineSummary(tid, record["system"], record["timeline_summary"]) if record.get("timeline_summary") else None
    S = _high_level(record)
    G = _high_level({**gold, "system": "external"}) if gold else None
    ids = backends.ids
    vals: dict[str, float | None] = {}
    prov: dict[str, str] = {}

    def put(name, value, backend):
        if value is not None:
            vals[name] = value
            prov[name] = ids[backend]

    if T is not None:
        if evidence is not None and evidence.evidences:
            put("mhic_sem", mhic_sem(evidence, T, backends.embedder), "embedder")
        if timeline is not None:
            put("fc_timeline", fc_timeline(chunk_text(timeline.text, chunk_cutoff), T, backends.nli), "nli")
        if backends.lm is not None:
            put("ppl_timeline", fluency_ppl(T.text, backends.lm), "lm")
    if S is not None:
        if G is not None:
            fx = fc_expert(G, S, backends.nli)
            put("fc_expert_m", fx.main, "nli")
            put("fc_expert_c", fx.changes, "nli")
            put("fc_expert", fx.mean, "nli")
        put("intra_nli", intra_nli(S, backends.nli), "nli")
        if backends.lm is not None:
            put("ppl_high_level", fluency_ppl(S.full_text, backends.lm), "lm")
    if T is not None and S is not None:
        put("ea_m", ea_main(T, S.main_body, backends.nli), "nli")
        put("ea_c", ea_changes(T, S.changes_section, backends.nli), "nli")
        if backends.lm is not None:
            put("coherence", coherence_score(T, S, backends.lm), "lm")
    return MetricReport(tid, SummarySystem(record["system"]).value, record.get("variant", "full"),
                        provenance=prov, **vals)


def aggregate(reports: Sequence[MetricReport]) -> dict[str, dict]:
    out = {}
    for m in METRICS:
        vals = [getattr(r, m) for r in reports if getattr(r, m) is not None]
        out[m] = {"mean": sum(vals) / len(vals) if vals else None, "n": len(vals)}
    return out


def report_document(run_id: str, template_hash: str | None, backend_ids: Mapping[str, str | None],
                    reports: Sequence[MetricReport], comparisons: Sequence[dict] = ()) -> dict:
    return {
        "run_id": run_id,
        "template_hash": template_hash,
        "backend_ids": dict(sorted(backend_ids.items())),
        "per_timeline": [r.to_dict() for r in reports],
        "aggregates": aggregate(reports),
        "comparisons": list(comparisons),
    }


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def validate_report(doc: dict) -> list[MetricReport]:
    """Schema check for a report document; returns its per-timeline reports."""
    required = {"run_id", "template_hash", "backend_ids", "per_timeline", "aggregates", "comparisons"}
    missing = required - set(doc)
    if missing:
        raise ValueError(f"report is missing {sorted(missing)}")
    reports = [MetricReport.from_dict(r) for r in doc["per_timeline"]]
    for m, agg in doc["aggregates"].items():
        if m not in METRICS or set(agg) != {"mean", "n"}:
            raise ValueError(f"malformed aggregate entry {m!r}")
    for c in doc["comparisons"]:
        if not {"metric", "system_a", "system_b", "p_value", "n_resamples", "seed"} <= set(c):
            raise ValueError(f"malformed comparison {c}")
    return reports


def compare_reports(doc_a: dict, doc_b: dict, n_resamples: int = 10_000, seed: int = 0) -> list[dict]:
    """Paired permutation test per metric over timelines scored in both reports."""
    ra = {r.timeline_id: r for r in validate_report(doc_a)}
    rb = {r.timeline_id: r for r in validate_report(doc_b)}
    sys_a = _system_label(ra.values())
    sys_b = _system_label(rb.values())
    out = []
    for m in METRICS:
        pairs = [(getattr(ra[t], m), getattr(rb[t], m)) for t in sorted(ra.keys() & rb.keys())
                 if getattr(ra[t], m) is not None and getattr(rb[t], m) is not None]
        if not pairs:
            continue
        a, b = zip(*pairs)
        out.append({
            "metric": m, "system_a": sys_a, "system_b": sys_b,
            "p_value": permutation_test(a, b, n_resamples, seed),
            "n_resamples": n_resamples, "seed": seed, "n": len(pairs),
            "mean_a": sum(a) / len(a), "mean_b": sum(b) / len(b),
        })
    return out


def _system_label(reports: Iterable[MetricReport]) -> str:
    labels = sorted({f"{r.system}/{r.variant}" for r in reports})
    return ",".join(labels)
