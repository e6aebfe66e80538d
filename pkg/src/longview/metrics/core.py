"""Metric formulas over the scoring interfaces."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..summaries import ABSENT_SECTION, HighLevelSummary, TimelineSummary
from ..timeline import Chunk, sentence_texts
from .backends import Embedder, LmScorer, NliScorer, cosine, lm_tokens

PREFIX = "The individual wrote: "
EVIDENCE_COSINE_THRESHOLD = 0.60


@dataclass(frozen=True)
class EvidenceSet:
    timeline_id: str
    evidences: tuple[str, ...]

    def __post_init__(self):
        ev = tuple(e.strip() for e in self.evidences)
        if any(not e for e in ev):
            raise ValueError("evidence spans must be non-empty")
        object.__setattr__(self, "evidences", tuple(dict.fromkeys(ev)))


@dataclass(frozen=True)
class PrefixedSummary:
    sentences: tuple[str, ...]
    whole: str

    @classmethod
    def of(cls, summary: TimelineSummary | str) -> "PrefixedSummary":
        text = summary.text if isinstance(summary, TimelineSummary) else summary
        return cls(tuple(PREFIX + s for s in _sentences(text)), PREFIX + text.strip())


def _sentences(text: str) -> list[str]:
    return sentence_texts(text)


def _present(section: str | None) -> bool:
    return section is not None and section.strip() not in ("", ABSENT_SECTION)


def mhic_sem(E: EvidenceSet | Sequence[str], T: TimelineSummary | str, embedder: Embedder) -> float:
    """Mean over evidence spans of the best recall against any summary sentence."""
    ev = E.evidences if isinstance(E, EvidenceSet) else list(E)
    if not ev:
        raise ValueError("evidence set is empty")
    sents = _sentences(T.text if isinstance(T, TimelineSummary) else T)
    if not sents:
        raise ValueError("summary has no sentences")
    return sum(max(embedder.recall_score(e, t) for t in sents) for e in ev) / len(ev)


def consistency(A: Sequence[str], B: Sequence[str], nli: NliScorer) -> float:
    """Mean non-contradiction over all (premise in A, hypothesis in B) pairs."""
    if not A or not B:
        raise ValueError("consistency needs two non-empty sentence lists")
    total = sum(1.0 - nli.score(a, b).p_contradict for a in A for b in B)
    return total / (len(A) * len(B))


def fc_timeline(D: Sequence[Chunk | str], T: TimelineSummary | str, nli: NliScorer) -> float:
    """Mean over summary sentences of the best entailment by any timeline chunk."""
    chunks = [d.text if isinstance(d, Chunk) else d for d in D]
    sents = _sentences(T.text if isinstance(T, TimelineSummary) else T)
    if not chunks or not sents:
        raise ValueError("fc_timeline needs chunks and summary sentences")
    return sum(max(nli.score(d, t).p_entail for d in chunks) for t in sents) / len(sents)


@dataclass(frozen=True)
class FcExpert:
    main: float
    changes: float | None

    @property
    def mean(self) -> float:
        if self.changes is None:
            return self.main
        return (self.main + self.changes) / 2


def fc_expert(G: HighLevelSummary, S: HighLevelSummary, nli: NliScorer) -> FcExpert:
    """Gold-vs-generated consistency per section; a missing changes section is absent."""
    fc_m = consistency(_sentences(G.main_body), _sentences(S.main_body), nli)
    fc_c = None
    if _present(G.changes_section) and _present(S.changes_section):
        fc_c = consistency(_sentences(G.changes_section), _sentences(S.changes_section), nli)
    return FcExpert(fc_m, fc_c)


def ea_main(T: TimelineSummary | str, S_m: str, nli: NliScorer) -> float:
    return consistency(list(PrefixedSummary.of(T).sentences), _sentences(S_m), nli)


def ea_changes(T: TimelineSummary | str, S_c: str | None, nli: NliScorer) -> float | None:
    """Mean entailment of each changes sentence by the whole prefixed summary."""
    if not _present(S_c):
        return None
    premise = PrefixedSummary.of(T).whole
    sents = _sentences(S_c)
    return sum(nli.score(premise, s).p_entail for s in sents) / len(sents)


def intra_nli(S: HighLevelSummary | str, nli: NliScorer) -> float:
    """Mean non-contradiction over ordered pairs of distinct sentence positions."""
    text = S.full_text if isinstance(S, HighLevelSummary) else S
    sents = _sentences(text)
    if not sents:
        raise ValueError("summary has no sentences")
    n = len(sents)
    if n == 1:
        return 1.0
    total = sum(1.0 - nli.score(sents[i], sents[j]).p_contradict
                for i in range(n) for j in range(n) if i != j)
    return total / (n * (n - 1))


def coherence_score(source: TimelineSummary | str, summary: HighLevelSummary | str,
                    lm: LmScorer | None) -> float | None:
    if lm is None:
        return None
    src = source.text if isinstance(source, TimelineSummary) else source
    tgt = summary.full_text if isinstance(summary, HighLevelSummary) else summary
    return lm.conditional_loglik(src, tgt)


def fluency_ppl(text: str, lm: LmScorer) -> float:
    if not lm_tokens(text):
        raise ValueError("perplexity of an empty text is undefined")
    return lm.perplexity(text)


def evidence_intersection(annotations: Sequence[EvidenceSet], embedder: Embedder,
                          threshold: float = EVIDENCE_COSINE_THRESHOLD) -> EvidenceSet:
    """Merge several annotators' spans into one evidence set.

    For every pair of spans from different annotators: a span contained in
    the other (case-insensitively) is kept; otherwise, if their cosine
    similarity reaches ``threshold``, the shorter one is kept.  Results are
    de-duplicated in first-seen order.
    """
    if len(annotations) < 2:
        raise ValueError("evidence intersection needs at least two annotators")
    ids = {a.timeline_id for a in annotations}
    if len(ids) != 1:
        raise ValueError(f"annotations cover several timelines: {sorted(ids)}")
    kept: list[str] = []
    for i in range(len(annotations)):
        for j in range(i + 1, len(annotations)):
            for a in annotations[i].evidences:
                for b in annotations[j].evidences:
                    la, lb = a.lower(), b.lower()
                    if la in lb:
                        kept.append(a)
                    elif lb in la:
                        kept.append(b)
                    elif cosine(embedder, a, b) >= threshold:
                        kept.append(a if len(a) <= len(b) else b)
    return EvidenceSet(annotations[0].timeline_id, tuple(dict.fromkeys(kept)))
