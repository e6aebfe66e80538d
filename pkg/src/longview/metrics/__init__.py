from .backends import (
    Embedder,
    ExactLm,
    FunctionNli,
    HashedUnigramLm,
    HfBertScore,
    HfLm,
    HfNli,
    LexicalNli,
    LmScorer,
    NliScorer,
    NliScores,
    SequenceLm,
    TableEmbedder,
    TableNli,
    TokenRecallEmbedder,
    UniformLm,
    cosine,
)
from .core import (
    PREFIX,
    EvidenceSet,
    FcExpert,
    PrefixedSummary,
    coherence_score,
    consistency,
    ea_changes,
    ea_main,
    evidence_intersection,
    fc_expert,
    fc_timeline,
    fluency_ppl,
    intra_nli,
    mhic_sem,
)
from .report import (
    METRICS,
    Backends,
    MetricReport,
    aggregate,
    compare_reports,
    dumps_report,
    evaluate_record,
    merge_evidence,
    report_document,
    validate_report,
)
from .significance import permutation_test
