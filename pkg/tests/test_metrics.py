from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from longview.metrics import (
    PREFIX,
    Backends,
    EvidenceSet,
    FunctionNli,
    HashedUnigramLm,
    LexicalNli,
    MetricReport,
    NliScores,
    PrefixedSummary,
    SequenceLm,
    TableEmbedder,
    TableNli,
    TokenRecallEmbedder,
    UniformLm,
    coherence_score,
    compare_reports,
    consistency,
    dumps_report,
    ea_changes,
    ea_main,
    evaluate_record,
    evidence_intersection,
    fc_expert,
    fc_timeline,
    fluency_ppl,
    intra_nli,
    merge_evidence,
    mhic_sem,
    permutation_test,
    report_document,
    validate_report,
)
from longview.summaries import ABSENT_SECTION, HighLevelSummary, SummarySystem

from . import oracles
from .helpers import embedder_from, nli_from, random_simplex, sentences, text_of

NO_CONTRA = NliScores(1.0, 0.0, 0.0)


def hl(main, changes):
    return HighLevelSummary("tl", SummarySystem.THVAE, main, changes)


# --- golden examples ----------------------------------------------------------

def test_prefix_constant():
    assert PREFIX == "The individual wrote: " and len(PREFIX.rstrip()) == 21


def test_mhic_examples():
    ev, ts = ["e1", "e2"], sentences("t", 3)
    emb = embedder_from(ev, ts, [[0.2, 0.9, 0.1], [0.4, 0.3, 0.8]])
    assert mhic_sem(ev, text_of(ts), emb) == pytest.approx(0.85, abs=1e-12)
    same = sentences("s", 2)
    assert mhic_sem(same, text_of(same), TableEmbedder(default_recall=0.0)) == 1.0
    assert mhic_sem(["e"], "only one.", TableEmbedder({("e", "only one."): 0.37})) == 0.37
    with pytest.raises(ValueError):
        mhic_sem([], "x.", TableEmbedder())


def test_consistency_examples():
    assert consistency(["a"], ["b", "c"], TableNli(default=NO_CONTRA)) == 1.0
    nli = nli_from(["a1", "a2"], ["b1"], "p_contradict", [[0.2], [0.6]])
    assert consistency(["a1", "a2"], ["b1"], nli) == pytest.approx(0.6, abs=1e-12)
    with pytest.raises(ValueError):
        consistency([], ["b"], nli)
    rng = np.random.default_rng(0)
    m = rng.random((3, 3))
    A, B = sentences("a", 3), sentences("b", 3)
    assert consistency(A, B, nli_from(A, B, "p_contradict", m)) == pytest.approx(oracles.consistency(m), abs=1e-12)


def test_fc_timeline_examples():
    assert fc_timeline(["chunk."], "one.", nli_from(["chunk."], ["one."], "p_entail", [[0.7]])) == pytest.approx(0.7)
    D, T = ["d1", "d2"], sentences("t", 2)
    nli = nli_from(D, T, "p_entail", [[0.1, 0.9], [0.8, 0.2]])
    assert fc_timeline(D, text_of(T), nli) == pytest.approx(0.85, abs=1e-12)
    ident = FunctionNli(lambda p, h: NliScores(1.0, 0.0, 0.0) if p == h else NliScores(0.0, 1.0, 0.0))
    assert fc_timeline(["same sentence.", "other."], "same sentence.", ident) == 1.0
    with pytest.raises(ValueError):
        fc_timeline([], "x.", ident)


def test_fc_expert_examples():
    G = hl("A one. A two.", "C one.")
    assert fc_expert(G, G, TableNli(default=NO_CONTRA)).main == 1.0
    fx = fc_expert(G, G, TableNli(default=NliScores(0.45, 0.45, 0.1)))
    assert (fx.main, fx.changes) == (pytest.approx(0.9), pytest.approx(0.9))
    assert fx.mean == pytest.approx(0.9)
    naive = hl("A one.", ABSENT_SECTION)
    fx = fc_expert(G, naive, TableNli(default=NO_CONTRA))
    assert fx.changes is None and fx.mean == fx.main


def test_fc_expert_matches_double_loop():
    rng = np.random.default_rng(1)
    gm, sm, gc, sc = sentences("gm", 2), sentences("sm", 2), sentences("gc", 2), sentences("sc", 2)
    mm, mc = rng.random((2, 2)), rng.random((2, 2))
    table = {**nli_from(gm, sm, "p_contradict", mm).table, **nli_from(gc, sc, "p_contradict", mc).table}
    fx = fc_expert(hl(text_of(gm), text_of(gc)), hl(text_of(sm), text_of(sc)), TableNli(table))
    assert fx.main == pytest.approx(oracles.consistency(mm), abs=1e-12)
    assert fx.changes == pytest.approx(oracles.consistency(mc), abs=1e-12)


def test_ea_main_examples():
    T = text_of(sentences("t", 3))
    nli = TableNli(default=NO_CONTRA)
    assert ea_main(T, "s one. s two.", nli) == 1.0
    assert all(p.startswith(PREFIX) for p, _ in nli.calls)
    Tp = PrefixedSummary.of(T).sentences
    S = sentences("s", 2)
    m = np.random.default_rng(2).random((3, 2))
    assert ea_main(T, text_of(S), nli_from(list(Tp), S, "p_contradict", m)) == pytest.approx(
        oracles.consistency(m), abs=1e-12)


def test_ea_changes_examples():
    T = "I slept. I woke."
    whole = PREFIX + T
    S = sentences("c", 2)
    nli = nli_from([whole], S, "p_entail", [[0.5, 0.9]])
    assert ea_changes(T, text_of(S), nli) == pytest.approx(0.7, abs=1e-12)
    assert ea_changes(T, "c.", TableNli({(whole, "c."): NliScores(1.0, 0.0, 0.0)})) == 1.0
    assert all(p.count(PREFIX) == 1 for p, _ in nli.calls)
    assert ea_changes(T, ABSENT_SECTION, nli) is None
    assert ea_changes(T, "", nli) is None


def test_intra_nli_examples():
    assert intra_nli("Just one.", TableNli()) == 1.0
    three = sentences("s", 3)
    assert intra_nli(text_of(three), TableNli(default=NO_CONTRA)) == 1.0
    m = [[0, 0.1, 0.2], [0.3, 0, 0.4], [0.5, 0.6, 0]]
    nli = nli_from(three, three, "p_contradict", m)
    hand = 1 - (0.1 + 0.2 + 0.3 + 0.4 + 0.5 + 0.6) / 6
    assert intra_nli(text_of(three), nli) == pytest.approx(hand, abs=1e-12)
    assert intra_nli(hl("A one. A two.", "C one."), TableNli(default=NO_CONTRA)) == 1.0


def test_coherence_examples():
    assert coherence_score("src", "a b c", UniformLm(10)) == -1.0
    lm = HashedUnigramLm()
    assert coherence_score("i was sad", "they were sad", lm) == coherence_score("i was sad", "they were sad", lm)
    six = "w0 w1 w2 w3 w4 w5"
    expected = -sum(i % 3 for i in range(6)) / 6
    assert coherence_score("s", six, SequenceLm(logliks=lambda i: -(i % 3))) == pytest.approx(expected, abs=1e-15)
    assert coherence_score("s", six, None) is None


def test_fluency_examples():
    assert fluency_ppl(" ".join(f"w{i}" for i in range(7)), UniformLm(50)) == 50.0
    assert fluency_ppl("a b c", SequenceLm([1])) == 1.0
    assert fluency_ppl("a b", SequenceLm([Fraction(1, 2), Fraction(1, 8)])) == 4.0
    with pytest.raises(ValueError):
        fluency_ppl("   ", UniformLm(5))


@pytest.mark.parametrize("V", [2, 3, 7, 50, 97, 1000, 1999])
def test_uniform_ppl_exact(V):
    assert fluency_ppl("a b c d e f g h i j k", UniformLm(V)) == float(V)


def test_evidence_intersection_examples():
    a = EvidenceSet("t", ("i feel alone", "no friends"))
    assert evidence_intersection([a, a], TableEmbedder()).evidences == a.evidences
    x = EvidenceSet("t", ("i feel alone",))
    y = EvidenceSet("t", ("i feel alone at night",))
    emb = TableEmbedder(cosines={("i feel alone", "i feel alone at night"): 0.9})
    assert evidence_intersection([x, y], emb).evidences == ("i feel alone",)
    p = EvidenceSet("t", ("school stress",))
    q = EvidenceSet("t", ("family dinner",))
    assert evidence_intersection([p, q], TableEmbedder()).evidences == ()
    with pytest.raises(ValueError):
        evidence_intersection([p], TableEmbedder())
    with pytest.raises(ValueError):
        evidence_intersection([p, EvidenceSet("u", ("x",))], TableEmbedder())


def test_evidence_cosine_rule_picks_shorter_and_threshold():
    x = EvidenceSet("t", ("sad all week long",))
    y = EvidenceSet("t", ("so down",))
    hi = TableEmbedder(cosines={("sad all week long", "so down"): 0.6})
    lo = TableEmbedder(cosines={("sad all week long", "so down"): 0.59})
    assert evidence_intersection([x, y], hi).evidences == ("so down",)
    assert evidence_intersection([x, y], lo).evidences == ()


def test_permutation_examples():
    assert permutation_test([0.1, 0.5, 0.3], [0.1, 0.5, 0.3]) == 1.0
    a, b = [0.9, 0.8, 0.7, 0.95], [0.5, 0.6, 0.65, 0.4]
    assert permutation_test(a, b, n_resamples=16) == oracles.permutation_exact(a, b)
    # hand count: all differences positive, only the all-plus and all-minus patterns reach the observed mean
    assert permutation_test(a, b, n_resamples=16) == 2 / 16
    mc1 = permutation_test(a * 5, b * 5, n_resamples=1000, seed=3)
    assert mc1 == permutation_test(a * 5, b * 5, n_resamples=1000, seed=3)
    assert 0 < mc1 <= 1
    with pytest.raises(ValueError):
        permutation_test([1, 2], [1])


# --- stub backends ------------------------------------------------------------------

def test_stub_backend_invariants():
    emb = TokenRecallEmbedder()
    assert emb.recall_score("i feel alone", "i feel alone") == 1.0
    assert np.linalg.norm(emb.embed("some words here")) == pytest.approx(1.0)
    s = LexicalNli().score("i am not happy", "i am happy")
    assert s.p_contradict == 1.0
    with pytest.raises(ValueError):
        NliScores(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        SequenceLm([0]).perplexity("a")


# --- properties -----------------------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_consistency_is_one_minus_mean(n, m, seed):
    rng = np.random.default_rng(seed)
    mat = rng.random((n, m))
    A, B = sentences("a", n), sentences("b", m)
    assert consistency(A, B, nli_from(A, B, "p_contradict", mat)) == pytest.approx(1 - mat.mean(), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_nli_metrics_in_unit_interval(n, m, seed):
    rng = np.random.default_rng(seed)
    nli = FunctionNli(lambda p, h: random_simplex(rng))
    A, B = sentences("a", n), sentences("b", m)
    vals = [consistency(A, B, nli), fc_timeline(A, text_of(B), nli), ea_main(text_of(A), text_of(B), nli),
            ea_changes(text_of(A), text_of(B), nli), intra_nli(text_of(A + B), nli)]
    assert all(0.0 <= v <= 1.0 for v in vals)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_mhic_monotone(ne, nt, seed, bump):
    rng = np.random.default_rng(seed)
    mat = rng.random((ne, nt))
    ev, ts = sentences("e", ne), sentences("t", nt)
    base = mhic_sem(ev, text_of(ts), embedder_from(ev, ts, mat))
    i, j = rng.integers(ne), rng.integers(nt)
    up = mat.copy()
    up[i, j] = max(up[i, j], bump)
    assert mhic_sem(ev, text_of(ts), embedder_from(ev, ts, up)) >= base
    assert base == pytest.approx(oracles.mhic(mat), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_intra_ordered_equals_unordered_for_symmetric(n, seed):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)), 1)
    sym = upper + upper.T
    ss = sentences("s", n)
    val = intra_nli(text_of(ss), nli_from(ss, ss, "p_contradict", sym))
    unordered = np.mean([1 - sym[i, j] for i in range(n) for j in range(i + 1, n)])
    assert val == pytest.approx(unordered, abs=1e-12)
    assert val == pytest.approx(oracles.intra(sym), abs=1e-12)


# --- reports ------------------------------------------------------------------------------

def _record(tid="tl-1", text="I felt alone at school. My friends helped.", main="The individual felt alone.",
            changes="Their mood improved."):
    return {"timeline_id": tid, "system": "thvae", "variant": "full", "timeline_summary": text,
            "main_body": main, "changes_section": changes}


def _backends():
    return Backends(TokenRecallEmbedder(), LexicalNli(), HashedUnigramLm())


def test_evaluate_record_and_report_roundtrip():
    rec = _record()
    gold = {"timeline_id": "tl-1", "main_body": "The individual is lonely.", "changes_section": "Mood improved."}
    ev = EvidenceSet("tl-1", ("felt alone",))
    r1 = evaluate_record(rec, _backends(), gold=gold, evidence=ev)
    r2 = evaluate_record(rec, _backends(), gold=gold, evidence=ev)
    assert r1 == r2
    assert r1.mhic_sem == 1.0 and r1.coherence <= 0 and r1.ppl_timeline >= 1
    assert r1.provenance["mhic_sem"] == "stub:token-recall"
    doc = report_document("run", "hash", _backends().ids, [r1])
    assert dumps_report(doc) == dumps_report(report_document("run", "hash", _backends().ids, [r2]))
    assert validate_report(doc) == [r1]
    with pytest.raises(ValueError):
        MetricReport("t", "thvae", "full", mhic_sem=1.5)
    with pytest.raises(ValueError):
        MetricReport("t", "thvae", "full", coherence=0.1)
    with pytest.raises(ValueError):
        MetricReport.from_dict({**r1.to_dict(), "bogus": 1})


def test_naive_record_has_absent_changes_metrics():
    rec = _record(changes=ABSENT_SECTION)
    rec["system"] = "naive"
    gold = {"timeline_id": "tl-1", "main_body": "The individual is lonely.", "changes_section": "Mood improved."}
    r = evaluate_record(rec, _backends(), gold=gold)
    assert r.fc_expert_c is None and r.ea_c is None and r.fc_expert == r.fc_expert_m


def test_merge_evidence_groups():
    recs = [{"timeline_id": "a", "annotator": "x", "evidences": ["i feel alone"]},
            {"timeline_id": "a", "annotator": "y", "evidences": ["i feel alone at night"]},
            {"timeline_id": "b", "annotator": "x", "evidences": ["solo"]}]
    merged = merge_evidence(recs, TokenRecallEmbedder())
    assert merged["a"].evidences == ("i feel alone",) and merged["b"].evidences == ("solo",)


def test_compare_reports():
    reps_a = [MetricReport(f"t{i}", "thvae", "full", mhic_sem=0.9 - i / 100) for i in range(6)]
    reps_b = [MetricReport(f"t{i}", "llm_tldr", "full", mhic_sem=0.5 + i / 100) for i in range(6)]
    a = report_document("a", None, {}, reps_a)
    b = report_document("b", None, {}, reps_b)
    comps = compare_reports(a, b, n_resamples=100, seed=0)
    assert [c["metric"] for c in comps] == ["mhic_sem"]
    c = comps[0]
    assert c["p_value"] == pytest.approx(2 / 64) and c["n"] == 6
    assert c["system_a"] == "thvae/full" and c["system_b"] == "llm_tldr/full"
