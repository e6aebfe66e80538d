"""Scoring backends behind three small interfaces.

The stubs are exact and deterministic so the metric formulas can be checked
against hand computations.  The ``Hf*`` adapters wrap pretrained models and
import ``transformers`` only when constructed.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Protocol, Sequence, runtime_checkable

import mpmath
import numpy as np

_WORD = re.compile(r"[\w']+")
_LM_TOKEN = re.compile(r"[\w']+|[^\w\s]")
_NEGATIONS = frozenset({"not", "no", "never", "nothing", "nobody", "none", "cannot"})


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def lm_tokens(text: str) -> list[str]:
    """Tokens seen by the stub language models: words and punctuation marks."""
    return _LM_TOKEN.findall(text.lower())


@dataclass(frozen=True)
class NliScores:
    p_entail: float
    p_neutral: float
    p_contradict: float

    def __post_init__(self):
        ps = (self.p_entail, self.p_neutral, self.p_contradict)
        if any(p < 0 or not math.isfinite(p) for p in ps) or abs(sum(ps) - 1.0) > 1e-6:
            raise ValueError(f"NLI scores are not a probability simplex: {ps}")


@runtime_checkable
class Embedder(Protocol):
    backend_id: str

    def recall_score(self, reference: str, candidate: str) -> float: ...

    def embed(self, text: str) -> np.ndarray: ...


@runtime_checkable
class NliScorer(Protocol):
    backend_id: str

    def score(self, premise: str, hypothesis: str) -> NliScores: ...


@runtime_checkable
class LmScorer(Protocol):
    backend_id: str

    def perplexity(self, text: str) -> float: ...

    def conditional_loglik(self, source: str, target: str) -> float: ...


def cosine(embedder: Embedder, a: str, b: str) -> float:
    """Cosine similarity, using the backend's own ``cosine`` when it has one."""
    own = getattr(embedder, "cosine", None)
    if own is not None:
        return float(own(a, b))
    return float(np.dot(embedder.embed(a), embedder.embed(b)))


# --- embedders -------------------------------------------------------------------

@dataclass
class TokenRecallEmbedder:
    """Recall = share of distinct reference words found in the candidate.

    ``embed`` is a signed, hashed bag of words projected to ``dim`` and
    normalised, so identical texts have cosine 1.
    """

    dim: int = 256
    backend_id: str = "stub:token-recall"

    def recall_score(self, reference: str, candidate: str) -> float:
        ref = set(words(reference))
        if not ref:
            raise ValueError("reference has no words")
        return len(ref & set(words(candidate))) / len(ref)

    def embed(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for w in words(text):
            h = hashlib.sha256(w.encode()).digest()
            v[int.from_bytes(h[:4], "little") % self.dim] += 1.0 if h[4] & 1 else -1.0
        n = np.linalg.norm(v)
        if n == 0:
            raise ValueError(f"cannot embed text without words: {text!r}")
        return v / n


@dataclass
class TableEmbedder:
    """Looks recall and cosine values up in explicit tables (for tests)."""

    recall: Mapping[tuple[str, str], float] = field(default_factory=dict)
    cosines: Mapping[tuple[str, str], float] = field(default_factory=dict)
    default_recall: float | None = None
    default_cosine: float = 0.0
    backend_id: str = "stub:table-embedder"

    def recall_score(self, reference: str, candidate: str) -> float:
        if (reference, candidate) in self.recall:
            return self.recall[(reference, candidate)]
        if reference == candidate:
            return 1.0
        if self.default_recall is None:
            raise KeyError((reference, candidate))
        return self.default_recall

    def cosine(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        return self.cosines.get((a, b), self.cosines.get((b, a), self.default_cosine))

    def embed(self, text: str) -> np.ndarray:
        return TokenRecallEmbedder().embed(text)


# --- NLI ---------------------------------------------------------------------------

@dataclass
class LexicalNli:
    """Word-overlap NLI stub.

    r is the share of distinct hypothesis words found in the premise.  When
    exactly one side contains a negation word the overlap counts as
    contradiction, otherwise as entailment; the remainder is neutral.
    """

    backend_id: str = "stub:lexical-nli"

    def score(self, premise: str, hypothesis: str) -> NliScores:
        hyp = set(words(hypothesis))
        prem = set(words(premise))
        r = len(hyp & prem) / len(hyp) if hyp else 0.0
        if bool(hyp & _NEGATIONS) != bool(prem & _NEGATIONS):
            return NliScores(0.0, 1.0 - r, r)
        return NliScores(r, 1.0 - r, 0.0)


@dataclass
class TableNli:
    """Explicit (premise, hypothesis) -> scores table, with an optional default."""

    table: Mapping[tuple[str, str], NliScores] = field(default_factory=dict)
    default: NliScores | None = None
    backend_id: str = "stub:table-nli"
    calls: list[tuple[str, str]] = field(default_factory=list)

    def score(self, premise: str, hypothesis: str) -> NliScores:
        self.calls.append((premise, hypothesis))
        if (premise, hypothesis) in self.table:
            return self.table[(premise, hypothesis)]
        if self.default is None:
            raise KeyError((premise, hypothesis))
        return self.default


@dataclass
class FunctionNli:
    fn: Callable[[str, str], NliScores]
    backend_id: str = "stub:function-nli"

    def score(self, premise: str, hypothesis: str) -> NliScores:
        return self.fn(premise, hypothesis)


# --- language models ---------------------------------------------------------------

_MP_DIGITS = 60


class ExactLm:
    """Base for stubs that assign exact rational token probabilities.

    Perplexity is evaluated in high precision and rounded once, so a
    model that is uniform over V tokens reports exactly V.
    """

    backend_id = "stub:exact-lm"

    def token_probs(self, text: str) -> list[Fraction]:
        raise NotImplementedError

    def conditional_token_logliks(self, source: str, target: str) -> list[float]:
        raise NotImplementedError

    def perplexity(self, text: str) -> float:
        probs = self.token_probs(text)
        if not probs:
            raise ValueError("perplexity of an empty text is undefined")
        if any(not 0 < p <= 1 for p in probs):
            raise ValueError("token probabilities must lie in (0, 1]")
        with mpmath.workdps(_MP_DIGITS):
            nll = -mpmath.fsum(mpmath.log(mpmath.mpf(p.numerator) / p.denominator) for p in probs)
            return float(mpmath.exp(nll / len(probs)))

    def conditional_loglik(self, source: str, target: str) -> float:
        ll = self.conditional_token_logliks(source, target)
        if not ll:
            raise ValueError("conditional log-likelihood of an empty target is undefined")
        return math.fsum(ll) / len(ll)


class UniformLm(ExactLm):
    def __init__(self, vocab_size: int, loglik: float = -1.0):
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.vocab_size = vocab_size
        self.loglik = loglik
        self.backend_id = f"stub:uniform-lm-{vocab_size}"

    def token_probs(self, text: str) -> list[Fraction]:
        return [Fraction(1, self.vocab_size)] * len(lm_tokens(text))

    def conditional_token_logliks(self, source: str, target: str) -> list[float]:
        return [self.loglik] * len(lm_tokens(target))


class SequenceLm(ExactLm):
    """Returns a fixed probability / log-likelihood per token position (cycled)."""

    def __init__(self, probs: Sequence[Fraction | int | str] = (1,),
                 logliks: Sequence[float] | Callable[[int], float] = (0.0,)):
        self.probs = [Fraction(p) for p in probs]
        self.logliks = logliks
        self.backend_id = "stub:sequence-lm"

    def token_probs(self, text: str) -> list[Fraction]:
        return [self.probs[i % len(self.probs)] for i in range(len(lm_tokens(text)))]

    def conditional_token_logliks(self, source: str, target: str) -> list[float]:
        n = len(lm_tokens(target))
        if callable(self.logliks):
            return [float(self.logliks(i)) for i in range(n)]
        return [float(self.logliks[i % len(self.logliks)]) for i in range(n)]


class HashedUnigramLm(ExactLm):
    """Deterministic default: each word gets a hashed probability in [1/100, 1/2].

    Under conditioning, target words that occur in the source get 1/2.
    """

    backend_id = "stub:hashed-unigram-lm"

    @staticmethod
    def _p(word: str) -> Fraction:
        h = int.from_bytes(hashlib.sha256(word.encode()).digest()[:4], "little")
        return Fraction(1 + h % 50, 100)

    def token_probs(self, text: str) -> list[Fraction]:
        return [self._p(w) for w in lm_tokens(text)]

    def conditional_token_logliks(self, source: str, target: str) -> list[float]:
        src = set(lm_tokens(source))
        return [math.log(0.5) if w in src else math.log(self._p(w)) for w in lm_tokens(target)]


# --- pretrained adapters (optional dependencies) -----------------------------------

class HfNli:
    """Sequence-classification NLI model; label names are read from its config."""

    def __init__(self, model_name: str, device: str = "cpu"):
        import torch
        from transformers import AutoModelForSequenceClassification, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModelForSequenceClassification.from_pretrained(model_name).to(device).eval()
        self.device = device
        labels = {v.lower(): k for k, v in self.model.config.id2label.items()}
        try:
            self._idx = (labels["entailment"], labels["neutral"], labels["contradiction"])
        except KeyError as exc:
            raise ValueError(f"{model_name}: cannot map NLI labels {labels}") from exc
        self.backend_id = f"hf-nli:{model_name}"

    def score(self, premise: str, hypothesis: str) -> NliScores:
        enc = self.tokenizer(premise, hypothesis, return_tensors="pt", truncation=True).to(self.device)
        with self._torch.no_grad():
            p = self._torch.softmax(self.model(**enc).logits[0].double(), -1)
        e, n, c = (float(p[i]) for i in self._idx)
        s = e + n + c
        return NliScores(e / s, n / s, c / s)


class HfBertScore:
    """Token-embedding recall in the manner of BERTScore (no idf, no baseline rescaling)."""

    def __init__(self, model_name: str = "roberta-large", layer: int = 17, device: str = "cpu"):
        import torch
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name).to(device).eval()
        self.layer = layer
        self.device = device
        self.backend_id = f"hf-bertscore:{model_name}:{layer}"

    def _tokens(self, text: str):
        enc = self.tokenizer(text, return_tensors="pt", truncation=True).to(self.device)
        with self._torch.no_grad():
            hs = self.model(**enc, output_hidden_states=True).hidden_states[self.layer][0, 1:-1]
        return self._torch.nn.functional.normalize(hs.double(), dim=-1)

    def recall_score(self, reference: str, candidate: str) -> float:
        r, c = self._tokens(reference), self._tokens(candidate)
        return float((r @ c.T).max(dim=1).values.mean().clamp(0.0, 1.0))

    def embed(self, text: str) -> np.ndarray:
        v = self._tokens(text).mean(0).cpu().numpy()
        return v / np.linalg.norm(v)


class HfLm:
    """Causal LM for perplexity and a seq2seq LM for conditional likelihood."""

    def __init__(self, causal_name: str = "gpt2", seq2seq_name: str | None = "facebook/bart-large-cnn",
                 device: str = "cpu"):
        import torch
        from transformers import AutoModelForCausalLM, AutoModelForSeq2SeqLM, AutoTokenizer

        self._torch = torch
        self.device = device
        self.tok = AutoTokenizer.from_pretrained(causal_name)
        self.lm = AutoModelForCausalLM.from_pretrained(causal_name).to(device).eval()
        self.s2s_tok = self.s2s = None
        if seq2seq_name:
            self.s2s_tok = AutoTokenizer.from_pretrained(seq2seq_name)
            self.s2s = AutoModelForSeq2SeqLM.from_pretrained(seq2seq_name).to(device).eval()
        self.backend_id = f"hf-lm:{causal_name}|{seq2seq_name}"

    def perplexity(self, text: str) -> float:
        ids = self.tok(text, return_tensors="pt").input_ids.to(self.device)
        if ids.shape[1] < 2:
            raise ValueError("text too short for perplexity")
        with self._torch.no_grad():
            loss = self.lm(ids, labels=ids).loss
        return float(self._torch.exp(loss))

    def conditional_loglik(self, source: str, target: str) -> float:
        if self.s2s is None:
            raise RuntimeError("no seq2seq model configured")
        src = self.s2s_tok(source, return_tensors="pt", truncation=True).to(self.device)
        tgt = self.s2s_tok(text_target=target, return_tensors="pt", truncation=True).input_ids.to(self.device)
        with self._torch.no_grad():
            loss = self.s2s(**src, labels=tgt).loss
        return -float(loss)
