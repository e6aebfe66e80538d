"""Timeline hierarchical VAE.

Shapes follow torch conventions: sequences are (batch, time, dim) and
feature maps inside the latent hierarchy are (batch, channels, length).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from ..keyphrases import KeyPhraseSet
from ..timeline import Segment, ValidationError
from .cells import ResidualCell1, ResidualCell2
from .config import ConfigurationError, ThVaeConfig
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

ATTENTION_EPS = 1e-8


class WeightSource(str, enum.Enum):
    RANDOM = "random"
    PRETRAINED = "pretrained"


class Mode(str, enum.Enum):
    POSTERIOR = "posterior"
    PRIOR = "prior"


class TrainingInstabilityError(RuntimeError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class NumericError(ValueError):
    pass


@dataclass
class EncodedSegment:
    keyphrase_encoding: torch.Tensor          # (d,)
    word_weights: torch.Tensor                # (m,)
    weighted_embedding_sequence: torch.Tensor  # (m, d)
    segment_encoding: torch.Tensor            # (d,)
    hidden_states: torch.Tensor               # (m, d), encoder outputs
    token_ids: list[int]


@dataclass
class LatentLayer:
    mu: torch.Tensor
    log_var: torch.Tensor
    z: torch.Tensor
    prior_mu: torch.Tensor
    prior_log_var: torch.Tensor


@dataclass
class LatentHierarchy:
    layers: list[LatentLayer]
    memory: torch.Tensor  # (batch, num_latents + pooled_length, d)


@dataclass
class ElboTerms:
    reconstruction_nll: torch.Tensor
    kl_per_layer: torch.Tensor
    kl_weight: float
    total_loss: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "recon_nll": float(self.reconstruction_nll.detach()),
            "kl": [float(k) for k in self.kl_per_layer.detach()],
            "beta": float(self.kl_weight),
            "total": float(self.total_loss.detach()),
        }


def gaussian_kl(mu_q, log_var_q, mu_p, log_var_p):
    """Elementwise KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p)).

    Written with expm1 so that the variance term stays >= 0 under rounding.
    """
    d = log_var_q - log_var_p
    var_term = torch.expm1(d) - d
    mean_term = (mu_q - mu_p) ** 2 * torch.exp(-log_var_p)
    return (0.5 * (var_term + mean_term)).clamp_min(0.0)


def attention_weights(v: torch.Tensor, words: torch.Tensor,
                      mask: torch.Tensor | None = None) -> torch.Tensor:
    """Normalised, non-negative cosine similarity between ``v`` and each word.

    ``v`` is (d,) or (B, d); ``words`` is (m, d) or (B, m, d).  Negative cosines
    are clamped to 0 and every weight gets ``ATTENTION_EPS`` before
    normalisation, so the weights are always a proper distribution.
    """
    squeeze = words.dim() == 2
    if squeeze:
        words, v = words.unsqueeze(0), v.reshape(1, -1)
        mask = None if mask is None else mask.unsqueeze(0)
    v_norm = v.norm(dim=-1)
    if bool((v_norm == 0).any()):
        raise NumericError("key-phrase encoding is the zero vector")
    w_norm = words.norm(dim=-1).clamp_min(1e-12)
    cos = torch.einsum("bmd,bd->bm", words, v) / (w_norm * v_norm.unsqueeze(1))
    c = cos.clamp_min(0.0) + ATTENTION_EPS
    if mask is not None:
        c = c * mask.to(c.dtype)
    alpha = c / c.sum(dim=-1, keepdim=True)
    return alpha[0] if squeeze else alpha


def adaptive_pool(seq: torch.Tensor, length: int) -> torch.Tensor:
    """Average-pool a (T, d) sequence to (length, d)."""
    return F.adaptive_avg_pool1d(seq.t().unsqueeze(0), length)[0].t()


@dataclass
class Batch:
    tokens: torch.Tensor           # (B, T) padded segment tokens
    lengths: torch.Tensor          # (B,)
    phrase_ids: list[list[list[int]]]


class ThVae(nn.Module):
    def __init__(self, config: ThVaeConfig, vocabulary: Vocabulary,
                 weight_source: WeightSource = WeightSource.RANDOM,
                 pretrained_embeddings: np.ndarray | None = None):
        super().__init__()
        if vocabulary.embedding_dim != config.embedding_dim:
            raise ConfigurationError("vocabulary.embedding_dim must equal config.embedding_dim")
        self.config = config
        self.vocabulary = vocabulary
        self.weight_source = WeightSource(weight_source)
        self.training_step_count = 0
        d, L, V = config.latent_dim, config.pooled_length, len(vocabulary)

        self.embedding = nn.Embedding(V, d, padding_idx=vocabulary.pad_id)
        self.phrase_gru = nn.GRU(d, d, batch_first=True)
        self.default_phrase_vector = nn.Parameter(torch.randn(d) / d ** 0.5)
        self.segment_gru = nn.GRU(d, d, batch_first=True)
        self.timeline_gru = nn.GRU(d, d, batch_first=True)

        def block():
            return nn.Sequential(*[
                ResidualCell1(d, config.conv_kernel, config.conv_mul_kernels, config.se_reduction)
                for _ in range(config.cells_per_block)])

        self.entry_block = block()
        self.top_state = nn.Parameter(torch.randn(1, d, L) * 0.1)
        self.groups = nn.ModuleList(
            nn.Sequential(*[ResidualCell2(d, config.conv_kernel, config.se_reduction)
                            for _ in range(config.cells_per_group)])
            for _ in range(config.num_latents))
        self.prior_heads = nn.ModuleList(nn.Linear(d, 2 * d) for _ in range(config.num_latents - 1))
        self.posterior_heads = nn.ModuleList(nn.Linear(2 * d, 2 * d) for _ in range(config.num_latents))
        self.latent_proj = nn.ModuleList(nn.Linear(d, d) for _ in range(config.num_latents))
        self.exit_block = block()

        n_pos = max(config.max_decode_tokens, config.max_segment_tokens) + 2
        self.position = nn.Embedding(n_pos, d)
        layer = nn.TransformerDecoderLayer(d, config.decoder_heads, 4 * d, config.dropout,
                                           activation="gelu", batch_first=True)
        self.transformer = nn.TransformerDecoder(layer, config.decoder_layers)
        self.output_gru = nn.GRU(d, d, batch_first=True)
        self.output = nn.Linear(d, V)

        if self.weight_source is WeightSource.PRETRAINED:
            if pretrained_embeddings is None:
                raise ConfigurationError("PRETRAINED weight source needs pretrained_embeddings")
            emb = torch.as_tensor(np.asarray(pretrained_embeddings), dtype=self.embedding.weight.dtype)
            if emb.shape != self.embedding.weight.shape:
                raise ConfigurationError(
                    f"pretrained embeddings have shape {tuple(emb.shape)}, expected {tuple(self.embedding.weight.shape)}")
            with torch.no_grad():
                self.embedding.weight.copy_(emb)

    # --- input preparation ---------------------------------------------

    def segment_token_ids(self, text: str) -> list[int]:
        ids = self.vocabulary.encode(text)
        if not ids:
            raise ValidationError("segment text has no tokens")
        limit = self.config.max_segment_tokens
        if len(ids) > limit:
            logger.warning("segment of %d tokens truncated to %d", len(ids), limit)
            ids = ids[:limit]
        return ids

    def phrase_token_ids(self, phrases: KeyPhraseSet | Sequence[str] | None) -> list[list[int]]:
        if phrases is None:
            return []
        texts = phrases.texts if isinstance(phrases, KeyPhraseSet) else list(phrases)
        out = []
        for t in texts:
            ids = self.vocabulary.encode(t)
            if ids:
                out.append(ids)
        return out

    def make_batch(self, examples: Sequence[tuple[list[int], list[list[int]]]]) -> Batch:
        lengths = torch.tensor([len(ids) for ids, _ in examples])
        tokens = torch.full((len(examples), int(lengths.max())), self.vocabulary.pad_id, dtype=torch.long)
        for i, (ids, _) in enumerate(examples):
            tokens[i, :len(ids)] = torch.tensor(ids)
        return Batch(tokens, lengths, [p for _, p in examples])

    # --- encoders ----------------------------------------------------------

    def encode_phrases(self, phrase_ids: list[list[int]]) -> torch.Tensor:
        """Last GRU state over mean-pooled phrase embeddings, or the learned default."""
        if not phrase_ids:
            return self.default_phrase_vector
        e = torch.stack([self.embedding(torch.tensor(ids)).mean(0) for ids in phrase_ids])
        _, h = self.phrase_gru(e.unsqueeze(0))
        return h[0, 0]

    def encode_segments(self, batch: Batch):
        """Returns (v, alpha, weighted, outputs, last) for a padded batch."""
        v = torch.stack([self.encode_phrases(p) for p in batch.phrase_ids])
        words = self.embedding(batch.tokens)
        mask = torch.arange(batch.tokens.shape[1]).unsqueeze(0) < batch.lengths.unsqueeze(1)
        alpha = attention_weights(v, words, mask)
        weighted = alpha.unsqueeze(-1) * words
        packed = pack_padded_sequence(weighted, batch.lengths, batch_first=True, enforce_sorted=False)
        out, h = self.segment_gru(packed)
        outputs, _ = pad_packed_sequence(out, batch_first=True, total_length=batch.tokens.shape[1])
        return v, alpha, weighted, outputs, h[0]

    def pooled_segments(self, outputs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        L = self.config.pooled_length
        return torch.stack([adaptive_pool(outputs[b, :int(n)], L) for b, n in enumerate(lengths)])

    def encode_timeline_states(self, segment_encodings: torch.Tensor) -> torch.Tensor:
        """(k, d) chronological segment encodings -> (pooled_length, d)."""
        out, _ = self.timeline_gru(segment_encodings.unsqueeze(0))
        return adaptive_pool(out[0], self.config.pooled_length)

    # --- latent hierarchy -----------------------------------------------

    def hierarchy(self, pooled: torch.Tensor | None, mode: Mode = Mode.POSTERIOR,
                  batch_size: int = 1, deterministic: bool = False,
                  generator: torch.Generator | None = None) -> LatentHierarchy:
        mode = Mode(mode)
        if mode is Mode.POSTERIOR:
            if pooled is None or pooled.dim() != 3 or pooled.shape[1:] != (
                    self.config.pooled_length, self.config.latent_dim):
                raise ConfigurationError("posterior pass needs input of shape (B, pooled_length, latent_dim)")
            features = self.entry_block(pooled.transpose(1, 2)).mean(dim=2)
            batch_size = pooled.shape[0]
            _check_finite(features, "entry block", None)
        state = self.top_state.expand(batch_size, -1, -1)
        layers = []
        for i, group in enumerate(self.groups):
            state = group(state)
            ctx = state.mean(dim=2)
            if i == 0:
                p_mu = torch.zeros_like(ctx)
                p_lv = torch.zeros_like(ctx)
            else:
                p_mu, p_lv = self.prior_heads[i - 1](ctx).chunk(2, dim=-1)
            if mode is Mode.POSTERIOR:
                q_mu, q_lv = self.posterior_heads[i](torch.cat([ctx, features], dim=-1)).chunk(2, dim=-1)
            else:
                q_mu, q_lv = p_mu, p_lv
            if deterministic:
                z = q_mu
            else:
                noise = torch.randn(q_mu.shape, generator=generator, dtype=q_mu.dtype)
                z = q_mu + torch.exp(0.5 * q_lv) * noise
            _check_finite(torch.cat([q_mu, q_lv, z]), "latent group", i)
            layers.append(LatentLayer(q_mu, q_lv, z, p_mu, p_lv))
            state = state + self.latent_proj[i](z).unsqueeze(2)
        out = self.exit_block(state)
        memory = torch.cat([torch.stack([lay.z for lay in layers], dim=1), out.transpose(1, 2)], dim=1)
        _check_finite(memory, "exit block", None)
        return LatentHierarchy(layers, memory)

    # --- decoder ------------------------------------------------------------

    def decoder_logits(self, tokens_in: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        T = tokens_in.shape[1]
        x = self.embedding(tokens_in) + self.position(torch.arange(T)).unsqueeze(0)
        causal = nn.Transformer.generate_square_subsequent_mask(T, dtype=x.dtype)
        y = self.transformer(x, memory, tgt_mask=causal, tgt_is_causal=True)
        o, _ = self.output_gru(y)
        return self.output(o)

    @torch.no_grad()
    def decode(self, memory: torch.Tensor, max_tokens: int | None = None,
               generator: torch.Generator | None = None, sample: bool = False) -> list[int]:
        """Autoregressive decoding for a single memory (1, M, d)."""
        vocab = self.vocabulary
        max_tokens = min(max_tokens or self.config.max_decode_tokens, self.position.num_embeddings - 1)
        banned = [vocab.pad_id, vocab.bos_id]
        seq = [vocab.bos_id]
        h = None
        out: list[int] = []
        for step in range(max_tokens):
            tokens_in = torch.tensor([seq])
            T = len(seq)
            x = self.embedding(tokens_in) + self.position(torch.arange(T)).unsqueeze(0)
            causal = nn.Transformer.generate_square_subsequent_mask(T, dtype=x.dtype)
            y = self.transformer(x, memory, tgt_mask=causal, tgt_is_causal=True)
            o, h = self.output_gru(y[:, -1:], h)
            logits = self.output(o[0, -1]).clone()
            logits[banned] = float("-inf")
            if step == 0:
                logits[vocab.eos_id] = float("-inf")
            if sample:
                nxt = int(torch.multinomial(torch.softmax(logits, -1), 1, generator=generator))
            else:
                nxt = int(torch.argmax(logits))
            if nxt == vocab.eos_id:
                break
            out.append(nxt)
            seq.append(nxt)
        return out

    # --- objective ----------------------------------------------------------

    def batch_elbo(self, batch: Batch, beta: float, deterministic: bool = False,
                   generator: torch.Generator | None = None) -> ElboTerms:
        _, _, _, outputs, _ = self.encode_segments(batch)
        pooled = self.pooled_segments(outputs, batch.lengths)
        hier = self.hierarchy(pooled, Mode.POSTERIOR, deterministic=deterministic, generator=generator)
        return self.elbo_from_hierarchy(batch, hier, beta)

    def elbo_from_hierarchy(self, batch: Batch, hier: LatentHierarchy, beta: float) -> ElboTerms:
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"kl weight must be in [0, 1], got {beta}")
        vocab = self.vocabulary
        B = batch.tokens.shape[0]
        bos = torch.full((B, 1), vocab.bos_id, dtype=torch.long)
        pad = torch.full((B, 1), vocab.pad_id, dtype=torch.long)
        tokens_in = torch.cat([bos, batch.tokens], dim=1)
        targets = torch.cat([batch.tokens, pad], dim=1)
        targets[torch.arange(B), batch.lengths] = vocab.eos_id
        logits = self.decoder_logits(tokens_in, hier.memory)
        nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                              ignore_index=vocab.pad_id, reduction="sum") / B
        kl = torch.stack([
            gaussian_kl(lay.mu, lay.log_var, lay.prior_mu, lay.prior_log_var).sum(dim=-1).mean()
            for lay in hier.layers])
        total = nll + beta * kl.sum()
        if not bool(torch.isfinite(total)):
            raise TrainingInstabilityError("non-finite ELBO")
        return ElboTerms(nll, kl, float(beta), total)


def _check_finite(t: torch.Tensor, where: str, layer: int | None):
    if not bool(torch.isfinite(t).all()):
        at = f" at latent layer {layer}" if layer is not None else ""
        raise TrainingInstabilityError(f"non-finite activations in {where}{at}", layer)


# --- functional surface ------------------------------------------------------

def encode_keyphrases(phrases: KeyPhraseSet | Sequence[str], model: ThVae) -> torch.Tensor:
    return model.encode_phrases(model.phrase_token_ids(phrases))


def encode_segment(segment: Segment | str, phrases: KeyPhraseSet | Sequence[str] | None,
                   model: ThVae) -> EncodedSegment:
    text = segment.text if isinstance(segment, Segment) else segment
    ids = model.segment_token_ids(text)
    batch = model.make_batch([(ids, model.phrase_token_ids(phrases))])
    v, alpha, weighted, outputs, last = model.encode_segments(batch)
    return EncodedSegment(v[0], alpha[0], weighted[0], last[0], outputs[0], ids)


def encode_timeline(encoded_segments: Sequence[EncodedSegment], model: ThVae) -> torch.Tensor:
    if not encoded_segments:
        raise ValueError("need at least one segment")
    return model.encode_timeline_states(torch.stack([e.segment_encoding for e in encoded_segments]))


def hierarchy_forward(pooled_input: torch.Tensor | None, model: ThVae, mode: Mode = Mode.POSTERIOR,
                      deterministic: bool = True, generator: torch.Generator | None = None) -> LatentHierarchy:
    if pooled_input is not None and pooled_input.dim() == 2:
        pooled_input = pooled_input.unsqueeze(0)
    return model.hierarchy(pooled_input, mode, deterministic=deterministic, generator=generator)


def elbo(segment_tokens: Sequence[int], encoded: EncodedSegment, model: ThVae, beta: float,
         deterministic: bool = False, generator: torch.Generator | None = None) -> ElboTerms:
    pooled = adaptive_pool(encoded.hidden_states, model.config.pooled_length).unsqueeze(0)
    hier = model.hierarchy(pooled, Mode.POSTERIOR, deterministic=deterministic, generator=generator)
    batch = model.make_batch([(list(segment_tokens), [])])
    return model.elbo_from_hierarchy(batch, hier, beta)
