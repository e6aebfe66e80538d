from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from ..keyphrases import KeyPhraseSet
from ..summaries import SummarySystem, TimelineSummary
from ..timeline import Segment, Timeline, segment_timeline
from .checkpoint import save_checkpoint
from .model import Mode, ThVae, TrainingInstabilityError, adaptive_pool

logger = logging.getLogger(__name__)


def kl_weight(step: int, warmup_steps: int) -> float:
    """Linear warm-up of the KL weight from 0 to 1."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


@dataclass
class TrainingReport:
    records: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.records[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.records[-1]["total"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    torch.manual_seed(seed)


def train(corpus: Sequence[tuple[Segment | str, KeyPhraseSet | Sequence[str] | None]],
          model: ThVae, steps: int, seed: int = 0, batch_size: int | None = None,
          checkpoint_path: str | Path | None = None, shuffle: bool = True) -> TrainingReport:
    """Fit the model by reconstructing each segment.

    One step is one Adam update on one mini-batch; an epoch is one pass over
    the corpus.  At the end of every epoch the model is checkpointed (when a
    path is given) and kept in memory as the last good state.  A non-finite
    loss restores that state and re-raises.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    cfg = model.config
    batch_size = batch_size or cfg.batch_size
    seed_everything(seed)
    order_rng = random.Random(seed)

    examples = []
    for seg, phrases in corpus:
        text = seg.text if isinstance(seg, Segment) else seg
        examples.append((model.segment_token_ids(text), model.phrase_token_ids(phrases)))

    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    report = TrainingReport()
    last_good = copy.deepcopy(model.state_dict())
    step = 0
    epoch = 0
    model.train()
    while step < steps:
        idx = list(range(len(examples)))
        if shuffle:
            order_rng.shuffle(idx)
        epoch_terms = []
        for start in range(0, len(idx), batch_size):
            if step >= steps:
                break
            batch = model.make_batch([examples[i] for i in idx[start:start + batch_size]])
            beta = kl_weight(model.training_step_count, cfg.kl_warmup_steps)
            try:
                terms = model.batch_elbo(batch, beta)
                opt.zero_grad()
                terms.total_loss.backward()
                opt.step()
                _check_parameters(model)
            except TrainingInstabilityError:
                model.load_state_dict(last_good)
                logger.error("training diverged at step %d; restored last good state", step)
                raise
            model.training_step_count += 1
            rec = {"step": step, **terms.as_floats()}
            report.records.append(rec)
            epoch_terms.append(rec)
            step += 1
        if epoch_terms:
            report.epochs.append(_mean_record(epoch, epoch_terms))
            last_good = copy.deepcopy(model.state_dict())
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
        epoch += 1
    model.eval()
    return report


def _check_parameters(model: ThVae) -> None:
    for name, p in model.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise TrainingInstabilityError(f"parameter {name} became non-finite")


def _mean_record(epoch: int, recs: list[dict]) -> dict:
    n = len(recs)
    return {
        "epoch": epoch,
        "recon_nll": sum(r["recon_nll"] for r in recs) / n,
        "kl": [sum(r["kl"][i] for r in recs) / n for i in range(len(recs[0]["kl"]))],
        "beta": recs[-1]["beta"],
        "total": sum(r["total"] for r in recs) / n,
    }


# --- inference --------------------------------------------------------------

@dataclass(frozen=True)
class Decode:
    """Decoding strategy: greedy by default, or ancestral sampling with a seed."""

    sample: bool = False
    seed: int = 0
    stochastic_latents: bool = False

    @classmethod
    def greedy(cls) -> "Decode":
        return cls()

    @classmethod
    def sampled(cls, seed: int) -> "Decode":
        return cls(sample=True, seed=seed)


class UntrainedModelError(RuntimeError):
    pass


@torch.no_grad()
def reconstruct(model: ThVae, text: str, phrases=None, decode: Decode = Decode()) -> list[int]:
    """Decode a segment back from its own posterior (the training path)."""
    model.eval()
    ids = model.segment_token_ids(text)
    batch = model.make_batch([(ids, model.phrase_token_ids(phrases))])
    _, _, _, outputs, _ = model.encode_segments(batch)
    pooled = model.pooled_segments(outputs, batch.lengths)
    gen = torch.Generator().manual_seed(decode.seed)
    hier = model.hierarchy(pooled, Mode.POSTERIOR, deterministic=not decode.stochastic_latents, generator=gen)
    return model.decode(hier.memory, max_tokens=len(ids) + 1, generator=gen, sample=decode.sample)


def token_accuracy(predicted: Sequence[int], target: Sequence[int], eos_id: int) -> float:
    """Position-wise accuracy against ``target + [EOS]``; missing positions count as wrong."""
    ref = list(target) + [eos_id]
    pred = list(predicted) + [eos_id]
    hits = sum(1 for i, t in enumerate(ref) if i < len(pred) and pred[i] == t)
    return hits / len(ref)


@torch.no_grad()
def generate_summary(timeline: Timeline, keyphrases: Sequence[KeyPhraseSet | None], model: ThVae,
                     decode: Decode = Decode()) -> TimelineSummary:
    """Encode every segment, pool the segment sequence and decode one summary."""
    if model.training_step_count == 0:
        raise UntrainedModelError("refusing to generate from an untrained model")
    segments = segment_timeline(timeline)
    if len(keyphrases) != len(segments):
        raise ValueError(f"{len(segments)} segments but {len(keyphrases)} key-phrase sets")
    model.eval()
    examples = [(model.segment_token_ids(s.text), model.phrase_token_ids(k))
                for s, k in zip(segments, keyphrases)]
    batch = model.make_batch(examples)
    _, _, _, _, seg_enc = model.encode_segments(batch)
    pooled = model.encode_timeline_states(seg_enc).unsqueeze(0)
    gen = torch.Generator().manual_seed(decode.seed)
    hier = model.hierarchy(pooled, Mode.POSTERIOR, deterministic=not decode.stochastic_latents, generator=gen)
    ids = model.decode(hier.memory, generator=gen, sample=decode.sample)
    text = model.vocabulary.decode(ids) or model.vocabulary.tokens[model.vocabulary.unk_id]
    return TimelineSummary(timeline.timeline_id, SummarySystem.THVAE, text)


__all__ = ["Decode", "TrainingReport", "UntrainedModelError", "adaptive_pool", "generate_summary",
           "kl_weight", "reconstruct", "token_accuracy", "train"]
