from __future__ import annotations

from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path

import pytest
import torch

from longview.thvae import ThVae, ThVaeConfig, Vocabulary
from longview.timeline import MocLabel, Post, Timeline

DATA = Path(str(resources.files("longview") / "data"))
T0 = datetime(2021, 1, 1, tzinfo=timezone.utc)


def make_timeline(labels, texts=None, timeline_id="tl", user_id="u") -> Timeline:
    texts = texts or [f"Post number {i} about my day." for i in range(len(labels))]
    posts = [Post(f"p{i}", T0 + timedelta(hours=i), texts[i], MocLabel.parse(lab))
             for i, lab in enumerate(labels)]
    return Timeline(timeline_id, user_id, tuple(posts))


def micro_model(texts=("i feel alone today", "my friends came over and we laughed"), seed=0, **overrides):
    cfg = ThVaeConfig.micro(**overrides)
    vocab = Vocabulary.build(texts, cfg.embedding_dim)
    torch.manual_seed(seed)
    return ThVae(cfg, vocab)


@pytest.fixture
def data_dir() -> Path:
    return DATA


# --- acceptance reporting -----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, number: int, title: str, budget_s: float):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.detail = ""

    def __enter__(self):
        import time
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time
        elapsed = time.perf_counter() - self._t0
        over = elapsed > self.budget_s
        ok = exc_type is None and not over
        why = self.detail
        if exc_type is not None:
            why = f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''} {why}".strip()
        elif over:
            why = f"runtime {elapsed:.1f}s exceeds {self.budget_s:.0f}s; {why}"
        line = (f"ACCEPTANCE {self.number} {'PASS' if ok else 'FAIL'} [{elapsed:.1f}s / "
                f"{self.budget_s:.0f}s] {self.title}: {why}")
        ACCEPTANCE_LINES.append(line)
        print(line)
        if exc_type is None and over:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
