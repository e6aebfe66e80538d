"""Matrix-backed stub construction shared by the metric tests."""

from __future__ import annotations

import numpy as np

from longview.metrics import NliScores, TableEmbedder, TableNli


def sentences(prefix: str, n: int) -> list[str]:
    return [f"{prefix} number {i}." for i in range(n)]


def text_of(sents: list[str]) -> str:
    return " ".join(sents)


def random_simplex(rng: np.random.Generator) -> NliScores:
    p = rng.dirichlet([1.0, 1.0, 1.0])
    return NliScores(float(p[0]), float(p[1]), float(1.0 - p[0] - p[1]))


def nli_from(rows: list[str], cols: list[str], field: str, matrix) -> TableNli:
    """Table NLI whose ``field`` equals matrix[i][j] for (rows[i], cols[j])."""
    table = {}
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            v = float(matrix[i][j])
            rest = 1.0 - v
            if field == "p_contradict":
                table[(a, b)] = NliScores(rest / 2, rest / 2, v)
            else:
                table[(a, b)] = NliScores(v, rest / 2, rest / 2)
    return TableNli(table)


def embedder_from(evidence: list[str], sents: list[str], matrix) -> TableEmbedder:
    return TableEmbedder({(e, t): float(matrix[i][j]) for i, e in enumerate(evidence)
                          for j, t in enumerate(sents)})


def run_pipeline(main, out_dir, data_dir, extra=(), steps=None):
    """Run every CLI stage on the fixtures; returns the list of exit codes."""
    F, D = str(data_dir), str(out_dir)
    common = ["--config", f"{F}/config.yaml", *extra]
    train = ["--steps", str(steps)] if steps else []
    commands = [
        ["segment", "--in", f"{F}/timelines.jsonl", "--out", f"{D}/segments.jsonl"],
        ["extract-keyphrases", "--in", f"{F}/timelines.jsonl", "--exemplars", f"{F}/exemplars.jsonl",
         "--out", f"{D}/kp.jsonl"],
        ["train-thvae", "--timelines", f"{F}/timelines.jsonl", "--keyphrases", f"{D}/kp.jsonl",
         "--checkpoint", f"{D}/model.thvae", *train],
        ["summarize", "--timelines", f"{F}/timelines.jsonl", "--keyphrases", f"{D}/kp.jsonl",
         "--system", "thvae", "--checkpoint", f"{D}/model.thvae", "--out", f"{D}/thvae.jsonl"],
        ["summarize", "--timelines", f"{F}/timelines.jsonl", "--keyphrases", f"{D}/kp.jsonl",
         "--system", "tldr", "--out", f"{D}/tldr.jsonl"],
        ["highlevel", "--in", f"{D}/thvae.jsonl", "--out", f"{D}/hl.jsonl"],
        ["highlevel", "--naive", "--timelines", f"{F}/timelines.jsonl", "--out", f"{D}/naive.jsonl"],
        ["evaluate", "--summaries", f"{D}/hl.jsonl", "--gold", f"{F}/gold.jsonl",
         "--evidence", f"{F}/evidence.jsonl", "--timelines", f"{F}/timelines.jsonl", "--out", f"{D}/report.json"],
        ["evaluate", "--summaries", f"{D}/naive.jsonl", "--gold", f"{F}/gold.jsonl",
         "--evidence", f"{F}/evidence.jsonl", "--timelines", f"{F}/timelines.jsonl",
         "--out", f"{D}/report_naive.json"],
        ["compare", "--a", f"{D}/report.json", "--b", f"{D}/report_naive.json", "--n-resamples", "1000",
         "--out", f"{D}/compare.json"],
    ]
    return [main([c[0], *common, *c[1:]]) for c in commands]
