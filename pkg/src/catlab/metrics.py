"""chrF evaluation and paired-bootstrap significance testing.

Scores are character n-gram F-scores in [0, 100]. Segment statistics are
micro-aggregated at the corpus level: counts are summed over segments first,
then a single precision/recall/F is computed from the sums.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

_WHITESPACE = re.compile(r"\s+")

# Minimal 13a-style word tokenization: split punctuation off words. Inert at
# word_order=0 but recorded in the signature.
_TOK_13A = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class ChrFConfig:
    """Metric configuration; defaults give chrF2 (char order 6, beta 2)."""

    char_order: int = 6
    word_order: int = 0
    beta: float = 2.0
    remove_whitespace: bool = True
    effective_order: bool = False

    def __post_init__(self):
        if self.char_order < 1:
            raise ValueError("char_order must be >= 1")
        if self.word_order < 0:
            raise ValueError("word_order must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")

    @property
    def n_orders(self) -> int:
        return self.char_order + self.word_order

    def signature(self, version: str | None = None) -> str:
        if version is None:
            from catlab import __version__ as version
        eff = "yes" if self.effective_order else "no"
        return (
            f"nrefs:1|case:mixed|eff:{eff}|nc:{self.char_order}"
            f"|nw:{self.word_order}|space:{'no' if self.remove_whitespace else 'yes'}"
            f"|tok:13a|smooth:exp|version:{version}"
        )


@dataclass
class SegmentStats:
    """Per-order match/total counts for one or more segments.

    Index i covers character (i+1)-grams for i < char_order, then word
    n-grams for the remaining word_order slots.
    """

    matched: list[int]
    hyp_total: list[int]
    ref_total: list[int]

    @classmethod
    def zeros(cls, n_orders: int) -> "SegmentStats":
        return cls([0] * n_orders, [0] * n_orders, [0] * n_orders)

    def add(self, other: "SegmentStats") -> None:
        for i in range(len(self.matched)):
            self.matched[i] += other.matched[i]
            self.hyp_total[i] += other.hyp_total[i]
            self.ref_total[i] += other.ref_total[i]

    def as_array(self) -> np.ndarray:
        return np.array([self.matched, self.hyp_total, self.ref_total], dtype=np.int64)


def _char_ngrams(text: str, n: int) -> Counter:
    return Counter(text[i : i + n] for i in range(len(text) - n + 1))


def _word_ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def segment_stats(hyp: str, ref: str, config: ChrFConfig) -> SegmentStats:
    """Clipped n-gram match counts for a single hyp/ref pair."""
    stats = SegmentStats.zeros(config.n_orders)
    hyp_chars = _WHITESPACE.sub("", hyp) if config.remove_whitespace else hyp
    ref_chars = _WHITESPACE.sub("", ref) if config.remove_whitespace else ref
    for i in range(config.char_order):
        h = _char_ngrams(hyp_chars, i + 1)
        r = _char_ngrams(ref_chars, i + 1)
        stats.matched[i] = sum((h & r).values())
        stats.hyp_total[i] = sum(h.values())
        stats.ref_total[i] = sum(r.values())
    if config.word_order > 0:
        hyp_words = _TOK_13A.findall(hyp)
        ref_words = _TOK_13A.findall(ref)
        for j in range(config.word_order):
            h = _word_ngrams(hyp_words, j + 1)
            r = _word_ngrams(ref_words, j + 1)
            k = config.char_order + j
            stats.matched[k] = sum((h & r).values())
            stats.hyp_total[k] = sum(h.values())
            stats.ref_total[k] = sum(r.values())
    return stats


def _score_from_stats(stats: SegmentStats, config: ChrFConfig) -> float:
    precisions = []
    recalls = []
    for m, ht, rt in zip(stats.matched, stats.hyp_total, stats.ref_total):
        if config.effective_order and ht == 0 and rt == 0:
            continue
        precisions.append(m / ht if ht > 0 else 0.0)
        recalls.append(m / rt if rt > 0 else 0.0)
    if not precisions:
        return 0.0
    p = sum(precisions) / len(precisions)
    r = sum(recalls) / len(recalls)
    b2 = config.beta**2
    denom = b2 * p + r
    if denom == 0:
        return 0.0
    return 100.0 * (1 + b2) * p * r / denom


def chrf_segment(
    hyp: str, ref: str, config: ChrFConfig | None = None
) -> tuple[float, SegmentStats]:
    """Score a single segment. Empty vs empty scores 100 by identity convention."""
    config = config or ChrFConfig()
    stats = segment_stats(hyp, ref, config)
    if not hyp.strip() and not ref.strip():
        return 100.0, stats
    return _score_from_stats(stats, config), stats


def chrf_corpus(
    hyps: list[str], refs: list[str], config: ChrFConfig | None = None
) -> float:
    """Corpus score by micro-aggregation of per-segment counts."""
    config = config or ChrFConfig()
    if len(hyps) != len(refs):
        raise ValueError(f"length mismatch: {len(hyps)} hyps vs {len(refs)} refs")
    if not hyps:
        raise ValueError("empty corpus")
    total = SegmentStats.zeros(config.n_orders)
    for hyp, ref in zip(hyps, refs):
        total.add(segment_stats(hyp, ref, config))
    return _score_from_stats(total, config)


@dataclass(frozen=True)
class SignificanceResult:
    delta: float
    p_value: float
    n_resamples: int
    seed: int


def paired_bootstrap(
    hyps_a: list[str],
    hyps_b: list[str],
    refs: list[str],
    config: ChrFConfig | None = None,
    n_resamples: int = 1000,
    seed: int = 0,
) -> SignificanceResult:
    """One-sided paired bootstrap: p = P(resampled delta <= 0), A vs B.

    Segment indices are resampled with replacement; each resample scores both
    systems on the same segments.
    """
    config = config or ChrFConfig()
    if not (len(hyps_a) == len(hyps_b) == len(refs)):
        raise ValueError("hyps_a, hyps_b and refs must have equal lengths")
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    n_seg = len(refs)
    stats_a = np.stack(
        [segment_stats(h, r, config).as_array() for h, r in zip(hyps_a, refs)]
    )
    stats_b = np.stack(
        [segment_stats(h, r, config).as_array() for h, r in zip(hyps_b, refs)]
    )

    def score(summed: np.ndarray) -> float:
        s = SegmentStats(
            summed[0].tolist(), summed[1].tolist(), summed[2].tolist()
        )
        return _score_from_stats(s, config)

    delta = score(stats_a.sum(axis=0)) - score(stats_b.sum(axis=0))
    rng = np.random.default_rng(seed)
    wins_or_ties = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n_seg, size=n_seg)
        d = score(stats_a[idx].sum(axis=0)) - score(stats_b[idx].sum(axis=0))
        if d <= 0:
            wins_or_ties += 1
    return SignificanceResult(
        delta=delta,
        p_value=wins_or_ties / n_resamples,
        n_resamples=n_resamples,
        seed=seed,
    )


@dataclass
class Report:
    """Tabular experiment output with reproducibility metadata."""

    kind: str
    columns: list[str]
    rows: list[dict]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "columns": self.columns, "rows": self.rows,
             "meta": self.meta},
            indent=2,
            sort_keys=True,
        )

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        for row in self.rows:
            lines.append("\t".join(_fmt_cell(row.get(c)) for c in self.columns))
        return "\n".join(lines) + "\n"

    def save(self, path_base) -> None:
        """Write <base>.json and <base>.tsv."""
        from pathlib import Path

        base = Path(path_base)
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".json").write_text(self.to_json(), encoding="utf-8")
        base.with_suffix(".tsv").write_text(self.to_tsv(), encoding="utf-8")


def _fmt_cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass(frozen=True)
class ScoredSystem:
    """Decoded outputs of one (model, inference tag) pair, keyed by testset."""

    model: str
    tag: str | None
    hyps: dict  # testset name -> list[str]


def score_table(
    systems: list[ScoredSystem],
    refs: dict,
    config: ChrFConfig | None = None,
    n_resamples: int = 1000,
    seed: int = 0,
    meta: dict | None = None,
) -> Report:
    """Score every system on every testset; bold the per-testset top-1 iff it
    beats the runner-up with p <= 0.05."""
    config = config or ChrFConfig()
    rows = []
    for testset in sorted(refs):
        ref_lines = refs[testset]
        scored = []
        for sys_idx, system in enumerate(systems):
            if testset not in system.hyps:
                continue
            score = chrf_corpus(system.hyps[testset], ref_lines, config)
            scored.append((score, sys_idx))
        scored.sort(key=lambda t: (-t[0], t[1]))
        bold_idx = None
        if len(scored) >= 2:
            top, runner = scored[0], scored[1]
            sig = paired_bootstrap(
                systems[top[1]].hyps[testset],
                systems[runner[1]].hyps[testset],
                ref_lines,
                config,
                n_resamples=n_resamples,
                seed=seed,
            )
            if sig.p_value <= 0.05:
                bold_idx = top[1]
        elif len(scored) == 1:
            bold_idx = scored[0][1]
        for score, sys_idx in scored:
            system = systems[sys_idx]
            rows.append(
                {
                    "model": system.model,
                    "tag": system.tag,
                    "testset": testset,
                    "chrf": round(score, 4),
                    "bold": sys_idx == bold_idx,
                }
            )
    report_meta = {"metric_signature": config.signature(), "bootstrap_seed": seed,
                   "n_resamples": n_resamples}
    if meta:
        report_meta.update(meta)
    return Report(
        kind="score_table",
        columns=["model", "tag", "testset", "chrf", "bold"],
        rows=rows,
        meta=report_meta,
    )
