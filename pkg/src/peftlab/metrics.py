"""Text-overlap metrics over prediction/reference string pairs.

Four scores, all on [0, 1]:

  bleu4             geometric mean of modified 1..4-gram precisions times a
                    brevity penalty; zero counts are replaced by 1e-9 inside
                    the log (declared smoothing)
  rouge_l           LCS-based F1
  meteor_lite       exact-match METEOR: harmonic mean F = 10PR/(R+9P) with a
                    fragmentation penalty 0.5*(chunks/m)^3; no stemming or
                    synonym tables, hence the -lite suffix
  keyword_accuracy  1 iff every non-stopword reference token appears in the
                    prediction

A single normalizer (lowercase, punctuation stripped, whitespace split) is
shared by all four metrics and by the corpus tokenizer.  Aggregation pools
n-gram counts for a corpus-level BLEU and averages the per-sample metrics;
reports split by phrasing (in_template vs out_of_template) and carry the
in-minus-out robustness gap per metric.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

__all__ = [
    "normalize_tokens",
    "load_stopwords",
    "bleu4",
    "corpus_bleu4",
    "rouge_l",
    "meteor_lite",
    "keyword_accuracy",
    "EvalRecord",
    "MetricReport",
    "aggregate",
    "write_records_tsv",
    "read_records_tsv",
    "write_report_json",
    "write_report_csv",
]

_PUNCT = ".,!?;:'\"()[]{}"
_PUNCT_TABLE = str.maketrans({ch: " " for ch in _PUNCT})

BLEU_SMOOTH = 1e-9


def normalize_tokens(text: str) -> list[str]:
    """Lowercase, strip punctuation to spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


_stopword_cache: set[str] | None = None


def load_stopwords() -> set[str]:
    """The versioned stopword list shipped with the package."""
    global _stopword_cache
    if _stopword_cache is None:
        raw = resources.files("peftlab").joinpath("data/stopwords.json").read_text()
        _stopword_cache = set(json.loads(raw)["words"])
    return _stopword_cache


# ---------------------------------------------------------------------------
# bleu


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(pred: list[str], ref: list[str]) -> tuple[list[int], list[int], int, int]:
    """(clipped counts, totals) for n = 1..4, plus candidate/reference lengths."""
    clipped, totals = [], []
    for n in range(1, 5):
        pred_counts = _ngrams(pred, n)
        ref_counts = _ngrams(ref, n)
        clipped.append(sum(min(c, ref_counts[g]) for g, c in pred_counts.items()))
        totals.append(max(len(pred) - n + 1, 0))
    return clipped, totals, len(pred), len(ref)


def _bleu_from_stats(clipped: list[int], totals: list[int], c: int, r: int) -> float:
    if c == 0:
        return 0.0
    log_sum = 0.0
    for hit, total in zip(clipped, totals):
        p_n = hit / total if total > 0 else 0.0
        log_sum += 0.25 * math.log(p_n if p_n > 0.0 else BLEU_SMOOTH)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def bleu4(pred: str, ref: str) -> float:
    """Sentence-level BLEU-4; an empty prediction scores 0."""
    p, q = normalize_tokens(pred), normalize_tokens(ref)
    return _bleu_from_stats(*_bleu_stats(p, q))


def corpus_bleu4(pairs: list[tuple[str, str]]) -> float:
    """BLEU-4 with n-gram counts and lengths pooled over all pairs."""
    clipped = [0, 0, 0, 0]
    totals = [0, 0, 0, 0]
    c = r = 0
    for pred, ref in pairs:
        hits, tots, ci, ri = _bleu_stats(normalize_tokens(pred), normalize_tokens(ref))
        for i in range(4):
            clipped[i] += hits[i]
            totals[i] += tots[i]
        c += ci
        r += ri
    return _bleu_from_stats(clipped, totals, c, r)


# ---------------------------------------------------------------------------
# rouge


def _lcs_len(a: list[str], b: list[str]) -> int:
    # one-row dynamic program
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[len(b)]


def rouge_l(pred: str, ref: str) -> float:
    p, q = normalize_tokens(pred), normalize_tokens(ref)
    if not p or not q:
        return 0.0
    lcs = _lcs_len(p, q)
    if lcs == 0:
        return 0.0
    precision = lcs / len(p)
    recall = lcs / len(q)
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# meteor


def _meteor_alignment(pred: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Leftmost exact-match alignment: each prediction token takes the first
    unused reference occurrence of the same word, scanning left to right.
    The chunk count is defined over this alignment (documented rule)."""
    used = [False] * len(ref)
    pairs = []
    for i, word in enumerate(pred):
        for j, ref_word in enumerate(ref):
            if not used[j] and ref_word == word:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def _count_chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(pred: str, ref: str) -> float:
    p, q = normalize_tokens(pred), normalize_tokens(ref)
    if not p or not q:
        return 0.0
    pairs = _meteor_alignment(p, q)
    m = len(pairs)
    if m == 0:
        return 0.0
    precision = m / len(p)
    recall = m / len(q)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (_count_chunks(pairs) / m) ** 3
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# keyword accuracy


def keyword_accuracy(pred: str, ref: str, stopwords: set[str] | None = None) -> float:
    """1.0 iff the reference's stopword-filtered keyword set is contained in
    the prediction's token set; a reference with no keywords scores 1.0 only
    on exact normalized equality."""
    if stopwords is None:
        stopwords = load_stopwords()
    p, q = normalize_tokens(pred), normalize_tokens(ref)
    keywords = set(q) - stopwords
    if not keywords:
        return 1.0 if p == q else 0.0
    return 1.0 if keywords.issubset(set(p)) else 0.0


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class EvalRecord:
    prediction: str
    reference: str
    phrasing: str = "in_template"
    question_type: str = "unknown"

    @property
    def degenerate(self) -> bool:
        return not normalize_tokens(self.prediction) or not normalize_tokens(self.reference)


METRIC_NAMES = ("bleu4", "rouge_l", "meteor_lite", "keyword_acc")


@dataclass
class MetricReport:
    """Per-phrasing metric table plus the in-minus-out robustness gap.

    `splits` holds one entry per phrasing that actually had records; an
    empty phrasing is absent rather than zeroed.  BLEU is corpus-level
    (pooled counts); the other three are per-sample means.
    """

    splits: dict = field(default_factory=dict)
    gaps: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    breakdown: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "splits": self.splits,
            "gaps": self.gaps,
            "counts": self.counts,
            "breakdown": self.breakdown,
            "meta": self.meta,
        }


def _score_group(records: list[EvalRecord], stopwords: set[str]) -> dict:
    pairs = [(rec.prediction, rec.reference) for rec in records]
    n = len(records)
    return {
        "bleu4": corpus_bleu4(pairs),
        "rouge_l": sum(rouge_l(p, r) for p, r in pairs) / n,
        "meteor_lite": sum(meteor_lite(p, r) for p, r in pairs) / n,
        "keyword_acc": sum(keyword_accuracy(p, r, stopwords) for p, r in pairs) / n,
        "count": n,
    }


def aggregate(records: list[EvalRecord]) -> MetricReport:
    stopwords = load_stopwords()
    report = MetricReport(meta={
        "bleu_mode": "corpus_pooled",
        "meteor_variant": "meteor_lite_exact_match",
        "degenerate_records": sum(1 for r in records if r.degenerate),
    })
    by_phrasing: dict[str, list[EvalRecord]] = {}
    for rec in records:
        by_phrasing.setdefault(rec.phrasing, []).append(rec)
    for phrasing, group in sorted(by_phrasing.items()):
        report.splits[phrasing] = _score_group(group, stopwords)
        report.counts[phrasing] = len(group)
        by_type: dict[str, list[EvalRecord]] = {}
        for rec in group:
            by_type.setdefault(rec.question_type, []).append(rec)
        for qtype, sub in sorted(by_type.items()):
            report.breakdown[f"{phrasing}/{qtype}"] = _score_group(sub, stopwords)
    if "in_template" in report.splits and "out_of_template" in report.splits:
        for name in METRIC_NAMES:
            report.gaps[name] = (report.splits["in_template"][name]
                                 - report.splits["out_of_template"][name])
    return report


# ---------------------------------------------------------------------------
# file formats


def write_records_tsv(path, records: list[EvalRecord]) -> None:
    """One record per line: prediction, reference, phrasing, question_type,
    tab-separated, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(f"{rec.prediction}\t{rec.reference}\t{rec.phrasing}\t{rec.question_type}\n")


def read_records_tsv(path) -> list[EvalRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"malformed predictions line (need 4 tab-separated fields): {line!r}")
        records.append(EvalRecord(*parts))
    return records


def write_report_json(path, report: MetricReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def write_report_csv(path, report: MetricReport) -> None:
    """Flat summary: one row per phrasing split, metric columns in fixed order."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", *METRIC_NAMES, "count"])
        for phrasing, scores in sorted(report.splits.items()):
            writer.writerow([phrasing] + [f"{scores[m]:.6f}" for m in METRIC_NAMES]
                            + [scores["count"]])
        if report.gaps:
            writer.writerow(["gap_in_minus_out"]
                            + [f"{report.gaps[m]:.6f}" for m in METRIC_NAMES] + [""])
