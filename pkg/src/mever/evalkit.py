"""Retrieval, verification, and generation metrics, plus report emission.

All scores are fractions in [0, 1]. Text metrics tokenize by lowercasing
and splitting on whitespace/punctuation. The report JSON layout is
{metadata, retrieval: {map, p_at, r_at}, verification: {micro_f1, macro_f1,
per_label, confusion}, generation: {rouge1, rouge2, rougeL, meteor, bleu2,
bleu4}}.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyGold, EmptyReference, LengthMismatch, UnknownLabel

KAPPA_GRID = (1, 3, 5, 7)


def metric_tokens(text: str) -> list[str]:
    return re.findall(r"\w+", text.lower())


# ---------------------------------------------------------------------------
# retrieval

def average_precision(ranked: list[str], gold: set[str]) -> float:
    if not gold:
        raise EmptyGold("gold set is empty")
    hits = 0
    total = 0.0
    for rank, eid in enumerate(ranked, start=1):
        if eid in gold:
            hits += 1
            total += hits / rank
    return total / len(gold)


def mean_average_precision(rankings: dict[str, list[str]],
                           gold: dict[str, set[str]]) -> float:
    if not rankings:
        raise EmptyGold("no rankings to score")
    return sum(average_precision(r, gold[cid]) for cid, r in rankings.items()) / len(rankings)


def precision_recall_at_k(rankings: dict[str, list[str]],
                          gold: dict[str, set[str]], k: int) -> tuple[float, float]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not rankings:
        raise EmptyGold("no rankings to score")
    p_total = r_total = 0.0
    for cid, ranked in rankings.items():
        g = gold[cid]
        if not g:
            raise EmptyGold(f"claim {cid} has no gold evidence")
        overlap = len(set(ranked[:k]) & g)
        p_total += overlap / k
        r_total += overlap / len(g)
    n = len(rankings)
    return p_total / n, r_total / n


# ---------------------------------------------------------------------------
# verification

@dataclass
class F1Summary:
    micro: float
    macro: float
    per_label: dict[str, dict[str, float]]
    confusion: list[list[int]]  # rows gold, cols predicted, in label_set order


def f1_scores(preds: list[str], golds: list[str],
              label_set: tuple[str, ...]) -> F1Summary:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise LengthMismatch("need at least one prediction")
    index = {l: i for i, l in enumerate(label_set)}
    for l in preds + golds:
        if l not in index:
            raise UnknownLabel(f"{l!r} not in {list(label_set)}")

    n = len(label_set)
    confusion = [[0] * n for _ in range(n)]
    for p, g in zip(preds, golds):
        confusion[index[g]][index[p]] += 1

    per_label = {}
    f1_sum = 0.0
    for i, label in enumerate(label_set):
        tp = confusion[i][i]
        fp = sum(confusion[g][i] for g in range(n)) - tp
        fn = sum(confusion[i]) - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        per_label[label] = {"precision": p, "recall": r, "f1": f1}
        f1_sum += f1

    correct = sum(confusion[i][i] for i in range(n))
    micro = correct / len(preds)
    return F1Summary(micro=micro, macro=f1_sum / n, per_label=per_label,
                     confusion=confusion)


# ---------------------------------------------------------------------------
# generation

def _ngrams(tokens: list[str], n: int) -> dict[tuple, int]:
    counts: dict[tuple, int] = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i:i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def _lcs(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def rouge(candidate: str, reference: str, variant) -> float:
    ref = metric_tokens(reference)
    if not ref:
        raise EmptyReference("reference has no tokens")
    cand = metric_tokens(candidate)
    if not cand:
        return 0.0
    if variant == "L":
        lcs = _lcs(cand, ref)
        return _f1(lcs / len(cand), lcs / len(ref))
    n = int(variant)
    cand_ngrams = _ngrams(cand, n)
    ref_ngrams = _ngrams(ref, n)
    if not cand_ngrams or not ref_ngrams:
        return 0.0
    overlap = sum(min(c, ref_ngrams.get(g, 0)) for g, c in cand_ngrams.items())
    return _f1(overlap / sum(cand_ngrams.values()), overlap / sum(ref_ngrams.values()))


def bleu(candidate: str, reference: str, max_n: int) -> float:
    """Geometric mean of clipped n-gram precisions with brevity penalty;
    zero counts are smoothed with a 1e-9 epsilon."""
    ref = metric_tokens(reference)
    if not ref:
        raise EmptyReference("reference has no tokens")
    cand = metric_tokens(candidate)
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_ngrams = _ngrams(cand, n)
        total = sum(cand_ngrams.values())
        if total == 0:
            log_sum += math.log(1e-9)
            continue
        ref_ngrams = _ngrams(ref, n)
        clipped = sum(min(c, ref_ngrams.get(g, 0)) for g, c in cand_ngrams.items())
        log_sum += math.log(max(clipped, 1e-9) / total)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(log_sum / max_n)


def meteor(candidate: str, reference: str) -> float:
    """Exact-match unigram METEOR: leftmost-unused alignment,
    F_mean = 10PR/(R+9P), penalty 0.5(chunks/matches)^3."""
    ref = metric_tokens(reference)
    if not ref:
        raise EmptyReference("reference has no tokens")
    cand = metric_tokens(candidate)
    if not cand:
        return 0.0

    available: dict[str, list[int]] = {}
    for pos, w in enumerate(ref):
        available.setdefault(w, []).append(pos)
    alignment = []
    for ci, w in enumerate(cand):
        slots = available.get(w)
        if slots:
            alignment.append((ci, slots.pop(0)))
    m = len(alignment)
    if m == 0:
        return 0.0

    p = m / len(cand)
    r = m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    chunks = 1
    for (c0, r0), (c1, r1) in zip(alignment, alignment[1:]):
        if c1 != c0 + 1 or r1 != r0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1 - penalty)


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    metadata: dict = field(default_factory=dict)
    retrieval: dict = field(default_factory=dict)
    verification: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "retrieval": self.retrieval,
            "verification": self.verification,
            "generation": self.generation,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls(
            metadata=obj.get("metadata", {}),
            retrieval=obj.get("retrieval", {}),
            verification=obj.get("verification", {}),
            generation=obj.get("generation", {}),
        )


def build_report(rankings=None, gold_evidence=None, preds=None, golds=None,
                 label_set=None, generated=None, references=None,
                 metadata=None) -> MetricsReport:
    """Assemble a MetricsReport from raw pipeline outputs; every section is
    optional and omitted inputs leave it empty."""
    report = MetricsReport(metadata=dict(metadata or {}))

    if rankings:
        report.retrieval = {
            "map": mean_average_precision(rankings, gold_evidence),
            "p_at": {}, "r_at": {},
        }
        for k in KAPPA_GRID:
            p, r = precision_recall_at_k(rankings, gold_evidence, k)
            report.retrieval["p_at"][str(k)] = p
            report.retrieval["r_at"][str(k)] = r

    if preds is not None:
        summary = f1_scores(preds, golds, label_set)
        report.verification = {
            "micro_f1": summary.micro,
            "macro_f1": summary.macro,
            "per_label": summary.per_label,
            "confusion": summary.confusion,
        }

    if generated is not None:
        pairs = list(zip(generated, references))
        n = len(pairs)
        report.generation = {
            "rouge1": sum(rouge(c, r, 1) for c, r in pairs) / n,
            "rouge2": sum(rouge(c, r, 2) for c, r in pairs) / n,
            "rougeL": sum(rouge(c, r, "L") for c, r in pairs) / n,
            "meteor": sum(meteor(c, r) for c, r in pairs) / n,
            "bleu2": sum(bleu(c, r, 2) for c, r in pairs) / n,
            "bleu4": sum(bleu(c, r, 4) for c, r in pairs) / n,
        }
    return report


def _walk_numeric(tree, prefix=""):
    if isinstance(tree, dict):
        for key, value in tree.items():
            yield from _walk_numeric(value, f"{prefix}{key}.")
    elif isinstance(tree, list):
        for i, value in enumerate(tree):
            yield from _walk_numeric(value, f"{prefix}{i}.")
    elif isinstance(tree, (int, float)) and not isinstance(tree, bool):
        yield prefix[:-1], float(tree)


def _set_path(tree, path, value):
    keys = path.split(".")
    for key in keys[:-1]:
        node = tree[int(key)] if isinstance(tree, list) else tree[key]
        tree = node
    last = keys[-1]
    if isinstance(tree, list):
        tree[int(last)] = value
    else:
        tree[last] = value


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Mean and population std over every numeric leaf of multiple runs."""
    base = json.loads(json.dumps(reports[0].to_dict()))
    flat = [dict(_walk_numeric(r.to_dict())) for r in reports]
    std_tree = json.loads(json.dumps(base))
    for path in flat[0]:
        values = [f[path] for f in flat]
        m = sum(values) / len(values)
        var = sum((v - m) ** 2 for v in values) / len(values)
        _set_path(base, path, m)
        _set_path(std_tree, path, math.sqrt(var))
    seeds = [r.metadata.get("seed") for r in reports]
    base["metadata"] = dict(reports[0].metadata, seed=seeds, runs=len(reports))
    return {"mean": base, "std": {k: std_tree[k] for k in ("retrieval", "verification", "generation")}}


def _table_lines(report_dict: dict, std: dict | None) -> list[str]:
    lines = []
    meta = report_dict.get("metadata", {})
    if meta:
        lines.append("metadata: " + ", ".join(f"{k}={v}" for k, v in meta.items()))
        lines.append("")
    for section in ("retrieval", "verification", "generation"):
        body = report_dict.get(section)
        if not body:
            continue
        lines.append(section)
        for path, value in _walk_numeric(body):
            if path.startswith("confusion"):
                continue
            if std is not None:
                spread = dict(_walk_numeric(std.get(section, {}))).get(path, 0.0)
                lines.append(f"  {path:<24} {value:.4f} ± {spread:.4f}")
            else:
                lines.append(f"  {path:<24} {value:.4f}")
        lines.append("")
    return lines


def emit_report(reports, out_dir, name: str = "report") -> tuple[Path, Path]:
    """Write report JSON plus a human-readable table; a list of reports is
    aggregated as mean ± std across runs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(reports, MetricsReport):
        payload = reports.to_dict()
        std = None
    elif len(reports) == 1:
        payload = reports[0].to_dict()
        std = None
    else:
        agg = aggregate_reports(list(reports))
        payload = dict(agg["mean"], std=agg["std"])
        std = agg["std"]

    json_path = out_dir / f"{name}.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    table_path = out_dir / f"{name}.txt"
    table_path.write_text("\n".join(_table_lines(payload, std)) + "\n", encoding="utf-8")
    return json_path, table_path
