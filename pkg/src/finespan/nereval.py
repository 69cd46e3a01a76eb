"""Scoring of predicted tag sequences against gold: token-level P/R/F1 reports,
COR/INC/MIS/SPU categorization with the four derived error rates, manual
verification overrides, sequence similarity, and generation-error triage.
"""

from __future__ import annotations

import csv
import difflib
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .tagcodec import TaggedSentence, TagScheme

MUC_CATEGORIES = ("COR", "INC", "MIS", "SPU")
COMPARISON_MODES = ("label-only", "strict-bio")


# ---------------------------------------------------------------------------
# precision / recall / F1
# ---------------------------------------------------------------------------


def _check_tags(tagged: TaggedSentence, scheme: TagScheme) -> None:
    for tag in tagged.tags:
        if not scheme.contains_tag(tag):
            raise ValueError(f"sentence {tagged.sentence_id!r}: unknown tag {tag!r}")


def _pair_by_id(
    gold: Sequence[TaggedSentence], pred: Sequence[TaggedSentence]
) -> list[tuple[TaggedSentence, TaggedSentence]]:
    pred_map = {p.sentence_id: p for p in pred}
    missing = [g.sentence_id for g in gold if g.sentence_id not in pred_map]
    if missing:
        raise ValueError(f"predictions missing for sentence ids: {missing[:5]}")
    return [(g, pred_map[g.sentence_id]) for g in gold]


def _aligned_tags(
    gold: TaggedSentence, pred: TaggedSentence
) -> tuple[list[str], list[str]]:
    """Equal-length tag sequences; unequal token counts go through LCS alignment
    where unmatched tokens face an implicit O."""
    if len(gold.tokens) == len(pred.tokens):
        return list(gold.tags), list(pred.tags)
    pairs = align_for_muc(gold.tokens, pred.tokens)
    g_tags = [gold.tags[gi] if gi is not None else "O" for gi, _ in pairs]
    p_tags = [pred.tags[pi] if pi is not None else "O" for _, pi in pairs]
    return g_tags, p_tags


def _token_key(tag: str, mode: str) -> str | None:
    """What must match for a token to count as correct: the label alone, or the
    full B-/I- tag in strict mode. None means the O class."""
    if tag == "O":
        return None
    return tag if mode == "strict-bio" else tag[2:]


def _class_of(tag: str) -> str | None:
    return None if tag == "O" else tag[2:]


def prf_report(
    gold: Sequence[TaggedSentence],
    pred: Sequence[TaggedSentence],
    scheme: TagScheme,
    mode: str = "label-only",
) -> dict:
    """Token-level per-class precision/recall/F1 over entity tokens, plus macro,
    micro, and support-weighted aggregates.

    Zero-denominator metrics are reported as None rather than 0; macro and
    weighted means skip undefined values.
    """
    if mode not in COMPARISON_MODES:
        raise ValueError(f"unknown comparison mode {mode!r}")
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    for g, p in _pair_by_id(gold, pred):
        _check_tags(g, scheme)
        _check_tags(p, scheme)
        g_tags, p_tags = _aligned_tags(g, p)
        for gt, pt in zip(g_tags, p_tags):
            g_cls, p_cls = _class_of(gt), _class_of(pt)
            match = _token_key(gt, mode) == _token_key(pt, mode)
            if g_cls is not None and p_cls is not None and match:
                tp[g_cls] += 1
            else:
                if g_cls is not None:
                    fn[g_cls] += 1
                if p_cls is not None:
                    fp[p_cls] += 1

    def ratio(num: int, den: int) -> float | None:
        return (num / den) if den > 0 else None

    def f1_of(p: float | None, r: float | None) -> float | None:
        if p is None or r is None:
            return None
        return (2 * p * r / (p + r)) if (p + r) > 0 else 0.0

    classes = sorted(set(tp) | set(fp) | set(fn))
    per_class: dict[str, dict] = {}
    for cls in classes:
        p = ratio(tp[cls], tp[cls] + fp[cls])
        r = ratio(tp[cls], tp[cls] + fn[cls])
        per_class[cls] = {
            "precision": p,
            "recall": r,
            "f1": f1_of(p, r),
            "support": tp[cls] + fn[cls],
        }

    def mean(values: list[float]) -> float | None:
        return sum(values) / len(values) if values else None

    def weighted(metric: str) -> float | None:
        pairs = [
            (row[metric], row["support"])
            for row in per_class.values()
            if row[metric] is not None and row["support"] > 0
        ]
        total = sum(s for _, s in pairs)
        return sum(v * s for v, s in pairs) / total if total else None

    micro_p = ratio(sum(tp.values()), sum(tp.values()) + sum(fp.values()))
    micro_r = ratio(sum(tp.values()), sum(tp.values()) + sum(fn.values()))
    return {
        "mode": mode,
        "classes": per_class,
        "macro_avg": {
            "precision": mean([r["precision"] for r in per_class.values() if r["precision"] is not None]),
            "recall": mean([r["recall"] for r in per_class.values() if r["recall"] is not None]),
            "f1": mean([r["f1"] for r in per_class.values() if r["f1"] is not None]),
        },
        "micro_avg": {
            "precision": micro_p,
            "recall": micro_r,
            "f1": f1_of(micro_p, micro_r),
        },
        "weighted_avg": {
            "precision": weighted("precision"),
            "recall": weighted("recall"),
            "f1": weighted("f1"),
        },
    }


def render_prf_markdown(report: dict, title: str = "Results per class") -> str:
    """Markdown table with one row per class plus macro/micro/weighted rows."""

    def fmt(v: float | None) -> str:
        return "-" if v is None else f"{v:.4f}"

    lines = [f"### {title}", "", "| | Precision | Recall | F1-score |", "|---|---|---|---|"]
    for cls, row in report["classes"].items():
        lines.append(f"| {cls} | {fmt(row['precision'])} | {fmt(row['recall'])} | {fmt(row['f1'])} |")
    for name in ("macro_avg", "micro_avg", "weighted_avg"):
        row = report[name]
        label = name.replace("_", " ")
        lines.append(f"| {label} | {fmt(row['precision'])} | {fmt(row['recall'])} | {fmt(row['f1'])} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# MUC categorization and derived error rates
# ---------------------------------------------------------------------------


@dataclass
class MucTally:
    """COR/INC/MIS/SPU counts with an optional per-label breakdown."""

    cor: int = 0
    inc: int = 0
    mis: int = 0
    spu: int = 0
    per_class: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, other: "MucTally") -> "MucTally":
        merged = {k: {c: v for c, v in row.items()} for k, row in self.per_class.items()}
        for label, row in other.per_class.items():
            dst = merged.setdefault(label, {"cor": 0, "inc": 0, "mis": 0, "spu": 0})
            for cat, value in row.items():
                dst[cat] += value
        return MucTally(
            cor=self.cor + other.cor,
            inc=self.inc + other.inc,
            mis=self.mis + other.mis,
            spu=self.spu + other.spu,
            per_class=merged,
        )

    def check(self) -> None:
        for cat in ("cor", "inc", "mis", "spu"):
            if getattr(self, cat) < 0:
                raise ValueError(f"negative {cat} count")
        if self.per_class:
            for cat in ("cor", "inc", "mis", "spu"):
                total = sum(row.get(cat, 0) for row in self.per_class.values())
                if total != getattr(self, cat):
                    raise ValueError(f"per-class {cat} counts do not sum to the total")


@dataclass(frozen=True)
class MucEvent:
    """One categorized token comparison, addressable by overrides."""

    sentence_id: str
    token_index: int
    category: str  # COR | INC | MIS | SPU
    gold_tag: str
    pred_tag: str


@dataclass(frozen=True)
class OverrideRecord:
    """Manual verdict for one tallied INC/MIS/SPU event; yes = model was right."""

    sentence_id: str
    token_index: int
    category: str
    verdict: str  # yes | no

    def __post_init__(self) -> None:
        if self.category not in ("INC", "MIS", "SPU"):
            raise ValueError(f"overridable categories are INC/MIS/SPU, got {self.category!r}")
        if self.verdict not in ("yes", "no"):
            raise ValueError(f"verdict must be yes or no, got {self.verdict!r}")


def muc_events(
    gold: TaggedSentence, pred: TaggedSentence, mode: str = "label-only"
) -> list[MucEvent]:
    """Per-token categorization; O/O token pairs produce no event."""
    if mode not in COMPARISON_MODES:
        raise ValueError(f"unknown comparison mode {mode!r}")
    if len(gold.tokens) != len(pred.tokens):
        raise ValueError(
            f"sentence {gold.sentence_id!r}: token counts differ "
            f"({len(gold.tokens)} vs {len(pred.tokens)}); align first"
        )
    events: list[MucEvent] = []
    for t, (gt, pt) in enumerate(zip(gold.tags, pred.tags)):
        if gt == "O" and pt == "O":
            continue
        if gt != "O" and pt == "O":
            cat = "MIS"
        elif gt == "O" and pt != "O":
            cat = "SPU"
        elif _token_key(gt, mode) == _token_key(pt, mode):
            cat = "COR"
        else:
            cat = "INC"
        events.append(
            MucEvent(
                sentence_id=gold.sentence_id,
                token_index=t,
                category=cat,
                gold_tag=gt,
                pred_tag=pt,
            )
        )
    return events


def tally_events(events: Iterable[MucEvent]) -> MucTally:
    """COR/INC/MIS attributed to the gold label, SPU to the predicted label."""
    tally = MucTally()
    for ev in events:
        cat = ev.category.lower()
        setattr(tally, cat, getattr(tally, cat) + 1)
        label = ev.pred_tag[2:] if ev.category == "SPU" else ev.gold_tag[2:]
        row = tally.per_class.setdefault(label, {"cor": 0, "inc": 0, "mis": 0, "spu": 0})
        row[cat] += 1
    tally.check()
    return tally


def muc_categorize(
    gold: TaggedSentence, pred: TaggedSentence, mode: str = "label-only"
) -> MucTally:
    return tally_events(muc_events(gold, pred, mode=mode))


def align_for_muc(
    gold_tokens: Sequence[str], pred_tokens: Sequence[str]
) -> list[tuple[int | None, int | None]]:
    """Longest-common-subsequence alignment on token surfaces.

    Returns (gold_index, pred_index) pairs in order; an unmatched gold token
    pairs with None on the prediction side and vice versa.
    """
    n, m = len(gold_tokens), len(pred_tokens)
    lcs = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if gold_tokens[i] == pred_tokens[j]:
                lcs[i][j] = lcs[i + 1][j + 1] + 1
            else:
                lcs[i][j] = max(lcs[i + 1][j], lcs[i][j + 1])
    pairs: list[tuple[int | None, int | None]] = []
    i = j = 0
    while i < n and j < m:
        if gold_tokens[i] == pred_tokens[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif lcs[i + 1][j] >= lcs[i][j + 1]:
            pairs.append((i, None))
            i += 1
        else:
            pairs.append((None, j))
            j += 1
    pairs.extend((k, None) for k in range(i, n))
    pairs.extend((None, k) for k in range(j, m))
    return pairs


def muc_evaluate(
    gold: Sequence[TaggedSentence],
    pred: Sequence[TaggedSentence],
    mode: str = "label-only",
) -> tuple[MucTally, list[MucEvent]]:
    """Corpus-level categorization with LCS alignment for length-drifted pairs."""
    events: list[MucEvent] = []
    for g, p in _pair_by_id(gold, pred):
        if len(g.tokens) != len(p.tokens):
            pairs = align_for_muc(g.tokens, p.tokens)
            g_tokens = [g.tokens[gi] if gi is not None else p.tokens[pi] for gi, pi in pairs]
            g_tags = [g.tags[gi] if gi is not None else "O" for gi, _ in pairs]
            p_tags = [p.tags[pi] if pi is not None else "O" for _, pi in pairs]
            g = TaggedSentence(sentence_id=g.sentence_id, tokens=g_tokens, tags=g_tags)
            p = TaggedSentence(sentence_id=p.sentence_id, tokens=g_tokens, tags=p_tags)
        events.extend(muc_events(g, p, mode=mode))
    return tally_events(events), events


def muc_metrics(tally: MucTally) -> dict[str, float | None]:
    """The four adapted error rates; a zero denominator yields None."""
    cor, inc, mis, spu = tally.cor, tally.inc, tally.mis, tally.spu

    def rate(num: int, den: int) -> float | None:
        return (num / den) if den > 0 else None

    return {
        "error_per_response_fill": rate(inc + mis + spu, cor + inc + mis + spu),
        "undergeneration": rate(mis, cor + inc + mis),
        "overgeneration": rate(spu, cor + inc + spu),
        "substitution": rate(inc, cor + inc),
    }


@dataclass
class OverrideResult:
    raw: MucTally
    adjusted: MucTally
    correct_additions: int
    annotation_errors: int


def apply_overrides(
    events: Sequence[MucEvent],
    overrides: Sequence[OverrideRecord],
    base: MucTally | None = None,
) -> OverrideResult:
    """Fold manual verdicts into a tally.

    A yes-verdict on SPU moves the event out of the error mass and into
    `correct_additions`; a yes-verdict on MIS/INC marks a gold-annotation error
    and removes the event from the error numerators. COR never decreases.
    `base` supplies the raw tally when the full event stream (with its COR
    mass) is not materialized; otherwise the raw tally is computed from events.
    """
    raw = base if base is not None else tally_events(events)
    available: dict[tuple[str, int, str], int] = {}
    for ev in events:
        key = (ev.sentence_id, ev.token_index, ev.category)
        available[key] = available.get(key, 0) + 1
    dangling: list[OverrideRecord] = []
    consumed: Counter = Counter()
    label_of_event = {
        (ev.sentence_id, ev.token_index, ev.category): (
            ev.pred_tag[2:] if ev.category == "SPU" else ev.gold_tag[2:]
        )
        for ev in events
    }
    adjusted = MucTally(
        cor=raw.cor,
        inc=raw.inc,
        mis=raw.mis,
        spu=raw.spu,
        per_class={k: dict(v) for k, v in raw.per_class.items()},
    )
    correct_additions = 0
    annotation_errors = 0
    for rec in overrides:
        key = (rec.sentence_id, rec.token_index, rec.category)
        if consumed[key] >= available.get(key, 0):
            dangling.append(rec)
            continue
        consumed[key] += 1
        if rec.verdict == "no":
            continue
        cat = rec.category.lower()
        setattr(adjusted, cat, getattr(adjusted, cat) - 1)
        if adjusted.per_class:
            label = label_of_event.get(key)
            if label is not None and label in adjusted.per_class:
                adjusted.per_class[label][cat] -= 1
        if rec.category == "SPU":
            correct_additions += 1
        else:
            annotation_errors += 1
    if dangling:
        offenders = ", ".join(
            f"({r.sentence_id}, {r.token_index}, {r.category})" for r in dangling[:10]
        )
        raise ValueError(f"overrides reference no tallied event: {offenders}")
    adjusted.check()
    return OverrideResult(
        raw=raw,
        adjusted=adjusted,
        correct_additions=correct_additions,
        annotation_errors=annotation_errors,
    )


def read_overrides_csv(path: str | Path) -> list[OverrideRecord]:
    """CSV with columns sentence_id, token_index, category, verdict."""
    records: list[OverrideRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                OverrideRecord(
                    sentence_id=row["sentence_id"],
                    token_index=int(row["token_index"]),
                    category=row["category"].upper(),
                    verdict=row["verdict"].lower(),
                )
            )
    return records


def write_tally_csv(path: str | Path, result: OverrideResult) -> None:
    """Category/verdict/count rows: COR, then the no/yes split per error class."""
    adj, raw = result.adjusted, result.raw
    rows = [
        ("COR", "", raw.cor),
        ("MIS", "no", adj.mis),
        ("MIS", "yes", raw.mis - adj.mis),
        ("INC", "no", adj.inc),
        ("INC", "yes", raw.inc - adj.inc),
        ("SPU", "no", adj.spu),
        ("SPU", "yes", raw.spu - adj.spu),
    ]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "correct", "count"])
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# sequence similarity and generation-error triage
# ---------------------------------------------------------------------------


def similarity_ratio(a: str, b: str) -> float:
    """Ratcliff-Obershelp ratio 2*M/T over characters, no junk heuristic.

    M is the total size of the recursively found longest contiguous matching
    blocks (ties resolved earliest-in-a, then earliest-in-b), T the combined
    length. Two empty strings are identical (1.0).
    """
    if not a and not b:
        return 1.0
    matcher = difflib.SequenceMatcher(None, a, b, autojunk=False)
    matched = sum(block.size for block in matcher.get_matching_blocks())
    return 2.0 * matched / (len(a) + len(b))


@dataclass
class ErrorTriage:
    """Severity assessment of one target/generated sentence pair."""

    sentence_id: str
    severity: str  # critical | non-critical
    reasons: list[str]
    similarity: float


_NUMERIC_RE = re.compile(r"\d+(?:[.,]\d+)*\s?%?")
_BRACKET_RE = re.compile(r"\[([^\[\]|]+)\|([^\[\]|]+)\]")

CRITICAL_REASONS = ("numeric-alteration", "word-change", "repetition")


def _numeric_tokens(text: str) -> Counter:
    return Counter(m.group().replace(" ", "") for m in _NUMERIC_RE.finditer(text))


def _normalize_surface(text: str) -> str:
    """Casefold, strip accents and punctuation, and treat _ as a space."""
    text = text.replace("_", " ").casefold()
    text = unicodedata.normalize("NFKD", text)
    text = "".join(ch for ch in text if not unicodedata.combining(ch))
    text = "".join(ch if unicodedata.category(ch)[0] not in ("P", "S") else " " for ch in text)
    return " ".join(text.split())


def _strip_numbers(text: str) -> str:
    return " ".join(_NUMERIC_RE.sub(" ", text).split())


def _max_consecutive_repeats(tokens: list[str], n: int) -> dict[tuple[str, ...], int]:
    """For every n-gram, the largest count of immediately consecutive copies."""
    best: dict[tuple[str, ...], int] = {}
    i = 0
    total = len(tokens)
    while i + n <= total:
        gram = tuple(tokens[i : i + n])
        count = 1
        j = i + n
        while j + n <= total and tuple(tokens[j : j + n]) == gram:
            count += 1
            j += n
        if count > best.get(gram, 0):
            best[gram] = count
        i += 1
    return best


def _has_new_repetition(target: str, generated: str, min_ngram: int) -> bool:
    tgt_tokens = target.split()
    gen_tokens = generated.split()
    for n in range(min_ngram, max(len(gen_tokens) // 2, min_ngram - 1) + 1):
        gen_reps = _max_consecutive_repeats(gen_tokens, n)
        repeated = {g: c for g, c in gen_reps.items() if c > 1}
        if not repeated:
            continue
        tgt_reps = _max_consecutive_repeats(tgt_tokens, n)
        for gram, count in repeated.items():
            if count > tgt_reps.get(gram, 1):
                return True
    return False


def _entity_pairs(target: str, generated: str) -> list[tuple[str, str]]:
    """Pair bracketed entity surfaces in order, by label, via LCS on labels."""
    tgt = [(m.group(1), m.group(2)) for m in _BRACKET_RE.finditer(target)]
    gen = [(m.group(1), m.group(2)) for m in _BRACKET_RE.finditer(generated)]
    tgt_labels = [label for _, label in tgt]
    gen_labels = [label for _, label in gen]
    pairs = align_for_muc(tgt_labels, gen_labels)
    return [
        (tgt[gi][0], gen[pi][0])
        for gi, pi in pairs
        if gi is not None and pi is not None
    ]


def triage_generation(
    target: str, generated: str, config: dict | None = None
) -> ErrorTriage | None:
    """Classify a faulty generation as critical or non-critical.

    Critical reasons: numeric-alteration (the multiset of numeric tokens
    changed), repetition (an n-gram of `min_ngram`+ tokens repeats
    consecutively more often than in the target), and word-change (an aligned
    entity surface changed beyond casing/punctuation/underscore/accent
    normalization and beyond its numbers). Anything else is formatting-only.
    Returns None when the strings are equal.
    """
    if target == generated:
        return None
    config = dict(config or {})
    min_ngram = int(config.pop("min_ngram", 4))
    sentence_id = str(config.pop("sentence_id", ""))
    if config:
        raise ValueError(f"unknown triage config keys: {sorted(config)}")

    reasons: list[str] = []
    if _numeric_tokens(target) != _numeric_tokens(generated):
        reasons.append("numeric-alteration")
    for tgt_surface, gen_surface in _entity_pairs(target, generated):
        norm_t, norm_g = _normalize_surface(tgt_surface), _normalize_surface(gen_surface)
        if norm_t != norm_g and _strip_numbers(norm_t) != _strip_numbers(norm_g):
            reasons.append("word-change")
            break
    if _has_new_repetition(target, generated, min_ngram):
        reasons.append("repetition")

    severity = "critical" if any(r in CRITICAL_REASONS for r in reasons) else "non-critical"
    if severity == "non-critical":
        reasons = ["formatting-only"]
    return ErrorTriage(
        sentence_id=sentence_id,
        severity=severity,
        reasons=reasons,
        similarity=similarity_ratio(target, generated),
    )


def triage_summary(
    triages: Sequence[ErrorTriage],
    evaluated_total: int | None = None,
    bin_edges: Sequence[float] | None = None,
) -> dict:
    """Counts per severity, share of the evaluated set, and similarity histograms."""
    edges = list(bin_edges) if bin_edges is not None else [i / 10 for i in range(11)]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin_edges must be strictly increasing with >= 2 entries")

    def histogram(values: list[float]) -> list[dict]:
        bins = [
            {"lo": lo, "hi": hi, "count": 0} for lo, hi in zip(edges, edges[1:])
        ]
        for v in values:
            for k in range(len(bins) - 1, -1, -1):
                if v >= bins[k]["lo"]:
                    bins[k]["count"] += 1
                    break
            else:
                bins[0]["count"] += 1
        return bins

    summary: dict = {"total_errors": len(triages), "severities": {}}
    for severity in ("critical", "non-critical"):
        values = [t.similarity for t in triages if t.severity == severity]
        summary["severities"][severity] = {
            "count": len(values),
            "similarity_histogram": histogram(values),
        }
    if evaluated_total:
        summary["evaluated_total"] = evaluated_total
        summary["percent_of_evaluated"] = 100.0 * len(triages) / evaluated_total
    return summary
