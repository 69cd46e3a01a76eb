"""Sentence corpora: ingestion from CSV/JSONL, filtering, descriptive statistics,
and reproducible train/validation/test splits.

Sentences are tokenized by whitespace; a token counts as a word only if it
contains at least one alphanumeric character, so bare punctuation never
inflates word counts.
"""

from __future__ import annotations

import csv
import re
import unicodedata
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from ._util import read_jsonl, write_jsonl

_TOKEN_RE = re.compile(r"\S+")

# PRNG identity recorded in every split manifest so splits can be reproduced.
SPLIT_PRNG = "numpy.random.PCG64/permutation"


class IngestError(ValueError):
    """A corpus file is structurally unusable (missing columns, bad records)."""


class Token(NamedTuple):
    surface: str
    start: int
    end: int


def tokenize(text: str) -> tuple[Token, ...]:
    """Whitespace tokenization with character offsets into the original text."""
    return tuple(Token(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text))


def is_word(surface: str) -> bool:
    """A token is a word when it carries at least one alphanumeric character."""
    return any(ch.isalnum() for ch in surface)


def strip_punct_bounds(text: str, start: int, end: int) -> tuple[int, int]:
    """Shrink [start, end) past leading/trailing punctuation and symbol characters."""
    while start < end and unicodedata.category(text[start])[0] in ("P", "S"):
        start += 1
    while end > start and unicodedata.category(text[end - 1])[0] in ("P", "S"):
        end -= 1
    return start, end


@dataclass
class Sentence:
    """One text unit with provenance metadata and derived whitespace tokens."""

    id: str
    text: str
    meta: dict[str, str] = field(default_factory=dict)
    tokens: tuple[Token, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.tokens:
            self.tokens = tokenize(self.text)

    def word_count(self) -> int:
        return sum(1 for tok in self.tokens if is_word(tok.surface))

    def to_record(self) -> dict:
        rec: dict = {"id": self.id, "text": self.text}
        if self.meta:
            rec["meta"] = dict(self.meta)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Sentence":
        meta = {str(k): str(v) for k, v in rec.get("meta", {}).items()}
        return cls(id=str(rec["id"]), text=str(rec["text"]), meta=meta)


@dataclass
class Corpus:
    """An ordered list of sentences with unique ids plus ingest provenance."""

    sentences: list[Sentence]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for sent in self.sentences:
            if sent.id in seen:
                raise ValueError(f"duplicate sentence id {sent.id!r} in corpus")
            seen.add(sent.id)

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def ids(self) -> list[str]:
        return [s.id for s in self.sentences]

    def by_id(self) -> dict[str, Sentence]:
        return {s.id: s for s in self.sentences}


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test fractions plus the shuffle seed."""

    fractions: tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 42

    def __post_init__(self) -> None:
        if any(f < 0 for f in self.fractions):
            raise ValueError("split fractions must be >= 0")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1.0, got {sum(self.fractions)}")


def ingest(path: str | Path, format: str | None = None) -> Corpus:
    """Read a corpus from a CSV (header row with a `text` column) or JSONL file.

    Records lacking an `id` get `<file-stem>:<row-index>`; every remaining
    column/key is preserved as string-valued metadata. A record without `text`
    aborts the ingest with its row number.
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format not in ("csv", "jsonl"):
        raise ValueError(f"unsupported corpus format {format!r}")

    sentences: list[Sentence] = []
    stem = path.stem
    if format == "csv":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "text" not in reader.fieldnames:
                raise IngestError(f"{path}: CSV header must contain a 'text' column")
            for i, row in enumerate(reader):
                text = row.get("text")
                if text is None:
                    raise IngestError(f"{path}: row {i}: missing 'text' value")
                sent_id = row.get("id") or f"{stem}:{i}"
                meta = {
                    k: ("" if v is None else str(v))
                    for k, v in row.items()
                    if k not in ("id", "text") and k is not None
                }
                sentences.append(Sentence(id=str(sent_id), text=text, meta=meta))
    else:
        for i, rec in enumerate(read_jsonl(path)):
            if not isinstance(rec, dict) or "text" not in rec:
                raise IngestError(f"{path}: row {i}: missing 'text' field")
            sent_id = rec.get("id", f"{stem}:{i}")
            meta_src = dict(rec.get("meta", {}))
            meta_src.update({k: v for k, v in rec.items() if k not in ("id", "text", "meta")})
            meta = {str(k): str(v) for k, v in meta_src.items()}
            sentences.append(Sentence(id=str(sent_id), text=str(rec["text"]), meta=meta))

    provenance = {
        "sources": [str(path)],
        "format": format,
        "ingested_at": datetime.now(timezone.utc).isoformat(),
    }
    return Corpus(sentences=sentences, provenance=provenance)


def filter_corpus(
    corpus: Corpus, min_words: int = 4, dedupe: bool = True
) -> tuple[Corpus, Corpus]:
    """Partition a corpus into (kept, dropped).

    Kept sentences have strictly more than `min_words` words (so the default 4
    keeps sentences of 5+ words) and, when `dedupe` is set, a text not seen
    earlier in corpus order. Duplicate detection is exact string match after
    trimming outer whitespace. Dropped sentences carry a `drop_reason` meta tag.
    """
    if min_words < 0:
        raise ValueError("min_words must be >= 0")
    kept: list[Sentence] = []
    dropped: list[Sentence] = []
    seen: set[str] = set()
    for sent in corpus:
        reason = None
        if sent.word_count() <= min_words:
            reason = "short"
        key = sent.text.strip()
        if dedupe:
            if reason is None and key in seen:
                reason = "duplicate"
            seen.add(key)
        if reason is None:
            kept.append(sent)
        else:
            meta = dict(sent.meta)
            meta["drop_reason"] = reason
            dropped.append(Sentence(id=sent.id, text=sent.text, meta=meta))
    prov = dict(corpus.provenance)
    return (
        Corpus(sentences=kept, provenance=prov),
        Corpus(sentences=dropped, provenance=prov),
    )


def _distribution(counts: list[int], bin_width: int) -> dict:
    arr = np.asarray(counts, dtype=float)
    q1, q2, q3 = (float(q) for q in np.percentile(arr, [25, 50, 75]))
    lo = int(arr.min())
    hist: dict[int, int] = {}
    for c in counts:
        b = lo + ((c - lo) // bin_width) * bin_width
        hist[b] = hist.get(b, 0) + 1
    return {
        "count": len(counts),
        "min": int(arr.min()),
        "max": int(arr.max()),
        "mean": float(arr.mean()),
        # population standard deviation (ddof=0)
        "std": float(arr.std()),
        "quartiles": {"q1": q1, "q2": q2, "q3": q3},
        "histogram": {
            "bin_width": bin_width,
            "bins": [{"lo": b, "hi": b + bin_width, "count": n} for b, n in sorted(hist.items())],
        },
    }


def corpus_stats(corpus: Corpus, group_by: str | None = None, bin_width: int = 1) -> dict:
    """Word-count statistics (min/max/mean/std/quartiles + histogram), overall and per group.

    `group_by` names a meta key that must exist on every sentence; a sentence
    missing it raises a ValueError naming the offender.
    """
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    if not corpus.sentences:
        raise ValueError("cannot compute statistics of an empty corpus")
    counts = [s.word_count() for s in corpus]
    report: dict = {"overall": _distribution(counts, bin_width)}
    if group_by is not None:
        groups: dict[str, list[int]] = {}
        for sent in corpus:
            if group_by not in sent.meta:
                raise ValueError(f"sentence {sent.id!r} has no meta key {group_by!r}")
            groups.setdefault(sent.meta[group_by], []).append(sent.word_count())
        report["group_by"] = group_by
        report["groups"] = {
            name: _distribution(vals, bin_width) for name, vals in sorted(groups.items())
        }
    return report


def split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Deterministic rounding rule: validation and test get floor(n*f), train the remainder."""
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_val - n_test
    return n_train, n_val, n_test


def split_corpus(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Shuffle with a seeded PCG64 permutation and cut into train/validation/test.

    The same (corpus, seed) pair always yields identical splits; partitions are
    disjoint and exhaustive. Splitting is by sentence, never stratified.
    """
    if not corpus.sentences:
        raise ValueError("cannot split an empty corpus")
    n = len(corpus)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    order = rng.permutation(n)
    shuffled = [corpus.sentences[i] for i in order]
    n_train, n_val, n_test = split_sizes(n, spec.fractions)
    prov = dict(corpus.provenance)
    train = Corpus(sentences=shuffled[:n_train], provenance=prov)
    val = Corpus(sentences=shuffled[n_train : n_train + n_val], provenance=prov)
    test = Corpus(sentences=shuffled[n_train + n_val :], provenance=prov)
    return train, val, test


def split_manifest_records(
    spec: SplitSpec, train: Corpus, val: Corpus, test: Corpus
) -> Iterable[dict]:
    """Header line naming the PRNG, then one {id, split} line per sentence."""
    yield {
        "prng": SPLIT_PRNG,
        "seed": spec.seed,
        "fractions": list(spec.fractions),
        "sizes": {"train": len(train), "validation": len(val), "test": len(test)},
    }
    for name, part in (("train", train), ("validation", val), ("test", test)):
        for sent in part:
            yield {"id": sent.id, "split": name}


def write_corpus_jsonl(path: str | Path, corpus: Corpus) -> None:
    write_jsonl(path, (s.to_record() for s in corpus))


def read_corpus_jsonl(path: str | Path) -> Corpus:
    sentences = [Sentence.from_record(rec) for rec in read_jsonl(path)]
    return Corpus(sentences=sentences, provenance={"sources": [str(path)], "format": "jsonl"})
