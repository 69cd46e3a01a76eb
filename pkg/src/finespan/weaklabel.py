"""Labeling functions: regex annotators, heuristic annotators, and trie-backed
gazetteer matchers. Each function votes independently; conflicting spans are
left untouched here and resolved later by aggregation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from ._util import read_json, read_jsonl, write_jsonl
from .corpus import Corpus, Sentence, strip_punct_bounds


class RuleConfigError(ValueError):
    """A rule or gazetteer file is invalid (bad regex, empty phrase list, ...)."""


@dataclass(frozen=True)
class SpanAnnotation:
    """One labeled character span emitted by a single labeling function."""

    sentence_id: str
    char_start: int
    char_end: int
    surface: str
    label: str
    source: str

    def to_record(self) -> dict:
        return {
            "sentence_id": self.sentence_id,
            "char_start": self.char_start,
            "char_end": self.char_end,
            "surface": self.surface,
            "label": self.label,
            "source": self.source,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SpanAnnotation":
        return cls(
            sentence_id=str(rec["sentence_id"]),
            char_start=int(rec["char_start"]),
            char_end=int(rec["char_end"]),
            surface=str(rec["surface"]),
            label=str(rec["label"]),
            source=str(rec["source"]),
        )


class Annotator:
    """Base interface: a named labeling function mapping a sentence to spans."""

    name: str

    def annotate(self, sentence: Sentence) -> list[SpanAnnotation]:
        raise NotImplementedError


class RegexAnnotator(Annotator):
    """Non-overlapping leftmost-longest matches of a pattern list, one label."""

    def __init__(self, name: str, label: str, patterns: Sequence[str]):
        self.name = name
        self.label = label
        try:
            self._compiled = [re.compile(p) for p in patterns]
        except re.error as exc:
            raise RuleConfigError(f"rule {name!r}: invalid regex: {exc}") from exc
        if not self._compiled:
            raise RuleConfigError(f"rule {name!r}: empty pattern list")

    def annotate(self, sentence: Sentence) -> list[SpanAnnotation]:
        candidates: list[tuple[int, int]] = []
        for pattern in self._compiled:
            candidates.extend(m.span() for m in pattern.finditer(sentence.text))
        spans: list[SpanAnnotation] = []
        taken_until = 0
        # leftmost first; on equal starts the longest match wins
        for start, end in sorted(candidates, key=lambda s: (s[0], -s[1])):
            if start < end and start >= taken_until:
                spans.append(
                    SpanAnnotation(
                        sentence_id=sentence.id,
                        char_start=start,
                        char_end=end,
                        surface=sentence.text[start:end],
                        label=self.label,
                        source=self.name,
                    )
                )
                taken_until = end
        return spans


# Brazilian-format numbers: '.' groups thousands, ',' starts decimals.
_NUMBER = r"\d{1,3}(?:\.\d{3})*(?:,\d+)?|\d+(?:,\d+)?"
_PERCENT_RE = re.compile(rf"(?<![\w.,])(?:{_NUMBER})\s?%")
_MONEY_RE = re.compile(
    rf"R\$\s?(?:{_NUMBER})"
    r"(?:\s?(?:trilh(?:ão|ões)|tri|bilh(?:ão|ões)|bi|milh(?:ão|ões)|mil|mi|MM|M)\b)?"
)

HEURISTIC_RULES = {
    "percent": ("PERCENTUAL", _PERCENT_RE),
    "money": ("MONEY", _MONEY_RE),
}


class HeuristicAnnotator(Annotator):
    """Built-in total rules: `percent` marks number+% forms, `money` marks
    R$-prefixed amounts with optional scale words (mil, milhões, bilhões, MM)."""

    def __init__(self, rule: str, name: str | None = None, label: str | None = None):
        if rule not in HEURISTIC_RULES:
            raise RuleConfigError(
                f"unknown heuristic rule {rule!r}; available: {sorted(HEURISTIC_RULES)}"
            )
        default_label, pattern = HEURISTIC_RULES[rule]
        self.rule = rule
        self.name = name or f"heuristic:{rule}"
        self.label = label or default_label
        self._pattern = pattern

    def annotate(self, sentence: Sentence) -> list[SpanAnnotation]:
        return [
            SpanAnnotation(
                sentence_id=sentence.id,
                char_start=m.start(),
                char_end=m.end(),
                surface=m.group(),
                label=self.label,
                source=self.name,
            )
            for m in self._pattern.finditer(sentence.text)
        ]


@dataclass(frozen=True)
class Gazetteer:
    """A phrase list mapped to one label, whitespace-normalized at load time."""

    label: str
    phrases: tuple[str, ...]
    case_sensitive: bool = False

    @classmethod
    def make(
        cls, label: str, phrases: Iterable[str], case_sensitive: bool = False
    ) -> "Gazetteer":
        normalized = tuple(" ".join(p.split()) for p in phrases)
        if not normalized:
            raise RuleConfigError(f"gazetteer {label!r}: empty phrase list")
        if any(not p for p in normalized):
            raise RuleConfigError(f"gazetteer {label!r}: blank phrase")
        return cls(label=label, phrases=normalized, case_sensitive=case_sensitive)

    @classmethod
    def load(cls, path: str | Path) -> "Gazetteer":
        data = read_json(path)
        return cls.make(
            label=str(data["label"]),
            phrases=data["phrases"],
            case_sensitive=bool(data.get("case_sensitive", False)),
        )


class GazetteerAnnotator(Annotator):
    """Trie matcher over token sequences; the longest phrase starting at a
    token wins, matches never cross into the middle of a token, and comparison
    is accent-sensitive (case-insensitive unless the gazetteer says otherwise).
    """

    _END = "\x00"  # trie key marking a complete phrase

    def __init__(self, gazetteer: Gazetteer, name: str | None = None):
        self.gazetteer = gazetteer
        self.label = gazetteer.label
        self.name = name or f"gazetteer:{gazetteer.label}"
        self._trie: dict = {}
        for phrase in gazetteer.phrases:
            node = self._trie
            for word in phrase.split():
                node = node.setdefault(self._norm(word), {})
            node[self._END] = True

    def _norm(self, word: str) -> str:
        return word if self.gazetteer.case_sensitive else word.casefold()

    def annotate(self, sentence: Sentence) -> list[SpanAnnotation]:
        text = sentence.text
        tokens = sentence.tokens
        # per-token punctuation-trimmed core plus one-side-stripped variants,
        # so "Santander," matches as a final phrase word but not mid-phrase
        cores = [strip_punct_bounds(text, t.start, t.end) for t in tokens]
        spans: list[SpanAnnotation] = []
        i = 0
        while i < len(tokens):
            node = self._trie
            best_end: int | None = None
            j = i
            while j < len(tokens):
                cs, ce = cores[j]
                if cs >= ce:
                    break
                # leading punctuation may be stripped only on the first phrase
                # word, trailing punctuation only on the last one
                begin = cs if j == i else tokens[j].start
                end_form = self._norm(text[begin:ce])
                cont_form = self._norm(text[begin : tokens[j].end])
                child = node.get(end_form)
                if child is not None and self._END in child:
                    best_end = j
                nxt = node.get(cont_form)
                if nxt is None:
                    break
                node = nxt
                j += 1
            if best_end is not None:
                start = cores[i][0]
                end = cores[best_end][1]
                spans.append(
                    SpanAnnotation(
                        sentence_id=sentence.id,
                        char_start=start,
                        char_end=end,
                        surface=text[start:end],
                        label=self.label,
                        source=self.name,
                    )
                )
                i = best_end + 1
            else:
                i += 1
        return spans


def run_annotators(corpus: Corpus, annotators: Sequence[Annotator]) -> list[SpanAnnotation]:
    """Apply every labeling function to every sentence, in order."""
    names = [a.name for a in annotators]
    if len(set(names)) != len(names):
        raise RuleConfigError(f"duplicate labeling-function names: {sorted(names)}")
    spans: list[SpanAnnotation] = []
    for sentence in corpus:
        for annotator in annotators:
            spans.extend(annotator.annotate(sentence))
    return spans


def load_rules(path: str | Path) -> list[Annotator]:
    """Load a JSON rule file: a list of {name, kind, label, pattern?|rule?}."""
    data = read_json(path)
    if not isinstance(data, list):
        raise RuleConfigError(f"{path}: rule file must be a JSON list")
    annotators: list[Annotator] = []
    for entry in data:
        kind = entry.get("kind")
        name = entry.get("name")
        if kind == "regex":
            patterns = entry.get("patterns") or [entry["pattern"]]
            annotators.append(RegexAnnotator(name=name, label=entry["label"], patterns=patterns))
        elif kind == "heuristic":
            annotators.append(
                HeuristicAnnotator(rule=entry["rule"], name=name, label=entry.get("label"))
            )
        else:
            raise RuleConfigError(f"{path}: rule {name!r} has unsupported kind {kind!r}")
    return annotators


def load_gazetteer_dir(path: str | Path) -> list[GazetteerAnnotator]:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"gazetteer directory not found: {path}")
    annotators = [GazetteerAnnotator(Gazetteer.load(p)) for p in sorted(path.glob("*.json"))]
    if not annotators:
        raise RuleConfigError(f"{path}: no gazetteer files (*.json) found")
    return annotators


def default_rules_path() -> Path:
    return Path(str(resources.files("finespan") / "data" / "rules-v1.json"))


def default_gazetteer_dir() -> Path:
    return Path(str(resources.files("finespan") / "data" / "gazetteers"))


def default_annotators() -> list[Annotator]:
    """The shipped rule set: year/quarter/semester regexes, percent and money
    heuristics, and one gazetteer per remaining label."""
    annotators = load_rules(default_rules_path())
    annotators.extend(load_gazetteer_dir(default_gazetteer_dir()))
    return annotators


def write_spans_jsonl(path: str | Path, spans: Iterable[SpanAnnotation]) -> None:
    write_jsonl(path, (s.to_record() for s in spans))


def read_spans_jsonl(path: str | Path) -> Iterator[SpanAnnotation]:
    for rec in read_jsonl(path):
        yield SpanAnnotation.from_record(rec)
