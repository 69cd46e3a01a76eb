"""Representational transforms between span, BIO, integer-id, subword, and
bracket-template views of a tagged sentence.

The tag scheme sorts labels alphabetically and numbers tags O=0, then B-/I-
pairs label by label, so id(I-X) = id(B-X) + 1 for every label X.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from ._util import read_json, write_json
from .corpus import Corpus, Sentence

logger = logging.getLogger(__name__)

# The shipped label set for Brazilian bank earnings-call transcripts.
DEFAULT_LABELS: tuple[str, ...] = (
    "BALANCO_PATRIMONIAL",
    "CARTEIRA",
    "CLIENTE",
    "COMPANY",
    "CONDICOES_MACROECONOMICAS",
    "DESPESA",
    "INDICADOR_EFICIENCIA",
    "INDICADOR_LIQUIDEZ",
    "INDICADOR_RENTABILIDADE",
    "INDICADOR_VALUATION",
    "LUCRO",
    "MONEY",
    "ORG",
    "PERCENTUAL",
    "PRODUTO",
    "PROVENTO",
    "PROVISAO",
    "QUARTER",
    "RECEITA",
    "RESULTADO",
    "RISCO",
    "SEMESTER",
    "YEAR",
)

SPECIAL_LABEL_ID = -100  # label id carried by special (non-content) subword slots


class EncodeError(ValueError):
    """An entity surface cannot be represented in the bracket template."""


class DecodeError(ValueError):
    """Strict decoding rejected malformed generated text."""


@dataclass(frozen=True)
class TagScheme:
    """Alphabetical label set with its BIO tag list and tag<->integer mapping."""

    labels: tuple[str, ...]
    tags: tuple[str, ...]
    tag_to_id: dict[str, int]

    @classmethod
    def build(cls, labels: Iterable[str] = DEFAULT_LABELS) -> "TagScheme":
        labels = [str(lab) for lab in labels]
        if not labels:
            raise ValueError("label set must be non-empty")
        if any(not lab for lab in labels):
            raise ValueError("labels must be non-empty strings")
        if len(set(labels)) != len(labels):
            dupes = sorted({lab for lab in labels if labels.count(lab) > 1})
            raise ValueError(f"duplicate labels: {dupes}")
        ordered = tuple(sorted(labels))
        tags = ["O"]
        for lab in ordered:
            tags.extend((f"B-{lab}", f"I-{lab}"))
        tag_to_id = {tag: i for i, tag in enumerate(tags)}
        return cls(labels=ordered, tags=tuple(tags), tag_to_id=tag_to_id)

    @property
    def id_to_tag(self) -> dict[int, str]:
        return {i: t for t, i in self.tag_to_id.items()}

    def label_of(self, tag: str) -> str | None:
        """The label part of a B-/I- tag, or None for O."""
        return None if tag == "O" else tag[2:]

    def contains_tag(self, tag: str) -> bool:
        return tag in self.tag_to_id

    def save(self, path: str | Path) -> None:
        write_json(
            path,
            {"labels": list(self.labels), "tags": list(self.tags), "tag_to_id": self.tag_to_id},
        )

    @classmethod
    def load(cls, path: str | Path) -> "TagScheme":
        data = read_json(path)
        scheme = cls.build(data["labels"])
        if list(scheme.tags) != list(data.get("tags", scheme.tags)):
            raise ValueError(f"{path}: tag list does not match its label set")
        return scheme


@dataclass
class TaggedSentence:
    """Parallel token and BIO tag sequences for one sentence."""

    sentence_id: str
    tokens: list[str]
    tags: list[str]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.tags):
            raise ValueError(
                f"sentence {self.sentence_id!r}: {len(self.tokens)} tokens "
                f"vs {len(self.tags)} tags"
            )

    def tag_ids(self, scheme: TagScheme) -> list[int]:
        return [scheme.tag_to_id[t] for t in self.tags]


@dataclass
class SubwordAlignment:
    """Subword-level view of a tagged sentence with -100 on special slots."""

    subwords: list[tuple[str, int | None]]  # (surface, source token index; None = special)
    label_ids: list[int]


@dataclass
class SeqTarget:
    """The annotated-sentence string a generation model is trained to emit."""

    sentence_id: str
    target_text: str


@dataclass
class DecodeDiagnostic:
    kind: str  # unknown-label | malformed-pattern | empty-entity
    token: str
    position: int


def is_valid_bio(tags: Sequence[str]) -> bool:
    """No I-X may follow anything other than B-X or I-X."""
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and prev not in (f"B-{tag[2:]}", tag):
            return False
        prev = tag
    return True


def repair_bio(tags: Sequence[str]) -> list[str]:
    """Promote orphan I-X tags to B-X so the sequence becomes valid BIO."""
    repaired: list[str] = []
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and prev not in (f"B-{tag[2:]}", tag):
            tag = "B-" + tag[2:]
        repaired.append(tag)
        prev = tag
    return repaired


def build_scheme(labels: Iterable[str] = DEFAULT_LABELS) -> TagScheme:
    return TagScheme.build(labels)


def spans_to_bio(
    sentence: Sentence,
    entities: Sequence[tuple[int, int, str]],
    scheme: TagScheme,
) -> TaggedSentence:
    """Project character spans onto token-level BIO tags.

    Span boundaries off token limits are snapped outward to the covering
    tokens. Overlapping entities keep the outermost (earliest start, then
    longest) span; the losers are logged and dropped.
    """
    tags = ["O"] * len(sentence.tokens)
    claimed: set[int] = set()
    ordered = sorted(enumerate(entities), key=lambda e: (e[1][0], -(e[1][1] - e[1][0])))
    for _, (start, end, label) in ordered:
        if label not in scheme.labels:
            raise ValueError(f"sentence {sentence.id!r}: label {label!r} not in scheme")
        idx = [
            i
            for i, tok in enumerate(sentence.tokens)
            if tok.start < end and tok.end > start
        ]
        if not idx:
            logger.warning(
                "sentence %r: span (%d, %d) covers no tokens, skipped", sentence.id, start, end
            )
            continue
        if sentence.tokens[idx[0]].start != start or sentence.tokens[idx[-1]].end != end:
            logger.debug(
                "sentence %r: span (%d, %d) snapped to token boundaries (%d, %d)",
                sentence.id,
                start,
                end,
                sentence.tokens[idx[0]].start,
                sentence.tokens[idx[-1]].end,
            )
        if any(i in claimed for i in idx):
            logger.warning(
                "sentence %r: span (%d, %d, %s) overlaps an outer entity, dropped",
                sentence.id,
                start,
                end,
                label,
            )
            continue
        claimed.update(idx)
        tags[idx[0]] = f"B-{label}"
        for i in idx[1:]:
            tags[i] = f"I-{label}"
    return TaggedSentence(
        sentence_id=sentence.id, tokens=[t.surface for t in sentence.tokens], tags=tags
    )


def align_subwords(
    tagged: TaggedSentence,
    segmentation: Sequence[Sequence[str]],
    specials: tuple[int, int],
    scheme: TagScheme,
) -> SubwordAlignment:
    """Expand token-level tag ids onto subwords, repeating the id on every piece.

    `segmentation` holds, per token, that token's subword surfaces; `specials`
    gives the number of prefix and suffix special slots, which carry -100.
    """
    if len(segmentation) != len(tagged.tokens):
        raise ValueError(
            f"sentence {tagged.sentence_id!r}: segmentation covers {len(segmentation)} "
            f"tokens, sentence has {len(tagged.tokens)}"
        )
    n_prefix, n_suffix = specials
    subwords: list[tuple[str, int | None]] = [("", None)] * n_prefix
    label_ids: list[int] = [SPECIAL_LABEL_ID] * n_prefix
    for i, (pieces, tag) in enumerate(zip(segmentation, tagged.tags)):
        if not pieces:
            raise ValueError(
                f"sentence {tagged.sentence_id!r}: token {i} has an empty subword list"
            )
        tag_id = scheme.tag_to_id[tag]
        for piece in pieces:
            subwords.append((piece, i))
            label_ids.append(tag_id)
    subwords.extend([("", None)] * n_suffix)
    label_ids.extend([SPECIAL_LABEL_ID] * n_suffix)
    return SubwordAlignment(subwords=subwords, label_ids=label_ids)


def subword_ratio(corpus: Corpus, segmenter: Callable[[str], Sequence[str]]) -> float:
    """Total subwords produced by `segmenter` divided by total tokens."""
    total_tokens = 0
    total_subwords = 0
    for sent in corpus:
        for tok in sent.tokens:
            pieces = segmenter(tok.surface)
            if not pieces:
                raise ValueError(f"segmenter produced no pieces for token {tok.surface!r}")
            total_tokens += 1
            total_subwords += len(pieces)
    if total_tokens == 0:
        raise ValueError("corpus has no tokens")
    return total_subwords / total_tokens


_FORBIDDEN_IN_ENTITY = ("|", "[", "]")


def _escape_entity_token(token: str) -> str:
    return token.replace("\\", "\\\\").replace("_", "\\_")


def _split_entity(joined: str) -> list[str]:
    """Split on unescaped underscores and unescape the pieces."""
    words: list[str] = []
    buf: list[str] = []
    i = 0
    while i < len(joined):
        ch = joined[i]
        if ch == "\\" and i + 1 < len(joined):
            buf.append(joined[i + 1])
            i += 2
        elif ch == "_":
            words.append("".join(buf))
            buf = []
            i += 1
        else:
            buf.append(ch)
            i += 1
    words.append("".join(buf))
    return words


def encode_seq(tagged: TaggedSentence) -> SeqTarget:
    """Render a tagged sentence as text with entities wrapped `[w1_w2|LABEL]`.

    Entity words are joined by underscores (literal underscores and backslashes
    are escaped), O tokens pass through verbatim, and output tokens are joined
    by single spaces. No instruction prefix is prepended.
    """
    if not is_valid_bio(tagged.tags):
        raise ValueError(f"sentence {tagged.sentence_id!r}: tags are not valid BIO")
    out: list[str] = []
    i = 0
    n = len(tagged.tokens)
    while i < n:
        tag = tagged.tags[i]
        if tag == "O":
            out.append(tagged.tokens[i])
            i += 1
            continue
        label = tag[2:]
        j = i + 1
        while j < n and tagged.tags[j] == f"I-{label}":
            j += 1
        words = tagged.tokens[i:j]
        for word in words:
            if any(ch in word for ch in _FORBIDDEN_IN_ENTITY):
                raise EncodeError(
                    f"sentence {tagged.sentence_id!r}: entity word {word!r} contains "
                    "a character the bracket template cannot represent"
                )
        joined = "_".join(_escape_entity_token(w) for w in words)
        out.append(f"[{joined}|{label}]")
        i = j
    return SeqTarget(sentence_id=tagged.sentence_id, target_text=" ".join(out))


def decode_seq(
    generated: str,
    scheme: TagScheme,
    strict: bool = False,
    sentence_id: str = "",
) -> tuple[TaggedSentence, list[DecodeDiagnostic]]:
    """Parse generated text back into tokens and BIO tags.

    The text is whitespace-split; tokens fully matching `[entity|LABEL]` with a
    scheme label expand their underscore-joined words into B-/I- tags, and every
    other token is tagged O. In lenient mode malformed or unknown patterns
    degrade to O with a diagnostic; in strict mode they raise DecodeError.
    """
    tokens: list[str] = []
    tags: list[str] = []
    diagnostics: list[DecodeDiagnostic] = []

    def problem(kind: str, raw: str, pos: int) -> None:
        diagnostics.append(DecodeDiagnostic(kind=kind, token=raw, position=pos))
        if strict:
            raise DecodeError(f"position {pos}: {kind} in token {raw!r}")

    for pos, raw in enumerate(generated.split()):
        if raw.startswith("[") and raw.endswith("]") and len(raw) >= 2:
            body = raw[1:-1]
            if "|" not in body:
                problem("malformed-pattern", raw, pos)
                tokens.append(raw)
                tags.append("O")
                continue
            entity, label = body.rsplit("|", 1)
            if not entity:
                problem("empty-entity", raw, pos)
                continue
            words = _split_entity(entity)
            if label not in scheme.labels:
                problem("unknown-label", raw, pos)
                tokens.extend(words)
                tags.extend(["O"] * len(words))
                continue
            tokens.extend(words)
            tags.append(f"B-{label}")
            tags.extend([f"I-{label}"] * (len(words) - 1))
        else:
            if any(ch in raw for ch in ("[", "]", "|")):
                problem("malformed-pattern", raw, pos)
            tokens.append(raw)
            tags.append("O")
    return TaggedSentence(sentence_id=sentence_id, tokens=tokens, tags=tags), diagnostics


def write_tagged_jsonl(path: str | Path, tagged: Iterable[TaggedSentence]) -> None:
    from ._util import write_jsonl

    write_jsonl(path, ({"id": t.sentence_id, "tokens": t.tokens, "tags": t.tags} for t in tagged))


def read_tagged_jsonl(path: str | Path) -> list[TaggedSentence]:
    from ._util import read_jsonl

    return [
        TaggedSentence(sentence_id=str(rec["id"]), tokens=list(rec["tokens"]), tags=list(rec["tags"]))
        for rec in read_jsonl(path)
    ]
