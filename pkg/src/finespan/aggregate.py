"""Consensus over labeling-function votes: a majority-vote baseline and an
EM-trained hidden Markov model over BIO states.

The HMM treats the true BIO tag sequence as hidden states; each labeling
function is an independent emission channel over tags plus ABSTAIN, so the
joint emission probability factorizes across functions. All forward/backward
and Viterbi computations run in log space.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._util import read_json, write_json
from .corpus import Corpus, Sentence, Token, strip_punct_bounds
from .tagcodec import TagScheme, repair_bio
from .weaklabel import SpanAnnotation

ABSTAIN = "ABSTAIN"

_LOG_ZERO = -np.inf


@dataclass
class VoteMatrix:
    """Per-token BIO votes (or ABSTAIN) of every labeling function for one sentence."""

    sentence_id: str
    tokens: tuple[Token, ...]
    votes: dict[str, list[str]]

    def __post_init__(self) -> None:
        for func, row in self.votes.items():
            if len(row) != len(self.tokens):
                raise ValueError(
                    f"sentence {self.sentence_id!r}: function {func!r} voted on "
                    f"{len(row)} tokens, sentence has {len(self.tokens)}"
                )

    def n_tokens(self) -> int:
        return len(self.tokens)

    def has_votes(self) -> bool:
        return any(any(v != ABSTAIN for v in row) for row in self.votes.values())


def build_vote_matrix(
    sentence: Sentence,
    spans: Sequence[SpanAnnotation],
    functions: Sequence[str] | None = None,
) -> VoteMatrix:
    """Project character spans onto token-level BIO votes, one row per function.

    Tokens a function never covered vote ABSTAIN. Span boundaries that fall
    inside tokens are snapped outward to the covering tokens.
    """
    for span in spans:
        if span.sentence_id != sentence.id:
            raise ValueError(
                f"span for sentence {span.sentence_id!r} passed with sentence {sentence.id!r}"
            )
    if functions is None:
        functions = sorted({s.source for s in spans})
    votes = {f: [ABSTAIN] * len(sentence.tokens) for f in functions}
    for span in sorted(spans, key=lambda s: (s.source, s.char_start)):
        row = votes[span.source]
        idx = [
            i
            for i, tok in enumerate(sentence.tokens)
            if tok.start < span.char_end and tok.end > span.char_start
        ]
        if not idx:
            continue
        if any(row[i] != ABSTAIN for i in idx):
            warnings.warn(
                f"sentence {sentence.id!r}: function {span.source!r} produced "
                "overlapping spans; later span skipped"
            )
            continue
        row[idx[0]] = f"B-{span.label}"
        for i in idx[1:]:
            row[i] = f"I-{span.label}"
    return VoteMatrix(sentence_id=sentence.id, tokens=sentence.tokens, votes=votes)


def build_vote_matrices(corpus: Corpus, spans: Iterable[SpanAnnotation]) -> list[VoteMatrix]:
    """Vote matrices for a whole corpus, with a consistent function set."""
    by_sentence: dict[str, list[SpanAnnotation]] = {}
    for span in spans:
        by_sentence.setdefault(span.sentence_id, []).append(span)
    known = corpus.by_id()
    for sid in by_sentence:
        if sid not in known:
            raise ValueError(f"spans reference unknown sentence id {sid!r}")
    functions = sorted({s.source for group in by_sentence.values() for s in group})
    return [
        build_vote_matrix(sent, by_sentence.get(sent.id, []), functions=functions)
        for sent in corpus
    ]


def _label_frequencies(matrix: VoteMatrix) -> Counter:
    counts: Counter = Counter()
    for row in matrix.votes.values():
        for vote in row:
            if vote != ABSTAIN:
                counts[vote[2:]] += 1
    return counts


def majority_vote(matrix: VoteMatrix, tie_break: str = "label-frequency") -> list[str]:
    """Per-token most frequent non-ABSTAIN vote, repaired to valid BIO.

    All-ABSTAIN tokens become O. Ties go to the tag whose label is most
    frequent in this matrix (`label-frequency`, lexicographic fallback) or
    simply to the alphabetically first tag (`lexicographic`).
    """
    if tie_break not in ("label-frequency", "lexicographic"):
        raise ValueError(f"unknown tie_break {tie_break!r}")
    label_freq = _label_frequencies(matrix) if tie_break == "label-frequency" else Counter()
    tags: list[str] = []
    for t in range(matrix.n_tokens()):
        counts = Counter(
            row[t] for row in matrix.votes.values() if row[t] != ABSTAIN
        )
        if not counts:
            tags.append("O")
            continue
        top = max(counts.values())
        tied = sorted(tag for tag, c in counts.items() if c == top)
        if tie_break == "label-frequency" and len(tied) > 1:
            tied.sort(key=lambda tag: (-label_freq[tag[2:]], tag))
        tags.append(tied[0])
    return repair_bio(tags)


class MajorityVoter(BaseEstimator):
    """Stateless baseline aggregator with the estimator interface."""

    def __init__(self, tie_break: str = "label-frequency"):
        self.tie_break = tie_break

    def fit(self, X: Sequence[VoteMatrix] | None = None, y=None) -> "MajorityVoter":
        self.fitted_ = True
        return self

    def predict(self, X: Sequence[VoteMatrix]) -> list[list[str]]:
        return [majority_vote(m, tie_break=self.tie_break) for m in X]


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(p > 0, np.log(np.maximum(p, 1e-300)), _LOG_ZERO)


def _logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    return np.logaddexp.reduce(a, axis=axis)


def _viterbi(lpi: np.ndarray, lA: np.ndarray, lem: np.ndarray) -> tuple[list[int], float]:
    """Max-probability state path for one sentence; lem is (T, S) log emissions."""
    T, S = lem.shape
    delta = lpi + lem[0]
    back = np.zeros((T, S), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, None] + lA
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(S)] + lem[t]
    best_last = int(np.argmax(delta))
    path = [best_last]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path.reverse()
    return path, float(delta[best_last])


def _forward_backward(
    lpi: np.ndarray, lA: np.ndarray, lem: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Log alpha/beta matrices and the sentence log-likelihood."""
    T, S = lem.shape
    lalpha = np.empty((T, S))
    lbeta = np.empty((T, S))
    lalpha[0] = lpi + lem[0]
    for t in range(1, T):
        lalpha[t] = _logsumexp(lalpha[t - 1][:, None] + lA, axis=0) + lem[t]
    lbeta[T - 1] = 0.0
    for t in range(T - 2, -1, -1):
        lbeta[t] = _logsumexp(lA + lem[t + 1] + lbeta[t + 1], axis=1)
    loglik = float(_logsumexp(lalpha[T - 1]))
    return lalpha, lbeta, loglik


class HmmAggregator(BaseEstimator):
    """Baum-Welch-trained HMM that merges labeling-function votes.

    States are the scheme's BIO tags; transitions into I-X are only allowed
    from B-X/I-X, and sequences cannot start inside an entity. Emissions are
    one categorical distribution per labeling function over tags + ABSTAIN,
    multiplied together under a conditional-independence assumption.

    Parameters mirror the usual estimator contract: `scheme` may be None, in
    which case the label set is inferred from the votes seen in `fit`.
    `random_state` is echoed into saved models for provenance; training itself
    is deterministic (majority-vote initialization).
    """

    def __init__(
        self,
        scheme: TagScheme | None = None,
        max_iter: int = 50,
        tol: float = 1e-4,
        random_state: int = 0,
        decode_mode: str = "viterbi",
        tie_break: str = "label-frequency",
    ):
        self.scheme = scheme
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state
        self.decode_mode = decode_mode
        self.tie_break = tie_break

    # -- fitting ---------------------------------------------------------

    def fit(self, X: Sequence[VoteMatrix], y=None) -> "HmmAggregator":
        matrices = list(X)
        if self.decode_mode not in ("viterbi", "posterior"):
            raise ValueError(f"unknown decode_mode {self.decode_mode!r}")
        if not any(m.has_votes() for m in matrices):
            raise ValueError("nothing to aggregate: every vote is ABSTAIN")

        functions = sorted({f for m in matrices for f in m.votes})
        active = [
            f
            for f in functions
            if any(any(v != ABSTAIN for v in m.votes.get(f, [])) for m in matrices)
        ]
        for f in functions:
            if f not in active:
                warnings.warn(f"labeling function {f!r} abstains everywhere; dropped")
        scheme = self.scheme
        if scheme is None:
            labels = sorted(
                {
                    v[2:]
                    for m in matrices
                    for row in m.votes.values()
                    for v in row
                    if v != ABSTAIN
                }
            )
            scheme = TagScheme.build(labels)

        states = list(scheme.tags)
        state_index = {s: i for i, s in enumerate(states)}
        S = len(states)
        V = S + 1  # vote symbols: every tag plus ABSTAIN
        abstain_id = S

        allowed = self._allowed_transitions(states)
        obs = [self._observations(m, active, state_index, abstain_id) for m in matrices]

        pi, A, E = self._initialize(matrices, obs, scheme, states, state_index, active, allowed)

        loglik_history: list[float] = []
        prev_ll: float | None = None
        for _ in range(self.max_iter):
            lpi, lA, lE = _log(pi), _log(A), [_log(e) for e in E]
            pi_acc = np.zeros(S)
            A_acc = np.zeros((S, S))
            E_acc = [np.zeros((S, V)) for _ in active]
            total_ll = 0.0
            for ob in obs:
                T = ob.shape[1]
                if T == 0:
                    continue
                lem = self._log_emissions(ob, lE)
                lalpha, lbeta, ll = _forward_backward(lpi, lA, lem)
                total_ll += ll
                lgamma = lalpha + lbeta - ll
                gamma = np.exp(lgamma)
                pi_acc += gamma[0]
                if T > 1:
                    # expected transition counts, summed over t in log space
                    lxi = (
                        lalpha[:-1, :, None]
                        + lA[None, :, :]
                        + (lem[1:] + lbeta[1:])[:, None, :]
                        - ll
                    )
                    A_acc += np.exp(_logsumexp(lxi, axis=0))
                for k in range(len(active)):
                    acc_t = np.zeros((V, S))
                    np.add.at(acc_t, ob[k], gamma)
                    E_acc[k] += acc_t.T
            loglik_history.append(total_ll)
            if prev_ll is not None:
                denom = max(abs(prev_ll), 1.0)
                if (total_ll - prev_ll) / denom < self.tol:
                    break
            prev_ll = total_ll

            pi = self._normalize_row(pi_acc, fallback=pi)
            A = self._normalize_rows(A_acc, fallback=A)
            A *= allowed
            A = self._normalize_rows(A, fallback=A)
            E = [self._normalize_rows(acc, fallback=old) for acc, old in zip(E_acc, E)]

        self.scheme_ = scheme
        self.states_ = states
        self.functions_ = active
        self.startprob_ = pi
        self.transmat_ = A
        self.emissionprob_ = {f: E[k] for k, f in enumerate(active)}
        self.log_likelihoods_ = loglik_history
        self.n_iter_ = len(loglik_history)
        return self

    @staticmethod
    def _allowed_transitions(states: list[str]) -> np.ndarray:
        S = len(states)
        allowed = np.ones((S, S))
        for j, dst in enumerate(states):
            if not dst.startswith("I-"):
                continue
            label = dst[2:]
            for i, src in enumerate(states):
                if src not in (f"B-{label}", f"I-{label}"):
                    allowed[i, j] = 0.0
        return allowed

    @staticmethod
    def _start_allowed(states: list[str]) -> np.ndarray:
        return np.array([0.0 if s.startswith("I-") else 1.0 for s in states])

    def _observations(
        self,
        matrix: VoteMatrix,
        active: list[str],
        state_index: dict[str, int],
        abstain_id: int,
    ) -> np.ndarray:
        """(F, T) array of vote symbol ids for one sentence."""
        T = matrix.n_tokens()
        ob = np.full((len(active), T), abstain_id, dtype=np.int64)
        for k, f in enumerate(active):
            row = matrix.votes.get(f)
            if row is None:
                continue
            for t, vote in enumerate(row):
                if vote == ABSTAIN:
                    continue
                if vote not in state_index:
                    raise ValueError(
                        f"sentence {matrix.sentence_id!r}: vote {vote!r} outside the scheme"
                    )
                ob[k, t] = state_index[vote]
        return ob

    def _initialize(
        self,
        matrices: list[VoteMatrix],
        obs: list[np.ndarray],
        scheme: TagScheme,
        states: list[str],
        state_index: dict[str, int],
        active: list[str],
        allowed: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        """Counts from majority-vote labels with add-one smoothing on allowed
        transitions; emissions start near-diagonal with the empirical abstain rate."""
        S = len(states)
        V = S + 1
        pi_counts = np.zeros(S)
        A_counts = np.zeros((S, S))
        for m in matrices:
            labels = majority_vote(m, tie_break=self.tie_break)
            ids = [state_index[t] for t in labels]
            if not ids:
                continue
            pi_counts[ids[0]] += 1
            for a, b in zip(ids[:-1], ids[1:]):
                A_counts[a, b] += 1
        start_allowed = self._start_allowed(states)
        pi = (pi_counts + 1.0) * start_allowed
        pi /= pi.sum()
        A = (A_counts + 1.0) * allowed
        A /= A.sum(axis=1, keepdims=True)

        E: list[np.ndarray] = []
        for k in range(len(active)):
            votes = np.concatenate([ob[k] for ob in obs]) if obs else np.array([], dtype=int)
            abstain_rate = float(np.mean(votes == S)) if votes.size else 0.0
            e = np.full((S, V), (1.0 - abstain_rate) * 0.1 / max(S - 1, 1))
            for s in range(S):
                e[s, s] = (1.0 - abstain_rate) * 0.9
            e[:, S] = abstain_rate
            e /= e.sum(axis=1, keepdims=True)
            E.append(e)
        return pi, A, E

    @staticmethod
    def _normalize_row(row: np.ndarray, fallback: np.ndarray) -> np.ndarray:
        total = row.sum()
        if total <= 0:
            return fallback.copy()
        return row / total

    @staticmethod
    def _normalize_rows(mat: np.ndarray, fallback: np.ndarray) -> np.ndarray:
        totals = mat.sum(axis=1, keepdims=True)
        out = np.where(totals > 0, mat / np.where(totals > 0, totals, 1.0), fallback)
        return out

    def _log_emissions(self, ob: np.ndarray, lE: list[np.ndarray]) -> np.ndarray:
        """(T, S) combined log emissions; tokens no state can explain fall back
        to uninformative so decoding never degenerates."""
        T = ob.shape[1]
        S = lE[0].shape[0]
        lem = np.zeros((T, S))
        for k in range(ob.shape[0]):
            lem += lE[k][:, ob[k]].T
        dead = ~np.isfinite(lem.max(axis=1))
        if dead.any():
            lem[dead] = 0.0
        return lem

    # -- decoding --------------------------------------------------------

    def _check_fitted(self) -> None:
        if not hasattr(self, "transmat_"):
            raise NotFittedError("HmmAggregator must be fitted before decoding")

    def decode(
        self, matrix: VoteMatrix, mode: str | None = None
    ) -> tuple[list[str], list[float]]:
        """Consensus BIO tags plus per-token confidence for one sentence.

        Viterbi returns the max-probability valid path (confidence = the
        path's share of total probability); posterior returns per-token
        argmax marginals repaired to valid BIO (confidence = marginal mass).
        """
        self._check_fitted()
        mode = mode or self.decode_mode
        if mode not in ("viterbi", "posterior"):
            raise ValueError(f"unknown decode mode {mode!r}")
        if matrix.n_tokens() == 0:
            return [], []
        state_index = {s: i for i, s in enumerate(self.states_)}
        ob = self._observations(matrix, self.functions_, state_index, len(self.states_))
        lE = [_log(self.emissionprob_[f]) for f in self.functions_]
        lem = self._log_emissions(ob, lE)
        lpi, lA = _log(self.startprob_), _log(self.transmat_)
        if mode == "viterbi":
            path, score = _viterbi(lpi, lA, lem)
            _, _, loglik = _forward_backward(lpi, lA, lem)
            share = float(np.exp(score - loglik)) if np.isfinite(loglik) else 0.0
            tags = [self.states_[i] for i in path]
            return tags, [share] * len(tags)
        lalpha, lbeta, loglik = _forward_backward(lpi, lA, lem)
        marginals = np.exp(lalpha + lbeta - loglik)
        picks = np.argmax(marginals, axis=1)
        conf = [float(marginals[t, i]) for t, i in enumerate(picks)]
        tags = repair_bio([self.states_[i] for i in picks])
        return tags, conf

    def predict(self, X: Sequence[VoteMatrix] | VoteMatrix) -> list:
        self._check_fitted()
        if isinstance(X, VoteMatrix):
            return self.decode(X)[0]
        return [self.decode(m)[0] for m in X]

    # -- persistence -----------------------------------------------------

    def to_dict(self, corpus_fingerprint: str = "") -> dict:
        self._check_fitted()
        return {
            "states": self.states_,
            "pi": self.startprob_.tolist(),
            "A": self.transmat_.tolist(),
            "E": {f: e.tolist() for f, e in self.emissionprob_.items()},
            "config": {
                "max_iter": self.max_iter,
                "tol": self.tol,
                "seed": self.random_state,
                "decode_mode": self.decode_mode,
                "tie_break": self.tie_break,
            },
            "labels": list(self.scheme_.labels),
            "log_likelihoods": self.log_likelihoods_,
            "corpus_fingerprint": corpus_fingerprint,
        }

    def save(self, path, corpus_fingerprint: str = "") -> None:
        write_json(path, self.to_dict(corpus_fingerprint))

    @classmethod
    def from_dict(cls, data: dict) -> "HmmAggregator":
        cfg = data.get("config", {})
        scheme = TagScheme.build(data["labels"])
        model = cls(
            scheme=scheme,
            max_iter=int(cfg.get("max_iter", 50)),
            tol=float(cfg.get("tol", 1e-4)),
            random_state=int(cfg.get("seed", 0)),
            decode_mode=str(cfg.get("decode_mode", "viterbi")),
            tie_break=str(cfg.get("tie_break", "label-frequency")),
        )
        model.scheme_ = scheme
        model.states_ = list(data["states"])
        model.functions_ = sorted(data["E"])
        model.startprob_ = np.asarray(data["pi"], dtype=float)
        model.transmat_ = np.asarray(data["A"], dtype=float)
        model.emissionprob_ = {f: np.asarray(e, dtype=float) for f, e in data["E"].items()}
        model.log_likelihoods_ = list(data.get("log_likelihoods", []))
        model.n_iter_ = len(model.log_likelihoods_)
        return model

    @classmethod
    def load(cls, path) -> "HmmAggregator":
        return cls.from_dict(read_json(path))


@dataclass
class AnnotatedSentence:
    """A sentence with its consensus entities."""

    sentence: Sentence
    entities: list[dict] = field(default_factory=list)

    def to_record(self) -> dict:
        rec = self.sentence.to_record()
        rec["entities"] = self.entities
        return rec


@dataclass
class AggregateResult:
    annotated: list[AnnotatedSentence]
    unannotated: Corpus
    report: dict
    model: HmmAggregator


def entities_from_tags(
    sentence: Sentence, tags: Sequence[str], confidences: Sequence[float]
) -> list[dict]:
    """Contiguous B-/I- runs to character spans, trimmed of flanking punctuation."""
    entities: list[dict] = []
    i = 0
    while i < len(tags):
        tag = tags[i]
        if tag == "O":
            i += 1
            continue
        label = tag[2:]
        j = i + 1
        while j < len(tags) and tags[j] == f"I-{label}":
            j += 1
        start, end = strip_punct_bounds(
            sentence.text, sentence.tokens[i].start, sentence.tokens[j - 1].end
        )
        if start < end:
            entities.append(
                {
                    "start": start,
                    "end": end,
                    "surface": sentence.text[start:end],
                    "label": label,
                    "confidence": float(np.mean(confidences[i:j])) if confidences else 0.0,
                }
            )
        i = j
    return entities


def aggregate_corpus(
    corpus: Corpus,
    spans: Iterable[SpanAnnotation],
    config: dict | None = None,
) -> AggregateResult:
    """Fit the HMM on the corpus votes, decode every sentence, and partition
    sentences into annotated (>= 1 entity) and unannotated."""
    config = dict(config or {})
    mode = config.pop("decode_mode", "viterbi")
    model = HmmAggregator(
        scheme=config.pop("scheme", None),
        max_iter=int(config.pop("max_iter", 50)),
        tol=float(config.pop("tol", 1e-4)),
        random_state=int(config.pop("seed", 0)),
        decode_mode=mode,
    )
    if config:
        raise ValueError(f"unknown aggregation config keys: {sorted(config)}")
    matrices = build_vote_matrices(corpus, spans)
    model.fit(matrices)
    annotated: list[AnnotatedSentence] = []
    unannotated: list[Sentence] = []
    total = 0
    per_label: Counter = Counter()
    for sent, matrix in zip(corpus, matrices):
        tags, conf = model.decode(matrix)
        entities = entities_from_tags(sent, tags, conf)
        if entities:
            annotated.append(AnnotatedSentence(sentence=sent, entities=entities))
            total += len(entities)
            per_label.update(e["label"] for e in entities)
        else:
            unannotated.append(sent)
    report = {
        "annotated_sentences": len(annotated),
        "unannotated_sentences": len(unannotated),
        "total_annotations": total,
        "annotations_per_sentence": (total / len(annotated)) if annotated else 0.0,
        "per_label": dict(sorted(per_label.items())),
    }
    return AggregateResult(
        annotated=annotated,
        unannotated=Corpus(sentences=unannotated, provenance=dict(corpus.provenance)),
        report=report,
        model=model,
    )
