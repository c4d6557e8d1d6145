"""BiLSTM-CRF tagging with an optional per-segment context vector appended to
every token embedding, plus Viterbi decoding and IOB span extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import BiLSTM, Embedding, Linear, Module
from .numeric import Parameter, Tensor, ops


class CRF(Module):
    """Linear-chain CRF with transition, start and end scores."""

    def __init__(self, n_tags: int, name: str = "crf"):
        self.transitions = Parameter(np.zeros((n_tags, n_tags)), f"{name}.transitions")
        self.start = Parameter(np.zeros(n_tags), f"{name}.start")
        self.end = Parameter(np.zeros(n_tags), f"{name}.end")

    @property
    def n_tags(self) -> int:
        return self.start.shape[0]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.transitions.data, self.start.data, self.end.data

    def log_likelihood(self, emissions, mask: np.ndarray, tags: np.ndarray) -> Tensor:
        """Per-sequence ``score(gold) - logZ`` for right-padded batches.

        ``emissions`` is ``(B, T, K)``; ``mask`` and ``tags`` are ``(B, T)``
        arrays with every row holding at least one real position.
        """
        return ops.add(self.gold_score(emissions, mask, tags), ops.neg(self.log_partition(emissions, mask)))

    def gold_score(self, emissions, mask: np.ndarray, tags: np.ndarray) -> Tensor:
        B, T = tags.shape
        lengths = mask.sum(axis=1).astype(np.intp)
        rows = np.arange(B)[:, None]
        steps = np.arange(T)[None, :]
        emit = ops.slice_(emissions, (np.broadcast_to(rows, (B, T)), np.broadcast_to(steps, (B, T)), tags))
        score = ops.sum_(ops.mul(emit, mask), axis=1)
        score = ops.add(score, ops.gather(self.start, tags[:, 0]))
        score = ops.add(score, ops.gather(self.end, tags[np.arange(B), lengths - 1]))
        if T > 1:
            trans = ops.slice_(self.transitions, (tags[:, :-1], tags[:, 1:]))
            score = ops.add(score, ops.sum_(ops.mul(trans, mask[:, 1:]), axis=1))
        return score

    def log_partition(self, emissions, mask: np.ndarray) -> Tensor:
        """Forward algorithm in log space; masked steps carry alpha unchanged."""
        return ops.crf_log_partition(emissions, self.transitions, self.start, self.end, mask)

    def log_partition_composed(self, emissions, mask: np.ndarray) -> Tensor:
        """The same recursion built from generic primitives (reference path)."""
        B, T, K = emissions.shape
        alpha = ops.add(self.start, emissions[:, 0])
        trans = self.transitions.reshape(1, K, K)
        for t in range(1, T):
            m = mask[:, t : t + 1]
            scores = ops.add(ops.add(alpha.reshape(B, K, 1), trans), emissions[:, t].reshape(B, 1, K))
            nxt = ops.logsumexp(scores, axis=1)
            alpha = ops.add(ops.mul(nxt, m), ops.mul(alpha, 1.0 - m))
        return ops.logsumexp(ops.add(alpha, self.end), axis=-1)


# ------------------------------------------------------ numpy references


def path_score(emissions: np.ndarray, transitions, start, end, tags: Sequence[int]) -> float:
    s = start[tags[0]] + end[tags[-1]] + sum(emissions[k, y] for k, y in enumerate(tags))
    return float(s + sum(transitions[a, b] for a, b in zip(tags[:-1], tags[1:])))


def log_partition(emissions: np.ndarray, transitions, start, end) -> float:
    alpha = start + emissions[0]
    for t in range(1, emissions.shape[0]):
        s = alpha[:, None] + transitions + emissions[t][None, :]
        mx = s.max(axis=0)
        alpha = mx + np.log(np.exp(s - mx).sum(axis=0))
    final = alpha + end
    mx = final.max()
    return float(mx + np.log(np.exp(final - mx).sum()))


def crf_log_likelihood(emissions: np.ndarray, transitions, start, end, tags: Sequence[int]) -> float:
    return path_score(emissions, transitions, start, end, tags) - log_partition(emissions, transitions, start, end)


def viterbi_decode(emissions: np.ndarray, transitions, start, end) -> list[int]:
    """Highest-scoring tag path; ties go to the lowest tag index at the final
    step and at every backpointer."""
    m, _ = emissions.shape
    score = start + emissions[0]
    back = []
    for t in range(1, m):
        s = score[:, None] + transitions
        best_prev = s.argmax(axis=0)
        back.append(best_prev)
        score = s.max(axis=0) + emissions[t]
    best = [int((score + end).argmax())]
    for bp in reversed(back):
        best.append(int(bp[best[-1]]))
    return best[::-1]


# --------------------------------------------------------- span decoding


@dataclass(frozen=True)
class EntitySpan:
    entity_type: str
    start: int
    end: int  # exclusive
    value: str


def repair_iob(tags: Sequence[str]) -> list[str]:
    """Promote every ``I-X`` not preceded by ``B-X``/``I-X`` to ``B-X``."""
    fixed = []
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and prev[2:] != tag[2:]:
            tag = "B-" + tag[2:]
        fixed.append(tag)
        prev = tag
    return fixed


def decode_entities(tags: Sequence[str], tokens: Sequence[str], mode: str = "word") -> list[EntitySpan]:
    sep = "" if mode == "char" else " "
    spans = []
    start = etype = None
    for k, tag in enumerate(repair_iob(tags) + ["O"]):
        if start is not None and not (tag.startswith("I-") and tag[2:] == etype):
            spans.append(EntitySpan(etype, start, k, sep.join(tokens[start:k])))
            start = etype = None
        if tag.startswith("B-"):
            start, etype = k, tag[2:]
    return spans


def encode_spans(spans: Sequence[EntitySpan], length: int) -> list[str]:
    tags = ["O"] * length
    for s in spans:
        tags[s.start] = f"B-{s.entity_type}"
        for k in range(s.start + 1, s.end):
            tags[k] = f"I-{s.entity_type}"
    return tags


# ------------------------------------------------------------ the tagger


def fuse_inputs(token_emb, context) -> Tensor:
    """Append the per-sequence ``context`` (B, d) to every token embedding
    ``(B, T, d_tok)``; ``None`` leaves the embeddings as they are."""
    if context is None:
        return token_emb
    B, T, _ = token_emb.shape
    tiled = ops.mul(context.reshape(B, 1, -1), np.ones((1, T, 1)))
    return ops.concat([token_emb, tiled], axis=-1)


class Tagger(Module):
    def __init__(
        self,
        vocab_size: int,
        n_tags: int,
        rng: np.random.Generator,
        d_tok: int = 64,
        hidden: int = 64,
        d_context: int = 0,
        name: str = "tagger",
    ):
        self.d_context = d_context
        self.embedding = Embedding(vocab_size, d_tok, rng, f"{name}.embedding")
        self.lstm = BiLSTM(d_tok + d_context, hidden, rng, f"{name}.lstm")
        self.emission = Linear(2 * hidden, n_tags, rng, f"{name}.emission")
        self.crf = CRF(n_tags, f"{name}.crf")

    def emissions(self, token_ids: np.ndarray, mask: np.ndarray, context=None) -> Tensor:
        x = fuse_inputs(self.embedding(token_ids), context)
        outputs, _ = self.lstm(x, mask)
        return self.emission(outputs)

    def log_likelihood(self, token_ids, mask, tags, context=None) -> Tensor:
        return self.crf.log_likelihood(self.emissions(token_ids, mask, context), mask, tags)

    def decode(self, token_ids, mask, context=None) -> list[list[int]]:
        em = self.emissions(token_ids, mask, context).data
        trans, start, end = self.crf.arrays()
        lengths = mask.sum(axis=1).astype(int)
        return [viterbi_decode(em[b, :n], trans, start, end) for b, n in enumerate(lengths)]
