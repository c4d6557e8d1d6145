"""Parameter containers shared by the graph stage and the tagger."""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Iterator, Sequence

import numpy as np

from .numeric import Parameter, Tensor, ops

PAD, UNK, SEP = "<pad>", "<unk>", "[SEP]"
_DIGIT = re.compile(r"\d")


class Module:
    """Collects :class:`Parameter` attributes (and nested modules) in
    definition order."""

    def parameters(self) -> list[Parameter]:
        seen: list[Parameter] = []
        for p in self._walk():
            if all(p is not q for q in seen):
                seen.append(p)
        return seen

    def _walk(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Module):
                yield from value._walk()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Parameter):
                        yield item
                    elif isinstance(item, Module):
                        yield from item._walk()


def uniform(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return uniform(rng, (fan_in, fan_out), np.sqrt(6.0 / (fan_in + fan_out)))


class Vocab:
    """Token index with ``<pad>`` = 0, ``<unk>`` = 1, ``[SEP]`` = 2.

    Lookup keys are lower-cased with every digit mapped to ``0`` so unseen
    numbers share the embedding of their digit shape.
    """

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK, SEP]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    @staticmethod
    def key(token: str) -> str:
        if token in (PAD, UNK, SEP):
            return token
        return _DIGIT.sub("0", token.lower())

    def add(self, token: str) -> int:
        k = self.key(token)
        if k not in self.stoi:
            self.stoi[k] = len(self.itos)
            self.itos.append(k)
        return self.stoi[k]

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(self.key(token), 1)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self[t] for t in tokens]

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], min_count: int = 1) -> "Vocab":
        counts = Counter(cls.key(t) for toks in token_lists for t in toks)
        return cls(sorted(k for k, c in counts.items() if c >= min_count))


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, name: str):
        self.table = Parameter(uniform(rng, (n, dim), 0.1), f"{name}.table")

    def __call__(self, ids) -> Tensor:
        return ops.gather(self.table, ids)

    def load_vectors(self, path, vocab: Vocab) -> int:
        """Overwrite rows from a whitespace text file (token then floats per
        line). Returns the number of rows replaced."""
        dim = self.table.shape[1]
        hits = 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip().split()
                if len(parts) != dim + 1:
                    continue
                idx = vocab.stoi.get(Vocab.key(parts[0]))
                if idx is not None and idx >= 3:
                    self.table.data[idx] = np.asarray(parts[1:], dtype=np.float64)
                    hits += 1
        return hits


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str):
        self.weight = Parameter(glorot(rng, d_in, d_out), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), f"{name}.bias")

    def __call__(self, x) -> Tensor:
        return ops.add(ops.matmul(x, self.weight), self.bias)


class BiLSTM(Module):
    """Single-layer bidirectional LSTM over right-padded batches."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, name: str):
        self.hidden = hidden
        scale = 1.0 / np.sqrt(hidden)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0  # forget gate
        self.w_ih_fwd = Parameter(uniform(rng, (d_in, 4 * hidden), scale), f"{name}.w_ih_fwd")
        self.w_hh_fwd = Parameter(uniform(rng, (hidden, 4 * hidden), scale), f"{name}.w_hh_fwd")
        self.b_fwd = Parameter(bias.copy(), f"{name}.b_fwd")
        self.w_ih_bwd = Parameter(uniform(rng, (d_in, 4 * hidden), scale), f"{name}.w_ih_bwd")
        self.w_hh_bwd = Parameter(uniform(rng, (hidden, 4 * hidden), scale), f"{name}.w_hh_bwd")
        self.b_bwd = Parameter(bias.copy(), f"{name}.b_bwd")

    def __call__(self, x, mask) -> tuple[Tensor, Tensor]:
        """``x`` is ``(B, T, D)``; returns per-step outputs ``(B, T, 2H)`` and
        the final states ``(B, 2H)`` (forward after the last real token,
        backward after the first)."""
        fwd = ops.lstm_scan(ops.add(ops.matmul(x, self.w_ih_fwd), self.b_fwd), mask, self.w_hh_fwd)
        bwd = ops.lstm_scan(
            ops.add(ops.matmul(x, self.w_ih_bwd), self.b_bwd), mask, self.w_hh_bwd, reverse=True
        )
        outputs = ops.concat([fwd, bwd], axis=-1)
        final = ops.concat([fwd[:, -1], bwd[:, 0]], axis=-1)
        return outputs, final


def pad_batch(id_lists: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences; returns ``(ids, mask)`` of shape ``(B, T)``."""
    T = max(len(s) for s in id_lists)
    ids = np.full((len(id_lists), T), pad, dtype=np.intp)
    mask = np.zeros((len(id_lists), T))
    for b, s in enumerate(id_lists):
        ids[b, : len(s)] = s
        mask[b, : len(s)] = 1.0
    return ids, mask
