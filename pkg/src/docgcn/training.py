"""Joint training, early stopping and entity-level evaluation."""

from __future__ import annotations

import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .document import Document, normalize_value
from .layers import Vocab
from .model import Example, ExtractionModel, TrainConfig
from .numeric import Adam, NumericError, Tape, backward
from .numeric.checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from .tagger import EntitySpan, decode_entities

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------- metrics


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class Metrics:
    counts: dict[str, list[int]] = field(default_factory=dict)  # type -> [tp, fp, fn]

    def add(self, etype: str, tp: int = 0, fp: int = 0, fn: int = 0) -> None:
        c = self.counts.setdefault(etype, [0, 0, 0])
        c[0] += tp
        c[1] += fp
        c[2] += fn

    def subset(self, types: Iterable[str]) -> tuple[float, float, float]:
        tp = fp = fn = 0
        for t in types:
            a, b, c = self.counts.get(t, (0, 0, 0))
            tp, fp, fn = tp + a, fp + b, fn + c
        return prf(tp, fp, fn)

    @property
    def micro(self) -> tuple[float, float, float]:
        return self.subset(self.counts)

    @property
    def micro_f1(self) -> float:
        return self.micro[2]

    def subset_f1(self, types: Iterable[str]) -> float:
        return self.subset(types)[2]

    def per_type(self) -> dict[str, dict[str, float]]:
        out = {}
        for t in sorted(self.counts):
            tp, fp, fn = self.counts[t]
            p, r, f = prf(tp, fp, fn)
            out[t] = {"p": p, "r": r, "f1": f, "support": tp + fn}
        return out

    def to_json(self, mode: str, seed: int, **extra) -> dict:
        p, r, f = self.micro
        payload = {
            "mode": mode,
            "seed": seed,
            "per_type": self.per_type(),
            "micro_f1": f,
            "micro_p": p,
            "micro_r": r,
        }
        payload.update(extra)
        return payload


def gold_entities(doc: Document, mode: str = "word") -> list[tuple[str, str]]:
    return [(a.entity_type, normalize_value(a.value, mode)) for a in doc.annotations]


def score_document(metrics: Metrics, predicted: Sequence[tuple[str, str]], gold: Sequence[tuple[str, str]]) -> None:
    """Exact (type, normalized value) matching; each gold entity matches once."""
    remaining = Counter(gold)
    for ent in predicted:
        if remaining[ent] > 0:
            remaining[ent] -= 1
            metrics.add(ent[0], tp=1)
        else:
            metrics.add(ent[0], fp=1)
    for ent, n in remaining.items():
        if n:
            metrics.add(ent[0], fn=n)
    for etype, _ in gold:
        metrics.counts.setdefault(etype, [0, 0, 0])


# ------------------------------------------------------------- inference


def extract(model: ExtractionModel, ex: Example) -> list[tuple[int, EntitySpan]]:
    """(segment index, span) pairs for one prepared document."""
    out = []
    mode = model.config.tokenizer
    for i, tags in enumerate(model.predict_tags(ex)):
        for span in decode_entities(tags, ex.doc.segments[i].tokens, mode):
            out.append((i, span))
    return out


def extraction_record(model: ExtractionModel, ex: Example) -> dict:
    ents = []
    for i, span in extract(model, ex):
        ents.append(
            {
                "type": span.entity_type,
                "value": span.value,
                "segment_id": ex.doc.segments[i].id,
                "token_range": [span.start, span.end],
            }
        )
    return {"doc_id": ex.doc.doc_id, "entities": ents}


def evaluate(model: ExtractionModel, corpus: Sequence[Document | Example]) -> Metrics:
    metrics = Metrics()
    for t in model.entity_types:
        metrics.counts.setdefault(t, [0, 0, 0])
    mode = model.config.tokenizer
    examples = [d if isinstance(d, Example) else model.prepare(d) for d in corpus]
    for ex in sorted(examples, key=lambda e: e.doc.doc_id):
        predicted = [(s.entity_type, normalize_value(s.value, mode)) for _, s in extract(model, ex)]
        score_document(metrics, predicted, gold_entities(ex.doc, mode))
    return metrics


def ambiguous_types(corpus: Iterable[Document]) -> list[str]:
    """Entity types that share an identical value with another type in some
    document; text alone cannot tell these apart."""
    found: set[str] = set()
    for doc in corpus:
        by_value: dict[str, set[str]] = {}
        for a in doc.annotations:
            by_value.setdefault(normalize_value(a.value), set()).add(a.entity_type)
        for types in by_value.values():
            if len(types) > 1:
                found |= types
    return sorted(found)


def segment_accuracy(model: ExtractionModel, corpus: Sequence[Document | Example]) -> float:
    correct = total = 0
    for d in corpus:
        ex = d if isinstance(d, Example) else model.prepare(d)
        probs = model.classify_segments(ex)
        correct += int((probs.argmax(axis=1) == ex.seg_labels).sum())
        total += len(ex.seg_labels)
    return correct / total if total else 0.0


# -------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_f1: float


@dataclass
class TrainResult:
    model: ExtractionModel
    history: list[EpochRecord]
    best_epoch: int
    seconds: float
    dropped_entities: int = 0


def entity_types_of(corpus: Iterable[Document]) -> list[str]:
    return sorted({a.entity_type for d in corpus for a in d.annotations})


def build_model(config: TrainConfig, train_docs: Sequence[Document]) -> ExtractionModel:
    config.validate()
    types = config.entity_types or entity_types_of(train_docs)
    vocab = Vocab.build((s.tokens for d in train_docs for s in d.segments), config.min_count)
    return ExtractionModel(config, vocab, types)


def train(
    train_docs: Sequence[Document],
    config: TrainConfig,
    val_docs: Sequence[Document] = (),
    model: ExtractionModel | None = None,
) -> TrainResult:
    """Train one document per step with Adam and global-norm clipping.

    Validation micro-F1 (when ``val_docs`` is given) drives early stopping and
    the returned model carries the best epoch's weights.
    """
    if not train_docs:
        raise ValueError("training corpus is empty")
    t0 = time.perf_counter()
    model = model or build_model(config, train_docs)
    examples = [model.prepare(d) for d in train_docs]
    matched = sum(ex.alignment.matched for ex in examples)
    dropped = sum(ex.alignment.dropped for ex in examples)
    if matched == 0:
        raise ValueError("no annotation aligned to any segment; nothing to supervise")
    val_examples = [model.prepare(d) for d in val_docs]
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps, config.clip)
    order_rng = np.random.default_rng(config.seed + 1)

    history: list[EpochRecord] = []
    best_f1, best_epoch, best_state = -1.0, 0, None
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for k in order_rng.permutation(len(examples)):
            ex = examples[k]
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss, _ = model.loss(ex)
            except NumericError as err:
                raise TrainingDiverged(f"epoch {epoch}, document {ex.doc.doc_id}: {err}") from err
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch}, document {ex.doc.doc_id}: loss is {value}")
            backward(tape, loss)
            opt.step()
            total += value
        mean_loss = total / len(examples)
        val_f1 = evaluate(model, val_examples).micro_f1 if val_examples else float("nan")
        history.append(EpochRecord(epoch, mean_loss, val_f1))
        log.info("epoch %d loss %.5f val_f1 %.4f", epoch, mean_loss, val_f1)
        if val_examples:
            if val_f1 > best_f1:
                best_f1, best_epoch = val_f1, epoch
                best_state = [p.data.copy() for p in params]
            elif epoch - best_epoch >= config.patience:
                break
    if best_state is not None:
        for p, v in zip(params, best_state):
            p.data[...] = v
    else:
        best_epoch = len(history)
    return TrainResult(model, history, best_epoch, time.perf_counter() - t0, dropped)


# ------------------------------------------------------------ checkpoints


def save_model(model: ExtractionModel, path) -> None:
    save_checkpoint(
        path,
        model.config.to_dict(),
        model.parameters(),
        vocab=model.vocab.itos,
        entity_types=model.entity_types,
    )


def load_model(path) -> ExtractionModel:
    payload = load_checkpoint(path)
    config = TrainConfig.from_dict(payload["config"])
    config.pretrained_vectors = ""  # the stored weights already hold them
    vocab = Vocab()
    for tok in payload.get("vocab", [])[3:]:
        vocab.add(tok)
    model = ExtractionModel(config, vocab, payload.get("entity_types", config.entity_types))
    assign_parameters(model.parameters(), payload["parameters"])
    return model


def history_csv(history: Sequence[EpochRecord]) -> str:
    lines = ["epoch,loss,val_f1"]
    lines += [f"{h.epoch},{h.loss!r},{h.val_f1!r}" for h in history]
    return "\n".join(lines) + "\n"
