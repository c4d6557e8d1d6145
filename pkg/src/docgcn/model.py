"""Model assembly for every experimental mode.

``baseline1``      BiLSTM-CRF over each segment in isolation.
``baseline2``      BiLSTM-CRF over the reading-order concatenation of all
                   segments, separated by ``[SEP]``.
``gcn``            graph embeddings appended to every token embedding.
``gcn_multitask``  ``gcn`` plus a sigmoid segment classifier, trained with
                   uncertainty-weighted task losses.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .document import OTHER, Alignment, Document, align_annotations, edge_feature_tensor, iob_tagset, reading_order
from .graph import GraphStack, LayerOutput, encoder_inputs
from .layers import SEP, Linear, Module, Vocab, pad_batch
from .numeric import Parameter, Tensor, ops
from .tagger import Tagger

MODES = ("baseline1", "baseline2", "gcn", "gcn_multitask")
GRAPH_MODES = ("gcn", "gcn_multitask")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "gcn"
    epochs: int = 40
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    clip: float = 5.0
    patience: int = 10
    n_layers: int = 2
    d_tok: int = 64
    d_node: int = 64
    d_hidden: int = 64
    d_edge_out: int = 16
    tagger_hidden: int = 64
    slope: float = 0.01
    dropout: float = 0.0
    threshold: float = 0.7
    min_count: int = 1
    tokenizer: str = "word"
    no_edge_features: bool = False
    no_text_features: bool = False
    no_attention: bool = False
    entity_types: list[str] = field(default_factory=list)
    pretrained_vectors: str = ""

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        ablations = self.no_edge_features or self.no_text_features or self.no_attention
        if ablations and self.mode not in GRAPH_MODES:
            raise ConfigError(f"ablation flags need a graph mode, got mode={self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_node % 2:
            raise ConfigError("d_node must be even")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("threshold must lie in (0, 1]")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError("slope must lie in (0, 1)")
        if self.tokenizer not in ("word", "char"):
            raise ConfigError("tokenizer must be 'word' or 'char'")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class Example:
    """A document with every array a forward pass needs, precomputed once."""

    doc: Document
    alignment: Alignment
    enc_ids: np.ndarray
    enc_mask: np.ndarray
    edges: np.ndarray
    tag_rows: np.ndarray  # indices of segments that have tokens
    tok_ids: np.ndarray
    tok_mask: np.ndarray
    gold: np.ndarray
    seg_labels: np.ndarray
    cat_ids: np.ndarray | None = None
    cat_mask: np.ndarray | None = None
    cat_gold: np.ndarray | None = None
    cat_map: list | None = None  # (segment row, token index) or None for [SEP]


def multitask_combine(losses: Sequence, log_vars) -> Tensor:
    """``sum_k exp(-s_k) * L_k + s_k`` with learnable log-variances ``s``."""
    total = None
    for k, loss in enumerate(losses):
        s = log_vars[k]
        term = ops.add(ops.mul(ops.exp(ops.neg(s)), loss), s)
        total = term if total is None else ops.add(total, term)
    return total


def binary_cross_entropy_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Mean of ``softplus(z) - y z`` over all entries."""
    z = ops.reshape(logits, logits.shape + (1,))
    softplus = ops.logsumexp(ops.concat([Tensor(np.zeros(z.shape)), z], axis=-1), axis=-1)
    return ops.mean(ops.add(softplus, ops.neg(ops.mul(logits, targets))))


class ExtractionModel(Module):
    def __init__(self, config: TrainConfig, vocab: Vocab, entity_types: Sequence[str]):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.entity_types = list(entity_types)
        self.tags = iob_tagset(self.entity_types)
        self.tag_index = {t: i for i, t in enumerate(self.tags)}
        self.segment_classes = self.entity_types + [OTHER]
        rng = np.random.default_rng(config.seed)
        c = config
        self.graph = None
        d_context = 0
        if c.mode in GRAPH_MODES:
            self.graph = GraphStack(
                len(vocab), rng, c.n_layers, c.d_tok, c.d_node, c.d_hidden, c.d_edge_out, c.slope
            )
            d_context = self.graph.d_out
        self.tagger = Tagger(len(vocab), len(self.tags), rng, c.d_tok, c.tagger_hidden, d_context)
        self.classifier = None
        self.log_vars = None
        if c.mode == "gcn_multitask":
            self.classifier = Linear(d_context, len(self.segment_classes), rng, "classifier")
            self.log_vars = Parameter(np.zeros(2), "multitask.log_vars")
        self._dropout_rng = np.random.default_rng(config.seed + 7919)
        if c.pretrained_vectors:
            self.tagger.embedding.load_vectors(c.pretrained_vectors, vocab)

    @property
    def mode(self) -> str:
        return self.config.mode

    # --------------------------------------------------------- data prep

    def prepare(self, doc: Document) -> Example:
        alignment = align_annotations(doc, doc.annotations, self.config.threshold)
        segs = doc.segments
        enc_ids, enc_mask = encoder_inputs(segs, self.vocab)
        rows = np.array([i for i, s in enumerate(segs) if s.tokens], dtype=np.intp)
        if rows.size:
            tok_ids, tok_mask = pad_batch([self.vocab.encode(segs[i].tokens) for i in rows])
            gold, _ = pad_batch([[self.tag_index.get(t, 0) for t in alignment.tags[i]] for i in rows])
        else:
            tok_ids = tok_mask = gold = np.zeros((0, 0), dtype=np.intp)
        seg_labels = np.array([self.segment_classes.index(t) for t in alignment.segment_types])
        ex = Example(
            doc, alignment, enc_ids, enc_mask, edge_feature_tensor(segs), rows,
            tok_ids, tok_mask, gold, seg_labels,
        )
        if self.mode == "baseline2":
            self._prepare_concatenated(ex)
        return ex

    def _prepare_concatenated(self, ex: Example) -> None:
        segs = ex.doc.segments
        index = {s.id: i for i, s in enumerate(segs)}
        ids, gold, cmap = [], [], []
        first = True
        for sid in reading_order(ex.doc):
            i = index[sid]
            if not segs[i].tokens:
                continue
            if not first:
                ids.append(self.vocab[SEP])
                gold.append(0)
                cmap.append(None)
            first = False
            for k, tok in enumerate(segs[i].tokens):
                ids.append(self.vocab[tok])
                gold.append(self.tag_index.get(ex.alignment.tags[i][k], 0))
                cmap.append((i, k))
        ex.cat_ids = np.array([ids or [0]], dtype=np.intp)
        ex.cat_mask = np.ones((1, max(len(ids), 1)))
        ex.cat_gold = np.array([gold or [0]], dtype=np.intp)
        ex.cat_map = cmap

    # ------------------------------------------------------------ forward

    def graph_embeddings(self, ex: Example) -> tuple[Tensor, list[LayerOutput]]:
        c = self.config
        return self.graph(
            ex.enc_ids, ex.enc_mask, ex.edges,
            no_text=c.no_text_features, no_edges=c.no_edge_features, no_attention=c.no_attention,
        )

    def _context(self, ex: Example, train: bool):
        if self.graph is None:
            return None, None
        nodes, _ = self.graph_embeddings(ex)
        ctx = nodes[ex.tag_rows]
        if train and self.config.dropout > 0:
            keep = 1.0 - self.config.dropout
            drop = (self._dropout_rng.random(ctx.shape) < keep) / keep
            ctx = ops.mul(ctx, drop)
        return nodes, ctx

    def loss(self, ex: Example, train: bool = True) -> tuple[Tensor, dict[str, float]]:
        """Negative log-likelihood summed over segments, combined with the
        segment classification loss in multitask mode."""
        if self.mode == "baseline2":
            ll = self.tagger.log_likelihood(ex.cat_ids, ex.cat_mask, ex.cat_gold)
            nll = ops.neg(ops.sum_(ll))
            return nll, {"extraction": nll.item()}
        nodes, ctx = self._context(ex, train)
        if ex.tag_rows.size:
            ll = self.tagger.log_likelihood(ex.tok_ids, ex.tok_mask, ex.gold, ctx)
            nll = ops.neg(ops.sum_(ll))
        else:
            nll = Tensor(0.0)
        if self.mode != "gcn_multitask":
            return nll, {"extraction": nll.item()}
        cls_loss = self.classification_loss(nodes, ex.seg_labels)
        total = multitask_combine([nll, cls_loss], self.log_vars)
        return total, {"extraction": nll.item(), "classification": cls_loss.item()}

    def classification_loss(self, nodes, labels: np.ndarray) -> Tensor:
        targets = np.eye(len(self.segment_classes))[labels]
        return binary_cross_entropy_with_logits(self.classifier(nodes), targets)

    # --------------------------------------------------------- inference

    def predict_tags(self, ex: Example) -> list[list[str]]:
        """Per-segment predicted tag strings (empty list for empty segments)."""
        out = [[] for _ in ex.doc.segments]
        if self.mode == "baseline2":
            if not ex.cat_map:
                return out
            for i in ex.tag_rows:
                out[i] = ["O"] * len(ex.doc.segments[i].tokens)
            path = self.tagger.decode(ex.cat_ids, ex.cat_mask)[0]
            for pos, where in enumerate(ex.cat_map):
                if where is not None:
                    i, k = where
                    out[i][k] = self.tags[path[pos]]
            return out
        if not ex.tag_rows.size:
            return out
        _, ctx = self._context(ex, train=False)
        paths = self.tagger.decode(ex.tok_ids, ex.tok_mask, ctx)
        for row, path in zip(ex.tag_rows, paths):
            out[row] = [self.tags[k] for k in path]
        return out

    def classify_segments(self, ex: Example) -> np.ndarray:
        """Sigmoid probabilities per segment and class, ``(n, C)``."""
        if self.classifier is None:
            raise ValueError("segment classifier exists only in gcn_multitask mode")
        nodes, _ = self.graph_embeddings(ex)
        return ops.sigmoid(self.classifier(nodes)).data

    def attention_matrices(self, ex: Example) -> list[np.ndarray]:
        if self.graph is None:
            return []
        _, outs = self.graph_embeddings(ex)
        return [o.attention.data for o in outs]
