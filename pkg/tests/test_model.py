import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docgcn.document import BoundingBox, Document, EntityAnnotation, TextSegment
from docgcn.layers import SEP, Vocab
from docgcn.model import (
    ConfigError,
    ExtractionModel,
    TrainConfig,
    binary_cross_entropy_with_logits,
    multitask_combine,
)
from docgcn.numeric import Parameter, Tape, Tensor, backward, gradient_check, ops
from docgcn.verification import CELLS, micro_model, resolution_floor, run_gradcheck

SMALL = dict(d_tok=4, d_node=4, d_hidden=3, d_edge_out=2, tagger_hidden=3)


def invoice_doc():
    segs = (
        TextSegment(0, "Invoice No. INV-20417", BoundingBox(600, 100, 250, 20)),
        TextSegment(1, "12.50", BoundingBox(540, 525, 90, 20)),
        TextSegment(2, "", BoundingBox(60, 300, 10, 20)),
        TextSegment(3, "12.50", BoundingBox(800, 515, 90, 20)),
    )
    ann = (
        EntityAnnotation("invoice_no", "INV-20417", segs[0].bbox),
        EntityAnnotation("price", "12.50", segs[1].bbox),
        EntityAnnotation("tax", "12.50", segs[3].bbox),
    )
    return Document("inv", segs, 1000, 1400, ann)


def build(mode, doc=None, **kw):
    doc = doc or invoice_doc()
    vocab = Vocab(t for s in doc.segments for t in s.tokens)
    config = TrainConfig(mode=mode, **SMALL, **kw)
    return ExtractionModel(config, vocab, ["invoice_no", "price", "tax"]), doc


# ------------------------------------------------------------ multitask


def test_multitask_zero_log_vars_is_plain_sum():
    s = Parameter(np.zeros(2), "s")
    total = multitask_combine([Tensor(1.25), Tensor(3.5)], s)
    assert total.item() == 1.25 + 3.5


@given(st.floats(0.0, 50.0), st.floats(0.0, 50.0))
def test_multitask_zero_log_vars_property(a, b):
    s = Parameter(np.zeros(2), "s")
    assert multitask_combine([Tensor(a), Tensor(b)], s).item() == a + b


def test_multitask_log_var_gradient_closed_form():
    losses = [2.0, 0.3]
    s = Parameter(np.array([0.4, -1.1]), "s")
    with Tape() as tape:
        total = multitask_combine([Tensor(v) for v in losses], s)
    backward(tape, total)
    expected = [-math.exp(-sk) * lk + 1 for sk, lk in zip(s.data, losses)]
    np.testing.assert_allclose(s.grad, expected, rtol=1e-14)
    s.data[...] = np.log(losses)
    s.zero_grad()
    with Tape() as tape:
        total = multitask_combine([Tensor(v) for v in losses], s)
    backward(tape, total)
    np.testing.assert_allclose(s.grad, 0.0, atol=1e-15)


def test_multitask_descent_reaches_closed_form_optimum():
    # gradient descent on s alone, independent of the optimizer module
    s = Parameter(np.zeros(2), "s")
    for _ in range(2000):
        s.zero_grad()
        with Tape() as tape:
            total = multitask_combine([Tensor(1.0), Tensor(4.0)], s)
        backward(tape, total)
        s.data -= 0.1 * s.grad
    np.testing.assert_allclose(s.data, [0.0, math.log(4.0)], atol=1e-8)


# --------------------------------------------------------- classifier


@pytest.mark.parametrize("n_classes", [2, 4, 7])
def test_bce_at_half_probability_is_ln2(n_classes):
    targets = np.eye(n_classes)[[0, n_classes - 1, 1]]
    loss = binary_cross_entropy_with_logits(Tensor(np.zeros((3, n_classes))), targets)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_gradient():
    rng = np.random.default_rng(0)
    z = Parameter(rng.normal(size=(4, 3)) * 3, "z")
    y = np.eye(3)[[0, 2, 1, 1]]
    assert gradient_check(lambda: binary_cross_entropy_with_logits(z, y), [z]) < 1e-4


def test_zero_classifier_gives_half_probabilities():
    model, doc = build("gcn_multitask")
    for p in model.classifier.parameters():
        p.data[...] = 0.0
    probs = model.classify_segments(model.prepare(doc))
    assert probs.shape == (4, 4)
    assert (probs == 0.5).all()


def test_classifier_only_in_multitask_mode():
    model, doc = build("gcn")
    with pytest.raises(ValueError):
        model.classify_segments(model.prepare(doc))


# --------------------------------------------------------------- config


@pytest.mark.parametrize("mode", ["baseline1", "baseline2"])
@pytest.mark.parametrize("flag", ["no_edge_features", "no_text_features", "no_attention"])
def test_ablation_flags_need_graph_mode(mode, flag):
    with pytest.raises(ConfigError):
        TrainConfig(mode=mode, **{flag: True}).validate()


@pytest.mark.parametrize(
    "bad", [{"mode": "crf"}, {"epochs": 0}, {"lr": 0.0}, {"n_layers": 0}, {"d_node": 5}, {"threshold": 0.0}]
)
def test_invalid_config_values(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_config_round_trip_and_unknown_keys():
    c = TrainConfig(mode="gcn_multitask", no_attention=True, entity_types=["a"])
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"mode": "gcn", "learning_rate": 1.0})


# ----------------------------------------------------------- assembly


def test_baseline2_token_count_and_mapping():
    model, doc = build("baseline2")
    ex = model.prepare(doc)
    n_tok = sum(len(s.tokens) for s in doc.segments)
    n_nonempty = sum(1 for s in doc.segments if s.tokens)
    assert ex.cat_ids.shape[1] == n_tok + n_nonempty - 1
    assert (ex.cat_ids[0] == model.vocab[SEP]).sum() == n_nonempty - 1
    seps = [k for k, w in enumerate(ex.cat_map) if w is None]
    assert all(ex.cat_gold[0, k] == 0 for k in seps)
    # every (segment, token) appears exactly once
    assert sorted(w for w in ex.cat_map if w is not None) == sorted(
        (i, k) for i, s in enumerate(doc.segments) for k in range(len(s.tokens))
    )


def test_baseline2_predictions_map_back_to_segments():
    model, doc = build("baseline2")
    tags = model.predict_tags(model.prepare(doc))
    assert [len(t) for t in tags] == [len(s.tokens) for s in doc.segments]


def test_baseline1_equals_gcn_with_zero_context():
    seg = TextSegment(0, "Total 12.50", BoundingBox(10, 10, 100, 20))
    doc = Document("one", (seg,), 200, 200, (EntityAnnotation("price", "12.50", seg.bbox),))
    gcn, _ = build("gcn", doc, seed=3)
    b1, _ = build("baseline1", doc, seed=3)
    # share the tagger weights; zero the context block of the input projection
    for p_b1, p_gcn in zip(b1.tagger.parameters(), gcn.tagger.parameters()):
        if p_b1.shape == p_gcn.shape:
            p_gcn.data[...] = p_b1.data
    ex_g, ex_b = gcn.prepare(doc), b1.prepare(doc)
    emb = gcn.tagger.embedding(ex_g.tok_ids)
    zero_ctx = Tensor(np.zeros((1, gcn.graph.d_out)))
    for direction in ("fwd", "bwd"):
        w_g = getattr(gcn.tagger.lstm, f"w_ih_{direction}").data
        w_b = getattr(b1.tagger.lstm, f"w_ih_{direction}").data
        w_g[: w_b.shape[0]] = w_b
    em_gcn = gcn.tagger.emissions(ex_g.tok_ids, ex_g.tok_mask, zero_ctx).data
    em_b1 = b1.tagger.emissions(ex_b.tok_ids, ex_b.tok_mask).data
    np.testing.assert_allclose(em_gcn, em_b1, atol=1e-15)
    assert emb.shape[-1] == SMALL["d_tok"]


def test_no_attention_rows_are_uniform():
    model, doc = build("gcn", no_attention=True)
    for alpha in model.attention_matrices(model.prepare(doc)):
        assert (alpha == 1 / 4).all()
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-15)


def test_no_text_zeroes_graph_stage_only():
    model, doc = build("gcn", no_text_features=True)
    ex = model.prepare(doc)
    state = model.graph.initial_state(ex.enc_ids, ex.enc_mask, ex.edges, no_text=True)
    assert (state.nodes.data == 0).all()
    # the tagger still sees the tokens; the graph encoder is cut off
    with Tape() as tape:
        loss, _ = model.loss(ex)
    backward(tape, loss)
    assert np.abs(model.tagger.embedding.table.grad).sum() > 0
    assert (model.graph.encoder.embedding.table.grad == 0).all()


def test_model_is_deterministic_given_seed():
    a, doc = build("gcn_multitask", seed=11)
    b, _ = build("gcn_multitask", seed=11)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.name == q.name
        np.testing.assert_array_equal(p.data, q.data)
    assert a.loss(a.prepare(doc))[0].item() == b.loss(b.prepare(doc))[0].item()


def test_loss_parts_in_multitask_mode():
    model, doc = build("gcn_multitask")
    total, parts = model.loss(model.prepare(doc))
    assert set(parts) == {"extraction", "classification"}
    # s starts at zero so the total is the plain sum
    assert total.item() == pytest.approx(parts["extraction"] + parts["classification"], rel=1e-14)


# ------------------------------------------------------ gradient paths


@pytest.mark.parametrize("cell", CELLS, ids=[c[0] for c in CELLS])
def test_micro_model_gradients(cell):
    model, ex = micro_model(cell[1], **cell[2])
    assert len(model.tags) == 5
    assert [len(s.tokens) for s in ex.doc.segments] == [3, 3]
    report = run_gradcheck(cells=[cell])
    # every coordinate the finite difference can resolve agrees
    assert report.max_resolved_error < 1e-4
    assert report.unresolved[cell[0]] < 0.05 * report.coordinates


def test_sign_flip_is_detected():
    report = run_gradcheck(inject_sign_flip=True, cells=CELLS[:1])
    assert not report.passed and not report.resolved_passed


def test_resolution_floor_matches_roundoff():
    # one ulp of a loss near 16 over 2 eps, relative to the tolerance
    assert resolution_floor(16.0, 1e-5, 1e-4) == pytest.approx(np.spacing(16.0) / 1e-9)
