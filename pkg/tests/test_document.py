import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docgcn.document import (
    BoundingBox,
    Document,
    DocumentParseError,
    EntityAnnotation,
    TextSegment,
    align_annotations,
    build_graph,
    document_to_record,
    edge_feature_tensor,
    edge_features,
    is_valid_iob,
    load_corpus,
    load_document,
    normalize_value,
    reading_order,
    save_corpus,
    tokenize,
)


def seg(i, x, y, w, h, text="a"):
    return TextSegment(i, text, BoundingBox(x, y, w, h))


def doc_of(*segments, annotations=()):
    return Document("d", tuple(segments), 1000.0, 1000.0, tuple(annotations))


# ------------------------------------------------------------- tokenizer


def test_tokenizer_splits_on_punctuation():
    assert tokenize("Total: $12.50") == ["Total", ":", "$", "12", ".", "50"]
    assert tokenize("") == []
    assert tokenize("增值 税", mode="char") == ["增", "值", "税"]
    assert normalize_value("  12.50 ") == "12 . 50"


# --------------------------------------------------------- edge features


def test_edge_features_examples():
    a = seg(0, 0, 0, 2, 1)
    np.testing.assert_array_equal(edge_features(a, a), [0, 0, 2, 1, 2])
    b = seg(1, 3, 0, 2, 1)
    np.testing.assert_array_equal(edge_features(a, b), [3, 0, 2, 1, 2])
    c = seg(2, 10, 20, 40, 10)
    d = seg(3, 10, 35, 80, 12)
    np.testing.assert_allclose(edge_features(c, d), [2, 1.6, 4, 1.2, 8], rtol=1e-15)


box_st = st.tuples(
    st.floats(-500, 500), st.floats(-500, 500), st.floats(1, 200), st.floats(1, 200)
)


@settings(max_examples=100, deadline=None)
@given(box_st, box_st, st.floats(-1000, 1000), st.floats(-1000, 1000), st.floats(0.1, 10))
def test_edge_features_translation_and_scale_invariant(b1, b2, dx, dy, s):
    a, b = seg(0, *b1), seg(1, *b2)
    ref = edge_features(a, b)
    moved = edge_features(
        TextSegment(0, "", a.bbox.shifted(dx, dy)), TextSegment(1, "", b.bbox.shifted(dx, dy))
    )
    scaled = edge_features(TextSegment(0, "", a.bbox.scaled(s)), TextSegment(1, "", b.bbox.scaled(s)))
    np.testing.assert_allclose(moved, ref, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(scaled, ref, rtol=1e-9, atol=1e-9)
    assert (ref[2:] > 0).all()


def test_edge_tensor_matches_pairwise():
    rng = np.random.default_rng(0)
    segs = [seg(i, *rng.uniform(0, 500, 2), *rng.uniform(5, 80, 2)) for i in range(5)]
    table = edge_feature_tensor(segs)
    for i, j in itertools.product(range(5), repeat=2):
        np.testing.assert_allclose(table[i, j], edge_features(segs[i], segs[j]), rtol=1e-14)


# ------------------------------------------------------------------ graph


def test_build_graph_counts():
    g1 = build_graph(doc_of(seg(0, 0, 0, 5, 5)))
    assert (g1.n_nodes, g1.n_edges) == (1, 1)
    g3 = build_graph(doc_of(seg(0, 0, 0, 5, 5), seg(1, 10, 0, 5, 5), seg(2, 0, 10, 5, 8)))
    assert g3.n_edges == 9 and g3.edges.shape == (3, 3, 5)


def test_build_graph_both_directions_recomputed():
    a, b = seg(0, 10, 20, 40, 10), seg(1, 100, 70, 30, 25)
    g = build_graph(doc_of(a, b))
    # independent recomputation from the raw boxes
    cxa, cya, cxb, cyb = 30.0, 25.0, 115.0, 82.5
    np.testing.assert_allclose(g.edges[0, 1], [(cxb - cxa) / 10, (cyb - cya) / 10, 4, 2.5, 3])
    np.testing.assert_allclose(g.edges[1, 0], [(cxa - cxb) / 25, (cya - cyb) / 25, 30 / 25, 10 / 25, 40 / 25])
    # x_ij * h_i == -x_ji * h_j
    assert g.edges[0, 1, 0] * 10 == pytest.approx(-g.edges[1, 0, 0] * 25)


def test_empty_document_rejected():
    with pytest.raises(DocumentParseError):
        Document("d", (), 10, 10)


# -------------------------------------------------------------- alignment


def test_alignment_identical_box_contained():
    s = seg(0, 0, 0, 100, 20, "Total 12.50")
    ann = EntityAnnotation("total", "12.50", BoundingBox(0, 0, 100, 20))
    al = align_annotations(doc_of(s), [ann], threshold=1.0)
    assert al.tags == [["O", "B-total", "I-total", "I-total"]]
    assert al.segment_types == ["total"]


def test_alignment_disjoint_and_partial_overlap():
    s = seg(0, 5, 0, 10, 10, "x")
    far = EntityAnnotation("t", "x", BoundingBox(500, 500, 10, 10))
    half = EntityAnnotation("t", "x", BoundingBox(0, 0, 10, 10))
    assert align_annotations(doc_of(s), [far]).tags == [["O"]]
    assert align_annotations(doc_of(s), [half], threshold=0.6).tags == [["O"]]
    assert align_annotations(doc_of(s), [half], threshold=0.4).tags == [["B-t"]]


def test_alignment_empty_segment_and_missing_value():
    empty = seg(0, 0, 0, 10, 10, "")
    other = seg(1, 0, 50, 10, 10, "abc")
    ann = EntityAnnotation("t", "zzz", BoundingBox(0, 50, 10, 10))
    al = align_annotations(doc_of(empty, other), [ann])
    assert al.tags == [[], ["O"]]
    assert al.dropped == 1 and al.matched == 0 and al.warnings


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0, 80), st.floats(0, 80), st.floats(5, 40), st.floats(5, 40)), min_size=1, max_size=5),
    st.floats(0.05, 1.0),
    st.floats(0.05, 1.0),
)
def test_alignment_monotone_in_threshold(boxes, t1, t2):
    lo, hi = sorted((t1, t2))
    segs = [seg(i, *b, text=f"v{i}") for i, b in enumerate(boxes)]
    anns = [EntityAnnotation("t", f"v{i}", BoundingBox(*b)) for i, b in enumerate(boxes[::-1])]
    d = doc_of(*segs)
    assert align_annotations(d, anns, hi).matched <= align_annotations(d, anns, lo).matched
    for row in align_annotations(d, anns, lo).tags:
        assert is_valid_iob(row)


def test_iob_validity():
    assert is_valid_iob(["B-a", "I-a", "O", "B-b"])
    assert not is_valid_iob(["O", "I-a"])
    assert not is_valid_iob(["B-a", "I-b"])


# ---------------------------------------------------------- reading order


def test_reading_order_simple():
    assert reading_order(doc_of(seg(7, 100, 0, 10, 10), seg(3, 0, 0, 10, 10))) == [3, 7]
    assert reading_order(doc_of(seg(1, 0, 50, 10, 10), seg(2, 0, 0, 10, 10))) == [2, 1]


def test_reading_order_jittered_grid():
    rng = np.random.default_rng(4)
    cells = [(r, c) for r in range(3) for c in range(3)]
    ids = rng.permutation(9)
    segs = [
        seg(int(ids[k]), 100 * c + rng.uniform(-1, 1), 40 * r + rng.uniform(-1, 1), 50, 10)
        for k, (r, c) in enumerate(cells)
    ]
    expected = [int(ids[k]) for k in range(9)]  # row-major by construction
    order = reading_order(doc_of(*rng.permutation(segs)))
    assert order == expected


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 900), st.floats(0, 900), st.floats(1, 90), st.floats(1, 90)), min_size=1, max_size=20))
def test_reading_order_is_permutation(boxes):
    d = doc_of(*(seg(i, *b) for i, b in enumerate(boxes)))
    assert sorted(reading_order(d)) == list(range(len(boxes)))


# ---------------------------------------------------------- serialization

RECORD = {
    "doc_id": "r1",
    "page": {"w": 100, "h": 200},
    "segments": [{"id": 4, "text": "Tax 3.10", "bbox": [1, 2, 30, 10]}],
    "annotations": [{"type": "tax", "value": "3.10", "bbox": [1, 2, 30, 10]}],
}


def test_load_minimal_record():
    d = load_document(RECORD)
    assert len(d) == 1 and d.segments[0].tokens == ("Tax", "3", ".", "10")
    assert build_graph(d).n_nodes == 1


def test_load_errors_name_the_locus():
    bad = {**RECORD, "segments": [{"id": 9, "text": "x", "bbox": [0, 0, 0, 5]}]}
    with pytest.raises(DocumentParseError, match="segment id 9"):
        load_document(bad)
    dup = {**RECORD, "segments": RECORD["segments"] * 2}
    with pytest.raises(DocumentParseError, match="duplicate"):
        load_document(dup)
    missing = {**RECORD, "segments": [{"id": 1, "bbox": [0, 0, 1, 1]}]}
    with pytest.raises(DocumentParseError, match="'text'"):
        load_document(missing)
    with pytest.raises(DocumentParseError, match="page"):
        load_document({k: v for k, v in RECORD.items() if k != "page"})


def test_round_trip_identity(tmp_path):
    d = load_document(RECORD)
    assert load_document(document_to_record(d)) == d
    path = tmp_path / "c.ndjson"
    save_corpus([d, d], path)
    assert load_corpus(path) == [d, d]


def test_boxes_are_clamped_to_page():
    rec = {**RECORD, "segments": [{"id": 1, "text": "x", "bbox": [95, -4, 30, 10]}]}
    b = load_document(rec).segments[0].bbox
    assert (b.x, b.y, b.w, b.h) == (70, 0, 30, 10)
