"""Synthetic visually rich documents with layout-only disambiguation.

Two corpus shapes are supported. With one template ("fixed" layout) the hard
entities are keyless or share identical key texts, so only their position on
the page tells them apart; with several templates every template places its
key/value pairs differently and values sit next to their keys. In both,
several entity types draw from the same value generator and every document
carries at least one pair of entities with identical text but different types.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .document import BoundingBox, Document, EntityAnnotation, TextSegment

PAGE_W, PAGE_H = 1000.0, 1400.0
LINE_H = 20.0
CHAR_W = 10.0

FIRST = [
    "Acme", "Northwind", "Globex", "Initech", "Umbrella", "Stark", "Wayne", "Wonka",
    "Tyrell", "Cyberdyne", "Hooli", "Vandelay", "Soylent", "Gringotts", "Oceanic", "Aperture",
    "Monarch", "Pied", "Sterling", "Dunder", "Bluth", "Prestige", "Nakatomi", "Zenith",
]
SECOND = [
    "Trading", "Foods", "Logistics", "Textiles", "Electric", "Partners", "Supply", "Holdings",
    "Imports", "Systems", "Metals", "Paper", "Labs", "Retail", "Motors", "Optics",
]
SUFFIX = ["Ltd", "Inc", "Co", "LLC", "Group", "GmbH"]
STREETS = ["Harbor Road", "Main Street", "Elm Avenue", "Station Lane", "Park Row", "Mill Way", "Bay Street"]
FILLER = [
    "Remarks", "Thank you", "Page 1 of 1", "Notes", "Signature", "Stamp", "Checked by",
    "Original copy", "Reference", "Payment terms net 30", "Please retain", "Qty",
]
ITEMS = ["Office chairs", "Printer paper", "Steel bolts", "Cotton fabric", "Desk lamps", "Cables", "Toner"]


# -------------------------------------------------------------- values


def gen_amount(rng) -> str:
    return f"{int(rng.integers(1, 1000))}.{int(rng.integers(0, 100)):02d}"


def gen_company(rng) -> str:
    return f"{rng.choice(FIRST)} {rng.choice(SECOND)} {rng.choice(SUFFIX)}"


def gen_invoice_no(rng) -> str:
    return f"INV-{int(rng.integers(10000, 100000))}"


def gen_date(rng) -> str:
    return f"{int(rng.integers(2015, 2025))}-{int(rng.integers(1, 13)):02d}-{int(rng.integers(1, 29)):02d}"


def gen_address(rng) -> str:
    return f"{int(rng.integers(1, 300))} {rng.choice(STREETS)}"


def gen_filler(rng) -> str:
    return str(rng.choice(FILLER))


def gen_quantity(rng) -> str:
    return str(int(rng.integers(1, 50)))


def gen_item(rng) -> str:
    return str(rng.choice(ITEMS))


GENERATORS = {
    "amount": (gen_amount, 9),
    "company": (gen_company, 26),
    "invoice_no": (gen_invoice_no, 10),
    "date": (gen_date, 10),
    "address": (gen_address, 18),
    "filler": (gen_filler, 20),
    "quantity": (gen_quantity, 3),
    "item": (gen_item, 14),
}


# ----------------------------------------------------------- templates


@dataclass(frozen=True)
class Slot:
    """One segment position. ``text`` is fixed key text; otherwise
    ``generator`` fills the value and ``entity_type`` labels it (None = O)."""

    x: float
    y: float
    w: float
    text: str | None = None
    generator: str | None = None
    entity_type: str | None = None
    prefix: str = ""  # key text sharing the value's segment, e.g. "Invoice No:"

    def box(self) -> BoundingBox:
        return BoundingBox(self.x, self.y, self.w, LINE_H)


@dataclass
class TemplateSpec:
    name: str
    slots: list[Slot]
    ambiguous_groups: list[list[str]]  # entity types sharing a value generator

    def entity_types(self) -> list[str]:
        return sorted({s.entity_type for s in self.slots if s.entity_type})

    def check(self) -> None:
        boxes = [s.box() for s in self.slots]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if boxes[i].overlap_area(boxes[j]) > 0:
                    raise AssertionError(f"template {self.name}: slots {i} and {j} overlap")
        if not any(len(g) >= 2 for g in self.ambiguous_groups):
            raise AssertionError(f"template {self.name}: no shared value generator")


def _key(x, y, text) -> Slot:
    return Slot(x, y, CHAR_W * len(text), text=text)


def _value(x, y, gen, etype=None, prefix="") -> Slot:
    width = CHAR_W * (GENERATORS[gen][1] + len(prefix) + (1 if prefix else 0))
    return Slot(x, y, width, generator=gen, entity_type=etype, prefix=prefix)


FIXED_TYPES = ["buyer", "date", "invoice_no", "price", "seller", "tax"]
MULTI_TYPES = ["date", "invoice_no", "payer", "subtotal", "tax", "total", "vendor"]


def fixed_template(rng: np.random.Generator, n_distractors: int) -> TemplateSpec:
    """National-standard invoice layout: identical "Name"/"Address" blocks for
    buyer and seller, an item table whose price and tax cells carry no key of
    their own, and a keyless total row amount."""
    slots = [
        _key(330, 60, "VALUE ADDED TAX INVOICE"),
        _key(620, 130, "Invoice No."),
        _value(760, 130, "invoice_no", "invoice_no"),
        _key(620, 165, "Date"),
        _value(760, 165, "date", "date"),
        _key(60, 240, "Name"),
        _value(160, 240, "company", "buyer"),
        _key(60, 275, "Address"),
        _value(160, 275, "address"),
        _key(60, 480, "Item"),
        _key(330, 480, "Qty"),
        _key(540, 480, "Amount"),
        _key(680, 480, "Rate"),
        _key(800, 480, "Tax"),
        _value(60, 525, "item"),
        _value(330, 525, "quantity"),
        _value(540, 525, "amount", "price"),
        _key(680, 525, "13 %"),
        _value(800, 515, "amount", "tax"),
        _key(60, 640, "Total"),
        _value(540, 640, "amount"),
        _key(60, 1100, "Name"),
        _value(160, 1100, "company", "seller"),
        _key(60, 1135, "Address"),
        _value(160, 1135, "address"),
    ]
    free_rows = [740, 790, 840, 890, 940, 990]
    picks = rng.choice(len(free_rows) * 2, size=min(n_distractors, len(free_rows) * 2), replace=False)
    for p in sorted(int(v) for v in picks):
        y = free_rows[p // 2]
        x = 60 if p % 2 == 0 else 540
        slots.append(_value(x, y, "amount" if rng.random() < 0.4 else "filler"))
    spec = TemplateSpec("fixed-0", slots, [["price", "tax"], ["buyer", "seller"]])
    spec.check()
    return spec


KEY_VARIANTS = {
    "invoice_no": ["Invoice No:", "Invoice #", "Receipt No.", "Bill Number"],
    "date": ["Date:", "Issued", "Invoice Date", "Dated"],
    "payer": ["Bill To", "Customer", "Sold To", "Payer"],
    "subtotal": ["Subtotal", "Net Amount", "Sub Total", "Goods Value"],
    "tax": ["Tax", "VAT", "Sales Tax", "GST"],
    "total": ["Total", "Amount Due", "Grand Total", "Balance Due"],
}
DISTRACTOR_KEYS = ["Phone", "Discount", "Shipping", "Deposit", "Account", "Qty", "Paid"]


def multi_template(rng: np.random.Generator, index: int, n_distractors: int) -> TemplateSpec:
    """Random receipt layout: every key/value pair takes a free grid cell, with
    the value right of or below its key."""
    rows = list(np.arange(100, 1300, 45.0))
    cols = [60.0, 540.0]
    cells = [(c, r) for r in range(len(rows)) for c in range(2)]
    taken: set[tuple[int, int]] = set()

    def take(span: int) -> tuple[float, float]:
        while True:
            col, row = cells[int(rng.integers(len(cells)))]
            need = {(col, row + k) for k in range(span)}
            if row + span <= len(rows) and not need & taken:
                taken.update(need)
                return cols[col], float(rows[row])

    slots = [_key(330, 40, str(rng.choice(["RECEIPT", "INVOICE", "SALES RECEIPT", "TAX INVOICE"])))]
    # vendor: keyless name near the top
    slots.append(_value(float(rng.choice([60.0, 540.0])), 70.0, "company", "vendor"))
    for etype in ["invoice_no", "date"]:
        key = str(rng.choice(KEY_VARIANTS[etype]))
        x, y = take(1)
        if rng.random() < 0.5:
            slots.append(_value(x, y, etype, etype, prefix=key))
        else:
            slots.append(_key(x, y, key))
            slots.append(_value(x + 170, y, etype, etype))
    pairs = [("payer", "company"), ("subtotal", "amount"), ("tax", "amount"), ("total", "amount")]
    pairs += [(None, "amount")] * n_distractors
    for etype, gen in pairs:
        key = str(rng.choice(KEY_VARIANTS[etype] if etype else DISTRACTOR_KEYS))
        below = rng.random() < 0.4
        x, y = take(2 if below else 1)
        slots.append(_key(x, y, key))
        if below:
            slots.append(_value(x, y + 25, gen, etype))
        else:
            slots.append(_value(x + 170, y, gen, etype))
    spec = TemplateSpec(f"multi-{index}", slots, [["subtotal", "tax", "total"], ["payer", "vendor"]])
    spec.check()
    return spec


# ---------------------------------------------------------- generation


@dataclass
class GeneratorConfig:
    n_documents: int = 300
    n_templates: int = 1
    jitter: float = 0.01
    distractors: tuple[int, int] = (2, 6)
    seed: int = 0
    splits: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def validate(self) -> "GeneratorConfig":
        if self.n_documents < 1:
            raise ValueError("n_documents must be >= 1")
        if self.n_templates < 1:
            raise ValueError("n_templates must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        lo, hi = self.distractors
        if not 0 <= lo <= hi:
            raise ValueError("distractors must be a range lo <= hi with lo >= 0")
        if len(self.splits) != 3 or any(s < 0 for s in self.splits) or abs(sum(self.splits) - 1) > 1e-9:
            raise ValueError("splits must be three non-negative fractions summing to 1")
        return self

    @property
    def entity_types(self) -> list[str]:
        return FIXED_TYPES if self.n_templates == 1 else MULTI_TYPES

    @property
    def ambiguous_types(self) -> list[str]:
        if self.n_templates == 1:
            return ["buyer", "price", "seller", "tax"]
        return ["payer", "subtotal", "tax", "total", "vendor"]


def make_templates(config: GeneratorConfig) -> list[TemplateSpec]:
    rng = np.random.default_rng([config.seed, 0x7E4D])
    lo, hi = config.distractors
    if config.n_templates == 1:
        return [fixed_template(rng, int(rng.integers(lo, hi + 1)))]
    return [multi_template(rng, k, int(rng.integers(lo, hi + 1))) for k in range(config.n_templates)]


def render(template: TemplateSpec, doc_id: str, rng: np.random.Generator) -> Document:
    """Fill a template with values; at least one ambiguous group gets two
    identical values."""
    group = template.ambiguous_groups[int(rng.integers(len(template.ambiguous_groups)))]
    twins = [str(t) for t in rng.choice(group, size=2, replace=False)]
    shared: dict[str, str] = {}
    segments, annotations = [], []
    for k, slot in enumerate(template.slots):
        if slot.text is not None:
            text = value = slot.text
        else:
            gen = GENERATORS[slot.generator][0]
            if slot.entity_type in twins:
                value = shared.setdefault("twin", gen(rng))
            else:
                value = gen(rng)
            text = f"{slot.prefix} {value}" if slot.prefix else value
        box = slot.box()
        segments.append(TextSegment(k, text, box))
        if slot.entity_type:
            annotations.append(EntityAnnotation(slot.entity_type, value, box))
    return Document(doc_id, tuple(segments), PAGE_W, PAGE_H, tuple(annotations))


def perturb(doc: Document, sigma: float, rng: np.random.Generator) -> Document:
    """Shift every box by Gaussian noise with std ``sigma`` times the page size,
    clamped to the page. Annotations move with the segment they overlap most."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return doc
    new_segments, deltas = [], []
    for s in doc.segments:
        dx = rng.normal(0.0, sigma * doc.page_w)
        dy = rng.normal(0.0, sigma * doc.page_h)
        moved = s.bbox.shifted(dx, dy).clamped(doc.page_w, doc.page_h)
        deltas.append((moved.x - s.bbox.x, moved.y - s.bbox.y))
        new_segments.append(TextSegment(s.id, s.text, moved, s.mode))
    new_annotations = []
    for a in doc.annotations:
        overlaps = [s.bbox.overlap_area(a.bbox) for s in doc.segments]
        k = int(np.argmax(overlaps))
        if overlaps[k] > 0:
            dx, dy = deltas[k]
            box = a.bbox.shifted(dx, dy)
        else:
            box = a.bbox.shifted(rng.normal(0.0, sigma * doc.page_w), rng.normal(0.0, sigma * doc.page_h))
        new_annotations.append(EntityAnnotation(a.entity_type, a.value, box.clamped(doc.page_w, doc.page_h)))
    return Document(doc.doc_id, tuple(new_segments), doc.page_w, doc.page_h, tuple(new_annotations))


@dataclass
class Corpus:
    train: list[Document]
    val: list[Document]
    test: list[Document]
    config: GeneratorConfig
    templates: list[TemplateSpec] = field(repr=False, default_factory=list)

    @property
    def all(self) -> list[Document]:
        return self.train + self.val + self.test

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": self.config.seed,
            "entity_types": self.config.entity_types,
            "ambiguous_types": self.config.ambiguous_types,
            "templates": [t.name for t in self.templates],
            "counts": {"train": len(self.train), "val": len(self.val), "test": len(self.test)},
        }


def split_sizes(n: int, splits: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(n * splits[0]))
    n_val = int(round(n * splits[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate_document(config: GeneratorConfig, templates: Sequence[TemplateSpec], index: int) -> Document:
    rng = np.random.default_rng([config.seed, index])
    template = templates[int(rng.integers(len(templates)))]
    doc = render(template, f"doc-{config.seed}-{index:05d}", rng)
    return perturb(doc, config.jitter, rng)


def generate_corpus(config: GeneratorConfig) -> Corpus:
    config.validate()
    templates = make_templates(config)
    docs = [generate_document(config, templates, i) for i in range(config.n_documents)]
    a, b, _ = split_sizes(len(docs), config.splits)
    return Corpus(docs[:a], docs[a : a + b], docs[a + b :], config, templates)


def write_corpus(corpus: Corpus, out_dir, manifest: bool = True) -> dict[str, str]:
    """Write ``train/val/test.ndjson`` and, unless disabled, ``corpus.json``."""
    from pathlib import Path

    from .document import save_corpus

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in ("train", "val", "test"):
        path = out / f"{name}.ndjson"
        save_corpus(getattr(corpus, name), path)
        paths[name] = str(path)
    if manifest:
        (out / "corpus.json").write_text(json.dumps(corpus.manifest(), indent=2, sort_keys=True) + "\n")
    return paths


def has_ambiguous_pair(doc: Document) -> bool:
    """True when two annotations share a value but differ in type."""
    seen: dict[str, set[str]] = {}
    for a in doc.annotations:
        seen.setdefault(a.value, set()).add(a.entity_type)
    return any(len(types) > 1 for types in seen.values())
