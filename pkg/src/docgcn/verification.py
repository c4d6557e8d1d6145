"""Finite-difference verification of every gradient path on a micro model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .document import BoundingBox, Document, EntityAnnotation, TextSegment
from .layers import Vocab
from .model import ExtractionModel, TrainConfig
from .numeric import gradient_pairs, relative_error

MICRO_TYPES = ["amount", "name"]  # 5 IOB tags
MICRO_DIMS = dict(d_tok=3, d_node=4, d_hidden=3, d_edge_out=2, tagger_hidden=2)
TOLERANCE = 1e-4

# (cell name, mode, ablation flags)
CELLS = [
    ("baseline1", "baseline1", {}),
    ("baseline2", "baseline2", {}),
    ("gcn", "gcn", {}),
    ("gcn_multitask", "gcn_multitask", {}),
    ("gcn-edge", "gcn", {"no_edge_features": True}),
    ("gcn-text", "gcn", {"no_text_features": True}),
    ("gcn-attention", "gcn", {"no_attention": True}),
    ("gcn_multitask-edge", "gcn_multitask", {"no_edge_features": True}),
    ("gcn_multitask-text", "gcn_multitask", {"no_text_features": True}),
    ("gcn_multitask-attention", "gcn_multitask", {"no_attention": True}),
]


def micro_document() -> Document:
    """Two segments of three tokens each, with one entity of each type."""
    a = BoundingBox(40.0, 50.0, 120.0, 20.0)
    b = BoundingBox(300.0, 90.0, 90.0, 24.0)
    segs = (TextSegment(0, "Amount due 42", a), TextSegment(1, "Acme Foods Ltd", b))
    ann = (EntityAnnotation("amount", "42", a), EntityAnnotation("name", "Acme Foods Ltd", b))
    return Document("micro", segs, 500.0, 200.0, ann)


def micro_model(mode: str, seed: int = 0, scale: float = 0.5, **flags) -> tuple[ExtractionModel, object]:
    doc = micro_document()
    vocab = Vocab(t for s in doc.segments for t in s.tokens)
    config = TrainConfig(mode=mode, seed=seed, **MICRO_DIMS, **flags)
    model = ExtractionModel(config, vocab, MICRO_TYPES)
    # O(1) weights keep every gradient well above finite-difference roundoff
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)
    return model, model.prepare(doc)


def component_of(name: str) -> str:
    """Map a parameter name to its module, e.g. ``graph.1.attention`` -> ``graph.1``."""
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] in ("graph", "encoder", "tagger") else parts[0]


def resolution_floor(loss: float, eps: float, tolerance: float = TOLERANCE) -> float:
    """Smallest ``|analytic| + |numeric|`` a central difference can resolve to
    ``tolerance``: one ulp of the loss in each evaluation, over ``2 eps``."""
    return np.spacing(abs(loss)) / eps / tolerance


@dataclass
class GradcheckReport:
    """Per-cell, per-component maximum relative errors.

    ``cells`` holds the plain maximum over every coordinate. ``resolved`` holds
    the maximum over coordinates whose gradient lies above the roundoff floor
    of the finite difference (see ``resolution_floor``); ``unresolved`` counts
    the coordinates below it.
    """

    cells: dict[str, dict[str, float]] = field(default_factory=dict)  # cell -> component -> max error
    resolved: dict[str, dict[str, float]] = field(default_factory=dict)
    unresolved: dict[str, int] = field(default_factory=dict)
    coordinates: int = 0
    seconds: float = 0.0
    tolerance: float = TOLERANCE
    eps: float = 1e-5

    @property
    def max_error(self) -> float:
        return max((e for c in self.cells.values() for e in c.values()), default=0.0)

    @property
    def max_resolved_error(self) -> float:
        return max((e for c in self.resolved.values() for e in c.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    @property
    def resolved_passed(self) -> bool:
        return self.max_resolved_error < self.tolerance

    def to_json(self) -> dict:
        return {
            "cells": self.cells,
            "resolved": self.resolved,
            "unresolved_coordinates": self.unresolved,
            "coordinates": self.coordinates,
            "max_error": self.max_error,
            "max_resolved_error": self.max_resolved_error,
            "passed": self.passed,
            "resolved_passed": self.resolved_passed,
            "tolerance": self.tolerance,
            "eps": self.eps,
        }

    def table(self) -> str:
        lines = [f"{'cell':<26}{'component':<20}{'max rel err':>12}{'resolved':>12}"]
        for cell, comps in self.cells.items():
            for comp, err in comps.items():
                lines.append(f"{cell:<26}{comp:<20}{err:>12.3e}{self.resolved[cell][comp]:>12.3e}")
        n_un = sum(self.unresolved.values())
        lines.append(
            f"max {self.max_error:.3e} ({'PASS' if self.passed else 'FAIL'} at {self.tolerance:g}); "
            f"resolved max {self.max_resolved_error:.3e} ({'PASS' if self.resolved_passed else 'FAIL'}); "
            f"{n_un}/{self.coordinates} coordinates below the roundoff floor"
        )
        return "\n".join(lines)


def run_gradcheck(inject_sign_flip: bool = False, cells=CELLS, seed: int = 0, eps: float = 1e-5) -> GradcheckReport:
    """Check every cell's full loss against central differences.

    ``inject_sign_flip`` negates the analytic gradient of the first parameter
    of each cell, which must make the check fail.
    """
    t0 = time.perf_counter()
    report = GradcheckReport(eps=eps)
    for name, mode, flags in cells:
        model, ex = micro_model(mode, seed, **flags)
        params = model.parameters()
        flip = params[0].name if inject_sign_flip else None

        def tamper(pname, g, flip=flip):
            return -g if pname == flip else g

        def closure(model=model, ex=ex):
            return model.loss(ex, train=False)[0]

        loss, pairs = gradient_pairs(closure, params, eps=eps, grad_transform=tamper)
        floor = resolution_floor(loss, eps, report.tolerance)
        comps = {component_of(p.name): 0.0 for p in params}
        resolved = dict(comps)
        unresolved = 0
        for pname, _, a, n in pairs:
            c = component_of(pname)
            err = relative_error(a, n)
            comps[c] = max(comps[c], err)
            if abs(a) + abs(n) >= floor:
                resolved[c] = max(resolved[c], err)
            elif a != 0.0 or n != 0.0:
                unresolved += 1
        report.cells[name] = comps
        report.resolved[name] = resolved
        report.unresolved[name] = unresolved
        report.coordinates += len(pairs)
    report.seconds = time.perf_counter() - t0
    return report
