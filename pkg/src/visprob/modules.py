"""Pluggable perception modules and the deterministic CROP/COUNT primitives.

The toy LOC and VQA implementations are the smallest differentiable models
that can learn the synthetic tasks:

* LOC scores each cell of its region with a per-object linear probe over the
  cell features. The top ``pool_size`` cells (ties broken row-major) form a
  candidate pool; the outcome space is every subset of the pool under
  independent per-cell Bernoullis, so the empty detection is a first-class
  outcome and COUNT pushforwards are exact.
* VQA mean-pools region features, appends the object-slot one-hot, and maps
  through a per-(template, answer) linear layer with a softmax.

Both run in two modes: a plain-float path for argmax execution, and a tape
path whose probabilities are differentiable in the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .autodiff import ParamStore, Tape
from .errors import OutOfVocabularyError
from .scene import Scene
from .values import Categorical, Cell, Detection, Region
from .vocab import TemplateRegistry, Vocabularies, build_template_registry

# --- deterministic primitives ---------------------------------------------------


def crop(region: Region, detection: Detection, kind: str = "CROP") -> Region:
    """Sub-region selected by a detection inside ``region``.

    An empty detection keeps the whole input region. Multi-cell detections
    are anchored on their highest-ranked cell. Directional variants take the
    half-plane of the input region strictly beyond the anchor (clamped to at
    least one row/column at the region edge); INFRONTOF and BEHIND map to
    BELOW and ABOVE in the grid world.
    """
    if not detection.cells:
        return region
    r, c = detection.cells[0]
    if kind == "CROP":
        return Region(region.image, r, c, r, c)
    if kind == "CROP_INFRONTOF":
        kind = "CROP_BELOW"
    elif kind == "CROP_BEHIND":
        kind = "CROP_ABOVE"
    if kind == "CROP_RIGHTOF":
        c0 = min(c + 1, region.c1)
        return Region(region.image, region.r0, c0, region.r1, region.c1)
    if kind == "CROP_LEFTOF":
        c1 = max(c - 1, region.c0)
        return Region(region.image, region.r0, region.c0, region.r1, c1)
    if kind == "CROP_BELOW":
        r0 = min(r + 1, region.r1)
        return Region(region.image, r0, region.c0, region.r1, region.c1)
    if kind == "CROP_ABOVE":
        r1 = max(r - 1, region.r0)
        return Region(region.image, region.r0, region.c0, r1, region.c1)
    raise ValueError(f"unknown crop kind {kind!r}")


def count(detection: Detection) -> int:
    return len(detection.cells)


# --- module interface -------------------------------------------------------------


class LocModule(Protocol):
    def outcome_distribution(self, scene: Scene, region: Region, object_name: str,
                             params: ParamStore, tape: Tape | None = None
                             ) -> Categorical: ...


class VqaModule(Protocol):
    def answer_distribution(self, scene: Scene, region: Region, question: str,
                            params: ParamStore, tape: Tape | None = None
                            ) -> Categorical: ...


@dataclass
class ModuleSet:
    loc: LocModule
    vqa: VqaModule


# --- toy implementations -----------------------------------------------------------


def _nonzero_terms(x: np.ndarray) -> list[tuple[int, float]]:
    return [(int(j), float(x[j])) for j in np.flatnonzero(x)]


class ToyLocModule:
    """Per-object linear cell scoring with a product-Bernoulli outcome space."""

    def __init__(self, vocab: Vocabularies, pool_size: int = 3,
                 score_threshold: float | None = None):
        if pool_size < 1 or pool_size > 4:
            raise ValueError("pool_size must be in 1..4")
        self.vocab = vocab
        self.pool_size = pool_size
        self.score_threshold = score_threshold

    def candidate_pool(self, scene: Scene, region: Region, object_name: str,
                       params: ParamStore) -> list[tuple[Cell, float]]:
        """Top-scoring cells of the region, with their pre-sigmoid scores."""
        if object_name not in self.vocab.categories:
            raise OutOfVocabularyError(f"unknown object name {object_name!r}")
        cat = self.vocab.categories.index(object_name)
        w = params["loc/w"][cat]
        b = float(params["loc/b"][cat])
        mat = scene.features(self.vocab)
        cells = region.cells()
        scored = [(cell, float(mat[scene.cell_index(cell)] @ w) + b)
                  for cell in cells]
        scored.sort(key=lambda cs: (-cs[1], cs[0]))
        pool = scored[:self.pool_size]
        if self.score_threshold is not None:
            pool = [cs for cs in pool if cs[1] > self.score_threshold]
        return pool

    def outcome_distribution(self, scene: Scene, region: Region, object_name: str,
                             params: ParamStore, tape: Tape | None = None
                             ) -> Categorical:
        pool = self.candidate_pool(scene, region, object_name, params)
        image = region.image
        if not pool:
            return Categorical([Detection(image, ())], [1.0])
        if tape is None:
            ps = [1.0 / (1.0 + np.exp(-s)) for _, s in pool]
        else:
            cat = self.vocab.categories.index(object_name)
            mat = scene.features(self.vocab)
            dim = mat.shape[1]
            ps = []
            for cell, _ in pool:
                x = mat[scene.cell_index(cell)]
                terms = [(tape.leaf("loc/w", cat * dim + j, params["loc/w"][cat, j]), v)
                         for j, v in _nonzero_terms(x)]
                terms.append((tape.leaf("loc/b", cat, params["loc/b"][cat]), 1.0))
                ps.append(tape.weighted_sum(terms).sigmoid())
        # subsets in binary-counting order; bit k toggles pool cell k
        probs = [1.0 - ps[0], ps[0]]
        for k in range(1, len(pool)):
            off = [pr * (1.0 - ps[k]) for pr in probs]
            on = [pr * ps[k] for pr in probs]
            probs = off + on
        support = []
        for mask in range(1 << len(pool)):
            cells = tuple(pool[k][0] for k in range(len(pool)) if mask >> k & 1)
            support.append(Detection(image, cells))
        return Categorical(support, probs)


class ToyVqaModule:
    """Per-(template, answer) linear readout over pooled region features."""

    def __init__(self, vocab: Vocabularies,
                 registry: TemplateRegistry | None = None):
        self.vocab = vocab
        self.registry = registry or build_template_registry(vocab)

    def feature_vector(self, scene: Scene, region: Region,
                       slot_object: str | None) -> np.ndarray:
        pooled = scene.region_features(self.vocab, region)
        slot = np.zeros(len(self.vocab.categories))
        if slot_object is not None:
            slot[self.vocab.categories.index(slot_object)] = 1.0
        return np.concatenate([pooled, slot])

    def answer_distribution(self, scene: Scene, region: Region, question: str,
                            params: ParamStore, tape: Tape | None = None
                            ) -> Categorical:
        tmpl, slot_object = self.registry.match(question)
        x = self.feature_vector(scene, region, slot_object)
        answers = tmpl.answer_list()
        wname = f"vqa/{tmpl.template_id}/w"
        bname = f"vqa/{tmpl.template_id}/b"
        if tape is None:
            logits = params[wname] @ x + params[bname]
            shifted = np.exp(logits - logits.max())
            probs = list(shifted / shifted.sum())
            return Categorical(answers, [float(p) for p in probs])
        dim = x.shape[0]
        nz = _nonzero_terms(x)
        logit_nodes = []
        for a in range(len(answers)):
            terms = [(tape.leaf(wname, a * dim + j, params[wname][a, j]), v)
                     for j, v in nz]
            terms.append((tape.leaf(bname, a, params[bname][a]), 1.0))
            logit_nodes.append(tape.weighted_sum(terms))
        return Categorical(answers, tape.softmax(logit_nodes))


# --- parameter construction ---------------------------------------------------------


def init_params(vocab: Vocabularies, seed: int | None = None,
                scale: float = 0.05, objectness_init: float = 1.0,
                registry: TemplateRegistry | None = None) -> ParamStore:
    """Fresh parameter store covering LOC and every question template.

    ``seed=None`` gives all-zero parameters (uniform module distributions);
    a seed gives small random values, which training needs to break softmax
    and pooling ties. ``objectness_init`` biases the LOC presence-feature
    weight so occupied cells outrank empty ones in the candidate pool from
    the start; cells outside the pool receive no gradient, so a pool of
    interchangeable empty cells is a dead end the optimizer cannot leave.
    """
    registry = registry or build_template_registry(vocab)
    params = ParamStore()
    rng = np.random.default_rng(seed) if seed is not None else None

    def init(shape):
        if rng is None:
            return np.zeros(shape)
        return rng.normal(0.0, scale, size=shape)

    feat = vocab.feature_dim()
    loc_w = init((len(vocab.categories), feat))
    if seed is not None:
        loc_w[:, feat - 1] += objectness_init  # presence bit is the last column
    params.register("loc/w", (len(vocab.categories), feat), loc_w)
    params.register("loc/b", (len(vocab.categories),),
                    init((len(vocab.categories),)))
    vqa_dim = feat + len(vocab.categories)
    for tmpl in registry.templates:
        n = len(tmpl.answers)
        params.register(f"vqa/{tmpl.template_id}/w", (n, vqa_dim),
                        init((n, vqa_dim)))
        params.register(f"vqa/{tmpl.template_id}/b", (n,), init((n,)))
    return params


# --- registry of module implementations ---------------------------------------------


def build_toy_modules(vocab: Vocabularies, pool_size: int = 3,
                      score_threshold: float | None = None) -> ModuleSet:
    registry = build_template_registry(vocab)
    return ModuleSet(loc=ToyLocModule(vocab, pool_size, score_threshold),
                     vqa=ToyVqaModule(vocab, registry))


MODULE_FACTORIES = {"toy": build_toy_modules}


def register_module_factory(name: str, factory) -> None:
    """Expose an alternative (loc, vqa) implementation behind the same contract."""
    MODULE_FACTORIES[name] = factory


def build_modules(name: str, vocab: Vocabularies, **kwargs) -> ModuleSet:
    if name not in MODULE_FACTORIES:
        raise KeyError(f"no module implementation named {name!r}")
    return MODULE_FACTORIES[name](vocab, **kwargs)
