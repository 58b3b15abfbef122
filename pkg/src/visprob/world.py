"""Synthetic scenes, question/program templates, labels, and dataset files.

Every case is produced by instantiating a program template against a freshly
sampled scene; the label comes from running the program symbolically with
oracle modules that read the scene's ground truth. Intermediate values from
that oracle run are available through :func:`intermediate_truth` for
evaluation only; a guard makes any access from inside a training step an
error, because final labels are the only supervision the trainer may see.

Template shapes mirror the single-image question-answering and two-image
statement-verification program idioms (attribute compare, existence-or,
spatial query, count threshold, count sum, conjunction, xor across images,
conditional selection), at one to six visual steps.
"""

from __future__ import annotations

import json
import random
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from . import dsl
from .engine import run_symbolic, execute_argmax
from .errors import ExhaustedResamplingError, TruthAccessError, VisprobError
from .modules import build_toy_modules, init_params
from .scene import Scene, SceneObject
from .seeding import derive_seed
from .values import Detection, Region, Value, token_of
from .vocab import (
    Vocabularies,
    build_template_registry,
    plural,
    q_count,
    q_exists,
    q_has_color,
    q_is_activity,
    q_made_of,
    q_what_activity,
    q_what_color,
    q_what_material,
)

DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    rows: int = 3
    cols: int = 3
    pool_size: int = 3
    max_per_category: int = 2
    vocab: Vocabularies = field(default_factory=Vocabularies)

    def cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "pool_size": self.pool_size,
            "max_per_category": self.max_per_category,
            "categories": list(self.vocab.categories),
            "colors": list(self.vocab.colors),
            "materials": list(self.vocab.materials),
            "activities": list(self.vocab.activities),
            "max_count": self.vocab.max_count,
        }

    @classmethod
    def from_json(cls, data: dict) -> "WorldConfig":
        vocab = Vocabularies(
            categories=tuple(data["categories"]),
            colors=tuple(data["colors"]),
            materials=tuple(data["materials"]),
            activities=tuple(data["activities"]),
            max_count=data["max_count"],
        )
        return cls(rows=data["rows"], cols=data["cols"],
                   pool_size=data["pool_size"],
                   max_per_category=data["max_per_category"], vocab=vocab)


@dataclass
class CaseMeta:
    num_visual_steps: int
    stage: int
    template_id: str
    seed: int
    disrupted: str | None = None


@dataclass
class CaseRecord:
    id: str
    scenes: dict[str, Scene]
    program_text: str
    question_text: str
    label: str
    meta: CaseMeta

    def to_json(self) -> dict:
        data = {
            "id": self.id,
            "scenes": {k: s.to_json() for k, s in self.scenes.items()},
            "program": self.program_text,
            "question": self.question_text,
            "label": self.label,
            "meta": {
                "num_visual_steps": self.meta.num_visual_steps,
                "stage": self.meta.stage,
                "template_id": self.meta.template_id,
                "seed": self.meta.seed,
            },
        }
        if self.meta.disrupted is not None:
            data["meta"]["disrupted"] = self.meta.disrupted
        return data

    @classmethod
    def from_json(cls, data: dict) -> "CaseRecord":
        meta = CaseMeta(
            num_visual_steps=data["meta"]["num_visual_steps"],
            stage=data["meta"]["stage"],
            template_id=data["meta"]["template_id"],
            seed=data["meta"]["seed"],
            disrupted=data["meta"].get("disrupted"),
        )
        return cls(
            id=data["id"],
            scenes={k: Scene.from_json(s) for k, s in data["scenes"].items()},
            program_text=data["program"],
            question_text=data["question"],
            label=data["label"],
            meta=meta,
        )


# --- oracle modules (ground truth) -------------------------------------------------


def oracle_loc_fn(config: WorldConfig):
    def loc(scene: Scene, region: Region, object_name: str) -> Detection:
        cells = tuple(o.cell for o in scene.objects_in(region, object_name))
        return Detection(region.image, cells)
    return loc


def oracle_vqa_fn(config: WorldConfig):
    registry = build_template_registry(config.vocab)

    def unique_target(scene, region, category):
        objs = scene.objects_in(region, category)
        if len(objs) != 1:
            raise VisprobError(
                f"ground truth ambiguous: {len(objs)} {category!r} in region")
        return objs[0]

    def vqa(scene: Scene, region: Region, question: str) -> Value:
        tmpl, slot = registry.match(question)
        family = tmpl.family
        param = tmpl.template_id.split(":", 1)[1] if ":" in tmpl.template_id else None
        if family == "what-color":
            return unique_target(scene, region, slot).color
        if family == "what-material":
            return unique_target(scene, region, slot).material
        if family == "what-activity":
            return unique_target(scene, region, slot).activity
        if family == "is-activity":
            return "yes" if unique_target(scene, region, slot).activity == param else "no"
        if family == "made-of":
            return "yes" if unique_target(scene, region, slot).material == param else "no"
        if family == "has-color":
            return "yes" if unique_target(scene, region, slot).color == param else "no"
        if family == "exists":
            return "yes" if scene.objects_in(region, param) else "no"
        if family == "count":
            return min(len(scene.objects_in(region, param)), config.vocab.max_count)
        raise VisprobError(f"oracle has no semantics for family {family!r}")

    return vqa


def oracle_run(config: WorldConfig, scenes: dict[str, Scene],
               ast: dsl.ProgramAst) -> dict[str, Value]:
    return run_symbolic(ast, scenes, oracle_loc_fn(config), oracle_vqa_fn(config))


# --- outcome-only supervision guard --------------------------------------------------

_GUARD_DEPTH = 0


@contextmanager
def training_guard():
    """Marks a training step; intermediate_truth refuses to run inside it."""
    global _GUARD_DEPTH
    _GUARD_DEPTH += 1
    try:
        yield
    finally:
        _GUARD_DEPTH -= 1


def truth_guard_active() -> bool:
    return _GUARD_DEPTH > 0


def intermediate_truth(case: CaseRecord, config: WorldConfig) -> dict[str, Value]:
    """Ground-truth value of every program variable, for evaluation only.

    Recomputed from the scene on demand; nothing in the case record stores
    these, so the only road to sub-task labels runs through this function,
    and it is barred during training steps.
    """
    if truth_guard_active():
        raise TruthAccessError(
            "intermediate_truth called during a training step; "
            "training may only see final labels")
    ast = dsl.parse_program(case.program_text)
    return oracle_run(config, case.scenes, ast)


# --- scene sampling -------------------------------------------------------------------


def _rand_attrs(rng: random.Random, vocab: Vocabularies) -> dict:
    return {
        "color": rng.choice(vocab.colors),
        "material": rng.choice(vocab.materials),
        "activity": rng.choice(vocab.activities),
    }


def _fill_scene(rng: random.Random, config: WorldConfig,
                placed: list[SceneObject], n_extras: int,
                extra_cats: Iterable[str], free_cells: list) -> Scene:
    objects = list(placed)
    per_cat: dict[str, int] = {}
    for o in objects:
        per_cat[o.category] = per_cat.get(o.category, 0) + 1
    cells = [c for c in free_cells if all(o.cell != c for o in objects)]
    rng.shuffle(cells)
    for _ in range(n_extras):
        if not cells:
            break
        pool = [c for c in extra_cats
                if per_cat.get(c, 0) < config.max_per_category]
        if not pool:
            break
        cat = rng.choice(pool)
        cell = cells.pop()
        objects.append(SceneObject(cell, cat, **_rand_attrs(rng, config.vocab)))
        per_cat[cat] = per_cat.get(cat, 0) + 1
    objects.sort(key=lambda o: o.cell)
    return Scene(config.rows, config.cols, tuple(objects))


def gen_scene(rng_seed: int, config: WorldConfig | None = None) -> Scene:
    """Unconstrained scene: object count uniform in [1, cells/2]."""
    config = config or WorldConfig()
    rng = random.Random(rng_seed)
    return _rand_scene(rng, config)


def _rand_scene(rng: random.Random, config: WorldConfig) -> Scene:
    n = rng.randint(1, len(config.cells()) // 2)
    return _fill_scene(rng, config, [], n, config.vocab.categories, config.cells())


def _scene_with_unique(rng: random.Random, config: WorldConfig,
                       categories: list[str], n_extras: int | None = None,
                       attrs: dict[str, dict] | None = None) -> Scene:
    """Scene holding exactly one object per listed category, plus extras."""
    cells = config.cells()
    chosen = rng.sample(cells, len(categories))
    placed = []
    for cat, cell in zip(categories, chosen):
        a = (attrs or {}).get(cat) or _rand_attrs(rng, config.vocab)
        placed.append(SceneObject(cell, cat, **a))
    if n_extras is None:
        n_extras = rng.randint(0, 2)
    extra_cats = [c for c in config.vocab.categories if c not in categories]
    return _fill_scene(rng, config, placed, n_extras, extra_cats, cells)


def _scene_with_counts(rng: random.Random, config: WorldConfig,
                       want: dict[str, int], n_extras: int | None = None) -> Scene:
    """Scene with exact object counts per listed category, plus other-category extras."""
    cells = config.cells()
    rng.shuffle(cells)
    placed = []
    for cat, cnt in want.items():
        for _ in range(cnt):
            placed.append(SceneObject(cells.pop(), cat,
                                      **_rand_attrs(rng, config.vocab)))
    if n_extras is None:
        n_extras = rng.randint(0, 2)
    extra_cats = [c for c in config.vocab.categories if c not in want]
    return _fill_scene(rng, config, placed, n_extras, extra_cats, cells)


def _coin_count(rng: random.Random, config: WorldConfig, target: int) -> int:
    """A count hitting ``target`` about half the time, else a different one."""
    cap = config.max_per_category
    if rng.random() < 0.5:
        return target
    return rng.choice([c for c in range(cap + 1) if c != target])


# --- case templates --------------------------------------------------------------------


@dataclass(frozen=True)
class CaseTemplate:
    id: str
    task: str  # gqa | nlvr
    steps: int
    balance: Callable[[Vocabularies], list[str] | None]
    instantiate: Callable[[random.Random, WorldConfig], tuple[dict, str, str]]


def _yes_no(vocab):
    return ["yes", "no"]


def _true_false(vocab):
    return ["True", "False"]


def _gqa(scene: Scene) -> dict[str, Scene]:
    return {"IMAGE": scene}


def _nlvr(rng: random.Random, config: WorldConfig) -> dict[str, Scene]:
    return {"LEFT": _rand_scene(rng, config), "RIGHT": _rand_scene(rng, config)}


def _t_exist_direct(rng, config):
    obj = rng.choice(config.vocab.categories)
    scene = _scene_with_counts(rng, config, {obj: rng.choice((0, 1, 1, 2))})
    program = (
        f"ANSWER0=VQA(image=IMAGE,question='{q_exists(obj)}')\n"
        f"FINAL_RESULT=RESULT(var=ANSWER0)"
    )
    return _gqa(scene), program, f"Is there a {obj} in the image?"


def _t_count_threshold(rng, config):
    obj = rng.choice(config.vocab.categories)
    k = rng.randint(1, 2)
    hit = rng.random() < 0.5
    n = rng.randint(k, config.max_per_category) if hit else rng.randint(0, k - 1)
    scenes = {"LEFT": _scene_with_counts(rng, config, {obj: n}),
              "RIGHT": _rand_scene(rng, config)}
    program = (
        f"ANSWER0=VQA(image=LEFT,question='{q_count(obj)}')\n"
        f"ANSWER1=EVAL(expr='{{ANSWER0}} >= {k}')\n"
        f"FINAL_ANSWER=RESULT(var=ANSWER1)"
    )
    question = f"there are at least {k} {plural(obj)} in the image on the left"
    return scenes, program, question


def _t_color_single(rng, config):
    obj = rng.choice(config.vocab.categories)
    scene = _scene_with_unique(rng, config, [obj], n_extras=0)
    program = (
        f"ANSWER0=VQA(image=IMAGE,question='{q_what_color(obj)}')\n"
        f"FINAL_RESULT=RESULT(var=ANSWER0)"
    )
    return _gqa(scene), program, f"What color is the {obj}?"


def _t_exist_or_loc(rng, config):
    o1, o2 = rng.sample(config.vocab.categories, 2)
    scene = _scene_with_counts(rng, config, {o1: rng.choice((0, 0, 1)),
                                             o2: rng.choice((0, 0, 1))})
    program = (
        f"BOX0=LOC(image=IMAGE,object='{o1}')\n"
        f"ANSWER0=COUNT(box=BOX0)\n"
        f"BOX1=LOC(image=IMAGE,object='{o2}')\n"
        f"ANSWER1=COUNT(box=BOX1)\n"
        f"ANSWER2=EVAL(expr=\"'yes' if {{ANSWER0}} > 0 or {{ANSWER1}} > 0 else 'no'\")\n"
        f"FINAL_RESULT=RESULT(var=ANSWER2)"
    )
    return _gqa(scene), program, f"Are there any {plural(o1)} or {plural(o2)}?"


def _t_attr_compare(rng, config):
    o1, o2 = rng.sample(config.vocab.categories, 2)
    scene = _scene_with_unique(rng, config, [o1, o2])
    program = (
        f"BOX0=LOC(image=IMAGE,object='{o1}')\n"
        f"IMAGE0=CROP(image=IMAGE,box=BOX0)\n"
        f"BOX1=LOC(image=IMAGE,object='{o2}')\n"
        f"IMAGE1=CROP(image=IMAGE,box=BOX1)\n"
        f"ANSWER0=VQA(image=IMAGE0,question='{q_what_color(o1)}')\n"
        f"ANSWER1=VQA(image=IMAGE1,question='{q_what_color(o2)}')\n"
        f"ANSWER2=EVAL(expr=\"'yes' if {{ANSWER0}} != {{ANSWER1}} else 'no'\")\n"
        f"FINAL_RESULT=RESULT(var=ANSWER2)"
    )
    question = f"Do the {o1} and the {o2} have different colors?"
    return _gqa(scene), program, question


_DIRECTIONS = (
    ("CROP_RIGHTOF", "right of"),
    ("CROP_LEFTOF", "left of"),
    ("CROP_ABOVE", "above"),
    ("CROP_BELOW", "below"),
)


def _half_plane(config: WorldConfig, cell, kind: str) -> Region:
    from .modules import crop as _crop
    whole = Region("IMAGE", 0, 0, config.rows - 1, config.cols - 1)
    return _crop(whole, Detection("IMAGE", (cell,)), kind)


def _t_spatial_color(rng, config):
    kind, words = rng.choice(_DIRECTIONS)
    o1, o2 = rng.sample(config.vocab.categories, 2)
    cells = config.cells()
    for _ in range(40):
        anchor = rng.choice(cells)
        region = _half_plane(config, anchor, kind)
        inside = [c for c in region.cells() if c != anchor]
        if inside:
            break
    else:
        raise ExhaustedResamplingError("no room for a spatial layout")
    target_cell = rng.choice(inside)
    placed = [
        SceneObject(anchor, o1, **_rand_attrs(rng, config.vocab)),
        SceneObject(target_cell, o2, **_rand_attrs(rng, config.vocab)),
    ]
    outside = [c for c in cells
               if not region.contains(c) and c != anchor]
    extra_cats = [c for c in config.vocab.categories if c not in (o1, o2)]
    scene = _fill_scene(rng, config, placed, rng.randint(0, 2), extra_cats, outside)
    program = (
        f"BOX0=LOC(image=IMAGE,object='{o1}')\n"
        f"IMAGE0={kind}(image=IMAGE,box=BOX0)\n"
        f"ANSWER0=VQA(image=IMAGE0,question='{q_what_color(o2)}')\n"
        f"FINAL_RESULT=RESULT(var=ANSWER0)"
    )
    question = f"What color is the {o2} that is {words} the {o1}?"
    return _gqa(scene), program, question


def _t_count_sum(rng, config):
    obj = rng.choice(config.vocab.categories)
    k = rng.randint(1, 3)
    cap = config.max_per_category
    left = rng.randint(max(0, k - cap), min(cap, k)) if rng.random() < 0.5 \
        else rng.randint(0, cap)
    right = (k - left if rng.random() < 0.5 and 0 <= k - left <= cap
             else rng.randint(0, cap))
    scenes = {"LEFT": _scene_with_counts(rng, config, {obj: left}),
              "RIGHT": _scene_with_counts(rng, config, {obj: right})}
    program = (
        f"ANSWER0=VQA(image=LEFT,question='{q_count(obj)}')\n"
        f"ANSWER1=VQA(image=RIGHT,question='{q_count(obj)}')\n"
        f"ANSWER2=EVAL(expr='{{ANSWER0}} + {{ANSWER1}} == {k}')\n"
        f"FINAL_ANSWER=RESULT(var=ANSWER2)"
    )
    question = f"exactly {k} {plural(obj)} appear across the two images"
    return scenes, program, question


def _t_xor_exist(rng, config):
    obj = rng.choice(config.vocab.categories)
    scenes = {"LEFT": _scene_with_counts(rng, config, {obj: rng.choice((0, 1))}),
              "RIGHT": _scene_with_counts(rng, config, {obj: rng.choice((0, 1))})}
    program = (
        f"ANSWER0=VQA(image=LEFT,question='{q_exists(obj)}')\n"
        f"ANSWER1=VQA(image=RIGHT,question='{q_exists(obj)}')\n"
        f"ANSWER2=EVAL(expr='{{ANSWER0}} xor {{ANSWER1}}')\n"
        f"FINAL_ANSWER=RESULT(var=ANSWER2)"
    )
    question = f"exactly one image contains a {obj}"
    return scenes, program, question


def _t_conj_count_exist(rng, config):
    o1, o2 = rng.sample(config.vocab.categories, 2)
    k = rng.randint(1, 2)
    scenes = {"LEFT": _scene_with_counts(rng, config, {o1: _coin_count(rng, config, k)}),
              "RIGHT": _scene_with_counts(rng, config, {o2: rng.choice((0, 1))})}
    program = (
        f"ANSWER0=VQA(image=LEFT,question='{q_count(o1)}')\n"
        f"ANSWER1=VQA(image=RIGHT,question='{q_exists(o2)}')\n"
        f"ANSWER2=EVAL(expr='{{ANSWER0}} == {k} and {{ANSWER1}}')\n"
        f"FINAL_ANSWER=RESULT(var=ANSWER2)"
    )
    question = (f"the left image has exactly {k} {plural(o1)} "
                f"and the right image has a {o2}")
    return scenes, program, question


def _t_conditional_shared(rng, config):
    obj = rng.choice(config.vocab.categories)
    act = rng.choice(config.vocab.activities)
    attrs = None
    if rng.random() < 0.5:
        attrs = {obj: {**_rand_attrs(rng, config.vocab), "activity": act}}
    scene = _scene_with_unique(rng, config, [obj], attrs=attrs)
    program = (
        f"BOX0=LOC(image=IMAGE,object='{obj}')\n"
        f"IMAGE0=CROP(image=IMAGE,box=BOX0)\n"
        f"ANSWER0=VQA(image=IMAGE0,question='{q_is_activity(obj, act)}')\n"
        f"ANSWER1=VQA(image=IMAGE0,question='{q_what_color(obj)}')\n"
        f"ANSWER2=VQA(image=IMAGE0,question='{q_what_material(obj)}')\n"
        f"ANSWER3=EVAL(expr=\"{{ANSWER1}} if {{ANSWER0}} == 'yes' else {{ANSWER2}}\")\n"
        f"FINAL_RESULT=RESULT(var=ANSWER3)"
    )
    question = (f"What color is the {obj} if it is {act}, "
                f"and otherwise what is it made of?")
    return _gqa(scene), program, question


def _t_material_check(rng, config):
    obj = rng.choice(config.vocab.categories)
    mat = rng.choice(config.vocab.materials)
    attrs = None
    if rng.random() < 0.5:
        attrs = {obj: {**_rand_attrs(rng, config.vocab), "material": mat}}
    scene = _scene_with_unique(rng, config, [obj], attrs=attrs)
    program = (
        f"BOX0=LOC(image=IMAGE,object='{obj}')\n"
        f"IMAGE0=CROP(image=IMAGE,box=BOX0)\n"
        f"ANSWER0=VQA(image=IMAGE0,question='{q_made_of(obj, mat)}')\n"
        f"FINAL_RESULT=RESULT(var=ANSWER0)"
    )
    return _gqa(scene), program, f"Is the {obj} made of {mat}?"


def _t_activity_query(rng, config):
    obj = rng.choice(config.vocab.categories)
    scene = _scene_with_unique(rng, config, [obj])
    program = (
        f"BOX0=LOC(image=IMAGE,object='{obj}')\n"
        f"IMAGE0=CROP(image=IMAGE,box=BOX0)\n"
        f"ANSWER0=VQA(image=IMAGE0,question='{q_what_activity(obj)}')\n"
        f"FINAL_RESULT=RESULT(var=ANSWER0)"
    )
    return _gqa(scene), program, f"What is the {obj} doing?"


def _recolor_category(rng, scene: Scene, category: str, color: str) -> Scene:
    objects = tuple(replace(o, color=color) if o.category == category else o
                    for o in scene.objects)
    return Scene(scene.rows, scene.cols, objects)


def _t_exist_and_color(rng, config):
    o1, o2 = rng.sample(config.vocab.categories, 2)
    col = rng.choice(config.vocab.colors)
    scene = _scene_with_counts(rng, config, {o1: 1, o2: rng.choice((0, 1))})
    if rng.random() < 0.5:
        scene = _recolor_category(rng, scene, o1, col)
    program = (
        f"BOX0=LOC(image=IMAGE,object='{o1}')\n"
        f"IMAGE0=CROP(image=IMAGE,box=BOX0)\n"
        f"ANSWER0=VQA(image=IMAGE0,question='{q_what_color(o1)}')\n"
        f"ANSWER1=VQA(image=IMAGE,question='{q_exists(o2)}')\n"
        f"ANSWER2=EVAL(expr=\"'yes' if {{ANSWER0}} == '{col}' and {{ANSWER1}} else 'no'\")\n"
        f"FINAL_RESULT=RESULT(var=ANSWER2)"
    )
    question = f"Is there a {col} {o1} together with a {o2}?"
    return _gqa(scene), program, question


def _t_count_compare_loc(rng, config):
    o1, o2 = rng.sample(config.vocab.categories, 2)
    cap = config.max_per_category
    scene = _scene_with_counts(rng, config, {o1: rng.randint(0, cap),
                                             o2: rng.randint(0, cap)})
    program = (
        f"BOX0=LOC(image=IMAGE,object='{o1}')\n"
        f"ANSWER0=COUNT(box=BOX0)\n"
        f"BOX1=LOC(image=IMAGE,object='{o2}')\n"
        f"ANSWER1=COUNT(box=BOX1)\n"
        f"ANSWER2=EVAL(expr=\"'yes' if {{ANSWER0}} > {{ANSWER1}} else 'no'\")\n"
        f"FINAL_RESULT=RESULT(var=ANSWER2)"
    )
    question = f"Are there more {plural(o1)} than {plural(o2)}?"
    return _gqa(scene), program, question


def _t_spatial_exist_and(rng, config):
    kind, words = rng.choice(_DIRECTIONS)
    o1, o2, o3 = rng.sample(config.vocab.categories, 3)
    cells = config.cells()
    for _ in range(40):
        anchor = rng.choice(cells)
        region = _half_plane(config, anchor, kind)
        inside = [c for c in region.cells() if c != anchor]
        if inside:
            break
    else:
        raise ExhaustedResamplingError("no room for a spatial layout")
    placed = [SceneObject(anchor, o1, **_rand_attrs(rng, config.vocab))]
    if rng.random() < 0.6:
        placed.append(SceneObject(rng.choice(inside), o2,
                                  **_rand_attrs(rng, config.vocab)))
    free = [c for c in cells if all(o.cell != c for o in placed)]
    if rng.random() < 0.6:
        placed.append(SceneObject(rng.choice(free), o3,
                                  **_rand_attrs(rng, config.vocab)))
    extra_cats = [c for c in config.vocab.categories if c not in (o1, o2, o3)]
    scene = _fill_scene(rng, config, placed, rng.randint(0, 1), extra_cats, cells)
    program = (
        f"BOX0=LOC(image=IMAGE,object='{o1}')\n"
        f"IMAGE0={kind}(image=IMAGE,box=BOX0)\n"
        f"ANSWER0=VQA(image=IMAGE0,question='{q_exists(o2)}')\n"
        f"ANSWER1=VQA(image=IMAGE,question='{q_exists(o3)}')\n"
        f"ANSWER2=EVAL(expr=\"'yes' if {{ANSWER0}} and {{ANSWER1}} else 'no'\")\n"
        f"FINAL_RESULT=RESULT(var=ANSWER2)"
    )
    question = f"Is there a {o2} {words} the {o1}, plus a {o3} anywhere?"
    return _gqa(scene), program, question


def _t_count_sum_exist(rng, config):
    o1, o2 = rng.sample(config.vocab.categories, 2)
    k = rng.randint(1, 3)
    cap = config.max_per_category
    left = rng.randint(max(0, k - cap), min(cap, k)) if rng.random() < 0.5 \
        else rng.randint(0, cap)
    right = (k - left if rng.random() < 0.5 and 0 <= k - left <= cap
             else rng.randint(0, cap))
    scenes = {
        "LEFT": _scene_with_counts(rng, config,
                                   {o1: left, o2: rng.choice((0, 1))}),
        "RIGHT": _scene_with_counts(rng, config,
                                    {o1: right, o2: rng.choice((0, 1))}),
    }
    program = (
        f"ANSWER0=VQA(image=LEFT,question='{q_count(o1)}')\n"
        f"ANSWER1=VQA(image=RIGHT,question='{q_count(o1)}')\n"
        f"ANSWER2=VQA(image=LEFT,question='{q_exists(o2)}')\n"
        f"ANSWER3=VQA(image=RIGHT,question='{q_exists(o2)}')\n"
        f"ANSWER4=EVAL(expr='{{ANSWER0}} + {{ANSWER1}} == {k} and ({{ANSWER2}} or {{ANSWER3}})')\n"
        f"FINAL_ANSWER=RESULT(var=ANSWER4)"
    )
    question = (f"exactly {k} {plural(o1)} appear in total and "
                f"some image has a {o2}")
    return scenes, program, question


def _t_seal_conj_xor(rng, config):
    o1, o2, o3 = rng.sample(config.vocab.categories, 3)
    k = rng.randint(1, 2)

    def side(make_true: bool) -> Scene:
        if make_true:
            return _scene_with_counts(rng, config, {o1: k, o2: 1, o3: 1})
        return _scene_with_counts(
            rng, config, {o1: _coin_count(rng, config, k),
                          o2: rng.choice((0, 1)), o3: rng.choice((0, 1))})

    left_true = rng.random() < 0.5
    right_true = rng.random() < 0.5
    scenes = {"LEFT": side(left_true), "RIGHT": side(right_true)}
    program = (
        f"ANSWER0=VQA(image=LEFT,question='{q_count(o1)}')\n"
        f"ANSWER1=VQA(image=RIGHT,question='{q_count(o1)}')\n"
        f"ANSWER2=VQA(image=LEFT,question='{q_exists(o2)}')\n"
        f"ANSWER3=VQA(image=RIGHT,question='{q_exists(o2)}')\n"
        f"ANSWER4=VQA(image=LEFT,question='{q_exists(o3)}')\n"
        f"ANSWER5=VQA(image=RIGHT,question='{q_exists(o3)}')\n"
        f"ANSWER6=EVAL(expr='{{ANSWER0}} == {k} and {{ANSWER2}} and {{ANSWER4}}')\n"
        f"ANSWER7=EVAL(expr='{{ANSWER1}} == {k} and {{ANSWER3}} and {{ANSWER5}}')\n"
        f"ANSWER8=EVAL(expr='{{ANSWER6}} xor {{ANSWER7}}')\n"
        f"FINAL_ANSWER=RESULT(var=ANSWER8)"
    )
    question = (f"exactly one image shows {k} {plural(o1)} together with "
                f"a {o2} and a {o3}")
    return scenes, program, question


def _colors_and_materials(vocab):
    return list(vocab.colors) + list(vocab.materials)


def _colors(vocab):
    return list(vocab.colors)


def _activities(vocab):
    return list(vocab.activities)


CASE_TEMPLATES: tuple[CaseTemplate, ...] = (
    CaseTemplate("exist-direct", "gqa", 1, _yes_no, _t_exist_direct),
    CaseTemplate("count-threshold", "nlvr", 1, _true_false, _t_count_threshold),
    CaseTemplate("color-single", "gqa", 1, _colors, _t_color_single),
    CaseTemplate("exist-or-loc", "gqa", 2, _yes_no, _t_exist_or_loc),
    CaseTemplate("spatial-color", "gqa", 2, _colors, _t_spatial_color),
    CaseTemplate("count-sum", "nlvr", 2, _true_false, _t_count_sum),
    CaseTemplate("xor-exist", "nlvr", 2, _true_false, _t_xor_exist),
    CaseTemplate("conj-count-exist", "nlvr", 2, _true_false, _t_conj_count_exist),
    CaseTemplate("material-check", "gqa", 2, _yes_no, _t_material_check),
    CaseTemplate("activity-query", "gqa", 2, _activities, _t_activity_query),
    CaseTemplate("count-compare-loc", "gqa", 2, _yes_no, _t_count_compare_loc),
    CaseTemplate("exist-and-color", "gqa", 3, _yes_no, _t_exist_and_color),
    CaseTemplate("spatial-exist-and", "gqa", 3, _yes_no, _t_spatial_exist_and),
    CaseTemplate("attr-compare", "gqa", 4, _yes_no, _t_attr_compare),
    CaseTemplate("conditional-shared", "gqa", 4, _colors_and_materials,
                 _t_conditional_shared),
    CaseTemplate("count-sum-exist", "nlvr", 4, _true_false, _t_count_sum_exist),
    CaseTemplate("seal-conj-xor", "nlvr", 6, _true_false, _t_seal_conj_xor),
)


def template_by_id(template_id: str) -> CaseTemplate:
    for t in CASE_TEMPLATES:
        if t.id == template_id:
            return t
    raise KeyError(f"no case template {template_id!r}")


MAX_RESAMPLE_ATTEMPTS = 400


def gen_case(rng_seed: int, config: WorldConfig,
             template_pool: Iterable[CaseTemplate] | None = None,
             max_visual_steps: int | None = None,
             case_id: str | None = None) -> CaseRecord:
    """One labeled case; resamples scenes until the label matches a balanced draw."""
    rng = random.Random(rng_seed)
    pool = list(template_pool if template_pool is not None else CASE_TEMPLATES)
    if max_visual_steps is not None:
        pool = [t for t in pool if t.steps <= max_visual_steps]
    if not pool:
        raise ExhaustedResamplingError("template pool is empty for the constraints")
    template = rng.choice(pool)
    targets = template.balance(config.vocab)
    desired = rng.choice(targets) if targets else None
    for _ in range(MAX_RESAMPLE_ATTEMPTS):
        scenes, program_text, question = template.instantiate(rng, config)
        ast = dsl.parse_program(program_text)
        label = token_of(oracle_run(config, scenes, ast)[ast.result_statement.target])
        if desired is not None and label != desired:
            continue
        steps = dsl.count_visual_steps(ast)
        assert steps == template.steps, f"{template.id}: declared steps wrong"
        return CaseRecord(
            id=case_id or f"case-{rng_seed & 0xFFFFFFFF:08x}",
            scenes=scenes,
            program_text=program_text,
            question_text=question,
            label=label,
            meta=CaseMeta(num_visual_steps=steps, stage=steps,
                          template_id=template.id, seed=rng_seed),
        )
    raise ExhaustedResamplingError(
        f"could not realize label {desired!r} for template {template.id!r}")


DEFAULT_STEP_WEIGHTS = {1: 5, 2: 10, 3: 5, 4: 3}


def gen_dataset(seed: int, n: int, config: WorldConfig,
                max_visual_steps: int = 4,
                step_weights: dict[int, float] | None = None) -> list[CaseRecord]:
    """Deterministic corpus with step counts in the given proportions."""
    weights = dict(step_weights or DEFAULT_STEP_WEIGHTS)
    weights = {s: w for s, w in weights.items() if s <= max_visual_steps}
    buckets = {s: [t for t in CASE_TEMPLATES if t.steps == s] for s in weights}
    weights = {s: w for s, w in weights.items() if buckets[s]}
    total = sum(weights.values())
    counts = {s: int(n * w / total) for s, w in weights.items()}
    shortfall = n - sum(counts.values())
    for s in sorted(weights, key=lambda s: -weights[s]):
        if shortfall <= 0:
            break
        counts[s] += 1
        shortfall -= 1
    assignment = [s for s in sorted(counts) for _ in range(counts[s])]
    random.Random(derive_seed(seed, "bucket-order")).shuffle(assignment)
    cases = []
    for i, steps in enumerate(assignment):
        case_seed = derive_seed(seed, "case", i)
        case = gen_case(case_seed, config, template_pool=buckets[steps],
                        case_id=f"case-{i:05d}")
        cases.append(case)
    return cases


# --- dataset files -----------------------------------------------------------------


def save_dataset(path, config: WorldConfig, cases: Iterable[CaseRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema_version": DATASET_SCHEMA_VERSION,
                  "world": config.to_json()}
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for case in cases:
            fh.write(json.dumps(case.to_json(), separators=(",", ":")) + "\n")


def load_dataset(path) -> tuple[WorldConfig, list[CaseRecord]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().split("\n") if line]
    if not lines:
        raise VisprobError(f"dataset file {path} is empty")
    header = json.loads(lines[0])
    version = header.get("schema_version")
    if version != DATASET_SCHEMA_VERSION:
        raise VisprobError(f"unsupported dataset schema version {version!r}")
    config = WorldConfig.from_json(header["world"])
    cases = [CaseRecord.from_json(json.loads(line)) for line in lines[1:]]
    return config, cases


# --- program disruption ------------------------------------------------------------


def _random_question(rng: random.Random, vocab: Vocabularies) -> str:
    kind = rng.choice(("what-color", "what-material", "what-activity",
                       "is-activity", "made-of", "has-color", "exists", "count"))
    obj = rng.choice(vocab.categories)
    if kind == "what-color":
        return q_what_color(obj)
    if kind == "what-material":
        return q_what_material(obj)
    if kind == "what-activity":
        return q_what_activity(obj)
    if kind == "is-activity":
        return q_is_activity(obj, rng.choice(vocab.activities))
    if kind == "made-of":
        return q_made_of(obj, rng.choice(vocab.materials))
    if kind == "has-color":
        return q_has_color(obj, rng.choice(vocab.colors))
    if kind == "exists":
        return q_exists(obj)
    return q_count(obj)


def _replace_statement(ast: dsl.ProgramAst, index: int,
                       stmt: dsl.Statement) -> dsl.ProgramAst:
    statements = list(ast.statements)
    statements[index] = stmt
    return dsl.ProgramAst(tuple(statements))


def _disrupt_once(rng: random.Random, case: CaseRecord, config: WorldConfig,
                  modules, zero_params) -> CaseRecord | None:
    ast = dsl.parse_program(case.program_text)
    literal_sites = []
    crop_sites = []
    for i, stmt in enumerate(ast.statements):
        if stmt.module is dsl.ModuleKind.LOC:
            literal_sites.append((i, "object"))
        elif stmt.module is dsl.ModuleKind.VQA:
            literal_sites.append((i, "question"))
        elif stmt.module in dsl.CROP_KINDS:
            crop_sites.append(i)
    kinds = (["literal"] if literal_sites else []) + (["swap-module"] if crop_sites else [])
    if not kinds:
        return None
    choice = rng.choice(kinds)
    if choice == "literal":
        i, key = rng.choice(literal_sites)
        stmt = ast.statements[i]
        old = stmt.lit_arg(key)
        if key == "object":
            new = rng.choice([c for c in config.vocab.categories if c != old])
        else:
            new = _random_question(rng, config.vocab)
            if new == old:
                return None
        args = tuple((k, dsl.Literal(new) if k == key else v)
                     for k, v in stmt.args)
        new_ast = _replace_statement(ast, i, replace(stmt, args=args))
        tag = "literal"
    else:
        i = rng.choice(crop_sites)
        stmt = ast.statements[i]
        options = [k for k in dsl.CROP_KINDS if k is not stmt.module]
        new_kind = rng.choice(sorted(options, key=lambda k: k.value))
        new_ast = _replace_statement(ast, i, replace(stmt, module=new_kind))
        tag = "swap-module"

    text = dsl.format_program(new_ast)
    try:
        reparsed = dsl.parse_program(text)
        execute_argmax(reparsed, case.scenes, modules, zero_params)
    except VisprobError:
        return None
    meta = replace(case.meta, disrupted=tag)
    return replace(case, program_text=text, meta=meta)


def disrupt_programs(cases: list[CaseRecord], fraction: float, seed: int,
                     config: WorldConfig) -> list[CaseRecord]:
    """Corrupt ``fraction`` of the programs while keeping them executable.

    One change per selected case: swap an object/question literal for another
    in-vocabulary one, or swap a CROP variant. Every change re-validates by
    parsing and dry-running the argmax executor; labels are left untouched.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be within [0, 1]")
    n_pick = int(fraction * len(cases))
    if n_pick == 0:
        return list(cases)
    rng = random.Random(derive_seed(seed, "disrupt"))
    picked = sorted(rng.sample(range(len(cases)), n_pick))
    modules = build_toy_modules(config.vocab, config.pool_size)
    zero_params = init_params(config.vocab)
    out = list(cases)
    for idx in picked:
        for _ in range(MAX_RESAMPLE_ATTEMPTS):
            disrupted = _disrupt_once(rng, cases[idx], config, modules, zero_params)
            if disrupted is not None:
                out[idx] = disrupted
                break
        else:
            raise ExhaustedResamplingError(
                f"could not disrupt case {cases[idx].id!r}")
    return out
