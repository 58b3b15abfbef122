"""Attribute vocabularies, the cell feature map, and VQA question templates.

Cell features are concatenated one-hot blocks for (category, color, material,
activity) plus a presence bit; an empty cell is all zeros. Region features are
the mean over the region's cells, so a single-cell crop reproduces that cell's
one-hots exactly and whole-image counts stay linearly readable.

Question templates fall into two groups:

* cropped-region queries ("What color is the X?") abstract the object name
  into a slot; the region isolates the object, and the slot one-hot is
  appended to the pooled features.
* whole-image queries (existence, counting) keep the object name in the
  template key, one weight block per category. A shared additive slot cannot
  select *which* category's feature to read out, so per-category blocks are
  the smallest linear model that can learn these.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownTemplateError


@dataclass(frozen=True)
class Vocabularies:
    categories: tuple[str, ...] = (
        "post", "sign", "laptop", "chair", "dog", "cat", "person", "bottle")
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow", "white")
    materials: tuple[str, ...] = ("plastic", "wood", "metal", "glass")
    activities: tuple[str, ...] = ("standing", "sitting", "walking", "sleeping")
    max_count: int = 4

    def feature_dim(self) -> int:
        return (len(self.categories) + len(self.colors) + len(self.materials)
                + len(self.activities) + 1)

    def encode_cell(self, category: str | None, color: str = "", material: str = "",
                    activity: str = "") -> np.ndarray:
        """Feature vector for one cell; ``category=None`` means empty."""
        x = np.zeros(self.feature_dim())
        if category is None:
            return x
        off = 0
        x[off + self.categories.index(category)] = 1.0
        off += len(self.categories)
        x[off + self.colors.index(color)] = 1.0
        off += len(self.colors)
        x[off + self.materials.index(material)] = 1.0
        off += len(self.materials)
        x[off + self.activities.index(activity)] = 1.0
        off += len(self.activities)
        x[off] = 1.0  # presence
        return x


DEFAULT_VOCAB = Vocabularies()


def plural(noun: str) -> str:
    return noun + "s"


@dataclass(frozen=True)
class QuestionTemplate:
    """One VQA question shape with a fixed answer vocabulary."""

    template_id: str
    family: str
    pattern: str          # regex over the question text
    answers: tuple        # answer tokens (str) or counts (int)
    has_object_slot: bool  # object category captured as group 'obj'

    def answer_list(self) -> list:
        return list(self.answers)


@dataclass
class TemplateRegistry:
    vocab: Vocabularies
    templates: list[QuestionTemplate] = field(default_factory=list)
    _compiled: list = field(default_factory=list, repr=False)

    def match(self, question: str) -> tuple[QuestionTemplate, str | None]:
        """Resolve a question to (template, slot object category)."""
        for tmpl, rx in zip(self.templates, self._compiled):
            m = rx.fullmatch(question)
            if m:
                obj = m.group("obj") if tmpl.has_object_slot else None
                return tmpl, obj
        raise UnknownTemplateError(f"no template matches question {question!r}")

    def by_id(self, template_id: str) -> QuestionTemplate:
        for tmpl in self.templates:
            if tmpl.template_id == template_id:
                return tmpl
        raise UnknownTemplateError(f"no template with id {template_id!r}")


def build_template_registry(vocab: Vocabularies) -> TemplateRegistry:
    cats = "|".join(re.escape(c) for c in vocab.categories)
    obj = f"(?P<obj>{cats})"
    yes_no = ("yes", "no")
    counts = tuple(range(vocab.max_count + 1))
    templates: list[QuestionTemplate] = []

    def add(template_id, family, pattern, answers, has_object_slot):
        templates.append(QuestionTemplate(template_id, family, pattern,
                                          tuple(answers), has_object_slot))

    # cropped-region queries: object abstracted into a slot
    add("what-color", "what-color", f"What color is the {obj}\\?",
        vocab.colors, True)
    add("what-material", "what-material", f"What material is the {obj}\\?",
        vocab.materials, True)
    add("what-activity", "what-activity", f"What is the {obj} doing\\?",
        vocab.activities, True)
    for act in vocab.activities:
        add(f"is-activity:{act}", "is-activity",
            f"Is the {obj} {re.escape(act)}\\?", yes_no, True)
    for mat in vocab.materials:
        add(f"made-of:{mat}", "made-of",
            f"Is the {obj} made of {re.escape(mat)}\\?", yes_no, True)
    for col in vocab.colors:
        add(f"has-color:{col}", "has-color",
            f"Does the {obj} have {re.escape(col)} color\\?", yes_no, True)

    # whole-image queries: per-category weight blocks
    for cat in vocab.categories:
        add(f"exists:{cat}", "exists",
            f"Is there a {re.escape(cat)}\\?", yes_no, False)
    for cat in vocab.categories:
        add(f"count:{cat}", "count",
            f"How many {re.escape(plural(cat))} are in the image\\?",
            counts, False)

    registry = TemplateRegistry(vocab, templates)
    registry._compiled = [re.compile(t.pattern) for t in templates]
    return registry


# question text constructors used by the scene/program generator

def q_what_color(obj: str) -> str:
    return f"What color is the {obj}?"


def q_what_material(obj: str) -> str:
    return f"What material is the {obj}?"


def q_what_activity(obj: str) -> str:
    return f"What is the {obj} doing?"


def q_is_activity(obj: str, activity: str) -> str:
    return f"Is the {obj} {activity}?"


def q_made_of(obj: str, material: str) -> str:
    return f"Is the {obj} made of {material}?"


def q_has_color(obj: str, color: str) -> str:
    return f"Does the {obj} have {color} color?"


def q_exists(obj: str) -> str:
    return f"Is there a {obj}?"


def q_count(obj: str) -> str:
    return f"How many {plural(obj)} are in the image?"
