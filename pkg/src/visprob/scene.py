"""Grid scenes: the synthetic stand-in for input images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .values import Cell, Region
from .vocab import Vocabularies


@dataclass(frozen=True)
class SceneObject:
    cell: Cell
    category: str
    color: str
    material: str
    activity: str


@dataclass
class Scene:
    rows: int
    cols: int
    objects: tuple[SceneObject, ...]
    _features: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("more than one object in a cell")
        for r, c in cells:
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise ValueError(f"object cell ({r}, {c}) outside grid")

    def at(self, cell: Cell) -> SceneObject | None:
        for obj in self.objects:
            if obj.cell == cell:
                return obj
        return None

    def whole_region(self, image_name: str) -> Region:
        return Region(image_name, 0, 0, self.rows - 1, self.cols - 1)

    def cell_index(self, cell: Cell) -> int:
        return cell[0] * self.cols + cell[1]

    def features(self, vocab: Vocabularies) -> np.ndarray:
        """(rows*cols, feature_dim) matrix, cached after first build."""
        if self._features is None:
            mat = np.zeros((self.rows * self.cols, vocab.feature_dim()))
            for obj in self.objects:
                mat[self.cell_index(obj.cell)] = vocab.encode_cell(
                    obj.category, obj.color, obj.material, obj.activity)
            self._features = mat
        return self._features

    def region_features(self, vocab: Vocabularies, region: Region) -> np.ndarray:
        """Mean-pooled features over the region's cells."""
        mat = self.features(vocab)
        idx = [self.cell_index(c) for c in region.cells()]
        return mat[idx].mean(axis=0)

    def objects_in(self, region: Region, category: str | None = None) -> list[SceneObject]:
        """Objects inside the region, row-major order; optional category filter."""
        found = [o for o in self.objects if region.contains(o.cell)
                 and (category is None or o.category == category)]
        return sorted(found, key=lambda o: o.cell)

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "objects": [
                {"cell": list(o.cell), "category": o.category, "color": o.color,
                 "material": o.material, "activity": o.activity}
                for o in self.objects
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Scene":
        objects = tuple(
            SceneObject(tuple(o["cell"]), o["category"], o["color"],
                        o["material"], o["activity"])
            for o in data["objects"]
        )
        return cls(data["rows"], data["cols"], objects)
