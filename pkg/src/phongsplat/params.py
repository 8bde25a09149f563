"""Flat parameter vector over all learnable Gaussian attributes.

One point owns 25 scalars in a fixed field order; the optimizer, checkpoint
format, and the tape all address the same point-major layout:
offset(point, attr, comp) = point * 25 + ATTR_OFFSETS[attr] + comp.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

# (name, width), in storage order
ATTRIBUTES = (
    ("position", 3),
    ("rotation", 4),
    ("log_scale", 3),
    ("opacity_logit", 1),
    ("ambient_color", 3),
    ("normal_residual_out", 3),
    ("normal_residual_in", 3),
    ("diffuse_color", 3),
    ("specular_coeff", 1),
    ("shadow_coeff_logit", 1),
)

POINT_SIZE = sum(w for _, w in ATTRIBUTES)

ATTR_OFFSETS = {}
_off = 0
for _name, _w in ATTRIBUTES:
    ATTR_OFFSETS[_name] = _off
    _off += _w

ATTR_WIDTHS = dict(ATTRIBUTES)

# names the meta inner loop treats as "Phong attributes" (everything that is
# not the shadow coefficient)
PHONG_ATTRS = tuple(n for n, _ in ATTRIBUTES if n != "shadow_coeff_logit")
SHADOW_ATTRS = ("shadow_coeff_logit",)


class ParamSet:
    """Named flat float64 vector of every learnable scalar in a scene."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size % POINT_SIZE:
            raise ValueError(f"flat length must be a multiple of {POINT_SIZE}")
        self.values = values
        self.n_points = values.size // POINT_SIZE

    @classmethod
    def zeros(cls, n_points: int) -> "ParamSet":
        return cls(np.zeros(n_points * POINT_SIZE))

    def copy(self) -> "ParamSet":
        return ParamSet(self.values.copy())

    def offset(self, point_id: int, attr: str, comp: int = 0) -> int:
        if not 0 <= point_id < self.n_points:
            raise IndexError(f"point id {point_id} out of range")
        if comp >= ATTR_WIDTHS[attr]:
            raise IndexError(f"component {comp} out of range for {attr}")
        return point_id * POINT_SIZE + ATTR_OFFSETS[attr] + comp

    def attr(self, name: str) -> np.ndarray:
        """Writable (N, width) view of one attribute across all points."""
        off, w = ATTR_OFFSETS[name], ATTR_WIDTHS[name]
        return self.values.reshape(self.n_points, POINT_SIZE)[:, off:off + w]

    def __eq__(self, other):
        return isinstance(other, ParamSet) and np.array_equal(self.values, other.values)

    def __len__(self):
        return self.values.size


def attr_mask(names, n_points: int) -> np.ndarray:
    """Boolean flat mask selecting the listed attributes on every point."""
    row = np.zeros(POINT_SIZE, dtype=bool)
    for name in names:
        off, w = ATTR_OFFSETS[name], ATTR_WIDTHS[name]
        row[off:off + w] = True
    return np.tile(row, n_points)


class SceneView:
    """Attribute views of a flat vector, taped when the vector is a Var."""

    def __init__(self, flat, n_points: int):
        self.n_points = n_points
        table = ad.reshape(flat, (n_points, POINT_SIZE))
        for name, w in ATTRIBUTES:
            off = ATTR_OFFSETS[name]
            cols = np.arange(off, off + w)
            view = ad.take(table, cols, axis=1)
            if w == 1:
                view = ad.reshape(view, (n_points,))
            setattr(self, name, view)

    @property
    def opacity(self):
        return ad.sigmoid(self.opacity_logit)

    @property
    def shadow_coeff(self):
        return ad.sigmoid(self.shadow_coeff_logit)

    @property
    def scale(self):
        return ad.exp(self.log_scale)
