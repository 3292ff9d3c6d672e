"""Simple convex sets with cheap exact projections."""
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K

_EMPTY = np.zeros(0)


class SimpleSet:
    """Base class. Subclasses implement ``project`` and ``contains``."""

    tag = "abstract"

    def project(self, x):
        raise NotImplementedError

    def contains(self, x, tol=1e-12):
        raise NotImplementedError

    def params(self):
        return {}

    def to_dict(self):
        return {"tag": self.tag, "params": self.params()}

    def kernel_spec(self):
        """Arguments for ``kernels.project_set``, or None if not kernel-encodable."""
        return None


@dataclass(frozen=True)
class WholeSpace(SimpleSet):
    tag = "whole-space"

    def project(self, x):
        return np.array(x, dtype=float, copy=True)

    def contains(self, x, tol=1e-12):
        return bool(np.all(np.isfinite(x)))

    def kernel_spec(self):
        return (K.SET_WHOLE, _EMPTY, _EMPTY, _EMPTY, np.inf, 0)


@dataclass(frozen=True)
class NonnegativeOrthant(SimpleSet):
    tag = "nonnegative-orthant"

    def project(self, x):
        return np.maximum(np.asarray(x, dtype=float), 0.0)

    def contains(self, x, tol=1e-12):
        return bool(np.all(np.asarray(x) >= -tol))

    def kernel_spec(self):
        return (K.SET_ORTHANT, _EMPTY, _EMPTY, _EMPTY, np.inf, 0)


@dataclass(frozen=True, eq=False)
class Box(SimpleSet):
    lower: np.ndarray
    upper: np.ndarray
    tag = "box"

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box bounds must have equal shape and lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def project(self, x):
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def contains(self, x, tol=1e-12):
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def params(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    def kernel_spec(self):
        return (K.SET_BOX, self.lower, self.upper, _EMPTY, np.inf, 0)


@dataclass(frozen=True, eq=False)
class HyperplaneOrthant(SimpleSet):
    """``{a : 0 <= a <= upper, labels . a = 0}`` crossed with ``n_free`` free coordinates.

    With ``n_free=1`` and ``upper=inf`` this is the MKL-SVM set for ``x = [alpha; d]``;
    with ``n_free=0`` and finite ``upper`` it is the single-kernel SVM box.
    """

    labels: np.ndarray
    upper: float = np.inf
    n_free: int = 1
    tag = "hyperplane-orthant"

    def __post_init__(self):
        y = np.asarray(self.labels, dtype=float)
        if not np.all(np.abs(y) == 1.0):
            raise ValueError("labels must be +1/-1")
        if not self.upper > 0:
            raise ValueError("upper bound must be positive")
        object.__setattr__(self, "labels", y)

    @property
    def n_head(self):
        return self.labels.shape[0]

    def project(self, x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        out[: self.n_head] = K.project_hyperplane_box(x[: self.n_head], self.labels, float(self.upper))
        return out

    def contains(self, x, tol=1e-12):
        a = np.asarray(x)[: self.n_head]
        scale = max(1.0, float(np.max(np.abs(a), initial=0.0)))
        return bool(
            np.all(a >= -tol)
            and np.all(a <= self.upper + tol)
            and abs(float(self.labels @ a)) <= tol * scale * max(1, self.n_head)
        )

    def params(self):
        upper = None if np.isinf(self.upper) else float(self.upper)
        return {"labels": self.labels.tolist(), "upper": upper, "n_free": int(self.n_free)}

    def kernel_spec(self):
        return (K.SET_HYPERPLANE, _EMPTY, _EMPTY, self.labels, float(self.upper), self.n_head)


@dataclass(frozen=True, eq=False)
class ProductSet(SimpleSet):
    """Cartesian product of simple sets over consecutive coordinate blocks."""

    blocks: tuple = field(default_factory=tuple)  # ((SimpleSet, size), ...)
    tag = "product"

    def _slices(self):
        start = 0
        for s, size in self.blocks:
            yield s, slice(start, start + size)
            start += size

    def project(self, x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        for s, sl in self._slices():
            out[sl] = s.project(x[sl])
        return out

    def contains(self, x, tol=1e-12):
        x = np.asarray(x)
        return all(s.contains(x[sl], tol) for s, sl in self._slices())

    def params(self):
        return {"blocks": [{"set": s.to_dict(), "size": int(size)} for s, size in self.blocks]}


def set_from_dict(d):
    tag = d["tag"]
    p = d.get("params", {}) or {}
    if tag == WholeSpace.tag:
        return WholeSpace()
    if tag == NonnegativeOrthant.tag:
        return NonnegativeOrthant()
    if tag == Box.tag:
        return Box(np.array(p["lower"]), np.array(p["upper"]))
    if tag == HyperplaneOrthant.tag:
        upper = p.get("upper")
        return HyperplaneOrthant(np.array(p["labels"]), np.inf if upper is None else upper, p.get("n_free", 1))
    if tag == ProductSet.tag:
        return ProductSet(tuple((set_from_dict(b["set"]), b["size"]) for b in p["blocks"]))
    raise ValueError(f"unknown simple set tag {tag!r}")
