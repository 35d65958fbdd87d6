"""Axis-aligned boxes, safe-set representations, and Minkowski erosion.

Boxes are closed interval products used both for control bounds and for the
per-step uncertainty cross-sections of a tube. Safe sets combine half-space
constraints with circular obstacles in a designated position subspace.
Erosion (Minkowski difference by a box) is what turns tube uncertainty into
tightened constraints.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


def _as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box [lo_1, hi_1] x ... x [lo_n, hi_n].

    Never empty by construction: lo[i] <= hi[i] must hold. Emptiness that
    arises from erosion is signalled by returning None, not by an empty Box.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lo)
        hi = _as_vector(self.hi)
        if lo.shape != hi.shape:
            raise ValueError("lo and hi must have the same length")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box has lo > hi in some dimension")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def corners(self) -> np.ndarray:
        """All 2^n corner points, one per row."""
        cols = [(self.lo[i], self.hi[i]) for i in range(self.dim)]
        return np.array(list(itertools.product(*cols)))

    def project(self, dims) -> "Box":
        idx = np.asarray(dims, dtype=int)
        return Box(self.lo[idx], self.hi[idx])

    @staticmethod
    def zero(dim: int) -> "Box":
        """The degenerate box {0}, the identity margin for erosion."""
        z = np.zeros(dim)
        return Box(z, z.copy())


def box_from_points(points) -> Box:
    """Smallest box containing all the given points (per-dimension min/max)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("cannot fit a box to an empty point set")
    if pts.ndim != 2:
        raise ValueError("points must be a sequence of equal-length vectors")
    return Box(pts.min(axis=0), pts.max(axis=0))


def box_contains(box: Box, x) -> bool:
    """Closed membership test; boundary points count as inside."""
    v = _as_vector(x)
    if v.shape[0] != box.dim:
        raise ValueError(f"dimension mismatch: box is {box.dim}-D, point is {v.shape[0]}-D")
    return bool(np.all(box.lo <= v) and np.all(v <= box.hi))


def erode_box(outer: Box, margin: Box) -> Box | None:
    """Minkowski difference outer minus margin for boxes.

    Returns the set of centers c with {c} + margin inside outer, which is the
    interval [outer.lo - margin.lo, outer.hi - margin.hi] per dimension.
    Returns None when any interval inverts (the eroded set is empty).
    """
    if outer.dim != margin.dim:
        raise ValueError("dimension mismatch between outer box and margin")
    lo = outer.lo - margin.lo
    hi = outer.hi - margin.hi
    if np.any(lo > hi):
        return None
    return Box(lo, hi)


def box_minkowski_sum(a: Box, b: Box) -> Box:
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    return Box(a.lo + b.lo, a.hi + b.hi)


@dataclass(frozen=True)
class Halfspace:
    """Constraint a . x <= b."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = _as_vector(self.normal)
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))


@dataclass(frozen=True)
class Obstacle:
    """Forbidden open disk in the position subspace; the boundary is safe."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = _as_vector(self.center)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        r = float(self.radius)
        if r <= 0:
            raise ValueError("obstacle radius must be positive")
        object.__setattr__(self, "radius", r)


@dataclass(frozen=True)
class SafeSet:
    """Conjunction of half-spaces and obstacle clearance in position space."""

    dim: int
    halfspaces: tuple[Halfspace, ...] = ()
    obstacles: tuple[Obstacle, ...] = ()
    position_dims: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "halfspaces", tuple(self.halfspaces))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "position_dims", tuple(int(d) for d in self.position_dims))
        for h in self.halfspaces:
            if h.normal.shape[0] != self.dim:
                raise ValueError("halfspace normal dimension mismatch")
        if self.obstacles and not self.position_dims:
            raise ValueError("obstacles require position_dims")
        for o in self.obstacles:
            if o.center.shape[0] != len(self.position_dims):
                raise ValueError("obstacle center must live in the position subspace")


def safe_contains(safe: SafeSet, x) -> bool:
    """True iff every half-space holds and the position clears every obstacle.

    All comparisons are non-strict: a point at distance exactly radius from an
    obstacle center, or exactly on a half-space boundary, is safe.
    """
    v = _as_vector(x)
    if v.shape[0] != safe.dim:
        raise ValueError(f"dimension mismatch: safe set is {safe.dim}-D, point is {v.shape[0]}-D")
    for h in safe.halfspaces:
        if float(h.normal @ v) > h.offset:
            return False
    if safe.obstacles:
        pos = v[list(safe.position_dims)]
        for o in safe.obstacles:
            if float(np.linalg.norm(pos - o.center)) < o.radius:
                return False
    return True


def _support(box: Box, direction: np.ndarray) -> float:
    """max over m in box of direction . m (support function of a box)."""
    return float(np.sum(np.maximum(direction * box.lo, direction * box.hi)))


def _max_position_offset(margin: Box, position_dims) -> float:
    """Largest Euclidean norm of a margin point projected onto position dims.

    The maximum of a convex norm over a box is attained at a corner, so this
    scans the 2^p projected corners. For margins symmetric about the origin it
    equals the norm of the position half-diagonal; for asymmetric margins it
    is the (larger) value that keeps obstacle inflation sound.
    """
    proj = margin.project(position_dims)
    return float(np.max(np.linalg.norm(proj.corners(), axis=1)))


def erode_safe_set(safe: SafeSet, margin: Box) -> SafeSet:
    """Tighten a safe set so membership survives any offset within margin.

    Half-spaces a.x <= b shrink to a.x <= b - h(a) with h the margin's support
    function. Obstacles inflate by the largest position offset the margin can
    introduce, which over-approximates the exact Minkowski difference of the
    disk complement (a rounded rectangle) by a disk.
    """
    if margin.dim != safe.dim:
        raise ValueError("margin dimension must equal the safe set dimension")
    tightened = tuple(
        Halfspace(h.normal, h.offset - _support(margin, h.normal)) for h in safe.halfspaces
    )
    if safe.obstacles:
        grow = _max_position_offset(margin, safe.position_dims)
        inflated = tuple(Obstacle(o.center, o.radius + grow) for o in safe.obstacles)
    else:
        inflated = ()
    return SafeSet(safe.dim, tightened, inflated, safe.position_dims)
