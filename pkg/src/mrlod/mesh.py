"""Cartesian mesh hierarchy on the unit square, with optional rectangular hole.

All meshes are uniform refinements of a coarse grid with dyadic mesh size,
so every geometric quantity is exact integer arithmetic on grid indices.
Elements are ordered row-major (iy major, ix minor) everywhere; this fixes
the layout of every matrix assembled downstream.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "ElementId",
    "BoundaryLayout",
    "Patch",
    "MeshHierarchy",
    "MeshError",
    "build_hierarchy",
    "dyadic_exponent",
]

_BOUNDARY_KINDS = ("dirichlet", "neumann", "robin")
SIDES = ("bottom", "right", "top", "left")


class MeshError(ValueError):
    """Invalid mesh parameters or queries."""


def dyadic_exponent(x) -> int:
    """Return k such that x == 2**-k, or raise for non-dyadic x.

    Mesh sizes must tile the unit interval exactly, so only negative
    powers of two are admissible.
    """
    frac = Fraction(x).limit_denominator(1 << 40) if not isinstance(x, Fraction) else x
    if frac != Fraction(x):
        raise MeshError(f"mesh size {x!r} is not an exact dyadic rational")
    if frac <= 0 or frac > 1 or frac.numerator != 1 or (frac.denominator & (frac.denominator - 1)):
        raise MeshError(f"mesh size {x!r} must be 2**-k with k >= 0")
    return frac.denominator.bit_length() - 1


@dataclass(frozen=True)
class ElementId:
    """One element of the level-``level`` grid, addressed by integer indices."""

    level: int
    ix: int
    iy: int


@dataclass(frozen=True)
class BoundaryLayout:
    """Kind of boundary condition on each side of the outer square.

    Hole boundaries (when present) are always Dirichlet. The three kinds
    partition the boundary; a Helmholtz solve additionally needs a
    non-empty Robin part, which is enforced at operator assembly.
    """

    bottom: str = "robin"
    right: str = "robin"
    top: str = "robin"
    left: str = "robin"

    def __post_init__(self):
        for side in SIDES:
            kind = getattr(self, side)
            if kind not in _BOUNDARY_KINDS:
                raise MeshError(f"unknown boundary kind {kind!r} on side {side!r}")

    @classmethod
    def all_robin(cls) -> "BoundaryLayout":
        return cls()

    @classmethod
    def all_dirichlet(cls) -> "BoundaryLayout":
        return cls("dirichlet", "dirichlet", "dirichlet", "dirichlet")

    def kinds(self) -> dict:
        return {side: getattr(self, side) for side in SIDES}

    def has_robin(self) -> bool:
        return any(getattr(self, side) == "robin" for side in SIDES)


@dataclass(frozen=True)
class Patch:
    """A set of active same-level elements, closed under the growing recursion.

    ``elements`` is an array of (ix, iy) pairs in row-major order; ``mask``
    is the corresponding boolean grid; ``bbox`` is (ix0, ix1, iy0, iy1)
    inclusive.
    """

    level: int
    elements: np.ndarray
    mask: np.ndarray
    bbox: tuple

    def __len__(self) -> int:
        return len(self.elements)

    def contains(self, ix: int, iy: int) -> bool:
        n = self.mask.shape[0]
        return 0 <= ix < n and 0 <= iy < n and bool(self.mask[iy, ix])


def _dilate(mask: np.ndarray) -> np.ndarray:
    """Grow a boolean element mask by all vertex-touching neighbours."""
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    return out


class MeshHierarchy:
    """Nested Cartesian meshes of the unit square (possibly minus a hole).

    Level ell = 1..L has mesh size ``H1 * 2**(1-ell)`` and an
    ``n_ell x n_ell`` grid of which only the elements inside the
    computational domain are active. The fine mesh (size ``h_fine``)
    refines the finest level. Instances are immutable after construction
    and safe for concurrent shared reads.
    """

    def __init__(self, H1, L, h_fine, hole=None, boundary=None):
        if L < 1:
            raise MeshError(f"number of levels must be >= 1, got {L}")
        k1 = dyadic_exponent(H1)
        kf = dyadic_exponent(h_fine)
        self.H1 = float(H1)
        self.L = int(L)
        self.h = float(h_fine)
        self.n1 = 1 << k1
        self.nf = 1 << kf
        HL = self.H1 * 2.0 ** (1 - L)
        if self.h > HL:
            raise MeshError(f"fine mesh size {self.h} exceeds finest level size {HL}")
        self.boundary = boundary if boundary is not None else BoundaryLayout.all_robin()

        self.hole_box = None
        hole_idx = None
        if hole is not None:
            x0, y0, x1, y1 = (float(c) for c in hole)
            idx = [c / self.H1 for c in (x0, y0, x1, y1)]
            if any(abs(c - round(c)) > 1e-12 for c in idx):
                raise MeshError(f"hole {hole!r} is not aligned to the level-1 grid")
            i0, j0, i1, j1 = (int(round(c)) for c in idx)
            if not (0 <= i0 < i1 <= self.n1 and 0 <= j0 < j1 <= self.n1):
                raise MeshError(f"hole {hole!r} lies outside the unit square")
            self.hole_box = (x0, y0, x1, y1)
            hole_idx = (i0, j0, i1, j1)

        # Active element masks, indexed [iy, ix].
        self.active = []
        for ell in range(1, L + 1):
            n = self.grid_n(ell)
            mask = np.ones((n, n), dtype=bool)
            if hole_idx is not None:
                scale = n // self.n1
                i0, j0, i1, j1 = hole_idx
                mask[j0 * scale:j1 * scale, i0 * scale:i1 * scale] = False
            self.active.append(mask)
        maskf = np.ones((self.nf, self.nf), dtype=bool)
        if hole_idx is not None:
            scale = self.nf // self.n1
            i0, j0, i1, j1 = hole_idx
            maskf[j0 * scale:j1 * scale, i0 * scale:i1 * scale] = False
        self.active_fine = maskf

        # Row-major enumeration of active elements per level.
        self._elements = []
        self._flat_to_index = []
        for mask in self.active:
            flat = np.flatnonzero(mask.ravel())
            n = mask.shape[0]
            idx = np.full(n * n, -1, dtype=np.int64)
            idx[flat] = np.arange(len(flat))
            iy, ix = np.divmod(flat, n)
            self._elements.append(np.column_stack([ix, iy]))
            self._flat_to_index.append(idx)

    # -- level geometry -------------------------------------------------

    def level_size(self, level: int) -> float:
        self._check_level(level)
        return self.H1 * 2.0 ** (1 - level)

    def grid_n(self, level: int) -> int:
        self._check_level(level)
        return self.n1 << (level - 1)

    def fine_per_side(self, level: int) -> int:
        """Number of fine cells per element side at ``level``."""
        return self.nf // self.grid_n(level)

    def n_active(self, level: int) -> int:
        return len(self._elements[level - 1])

    def active_elements(self, level: int) -> np.ndarray:
        """(n_active, 2) array of (ix, iy), row-major order."""
        return self._elements[level - 1]

    def element_index(self, eid: ElementId) -> int:
        """Position of an active element in the row-major enumeration."""
        self._check_element(eid)
        n = self.grid_n(eid.level)
        return int(self._flat_to_index[eid.level - 1][eid.iy * n + eid.ix])

    def is_active(self, level: int, ix: int, iy: int) -> bool:
        n = self.grid_n(level)
        if not (0 <= ix < n and 0 <= iy < n):
            return False
        return bool(self.active[level - 1][iy, ix])

    def element_corner(self, eid: ElementId) -> tuple:
        """Lower-left corner coordinates of an active element."""
        self._check_element(eid)
        H = self.level_size(eid.level)
        return (eid.ix * H, eid.iy * H)

    def parent(self, eid: ElementId) -> ElementId:
        if eid.level <= 1:
            raise MeshError("level-1 elements have no parent")
        return ElementId(eid.level - 1, eid.ix // 2, eid.iy // 2)

    # -- patches ----------------------------------------------------------

    def patch(self, eid: ElementId, m: int) -> Patch:
        """Neighbourhood of ``eid`` grown ``m`` times by touching elements.

        Growth steps add every active element sharing at least a vertex
        with the current set, so holes block propagation.
        """
        self._check_element(eid)
        if m < 0:
            raise MeshError(f"patch radius must be >= 0, got {m}")
        n = self.grid_n(eid.level)
        mask = np.zeros((n, n), dtype=bool)
        mask[eid.iy, eid.ix] = True
        return self._grow(eid.level, mask, m)

    def patch_of_mask(self, level: int, mask: np.ndarray, m: int) -> Patch:
        """Grow an arbitrary element set; ``m = 0`` just normalizes it."""
        base = mask & self.active[level - 1]
        return self._grow(level, base, m)

    def full_patch(self, level: int) -> Patch:
        """All active elements of a level (the unlocalized limit)."""
        return self._grow(level, self.active[level - 1].copy(), 0)

    def _grow(self, level, mask, m):
        active = self.active[level - 1]
        for _ in range(m):
            mask = _dilate(mask) & active
        flat = np.flatnonzero(mask.ravel())
        n = mask.shape[0]
        iy, ix = np.divmod(flat, n)
        if len(flat) == 0:
            raise MeshError("empty patch")
        bbox = (int(ix.min()), int(ix.max()), int(iy.min()), int(iy.max()))
        return Patch(level, np.column_stack([ix, iy]), mask, bbox)

    # -- nesting ----------------------------------------------------------

    def fine_cell_owner(self, level: int) -> np.ndarray:
        """Map each fine cell (iy, ix grid) to its level element's flat index."""
        scale = self.fine_per_side(level)
        n = self.grid_n(level)
        fy, fx = np.mgrid[0:self.nf, 0:self.nf]
        return (fy // scale) * n + (fx // scale)

    def _check_level(self, level: int):
        if not 1 <= level <= self.L:
            raise MeshError(f"level {level} outside 1..{self.L}")

    def _check_element(self, eid: ElementId):
        n = self.grid_n(eid.level)
        if not (0 <= eid.ix < n and 0 <= eid.iy < n):
            raise MeshError(f"element {eid} outside the level grid (n={n})")
        if not self.active[eid.level - 1][eid.iy, eid.ix]:
            raise MeshError(f"element {eid} is inactive (inside the hole)")


def build_hierarchy(H1, L, h_fine, geometry="unit_square", hole=None,
                    boundary=None) -> MeshHierarchy:
    """Construct the mesh hierarchy for one of the supported geometries.

    ``geometry`` is "unit_square" or "square_with_hole"; the latter removes
    the axis-aligned box ``hole`` (which must be a union of level-1
    elements) and marks its boundary Dirichlet.
    """
    if geometry == "unit_square":
        if hole is not None:
            raise MeshError("unit_square geometry takes no hole")
        return MeshHierarchy(H1, L, h_fine, hole=None, boundary=boundary)
    if geometry == "square_with_hole":
        if hole is None:
            raise MeshError("square_with_hole geometry requires a hole box")
        return MeshHierarchy(H1, L, h_fine, hole=hole, boundary=boundary)
    raise MeshError(f"unknown geometry {geometry!r}")
