import numpy as np
import pytest

from mrlod.mesh import (
    BoundaryLayout,
    ElementId,
    MeshError,
    build_hierarchy,
    dyadic_exponent,
)


def test_uniform_refinement_counts():
    hier = build_hierarchy(0.5, 3, 2 ** -5)
    assert [hier.n_active(l) for l in (1, 2, 3)] == [4, 16, 64]
    assert hier.level_size(2) == 0.25
    assert hier.level_size(3) == 0.125


def test_hole_active_count():
    hier = build_hierarchy(1 / 8, 1, 2 ** -5, geometry="square_with_hole",
                           hole=(0.375, 0.375, 0.625, 0.625))
    assert hier.n_active(1) == 64 - 4


def test_non_dyadic_rejected():
    with pytest.raises(MeshError):
        build_hierarchy(1 / 3, 2, 2 ** -5)
    with pytest.raises(MeshError):
        dyadic_exponent(0.3)


def test_fine_mesh_too_coarse():
    with pytest.raises(MeshError):
        build_hierarchy(0.5, 3, 0.25)  # h > H_3


def test_hole_misaligned():
    with pytest.raises(MeshError):
        build_hierarchy(0.5, 1, 2 ** -4, geometry="square_with_hole",
                        hole=(0.3, 0.3, 0.7, 0.7))


def test_element_corner():
    hier = build_hierarchy(0.5, 2, 2 ** -4)
    assert hier.element_corner(ElementId(1, 1, 0)) == (0.5, 0.0)
    assert hier.element_corner(ElementId(2, 3, 3)) == (0.75, 0.75)
    with pytest.raises(MeshError):
        hier.element_corner(ElementId(1, 2, 0))


def test_patch_sizes():
    hier = build_hierarchy(0.25, 1, 2 ** -4)  # 4x4 grid
    center = ElementId(1, 1, 1)
    assert len(hier.patch(center, 0)) == 1
    assert len(hier.patch(center, 1)) == 9
    corner = ElementId(1, 0, 0)
    assert len(hier.patch(corner, 1)) == 4
    # growth bound (2m+1)^2 with equality for interior elements
    hier8 = build_hierarchy(1 / 8, 1, 2 ** -5)
    inner = ElementId(1, 3, 3)
    for m in (1, 2, 3):
        assert len(hier8.patch(inner, m)) == (2 * m + 1) ** 2


def test_patch_recursion_property():
    hier = build_hierarchy(1 / 8, 1, 2 ** -5, geometry="square_with_hole",
                           hole=(0.375, 0.375, 0.625, 0.625))
    T = ElementId(1, 1, 2)
    for m in (1, 2, 3):
        direct = hier.patch(T, m)
        prev = hier.patch(T, m - 1)
        agg = np.zeros_like(prev.mask)
        for ix, iy in prev.elements:
            agg |= hier.patch(ElementId(1, int(ix), int(iy)), 1).mask
        assert np.array_equal(direct.mask, agg)


def test_patch_blocked_by_hole():
    # Hole removes elements; the patch never contains inactive elements.
    hier = build_hierarchy(1 / 8, 2, 2 ** -5, geometry="square_with_hole",
                           hole=(0.375, 0.375, 0.625, 0.625))
    T = ElementId(1, 2, 3)  # just left of the hole
    p = hier.patch(T, 2)
    for ix, iy in p.elements:
        assert hier.is_active(1, int(ix), int(iy))


def test_nestedness_every_fine_cell_has_one_owner():
    hier = build_hierarchy(0.5, 3, 2 ** -5)
    for level in (1, 2, 3):
        owner = hier.fine_cell_owner(level)
        n = hier.grid_n(level)
        assert owner.min() >= 0 and owner.max() < n * n
        # owners nest: level-3 owners refine level-2 owners consistently
    o2 = hier.fine_cell_owner(2)
    o3 = hier.fine_cell_owner(3)
    n2, n3 = hier.grid_n(2), hier.grid_n(3)
    y3, x3 = np.divmod(o3, n3)
    assert np.array_equal(o2, (y3 // 2) * n2 + (x3 // 2))


def test_boundary_layout_validation():
    with pytest.raises(MeshError):
        BoundaryLayout("outflow", "robin", "robin", "robin")
    lay = BoundaryLayout.all_dirichlet()
    assert not lay.has_robin()
