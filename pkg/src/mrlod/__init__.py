"""Multi-resolution localized orthogonal decomposition for 2D Helmholtz problems."""

from .mesh import BoundaryLayout, ElementId, MeshError, MeshHierarchy, build_hierarchy
from .fem import (
    BumpSource,
    CellSamplesSource,
    CoefficientField,
    FemError,
    FineSpace,
    OperatorSet,
    SinCosSource,
    assemble_operators,
    load_vector,
    reference_solve,
    restricted_form,
    v_norm,
)
from .transfer import HaarFunction, TransferSet
from .corrector import CorrectorWorkspace, CorrectorError
from .multires import (
    BlockSystem,
    LevelBasis,
    MultiResSolution,
    assemble_blocks,
    build_level_basis,
    cross_level_matrix,
    export_sparsity,
    solve_blocks,
)
from .solver import GmresReport, SpectralDiagnostics, diagnostics, gmres, sparse_lu

__version__ = "0.1.0"
