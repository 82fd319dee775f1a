"""Grid Forward Model

Finite-difference discretization of the frequency-domain diffusion model on a
rectangular 2D grid, and full-order evaluation of the frequency response

    Ψ(ω; p) = C ((iω/ν) E + A₀ + diag(A₁(p)))⁻¹ B

together with the adjoint (co-state) solves and the adjoint Jacobian.

Nodes are numbered row by row, index = iz·nx + ix, with iz = 0 the bottom
surface (z = −a₃) and iz = nz − 1 the top surface (z = +a₃). Every row of the
system is scaled by h² so that the diagonal of A₀ is O(1).
"""

import os
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sparse

from .counters import CostCounters
from .linear_solvers import solve_columns
from .utils import canonical_hash, ensure_directory

# Set up logging
logger = logging.getLogger(__name__)

CELL_TOLERANCE = 1e-12


@dataclass
class DomainSpec:
    """Rectangle [−a₁, a₁] × [−a₃, a₃] sampled by an nx × nz grid of square cells.

    `diffusion` is either a constant (cm) or a per-node array of shape (nz, nx).
    """

    half_width: float
    half_height: float
    nx: int
    nz: int
    speed_of_light: float = 1.0
    robin_constant: float = 1.0
    diffusion: Union[float, np.ndarray] = 0.03

    def __post_init__(self):
        if self.nx < 3 or self.nz < 3:
            raise ValueError(f"grid needs at least 3 points per axis, got {self.nx}x{self.nz}")
        for name in ('half_width', 'half_height', 'speed_of_light', 'robin_constant'):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        diffusion = np.asarray(self.diffusion, dtype=float)
        if diffusion.ndim == 0:
            if not diffusion > 0:
                raise ValueError("diffusion must be positive")
        else:
            if diffusion.shape != (self.nz, self.nx):
                raise ValueError(f"diffusion array must have shape {(self.nz, self.nx)}, got {diffusion.shape}")
            if not np.all(diffusion > 0):
                raise ValueError("diffusion must be positive everywhere")
        hx = 2.0 * self.half_width / (self.nx - 1)
        hz = 2.0 * self.half_height / (self.nz - 1)
        if abs(hx - hz) > CELL_TOLERANCE * max(hx, hz):
            raise ValueError(f"cells must be square: 2a1/(nx-1) = {hx:.6g} but 2a3/(nz-1) = {hz:.6g}")

    @property
    def h(self) -> float:
        """Mesh width."""
        return 2.0 * self.half_width / (self.nx - 1)

    @property
    def n(self) -> int:
        """State dimension."""
        return self.nx * self.nz

    def node_index(self, ix: int, iz: int) -> int:
        return iz * self.nx + ix

    def node_coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return (x, z) coordinates of all nodes as flat arrays in node order."""
        x = -self.half_width + self.h * np.arange(self.nx)
        z = -self.half_height + self.h * np.arange(self.nz)
        xx, zz = np.meshgrid(x, z)
        return xx.ravel(), zz.ravel()

    def diffusion_field(self) -> np.ndarray:
        """Diffusion coefficient per node, shape (nz, nx)."""
        diffusion = np.asarray(self.diffusion, dtype=float)
        if diffusion.ndim == 0:
            return np.full((self.nz, self.nx), float(diffusion))
        return diffusion

    def masks(self) -> Dict[str, np.ndarray]:
        """Boolean node masks: 'top', 'bottom', 'lateral' (Dirichlet) and 'interior'."""
        grid = np.zeros((self.nz, self.nx), dtype=int)
        grid[0, :] = 1
        grid[-1, :] = 2
        grid[1:-1, 0] = 3
        grid[1:-1, -1] = 3
        flat = grid.ravel()
        return {
            'bottom': flat == 1,
            'top': flat == 2,
            'lateral': flat == 3,
            'interior': flat == 0,
        }

    def interior_mask(self) -> np.ndarray:
        """Nodes that carry the PDE (absorption acts only here)."""
        return self.masks()['interior']

    def describe(self) -> Dict:
        diffusion = np.asarray(self.diffusion, dtype=float)
        return {
            'half_width': float(self.half_width),
            'half_height': float(self.half_height),
            'nx': int(self.nx),
            'nz': int(self.nz),
            'speed_of_light': float(self.speed_of_light),
            'robin_constant': float(self.robin_constant),
            'diffusion': float(diffusion) if diffusion.ndim == 0 else canonical_hash({'d': diffusion.ravel().tolist()}),
        }


@dataclass
class SourceDetectorLayout:
    """Source nodes on the top surface, detector nodes on the top and bottom surfaces."""

    source_nodes: Tuple[int, ...]
    detector_nodes: Tuple[int, ...]
    footprint_half_width: int = 0

    def __post_init__(self):
        self.source_nodes = tuple(int(i) for i in self.source_nodes)
        self.detector_nodes = tuple(int(i) for i in self.detector_nodes)
        if len(set(self.source_nodes)) != len(self.source_nodes):
            raise ValueError("source nodes must be pairwise distinct")
        if len(set(self.detector_nodes)) != len(self.detector_nodes):
            raise ValueError("detector nodes must be pairwise distinct")
        if not self.source_nodes or not self.detector_nodes:
            raise ValueError("layout needs at least one source and one detector")
        if self.footprint_half_width < 0:
            raise ValueError("footprint half-width must be non-negative")

    @property
    def n_src(self) -> int:
        return len(self.source_nodes)

    @property
    def n_det(self) -> int:
        return len(self.detector_nodes)

    @classmethod
    def uniform(cls, domain: DomainSpec, n_src: int, n_det: int,
                footprint_half_width: int = 0) -> 'SourceDetectorLayout':
        """Evenly spaced sources on top; detectors split between top and bottom.

        Positions are chosen in physical coordinates and snapped to the nearest
        node, so nested grids share positions. A top detector whose node holds
        a source moves to the nearest free surface node; a collocated reading
        is dominated by light leaving the surface at the source.

        Args:
            domain: Grid description
            n_src: Number of sources
            n_det: Number of detectors (ceil half on top, floor half on bottom)
            footprint_half_width: Footprint half-width in nodes

        Returns:
            Layout
        """
        if n_src < 1 or n_det < 1:
            raise ValueError("need at least one source and one detector")
        n_top = (n_det + 1) // 2
        n_bottom = n_det // 2

        def positions(count: int) -> np.ndarray:
            # fractional column index of evenly spaced points
            return 2.0 * domain.half_width * np.arange(1, count + 1) / (count + 1) / domain.h

        def columns(count: int) -> List[int]:
            return [int(np.rint(x)) for x in positions(count)]

        source_columns = columns(n_src)
        taken = set(source_columns)
        top_columns = []
        for x in positions(n_top):
            free = [ix for ix in range(1, domain.nx - 1) if ix not in taken]
            if not free:
                raise ValueError("not enough surface nodes for separate sources and top detectors")
            ix = min(free, key=lambda c: (abs(c - x), c))
            taken.add(ix)
            top_columns.append(ix)

        sources = [domain.node_index(ix, domain.nz - 1) for ix in source_columns]
        detectors = [domain.node_index(ix, domain.nz - 1) for ix in top_columns]
        detectors += [domain.node_index(ix, 0) for ix in columns(n_bottom)] if n_bottom else []
        return cls(tuple(sources), tuple(detectors), footprint_half_width)

    def describe(self) -> Dict:
        return {
            'source_nodes': list(self.source_nodes),
            'detector_nodes': list(self.detector_nodes),
            'footprint_half_width': int(self.footprint_half_width),
        }


@dataclass
class DiscreteOperators:
    """Assembled matrices of the DAE system (1/ν) E ẏ = −A(p) y + B u, m = C y."""

    domain: DomainSpec
    layout: SourceDetectorLayout
    E: np.ndarray
    A0: sparse.csr_matrix
    B: sparse.csc_matrix
    C: sparse.csr_matrix
    masks: Dict[str, np.ndarray] = field(repr=False)

    @property
    def n(self) -> int:
        return self.domain.n

    @property
    def n_src(self) -> int:
        return self.B.shape[1]

    @property
    def n_det(self) -> int:
        return self.C.shape[0]

    @property
    def grid_hash(self) -> str:
        """Identifies the mesh and layout; bases are only valid for a matching hash."""
        return grid_hash(self.domain, self.layout)

    def system_matrix(self, a1: np.ndarray, omega: float) -> sparse.csr_matrix:
        """(iω/ν) E + A₀ + diag(A₁); real when ω = 0 and A₁ is real."""
        a1 = np.asarray(a1)
        if a1.shape != (self.n,):
            raise ValueError(f"absorption diagonal must have length {self.n}, got {a1.shape}")
        diagonal = a1 + (1j * omega / self.domain.speed_of_light) * self.E if omega != 0 else a1
        return (self.A0 + sparse.diags(diagonal)).tocsr()


def grid_hash(domain: DomainSpec, layout: SourceDetectorLayout) -> str:
    """SHA-256 of the canonical mesh and layout description."""
    return canonical_hash({'domain': domain.describe(), 'layout': layout.describe()})


def frequency_grid(values: Sequence[float]) -> np.ndarray:
    """Validate a list of angular frequencies (rad/s).

    Raises:
        ValueError: Empty, non-finite or not strictly increasing
    """
    freqs = np.asarray(list(values), dtype=float)
    if freqs.ndim != 1 or freqs.size < 1:
        raise ValueError("frequency grid needs at least one frequency")
    if not np.all(np.isfinite(freqs)):
        raise ValueError("frequencies must be finite")
    if np.any(np.diff(freqs) <= 0):
        raise ValueError("frequencies must be sorted and distinct")
    return freqs


def _face_diffusion(d_a: np.ndarray, d_b: np.ndarray) -> np.ndarray:
    return 2.0 * d_a * d_b / (d_a + d_b)


def _footprint(domain: DomainSpec, node: int, half_width: int) -> np.ndarray:
    iz, ix = divmod(node, domain.nx)
    columns = np.arange(max(ix - half_width, 0), min(ix + half_width, domain.nx - 1) + 1)
    return iz * domain.nx + columns


def assemble(domain: DomainSpec, layout: SourceDetectorLayout) -> DiscreteOperators:
    """Assemble E, A₀, B and C for the 5-point finite-difference discretization.

    Interior rows carry the h²-scaled stencil of −∇·(D∇·). Lateral nodes are
    Dirichlet: identity rows whose couplings are eliminated from their
    neighbours so A₀ stays symmetric. Top and bottom rows encode the Robin
    condition η + 2𝒜D ∂η/∂ξ = 0 with a one-sided difference, scaled so that the
    coupling to the node below/above mirrors the interior entry; E vanishes
    on these rows (the algebraic part of the DAE).

    Args:
        domain: Grid description
        layout: Source and detector placement

    Returns:
        Assembled operators

    Raises:
        ValueError: Layout index off the surface
    """
    n, nx, nz, h = domain.n, domain.nx, domain.nz, domain.h
    masks = domain.masks()
    top, bottom, lateral = masks['top'], masks['bottom'], masks['lateral']

    for node in layout.source_nodes:
        if not 0 <= node < n or not top[node]:
            raise ValueError(f"source node {node} is not on the top surface")
    for node in layout.detector_nodes:
        if not 0 <= node < n or not (top[node] or bottom[node]):
            raise ValueError(f"detector node {node} is not on the top or bottom surface")

    d_field = domain.diffusion_field().ravel()
    index = np.arange(n).reshape(nz, nx)
    diag = np.zeros(n)
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []

    # Horizontal edges exist only in the PDE rows; vertical edges everywhere.
    edges = [
        (index[1:-1, :-1].ravel(), index[1:-1, 1:].ravel()),
        (index[:-1, :].ravel(), index[1:, :].ravel()),
    ]
    for a, b in edges:
        d_face = _face_diffusion(d_field[a], d_field[b])
        a_active = ~lateral[a]
        b_active = ~lateral[b]
        np.add.at(diag, a[a_active], d_face[a_active])
        np.add.at(diag, b[b_active], d_face[b_active])
        coupled = a_active & b_active
        rows += [a[coupled], b[coupled]]
        cols += [b[coupled], a[coupled]]
        vals += [-d_face[coupled], -d_face[coupled]]

    # Robin rows: s·η_t + D_f (η_t − η_k) = 0 with s = D_f h / (2𝒜 D_t)
    surface = np.flatnonzero(top | bottom)
    inward = np.where(top[surface], surface - nx, surface + nx)
    d_face = _face_diffusion(d_field[surface], d_field[inward])
    diag[surface] += d_face * h / (2.0 * domain.robin_constant * d_field[surface])

    diag[lateral] = 1.0

    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A0 = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(n, n)).tocsr()
    A0.sum_duplicates()

    E = np.full(n, h * h)
    E[top | bottom] = 0.0

    b_rows, b_cols, b_vals = [], [], []
    for j, node in enumerate(layout.source_nodes):
        footprint = _footprint(domain, node, layout.footprint_half_width)
        b_rows.append(footprint)
        b_cols.append(np.full(footprint.size, j))
        b_vals.append(np.full(footprint.size, 1.0 / footprint.size))
    B = sparse.csc_matrix((np.concatenate(b_vals), (np.concatenate(b_rows), np.concatenate(b_cols))),
                          shape=(n, layout.n_src))

    c_rows, c_cols, c_vals = [], [], []
    for i, node in enumerate(layout.detector_nodes):
        footprint = _footprint(domain, node, layout.footprint_half_width)
        weights = np.ones(footprint.size)
        if footprint.size > 1:
            weights[[0, -1]] = 0.5
        c_rows.append(np.full(footprint.size, i))
        c_cols.append(footprint)
        c_vals.append(weights / weights.sum())
    C = sparse.csr_matrix((np.concatenate(c_vals), (np.concatenate(c_rows), np.concatenate(c_cols))),
                          shape=(layout.n_det, n))

    logger.info(f"Assembled {nx}x{nz} grid: n = {n}, nnz(A0) = {A0.nnz}, "
                f"{layout.n_src} sources, {layout.n_det} detectors")
    return DiscreteOperators(domain=domain, layout=layout, E=E, A0=A0, B=B, C=C, masks=masks)


def stack_responses(blocks: Sequence[np.ndarray]) -> np.ndarray:
    """Stack per-frequency n_det×n_src responses into the measurement vector 𝕄.

    Entry ((i_src·n_ω + j_ω)·n_det + i_det) holds Ψ(ω_j)[i_det, i_src].
    """
    cube = np.stack([np.asarray(b, dtype=complex) for b in blocks], axis=0)
    return cube.transpose(2, 0, 1).ravel()


def unstack_responses(vector: np.ndarray, n_det: int, n_src: int, n_omega: int) -> List[np.ndarray]:
    """Inverse of stack_responses."""
    cube = np.asarray(vector).reshape(n_src, n_omega, n_det).transpose(1, 2, 0)
    return [cube[j] for j in range(n_omega)]


def stack_jacobians(blocks: Sequence[np.ndarray], n_det: int, n_src: int) -> np.ndarray:
    """Stack per-frequency (n_det·n_src)×ℓ Jacobian blocks in measurement order.

    Each block's rows are ordered i_src·n_det + i_det.
    """
    n_omega = len(blocks)
    ell = blocks[0].shape[1]
    cube = np.stack([np.asarray(b).reshape(n_src, n_det, ell) for b in blocks], axis=1)
    return cube.reshape(n_src * n_omega * n_det, ell)


def _derivative_columns(d_a1, n: int) -> sparse.csc_matrix:
    if sparse.issparse(d_a1):
        matrix = sparse.csc_matrix(d_a1)
    elif isinstance(d_a1, (list, tuple)):
        matrix = sparse.csc_matrix(np.column_stack([np.asarray(v) for v in d_a1])) if d_a1 else \
            sparse.csc_matrix((n, 0))
    else:
        dense = np.asarray(d_a1)
        matrix = sparse.csc_matrix(dense[:, None] if dense.ndim == 1 else dense)
    if matrix.shape[0] != n:
        raise ValueError(f"derivative diagonals must have {n} rows, got {matrix.shape[0]}")
    return matrix


class ForwardSolver:
    """Full-order forward solves with solve accounting."""

    def __init__(self, ops: DiscreteOperators, method: str = 'iterative',
                 tolerance: float = 1e-10, max_iterations: Optional[int] = None,
                 counters: Optional[CostCounters] = None):
        """Initialize the forward solver.

        Args:
            ops: Assembled operators
            method: 'iterative', 'direct' or 'dense'
            tolerance: Relative residual tolerance of the iterative solvers
            max_iterations: Iteration cap (default 10·n)
            counters: Shared counters (a private instance if omitted)
        """
        self.ops = ops
        self.method = method
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.counters = counters if counters is not None else CostCounters()

    def _solve(self, a1: np.ndarray, omega: float, rhs: np.ndarray, transpose: bool, label: str) -> np.ndarray:
        K = self.ops.system_matrix(a1, omega)
        X = solve_columns(K, rhs, method=self.method, tol=self.tolerance,
                          maxiter=self.max_iterations, transpose=transpose,
                          context=f"{label} at omega={omega:g}")
        self.counters.record_large_solves(rhs.shape[1])
        logger.debug(f"{label}: {rhs.shape[1]} solves of size {self.ops.n} at omega={omega:g}")
        return X

    def states(self, a1: np.ndarray, omega: float) -> np.ndarray:
        """X with ((iω/ν)E + A₀ + diag(A₁)) X = B, one counted solve per source."""
        return self._solve(a1, omega, self.ops.B.toarray(), False, "forward")

    def frequency_response(self, a1: np.ndarray, omega: float,
                           return_states: bool = False):
        """Ψ(ω) = C X; real when ω = 0 and A₁ is real.

        Args:
            a1: Absorption diagonal A₁(p)
            omega: Angular frequency
            return_states: Also return the state matrix X

        Returns:
            n_det×n_src response, or (response, X)
        """
        X = self.states(a1, omega)
        psi = self.ops.C @ X
        if not np.all(np.isfinite(psi)):
            raise ValueError("frequency response is not finite")
        return (psi, X) if return_states else psi

    def adjoint_solutions(self, a1: np.ndarray, omega: float) -> np.ndarray:
        """Z with ((iω/ν)E + A₀ + diag(A₁))ᵀ Z = Cᵀ, one counted solve per detector.

        The system matrix is complex symmetric, so the transpose is taken
        without conjugation.
        """
        return self._solve(a1, omega, self.ops.C.T.toarray(), True, "adjoint")


def full_jacobian_block(ops: DiscreteOperators, a1: np.ndarray, d_a1, omega: float,
                        X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Adjoint Jacobian of Ψ(ω; p) with respect to all parameters.

    Entry (i_src·n_det + i_det, k) equals −Z[:, i_det]ᵀ diag(∂A₁/∂p_k) X[:, i_src];
    only the support of each derivative diagonal is touched.

    Args:
        ops: Assembled operators
        a1: Absorption diagonal at p (for consistency checks)
        d_a1: Derivative diagonals, sparse n×ℓ matrix, dense array or list of vectors
        omega: Angular frequency the states were computed at
        X: States from frequency_response at (ω, p)
        Z: Adjoint solutions at (ω, p)

    Returns:
        Complex (n_det·n_src)×ℓ matrix

    Raises:
        ValueError: Dimension mismatch
    """
    n = ops.n
    if np.shape(a1) != (n,):
        raise ValueError("absorption diagonal has the wrong length")
    if X.shape != (n, ops.n_src):
        raise ValueError(f"X must be {n}x{ops.n_src}, got {X.shape}")
    if Z.shape != (n, ops.n_det):
        raise ValueError(f"Z must be {n}x{ops.n_det}, got {Z.shape}")
    derivatives = _derivative_columns(d_a1, n)

    ell = derivatives.shape[1]
    J = np.zeros((ops.n_det * ops.n_src, ell), dtype=complex)
    for k in range(ell):
        start, end = derivatives.indptr[k], derivatives.indptr[k + 1]
        if start == end:
            continue
        support = derivatives.indices[start:end]
        weights = derivatives.data[start:end]
        block = -Z[support].T @ (weights[:, None] * X[support])
        J[:, k] = block.ravel(order='F')
    return J


def frequency_response(ops: DiscreteOperators, a1: np.ndarray, omega: float,
                       method: str = 'iterative', tolerance: float = 1e-10) -> np.ndarray:
    """Convenience wrapper around ForwardSolver.frequency_response."""
    return ForwardSolver(ops, method=method, tolerance=tolerance).frequency_response(a1, omega)


def adjoint_solutions(ops: DiscreteOperators, a1: np.ndarray, omega: float,
                      method: str = 'iterative', tolerance: float = 1e-10) -> np.ndarray:
    """Convenience wrapper around ForwardSolver.adjoint_solutions."""
    return ForwardSolver(ops, method=method, tolerance=tolerance).adjoint_solutions(a1, omega)


def dump_operators(ops: DiscreteOperators, directory: str) -> List[str]:
    """Write A₀, E, B and C as coordinate lists ("row col value" per line).

    Args:
        ops: Assembled operators
        directory: Output directory

    Returns:
        Written file paths
    """
    ensure_directory(directory)
    matrices = {
        'A0': ops.A0,
        'E': sparse.diags(ops.E),
        'B': ops.B,
        'C': ops.C,
    }
    paths = []
    for name, matrix in matrices.items():
        coo = sparse.coo_matrix(matrix)
        order = np.lexsort((coo.col, coo.row))
        table = np.column_stack([coo.row[order], coo.col[order], coo.data[order]])
        path = os.path.join(directory, f"{name}.coo.txt")
        np.savetxt(path, table, fmt=['%d', '%d', '%.17g'])
        paths.append(path)
    logger.info(f"Dumped operators to {directory}")
    return paths
