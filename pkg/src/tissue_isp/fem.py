"""Dynamic corotational FEM for a 2D sheet.

Positions are in mm, forces in N, moduli in MPa (N/mm^2, unit thickness) and
time in seconds. Each substep linearizes the elastic and grasp-spring forces
at the current configuration and solves the backward-Euler velocity update
with a conjugate-gradient loop that is allowed to stop before convergence.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from tissue_isp.errors import ConfigError, ParameterError, SimulationDiverged
from tissue_isp.mesh import TissueMesh

# impulses (N s) below this are floating-point noise of an equilibrium state
RHS_ROUNDOFF = 1e-12


@dataclass(frozen=True)
class MaterialParams:
    young_modulus: float = 0.9  # MPa
    poisson_ratio: float = 0.49
    density: float = 1000.0  # mg/mm^2 surrogate, lumped to nodes
    rayleigh_mass: float = 10.0  # 1/s
    rayleigh_stiffness: float = 0.01  # s
    spring_stiffness_ks: float = 1e4  # N/mm

    def __post_init__(self):
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ParameterError("poisson_ratio must lie in (0, 0.5)")
        if not self.young_modulus > 0:
            raise ParameterError("young_modulus must be positive")
        if not self.density > 0:
            raise ParameterError("density must be positive")
        if not self.spring_stiffness_ks > 0:
            raise ParameterError("spring_stiffness_ks must be positive")
        if self.rayleigh_mass < 0 or self.rayleigh_stiffness < 0:
            raise ParameterError("damping coefficients must be non-negative")

    @property
    def nodal_mass_density(self) -> float:
        # mg -> N s^2 / mm (1 N s^2/mm = 1e9 mg)
        return self.density * 1e-9


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.01
    substeps_per_control: int = 10
    max_cg_iterations: int = 50
    cg_tolerance: float = 1e-9

    def __post_init__(self):
        if not self.dt > 0:
            raise ParameterError("dt must be positive")
        if self.substeps_per_control < 1:
            raise ParameterError("substeps_per_control must be >= 1")
        if self.max_cg_iterations < 1:
            raise ParameterError("max_cg_iterations must be >= 1")
        if not 0.0 < self.cg_tolerance < 1.0:
            raise ParameterError("cg_tolerance must lie in (0, 1)")


@dataclass
class SimState:
    positions: np.ndarray  # (n, 2) mm
    velocities: np.ndarray  # (n, 2) mm/s
    grasp_targets: dict[int, np.ndarray]
    rest_positions: np.ndarray
    time: float = 0.0
    # last valid per-element rotation angle, reused for inverted elements
    rotations: np.ndarray | None = None

    def copy(self) -> "SimState":
        return SimState(
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            grasp_targets={k: np.array(v, dtype=float) for k, v in self.grasp_targets.items()},
            rest_positions=self.rest_positions,
            time=self.time,
            rotations=None if self.rotations is None else self.rotations.copy(),
        )


@dataclass(frozen=True)
class StepReport:
    cg_iterations_used: int
    converged: bool
    residual: float
    inverted_elements: int = 0


def rest_state(mesh: TissueMesh) -> SimState:
    rest = mesh.node_positions
    return SimState(
        positions=rest.copy(),
        velocities=np.zeros_like(rest),
        grasp_targets={},
        rest_positions=rest,
        time=0.0,
    )


def set_grasp_targets(state: SimState, mesh: TissueMesh, targets: dict) -> None:
    for node in targets:
        if node in mesh.fixed_nodes:
            raise ConfigError(f"node {node} is fixed and cannot be grasped")
    state.grasp_targets = {int(k): np.asarray(v, dtype=float).reshape(2) for k, v in targets.items()}


# --------------------------------------------------------------------------
# element precomputation


@dataclass(eq=False)
class _ElementData:
    grad_n: np.ndarray  # (E, 3, 2) shape-function gradients at rest
    area: np.ndarray  # (E,)
    rest_local: np.ndarray  # (E, 6)
    dm_inv: np.ndarray  # (E, 2, 2)
    dofs: np.ndarray  # (E, 6)
    lumped_area: np.ndarray  # (n,) sum of area/3 per node
    free_mask: np.ndarray  # (2n,) 1.0 on free dofs
    csr_indptr: np.ndarray
    csr_indices: np.ndarray
    coo_to_csr: np.ndarray
    nnz: int
    diag_pos: np.ndarray  # CSR slot of each diagonal entry
    free_pair: np.ndarray  # 1.0 where both row and column dofs are free
    ke_unit: dict = field(default_factory=dict)  # keyed by (E, nu)


_ELEMENT_CACHE: "weakref.WeakKeyDictionary[TissueMesh, _ElementData]" = weakref.WeakKeyDictionary()


def _element_data(mesh: TissueMesh) -> _ElementData:
    data = _ELEMENT_CACHE.get(mesh)
    if data is not None:
        return data
    tri = mesh.triangles
    X = mesh.node_positions[tri]  # (E, 3, 2)
    dm = np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]], axis=2)  # columns are edges
    det = dm[:, 0, 0] * dm[:, 1, 1] - dm[:, 0, 1] * dm[:, 1, 0]
    area = 0.5 * det
    dm_inv = np.linalg.inv(dm)
    # dN_a/dX for a = 1, 2 are the rows of dm_inv; N_0 = 1 - N_1 - N_2
    g12 = dm_inv  # (E, 2, 2): row a-1 is grad N_a
    g0 = -(g12[:, 0] + g12[:, 1])
    grad_n = np.stack([g0, g12[:, 0], g12[:, 1]], axis=1)
    dofs = np.stack([2 * tri[:, k // 2] + (k % 2) for k in range(6)], axis=1)

    n = mesh.n_nodes
    lumped = np.zeros(n)
    np.add.at(lumped, tri.ravel(), np.repeat(area / 3.0, 3))

    free = np.ones(2 * n)
    for k in mesh.fixed_nodes:
        free[2 * k : 2 * k + 2] = 0.0

    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    # map every COO entry to its CSR slot by assembling a pattern once
    pattern = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(2 * n, 2 * n))
    pattern.sum_duplicates()
    pattern.sort_indices()
    indptr, indices = pattern.indptr, pattern.indices
    row_of = np.repeat(np.arange(2 * n), np.diff(indptr))
    key_csr = row_of * (2 * n) + indices
    key_coo = rows * (2 * n) + cols
    coo_to_csr = np.searchsorted(key_csr, key_coo)
    diag_pos = np.searchsorted(key_csr, np.arange(2 * n) * (2 * n + 1))
    free_pair = free[row_of] * free[indices]

    data = _ElementData(
        grad_n=grad_n,
        area=area,
        rest_local=X.reshape(-1, 6),
        dm_inv=dm_inv,
        dofs=dofs,
        lumped_area=lumped,
        free_mask=free,
        csr_indptr=indptr,
        csr_indices=indices,
        coo_to_csr=coo_to_csr,
        nnz=indices.size,
        diag_pos=diag_pos,
        free_pair=free_pair,
    )
    _ELEMENT_CACHE[mesh] = data
    return data


def plane_stress_matrix(young: float, nu: float) -> np.ndarray:
    c = young / (1.0 - nu * nu)
    return c * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]])


def strain_displacement(grad_n: np.ndarray) -> np.ndarray:
    """Constant-strain B matrices (E, 3, 6) for engineering strain."""
    E = grad_n.shape[0]
    B = np.zeros((E, 3, 6))
    for a in range(3):
        B[:, 0, 2 * a] = grad_n[:, a, 0]
        B[:, 1, 2 * a + 1] = grad_n[:, a, 1]
        B[:, 2, 2 * a] = grad_n[:, a, 1]
        B[:, 2, 2 * a + 1] = grad_n[:, a, 0]
    return B


def element_stiffness(mesh: TissueMesh, young: float, nu: float) -> np.ndarray:
    """Rest-frame linear stiffness matrices, shape (E, 6, 6)."""
    data = _element_data(mesh)
    key = (float(young), float(nu))
    ke = data.ke_unit.get(key)
    if ke is None:
        B = strain_displacement(data.grad_n)
        D = plane_stress_matrix(young, nu)
        ke = data.area[:, None, None] * np.einsum("eki,kl,elj->eij", B, D, B)
        data.ke_unit.clear()
        data.ke_unit[key] = ke
    return ke


def linear_stiffness_matrix(mesh: TissueMesh, mat: MaterialParams) -> sp.csr_matrix:
    """Global small-strain stiffness (no rotation), for reference checks."""
    data = _element_data(mesh)
    ke = element_stiffness(mesh, mat.young_modulus, mat.poisson_ratio)
    return _assemble(data, ke, 2 * mesh.n_nodes)


def _assemble(data: _ElementData, blocks: np.ndarray, ndof: int) -> sp.csr_matrix:
    vals = np.bincount(data.coo_to_csr, weights=blocks.ravel(), minlength=data.nnz)
    return sp.csr_matrix((vals, data.csr_indices, data.csr_indptr), shape=(ndof, ndof))


def _rotation_blocks(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    R = np.zeros((theta.size, 6, 6))
    for a in range(3):
        i = 2 * a
        R[:, i, i] = c
        R[:, i, i + 1] = -s
        R[:, i + 1, i] = s
        R[:, i + 1, i + 1] = c
    return R


def element_rotations(state: SimState, mesh: TissueMesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-element rotation angle of the deformation gradient's polar factor.

    Returns ``(theta, inverted)``; inverted elements keep the rotation stored
    in ``state.rotations`` (zero if none is stored yet).
    """
    data = _element_data(mesh)
    x = state.positions[mesh.triangles]
    ds = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=2)
    F = ds @ data.dm_inv
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    theta = np.arctan2(F[:, 1, 0] - F[:, 0, 1], F[:, 0, 0] + F[:, 1, 1])
    inverted = det <= 0.0
    if np.any(inverted):
        prev = state.rotations if state.rotations is not None else np.zeros_like(theta)
        theta = np.where(inverted, prev, theta)
    return theta, inverted


class TangentStiffness:
    """Assembled corotational tangent ``sum_e R_e K_e R_e^T`` (SPD on free dofs)."""

    def __init__(self, matrix: sp.csr_matrix):
        self.matrix = matrix

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u


def internal_forces(state: SimState, mesh: TissueMesh, mat: MaterialParams):
    """Corotational elastic forces and tangent stiffness.

    Returns ``(forces, tangent, theta, n_inverted)`` with ``forces`` shaped
    like ``state.positions``.
    """
    data = _element_data(mesh)
    ke = element_stiffness(mesh, mat.young_modulus, mat.poisson_ratio)
    theta, inverted = element_rotations(state, mesh)
    R = _rotation_blocks(theta)
    xe = state.positions[mesh.triangles].reshape(-1, 6)
    local = np.einsum("eji,ej->ei", R, xe) - data.rest_local
    f_loc = np.einsum("eij,ej->ei", ke, local)
    f_el = -np.einsum("eij,ej->ei", R, f_loc)
    forces = np.bincount(data.dofs.ravel(), weights=f_el.ravel(), minlength=2 * mesh.n_nodes)
    rk = R @ ke @ R.transpose(0, 2, 1)
    K = _assemble(data, rk, 2 * mesh.n_nodes)
    return forces.reshape(-1, 2), TangentStiffness(K), theta, int(inverted.sum())


def grasp_spring_forces(state: SimState, mat: MaterialParams) -> np.ndarray:
    f = np.zeros_like(state.positions)
    for node, target in state.grasp_targets.items():
        f[node] = mat.spring_stiffness_ks * (target - state.positions[node])
    return f


def cg_solve(apply_A, b: np.ndarray, max_iter: int, tol: float):
    """Conjugate gradients from ``x = 0`` with an iteration cap.

    The final iterate is returned whether or not the relative residual reached
    ``tol``; the report says which. Residuals are the recursively updated ones.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, StepReport(0, True, 0.0)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    rel = 1.0
    it = 0
    while it < max_iter:
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0 or not np.isfinite(pAp):
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rr_new = float(r @ r)
        rel = np.sqrt(rr_new) / bnorm
        if rel <= tol:
            return x, StepReport(it, True, rel)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, StepReport(it, bool(rel <= tol), float(rel))


def lumped_mass(mesh: TissueMesh, mat: MaterialParams) -> np.ndarray:
    """Diagonal mass per dof (length 2n)."""
    data = _element_data(mesh)
    return np.repeat(mat.nodal_mass_density * data.lumped_area, 2)


def implicit_system(state: SimState, mesh: TissueMesh, mat: MaterialParams, cfg: SolverConfig):
    """Linearized backward-Euler system restricted to free dofs.

    Returns ``(A, rhs, theta, n_inverted)``. ``A = M + dt C + dt^2 K`` with
    Rayleigh damping ``C = a M + b K_el`` and ``K = K_el + K_spring``; fixed
    dofs get identity rows/columns and a zero right-hand side.
    """
    data = _element_data(mesh)
    dt = cfg.dt
    f_int, K_el, theta, n_inv = internal_forces(state, mesh, mat)
    f_ext = grasp_spring_forces(state, mat)
    m = lumped_mass(mesh, mat)
    spring_diag = np.zeros(2 * mesh.n_nodes)
    for node in state.grasp_targets:
        spring_diag[2 * node : 2 * node + 2] = mat.spring_stiffness_ks

    a, bcoef = mat.rayleigh_mass, mat.rayleigh_stiffness
    Kmat = K_el.matrix
    free = data.free_mask
    kcoef = dt * bcoef + dt * dt
    vals = kcoef * Kmat.data * data.free_pair
    vals[data.diag_pos] += (m * (1.0 + dt * a) + dt * dt * spring_diag) * free + (1.0 - free)
    A = sp.csr_matrix((vals, Kmat.indices, Kmat.indptr), shape=Kmat.shape)

    v = state.velocities.ravel()
    Kv = Kmat @ v
    f = (f_int + f_ext).ravel()
    rhs = dt * (f - a * m * v - bcoef * Kv) - dt * dt * (Kv + spring_diag * v)
    return A, rhs * free, theta, n_inv


def step(state: SimState, mesh: TissueMesh, mat: MaterialParams, cfg: SolverConfig):
    """One backward-Euler substep. Returns ``(new_state, report)``.

    The state advances with the CG iterate even when the solver hit its
    iteration cap.
    """
    # blow-ups surface as SimulationDiverged below, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        A, rhs, theta, n_inv = implicit_system(state, mesh, mat, cfg)
        if np.linalg.norm(rhs) < RHS_ROUNDOFF:
            rhs = np.zeros_like(rhs)
        dv, rep = cg_solve(A.dot, rhs, cfg.max_cg_iterations, cfg.cg_tolerance)
        free = _element_data(mesh).free_mask.reshape(-1, 2)
        v_new = (state.velocities + dv.reshape(-1, 2)) * free
        x_new = state.positions + cfg.dt * v_new
    if not (np.all(np.isfinite(v_new)) and np.all(np.isfinite(x_new))):
        raise SimulationDiverged("non-finite values in FEM solution", last_state=state)
    fixed = sorted(mesh.fixed_nodes)
    x_new[fixed] = state.rest_positions[fixed]
    new = SimState(
        positions=x_new,
        velocities=v_new,
        grasp_targets=state.grasp_targets,
        rest_positions=state.rest_positions,
        time=state.time + cfg.dt,
        rotations=theta,
    )
    if n_inv:
        rep = replace(rep, inverted_elements=n_inv)
    return new, rep


def residual_force(state: SimState, mesh: TissueMesh, mat: MaterialParams) -> float:
    """Largest unbalanced nodal force component on free dofs (N)."""
    f_int, _, _, _ = internal_forces(state, mesh, mat)
    f = (f_int + grasp_spring_forces(state, mat)).ravel() * _element_data(mesh).free_mask
    return float(np.max(np.abs(f)))


def settle(
    state: SimState,
    mesh: TissueMesh,
    mat: MaterialParams,
    cfg: SolverConfig,
    max_substeps: int = 10000,
    velocity_tol: float = 1e-6,
    force_tol: float = 1e-6,
) -> SimState:
    """Step until nodal speeds drop below ``velocity_tol``.

    A motionless state with unbalanced forces (e.g. freshly moved grasp
    targets) is not considered settled, so ``force_tol`` is checked too.
    """
    cur = state
    for _ in range(max_substeps):
        speed = float(np.max(np.linalg.norm(cur.velocities, axis=1)))
        if speed < velocity_tol and residual_force(cur, mesh, mat) < force_tol:
            break
        cur, _ = step(cur, mesh, mat, cfg)
    return cur
