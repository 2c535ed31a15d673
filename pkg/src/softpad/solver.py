"""Implicit local-global time stepper with unilateral frictional contact.

Each step minimises the implicit-Euler incremental potential of the
corotational pad by alternating

* a local step: per-tet nearest rotation of the deformation gradient;
* a contact step: the active contact set fixes coordinates of touching
  vertices to the collider surface (stick) or lets them slide under a
  Coulomb friction load (slip); rigid ballistic colliders enter the global
  system as extra translational unknowns so impacts are two-way coupled;
* a global step: a sparse SPD solve of the reduced system.

The global matrix is ``M/dt^2 + (1 + beta/dt) L(s)`` with ``L(s)`` the
corotational Laplacian ``sum_e 2 s_e mu V_e G_e^T G_e``.  It is the same for
the three coordinates, so only scalar n x n systems are factorised.  The
factorisation is computed for a reference set of rate factors and reused
as a preconditioner while the current factors stay within
``refactor_ratio`` of it.

Contact reactions are the KKT multipliers ``A x - b`` of the constrained
coordinates, so the momentum balance closes exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .errors import ConfigError, SolverAbort
from .material import MaterialParams, rate_multiplier
from .mesh import TetMesh

log = logging.getLogger(__name__)

HALF_SPACE = "half-space"
SPHERE = "sphere"
BOX = "box"
FIXED = "fixed"
BALLISTIC = "ballistic"
# relative friction-cone violation tolerated before the slip iteration stops
SLIP_TOL = 1e-3
# fraction of vertices whose constraint may change before a fresh factorisation
BORROW_FRACTION = 0.02
# PCG with a borrowed preconditioner must shrink its step by this factor
STALL_RATIO = 0.5


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-4
    local_global_iters: int = 20
    linear_iters: int = 30
    contact_tol: float = 1e-5
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    seed: int = 0
    # early exit / convergence flag: max nodal position change between iterations (m)
    residual_tol: float = 1e-7
    # rotation refinement sweeps per local step; rotations are warm-started across iterations
    rotation_iters: int = 2
    rate_tau: float = 1e-3
    rate_cap: float = 1e4
    refactor_ratio: float = 1.5
    max_contact_passes: int = 8

    def __post_init__(self):
        g = self.gravity
        if isinstance(g, (int, float)):
            object.__setattr__(self, "gravity", (0.0, 0.0, -float(g)))
        else:
            object.__setattr__(self, "gravity", tuple(float(v) for v in g))
            if len(self.gravity) != 3:
                raise ConfigError("gravity must be a scalar or a 3-vector", field="gravity")
        if not self.dt > 0:
            raise ConfigError(f"dt must be > 0, got {self.dt}", field="dt")
        if self.local_global_iters < 1:
            raise ConfigError("local_global_iters must be >= 1", field="local_global_iters")
        if self.rotation_iters < 1:
            raise ConfigError("rotation_iters must be >= 1", field="rotation_iters")
        if self.linear_iters < 1:
            raise ConfigError("linear_iters must be >= 1", field="linear_iters")
        if not self.contact_tol > 0:
            raise ConfigError("contact_tol must be > 0", field="contact_tol")
        if not self.refactor_ratio > 1:
            raise ConfigError("refactor_ratio must be > 1", field="refactor_ratio")


def _quat_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Collider:
    """Analytic rigid collider.

    Half-spaces pass through ``position`` with outward normal ``R(orientation) e_z``.
    Half-space normals and box axes must be aligned with the world axes.
    """

    kind: str
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    radius: float = 0.0
    half_extents: tuple[float, float, float] = (0.0, 0.0, 0.0)
    motion: str = FIXED
    mass: float = 0.0
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    friction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "half_extents", tuple(float(v) for v in self.half_extents))
        if self.kind not in (HALF_SPACE, SPHERE, BOX):
            raise ConfigError(f"unknown collider kind {self.kind!r}", field="kind")
        if self.motion not in (FIXED, BALLISTIC):
            raise ConfigError(f"unknown collider motion {self.motion!r}", field="motion")
        if self.motion == BALLISTIC and not self.mass > 0:
            raise ConfigError("ballistic collider needs mass > 0", field="mass")
        q = np.asarray(self.orientation, dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ConfigError("collider orientation must be a unit quaternion", field="orientation")
        if self.kind == SPHERE and not self.radius > 0:
            raise ConfigError("sphere radius must be > 0", field="radius")
        if self.kind == BOX and not all(h > 0 for h in self.half_extents):
            raise ConfigError("box half extents must be > 0", field="half_extents")
        if self.friction < 0:
            raise ConfigError("friction must be >= 0", field="friction")
        if self.kind in (HALF_SPACE, BOX):
            R = _quat_matrix(q)
            if not np.allclose(np.abs(R), np.round(np.abs(R)), atol=1e-9):
                raise ConfigError(f"{self.kind} colliders must be axis-aligned", field="orientation")

    @property
    def normal(self) -> np.ndarray:
        n = _quat_matrix(self.orientation) @ np.array([0.0, 0.0, 1.0])
        return np.round(n) if self.kind == HALF_SPACE else n

    def moved(self, position, velocity) -> "Collider":
        return replace(self, position=tuple(position), velocity=tuple(velocity))

    def query(self, points: np.ndarray, position=None):
        """Signed distance, unit normal and normal axis (-1 when not axis-aligned).

        Negative distance means penetration.
        """
        c = np.asarray(self.position if position is None else position, dtype=float)
        p = np.atleast_2d(points) - c
        k = len(p)
        if self.kind == HALF_SPACE:
            n = self.normal
            axis = int(np.argmax(np.abs(n)))
            phi = p @ n
            return phi, np.tile(n, (k, 1)), np.full(k, axis)
        if self.kind == SPHERE:
            d = np.linalg.norm(p, axis=1)
            safe = np.where(d > 0, d, 1.0)
            n = np.where(d[:, None] > 0, p / safe[:, None], np.array([0.0, 0.0, 1.0]))
            return d - self.radius, n, np.full(k, -1)
        R = _quat_matrix(self.orientation)
        local = p @ R
        h = np.asarray(self.half_extents)
        excess = np.abs(local) - h
        inside = np.all(excess < 0, axis=1)
        axis_local = np.argmax(excess, axis=1)
        outside_d = np.linalg.norm(np.maximum(excess, 0.0), axis=1)
        phi = np.where(inside, excess.max(axis=1), outside_d)
        sign = np.sign(local[np.arange(k), axis_local])
        sign[sign == 0] = 1.0
        n_local = np.zeros((k, 3))
        n_local[np.arange(k), axis_local] = sign
        n = n_local @ R.T
        axis = np.argmax(np.abs(n), axis=1)
        return phi, n, axis

    def surface_offset(self, points: np.ndarray, position=None) -> np.ndarray:
        """Closest surface point relative to the collider position."""
        c = np.asarray(self.position if position is None else position, dtype=float)
        phi, n, _ = self.query(points, c)
        return np.atleast_2d(points) - c - phi[:, None] * n


@dataclass
class ContactSet:
    """Active contacts sorted by (vertex, collider)."""

    vertex: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    collider: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    penetration: np.ndarray = field(default_factory=lambda: np.zeros(0))
    normal: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normal_force: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tangential_force: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.vertex)

    @property
    def tangential_magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.tangential_force, axis=1)

    def select(self, mask) -> "ContactSet":
        return ContactSet(
            self.vertex[mask],
            self.collider[mask],
            self.penetration[mask],
            self.normal[mask],
            self.normal_force[mask],
            self.tangential_force[mask],
        )

    def total_normal(self, collider: int | None = None, vertices=None) -> float:
        mask = np.ones(len(self), dtype=bool)
        if collider is not None:
            mask &= self.collider == collider
        if vertices is not None:
            mask &= np.isin(self.vertex, vertices)
        return float(self.normal_force[mask].sum())


@dataclass
class _Active:
    """Solver-internal active contact records (one per constrained vertex)."""

    vertex: np.ndarray
    collider: np.ndarray
    axis: np.ndarray  # normal axis, -1 for sphere contacts
    stick: np.ndarray  # False while the anchor is being dragged along (slip)
    offset: np.ndarray  # anchor: prescribed position relative to the collider position

    @classmethod
    def empty(cls) -> "_Active":
        return cls(
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=bool),
            np.zeros((0, 3)),
        )

    def __len__(self) -> int:
        return len(self.vertex)

    def copy(self) -> "_Active":
        return _Active(*(np.array(a, copy=True) for a in (self.vertex, self.collider, self.axis, self.stick, self.offset)))

    def keep(self, mask) -> None:
        for name in ("vertex", "collider", "axis", "stick", "offset"):
            setattr(self, name, getattr(self, name)[mask])

    def add(self, vertex, collider, axis, offset) -> None:
        k = len(vertex)
        self.vertex = np.concatenate([self.vertex, vertex])
        self.collider = np.concatenate([self.collider, collider])
        self.axis = np.concatenate([self.axis, axis])
        self.stick = np.concatenate([self.stick, np.ones(k, dtype=bool)])
        self.offset = np.concatenate([self.offset, offset])
        order = np.lexsort((self.collider, self.vertex))
        self.keep(order)


@dataclass
class SimState:
    time: float
    positions: np.ndarray
    velocities: np.ndarray
    element_rates: np.ndarray
    contacts: ContactSet
    colliders: tuple[Collider, ...]
    rotations: np.ndarray = field(repr=False, default=None)
    active: _Active = field(repr=False, default=None)
    step_index: int = 0

    def collider_positions(self) -> np.ndarray:
        return np.array([c.position for c in self.colliders]).reshape(-1, 3)


@dataclass
class ConvergenceReport:
    step: int
    time: float
    residual: float
    iterations: int
    passes: int
    contact_count: int
    max_penetration: float
    converged: bool
    refactored: bool

    CSV_HEADER = "step,time,residual,contact_count,max_penetration"

    def csv_row(self) -> str:
        return f"{self.step},{float(self.time)!r},{float(self.residual)!r},{self.contact_count},{float(self.max_penetration)!r}"


class GlobalSystem:
    """Sparse corotational Laplacian with cheap per-element reweighting."""

    def __init__(self, mesh: TetMesh, params: MaterialParams, config: SolverConfig):
        self.n = mesh.n_vertices
        self.dt = config.dt
        self.damping = params.damping
        self.masses = mesh.vertex_masses(params.density)
        tets = mesh.tets
        X = mesh.vertices
        Dm = np.stack([X[tets[:, k]] - X[tets[:, 0]] for k in (1, 2, 3)], axis=-1)
        vol = np.linalg.det(Dm) / 6.0
        if np.any(vol <= 0):
            raise ConfigError("mesh has inverted or degenerate tets", field="mesh")
        Dm_inv = np.linalg.inv(Dm)
        g = np.empty((len(tets), 4, 3))
        g[:, 1:, :] = Dm_inv
        g[:, 0, :] = -Dm_inv.sum(axis=1)
        self.g = np.ascontiguousarray(g)
        self.volumes = vol
        mu = params.shear_modulus
        self.base_weights = mu * vol
        # per-tet 4x4 blocks of 2 mu V g_a.g_b
        blocks = 2.0 * self.base_weights[:, None, None] * np.einsum("eac,ebc->eab", g, g)
        rows = np.repeat(tets, 4, axis=1).ravel()
        cols = np.tile(tets, (1, 4)).ravel()
        diag = np.arange(self.n)
        all_rows = np.concatenate([rows, diag])
        all_cols = np.concatenate([cols, diag])
        pattern = sp.coo_matrix((np.ones(len(all_rows)), (all_rows, all_cols)), shape=(self.n, self.n)).tocsr()
        pattern.sum_duplicates()
        pattern.sort_indices()
        self.indptr = pattern.indptr
        self.indices = pattern.indices
        self.nnz = pattern.nnz
        # map each COO contribution onto its CSR slot
        lookup = sp.csr_matrix((np.arange(self.nnz, dtype=np.float64), self.indices, self.indptr), shape=(self.n, self.n))
        self.slot = np.asarray(lookup[rows, cols]).ravel().astype(np.int64)
        self.diag_slot = np.asarray(lookup[diag, diag]).ravel().astype(np.int64)
        self.block_values = np.ascontiguousarray(blocks.reshape(len(tets), 16))
        if not np.all(self.masses > 0):
            raise ConfigError("mesh has vertices with zero mass (orphans)", field="mesh")

    def laplacian(self, s: np.ndarray) -> sp.csr_matrix:
        data = np.empty(self.nnz)
        _kernels.scatter_blocks(self.slot, self.block_values, np.ascontiguousarray(s, dtype=float), data)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def matrix(self, s: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Return ``(A, L)`` for rate factors ``s``."""
        L = self.laplacian(s)
        data = (1.0 + self.damping / self.dt) * L.data
        data[self.diag_slot] += self.masses / self.dt**2
        A = sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))
        return A, L

    def weights(self, s: np.ndarray) -> np.ndarray:
        return self.base_weights * s


def assemble(mesh: TetMesh, params: MaterialParams, config: SolverConfig) -> sp.csr_matrix:
    """Baseline global matrix ``M/dt^2 + (1 + beta/dt) L`` at zero strain rate."""
    system = GlobalSystem(mesh, params, config)
    A, L = system.matrix(np.ones(mesh.n_tets))
    if not np.any(L.data):
        raise ConfigError("global system has no stiffness")
    return A


@dataclass
class _Reduced:
    """Operator for ``x = P z + x0`` with z = [free vertices, ballistic bodies]."""

    P: sp.csr_matrix
    PT: sp.csr_matrix
    free: np.ndarray
    bodies: tuple[int, ...]
    body_mass: np.ndarray
    factor: object
    status: np.ndarray | None = None
    # when ``factor`` is None the preconditioner borrows a nearby set's factor
    donor: "_Reduced | None" = None
    src: np.ndarray | None = None
    dst: np.ndarray | None = None
    diag: np.ndarray | None = None
    stalled: bool = False

    def precondition(self, r: np.ndarray) -> np.ndarray:
        if self.factor is not None:
            return self.factor.solve(r)
        out = r / self.diag[:, None]
        rd = np.zeros((self.donor.P.shape[1], r.shape[1]))
        rd[self.dst] = r[self.src]
        out[self.src] = self.donor.factor.solve(rd)[self.dst]
        return out


def detect_contacts(state: SimState, colliders=None, config: SolverConfig | None = None) -> ContactSet:
    """Vertices within ``contact_tol`` of any collider, ordered by (vertex, collider)."""
    config = config or SolverConfig()
    colliders = state.colliders if colliders is None else colliders
    rows = []
    for cid, col in enumerate(colliders):
        phi, n, _ = col.query(state.positions)
        hit = np.nonzero(phi <= config.contact_tol)[0]
        for v in hit:
            rows.append((int(v), cid, float(-phi[v]), n[v]))
    rows.sort(key=lambda r: (r[0], r[1]))
    if not rows:
        return ContactSet()
    return ContactSet(
        np.array([r[0] for r in rows], dtype=np.int64),
        np.array([r[1] for r in rows], dtype=np.int64),
        np.array([r[2] for r in rows]),
        np.array([r[3] for r in rows]),
        np.zeros(len(rows)),
        np.zeros((len(rows), 3)),
    )


def project_contacts(contacts: ContactSet, state: SimState, config: SolverConfig, masses=None):
    """Per-vertex position projection with Coulomb friction (lumped-mass contact step).

    Moves each penetrating vertex back to the surface along the contact normal
    and removes its tangential motion relative to the collider while that
    correction stays inside the friction cone (stick); otherwise the
    tangential correction is capped at ``mu`` times the normal correction
    (slip).  Forces are the constraint impulses over dt.  The motion over the
    step is measured from ``positions - dt * velocities``.

    Returns ``(positions, normal_force, tangential_force)``.
    """
    dt = config.dt
    x = np.array(state.positions, dtype=float, copy=True)
    prev = x - dt * np.asarray(state.velocities, dtype=float)
    m = np.ones(len(x)) if masses is None else np.asarray(masses, dtype=float)
    fn = np.zeros(len(contacts))
    ft = np.zeros((len(contacts), 3))
    for j, (v, cid) in enumerate(zip(contacts.vertex, contacts.collider)):
        col = state.colliders[cid]
        phi, n, _ = col.query(x[v : v + 1])
        phi, n = float(phi[0]), n[0]
        if phi >= 0:
            continue
        dn = -phi
        x[v] += dn * n
        motion = x[v] - prev[v] - dt * np.asarray(col.velocity)
        tang = motion - (motion @ n) * n
        tn = np.linalg.norm(tang)
        limit = col.friction * dn
        corr = tang if tn <= limit else tang * (limit / tn)
        x[v] -= corr
        fn[j] = m[v] * dn / dt**2
        ft[j] = -m[v] * corr / dt**2
    return x, fn, ft


class Solver:
    """Single-writer simulation instance; not shared between threads."""

    def __init__(self, mesh: TetMesh, params: MaterialParams, config: SolverConfig | None = None):
        self.mesh = mesh
        self.params = params
        self.config = config or SolverConfig()
        self.system = GlobalSystem(mesh, params, self.config)
        self.tets = np.ascontiguousarray(mesh.tets)
        self.gravity = np.asarray(self.config.gravity, dtype=float)
        self._s_ref = None
        self._A_ref = None
        self._cache: dict = {}
        self._donor: _Reduced | None = None
        # deformation gradients of the last returned positions, reused as the next F_old
        self._last_F = None
        # (reduced system, matrix, K 1) for the translation correction
        self._translation = None
        self._rhs = np.zeros((mesh.n_vertices, 3))
        self.refactor_count = 0

    # ------------------------------------------------------------------ state
    def initial_state(self, colliders=(), velocities=None, positions=None) -> SimState:
        n = self.mesh.n_vertices
        x = np.array(self.mesh.vertices if positions is None else positions, dtype=float, copy=True)
        v = np.zeros((n, 3)) if velocities is None else np.broadcast_to(np.asarray(velocities, float), (n, 3)).copy()
        R = np.tile(np.eye(3), (self.mesh.n_tets, 1, 1))
        return SimState(0.0, x, v, np.zeros(self.mesh.n_tets), ContactSet(), tuple(colliders), R, _Active.empty(), 0)

    def deformation_gradients(self, x: np.ndarray) -> np.ndarray:
        F = np.empty((self.mesh.n_tets, 3, 3))
        _kernels.deformation_gradients(np.ascontiguousarray(x), self.tets, self.system.g, F)
        return F

    def rate_factors(self, rates: np.ndarray) -> np.ndarray:
        rates = np.minimum(rates, self.config.rate_cap)
        return np.atleast_1d(rate_multiplier(rates, self.params)) * np.ones(self.mesh.n_tets)

    def elastic_energy(self, state: SimState) -> float:
        w = self.system.weights(self.rate_factors(state.element_rates))
        R = state.rotations.copy()
        rhs = np.zeros_like(state.positions)
        return float(_kernels.local_step(state.positions, self.tets, self.system.g, w, R, rhs, 100, 1e-14))

    def kinetic_energy(self, state: SimState) -> float:
        ke = 0.5 * float(np.sum(self.system.masses[:, None] * state.velocities**2))
        for c in state.colliders:
            if c.motion == BALLISTIC:
                ke += 0.5 * c.mass * float(np.dot(c.velocity, c.velocity))
        return ke

    def momentum(self, state: SimState) -> np.ndarray:
        p = (self.system.masses[:, None] * state.velocities).sum(axis=0)
        for c in state.colliders:
            if c.motion == BALLISTIC:
                p = p + c.mass * np.asarray(c.velocity)
        return p

    # ------------------------------------------------------------- internals
    def _refresh(self, s: np.ndarray) -> bool:
        if self._s_ref is not None:
            ratio = s / self._s_ref
            if ratio.max() <= self.config.refactor_ratio and ratio.min() >= 1.0 / self.config.refactor_ratio:
                return False
        self._s_ref = s.copy()
        self._A_ref, _ = self.system.matrix(self._s_ref)
        self._cache.clear()
        self._donor = None
        self.refactor_count += 1
        return True

    def _reduced(self, fixed: np.ndarray, glued: tuple, body_mass: np.ndarray) -> _Reduced:
        key = (fixed.tobytes(), tuple((k, g.tobytes()) for k, g in glued))
        hit = self._cache.get(key)
        if hit is not None and not (hit.factor is None and hit.stalled):
            return hit
        n = self.system.n
        status = np.full(n, -1, dtype=np.int64)
        status[fixed] = -2
        for k, g in glued:
            status[g] = k
        free = np.nonzero(status == -1)[0]
        nf = len(free)
        rows = [free] + [g for _, g in glued]
        cols = [np.arange(nf)] + [np.full(len(g), nf + i) for i, (_, g) in enumerate(glued)]
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        ncols = nf + len(glued)
        P = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, ncols))
        PT = P.T.tocsr()
        bodies = tuple(k for k, _ in glued)
        red = _Reduced(P, PT, free, bodies, body_mass, None, status)
        donor = self._donor
        changed = int(np.count_nonzero(status != donor.status)) if donor is not None else n
        if ncols == 0:
            pass
        elif hit is None and donor is not None and changed <= BORROW_FRACTION * n:
            self._borrow(red, donor, glued)
        else:
            K = (PT @ self._A_ref @ P).tocsc()
            if len(glued):
                K = (K + sp.diags(np.concatenate([np.zeros(nf), body_mass / self.config.dt**2]))).tocsc()
            red.factor = spla.splu(K, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
            self._donor = red
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = red
        return red

    def _borrow(self, red: _Reduced, donor: _Reduced, glued: tuple) -> None:
        """Precondition with ``donor``'s factor on the unknowns both sets share."""
        nf = len(red.free)
        diag = np.empty(red.P.shape[1])
        diag[:nf] = self._A_ref.diagonal()[red.free]
        for i, (_, g) in enumerate(glued):
            diag[nf + i] = self._A_ref[g][:, g].sum() + red.body_mass[i] / self.config.dt**2
        # free vertices free in both sets
        dpos = np.full(self.system.n, -1, dtype=np.int64)
        dpos[donor.free] = np.arange(len(donor.free))
        mapped = dpos[red.free]
        src = [np.nonzero(mapped >= 0)[0]]
        dst = [mapped[mapped >= 0]]
        # bodies present in both sets
        for i, k in enumerate(red.bodies):
            if k in donor.bodies:
                src.append(np.array([nf + i]))
                dst.append(np.array([len(donor.free) + donor.bodies.index(k)]))
        red.donor = donor
        red.src = np.concatenate(src)
        red.dst = np.concatenate(dst)
        red.diag = diag

    def _solve_reduced(self, red: _Reduced, A: sp.csr_matrix, rhs: np.ndarray, z0: np.ndarray, exact: bool):
        """Direct solve on the reference factorisation, or PCG preconditioned by it.

        PCG runs on all coordinate columns at once and stops once the
        update is far below the local-global tolerance. A borrowed
        preconditioner that runs out of iterations marks the set as stalled.
        """
        if red.P.shape[1] == 0:
            return z0
        if exact and red.factor is not None:
            return red.factor.solve(rhs)
        nf = len(red.free)
        dtm = (red.body_mass / self.config.dt**2)[:, None]

        def apply(v):
            out = red.PT @ (A @ (red.P @ v))
            out[nf:] += dtm * v[nf:]
            return out

        tol = 0.1 * self.config.residual_tol
        z = z0.copy()
        r = rhs - apply(z)
        y = red.precondition(r)
        p = y.copy()
        ry = np.einsum("ij,ij->j", r, y)
        first = None
        for it in range(self.config.linear_iters):
            Ap = apply(p)
            pAp = np.einsum("ij,ij->j", p, Ap)
            alpha = np.divide(ry, pAp, out=np.zeros_like(ry), where=pAp > 0)
            step = alpha * p
            z += step
            size = float(np.abs(step).max())
            first = size if first is None else first
            if size <= tol:
                break
            if it == self.config.linear_iters - 1:
                # a borrowed preconditioner that barely contracts earns a factorisation
                red.stalled = red.factor is None and size > STALL_RATIO * first
                break
            r -= alpha * Ap
            y = red.precondition(r)
            ry_new = np.einsum("ij,ij->j", r, y)
            beta = np.divide(ry_new, ry, out=np.zeros_like(ry), where=ry > 0)
            p = y + beta * p
            ry = ry_new
        # Galerkin correction along a rigid translation: restores exact momentum
        # balance that a truncated PCG would otherwise leak
        cached = self._translation
        if cached is not None and cached[0] is red and cached[1] is A:
            k1 = cached[2]
        else:
            # K is symmetric, so K 1 turns 1^T K z into a dot product
            k1 = apply(np.ones((z.shape[0], 1)))[:, 0]
            self._translation = (red, A, k1)
        uAu = float(k1.sum())
        if uAu > 0:
            z += (rhs.sum(axis=0) - k1 @ z) / uAu
        return z

    def _build(self, active: _Active, colliders, ballistic, body_mass_all):
        is_body = np.array([c.motion == BALLISTIC for c in colliders], dtype=bool)
        on_body = is_body[active.collider] if len(active) else np.zeros(0, dtype=bool)
        fixed = active.vertex[~on_body]
        glued = []
        for k in ballistic:
            gv = active.vertex[active.collider == k]
            if len(gv):
                glued.append((k, gv))
        body_mass = np.array([body_mass_all[k] for k, _ in glued])
        return self._reduced(fixed, tuple(glued), body_mass), on_body

    # ----------------------------------------------------------------- step
    def step(self, state: SimState) -> tuple[SimState, ConvergenceReport]:
        cfg = self.config
        dt = cfg.dt
        n = self.mesh.n_vertices
        masses = self.system.masses
        colliders = state.colliders
        mu_c = np.array([c.friction for c in colliders]) if colliders else np.zeros(0)
        ballistic = [k for k, c in enumerate(colliders) if c.motion == BALLISTIC]
        body_mass_all = np.array([c.mass for c in colliders]) if colliders else np.zeros(0)

        s = self.rate_factors(state.element_rates)
        refactored = self._refresh(s)
        exact = np.array_equal(s, self._s_ref)
        A, L = self.system.matrix(s)
        a_diag = A.diagonal()
        w = self.system.weights(s)

        x_n = state.positions
        v_n = state.velocities
        y = x_n + dt * v_n + dt * dt * self.gravity
        b_const = masses[:, None] * y / dt**2 + (self.params.damping / dt) * (L @ x_n)

        X_n = state.collider_positions()
        V_n = np.array([c.velocity for c in colliders]).reshape(-1, 3)
        X_star = X_n.copy()
        for k in ballistic:
            X_star[k] = X_n[k] + dt * V_n[k] + dt * dt * self.gravity
        X_new = X_star.copy()

        active = state.active.copy() if state.active is not None else _Active.empty()
        self._carry_slip(active, v_n, V_n, colliders)
        R = state.rotations.copy()
        x = y.copy()
        self._activate(active, x, X_new, colliders, set(), x_n, X_n)
        reactions = np.zeros((n, 3))
        released: set[int] = set()
        total_iters = 0
        residual = math.inf
        passes = 0
        changed = True
        while changed and passes < cfg.max_contact_passes:
            passes += 1
            red, on_body = self._build(active, colliders, ballistic, body_mass_all)
            nf = len(red.free)
            bodies = list(red.bodies)
            unglued = [k for k in ballistic if k not in bodies]
            for _ in range(cfg.local_global_iters):
                x_prev = x.copy()
                X_prev = X_new.copy()
                _kernels.local_step(x, self.tets, self.system.g, w, R, self._rhs, cfg.rotation_iters, 1e-12)
                b = b_const + self._rhs
                x0 = np.zeros((n, 3))
                if len(active):
                    base = np.where(on_body[:, None], 0.0, X_new[active.collider])
                    x0[active.vertex] = base + active.offset
                rhs = red.PT @ (b - A @ x0)
                for bi, k in enumerate(bodies):
                    rhs[nf + bi] += body_mass_all[k] / dt**2 * X_star[k]
                z0 = np.vstack([x[red.free], X_new[bodies]]) if bodies else x[red.free]
                z = self._solve_reduced(red, A, rhs, z0, exact)
                x = red.P @ z + x0
                for bi, k in enumerate(bodies):
                    X_new[k] = z[nf + bi]
                for k in unglued:
                    X_new[k] = X_star[k]
                reactions = A @ x - b
                slipping = self._return_map(active, reactions, a_diag, colliders, mu_c)
                total_iters += 1
                residual = float(np.abs(x - x_prev).max())
                if ballistic:
                    residual = max(residual, float(np.abs(X_new - X_prev).max()))
                if not np.isfinite(residual):
                    raise SolverAbort(f"non-finite positions at step {state.step_index + 1}", state=state)
                if residual <= cfg.residual_tol and not slipping:
                    break
            changed = self._complementarity(active, reactions, x, x_n, X_new, X_n, colliders, released)

        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(X_new))):
            raise SolverAbort(f"non-finite positions at step {state.step_index + 1}", state=state)

        contacts = self._contact_set(active, reactions, x, X_new, colliders, mu_c)
        max_pen = self._max_penetration(x, X_new, colliders)
        converged = residual <= cfg.residual_tol * 10 and not changed and max_pen <= cfg.contact_tol

        v_new = (x - x_n) / dt
        last = self._last_F
        F_old = last[1] if last is not None and last[0] is x_n else self.deformation_gradients(x_n)
        F_new = self.deformation_gradients(x)
        self._last_F = (x, F_new)
        raw = np.empty(self.mesh.n_tets)
        _kernels.strain_rates(F_new, F_old, dt, raw)
        raw = np.minimum(raw, cfg.rate_cap)
        alpha = 1.0 - math.exp(-dt / cfg.rate_tau)
        rates_new = state.element_rates + alpha * (raw - state.element_rates)

        new_colliders = tuple(
            c.moved(X_new[k], (X_new[k] - X_n[k]) / dt) if c.motion == BALLISTIC else c
            for k, c in enumerate(colliders)
        )
        new_state = SimState(
            time=(state.step_index + 1) * dt if state.time == state.step_index * dt else state.time + dt,
            positions=x,
            velocities=v_new,
            element_rates=rates_new,
            contacts=contacts,
            colliders=new_colliders,
            rotations=R,
            active=active,
            step_index=state.step_index + 1,
        )
        report = ConvergenceReport(
            step=new_state.step_index,
            time=new_state.time,
            residual=residual,
            iterations=total_iters,
            passes=passes,
            contact_count=len(contacts),
            max_penetration=max_pen,
            converged=bool(converged),
            refactored=refactored,
        )
        if not converged:
            log.debug("step %d not converged: residual %.3e passes %d", report.step, residual, passes)
        return new_state, report

    # ------------------------------------------------------------ contacts
    def _normals(self, active: _Active, colliders) -> np.ndarray:
        n = np.zeros((len(active), 3))
        if not len(active):
            return n
        sphere = active.axis < 0
        off = active.offset[sphere]
        n[sphere] = off / np.linalg.norm(off, axis=1)[:, None]
        j = np.nonzero(~sphere)[0]
        if len(j):
            a = active.axis[j]
            # half-spaces: fixed outward normal; boxes: the face on the anchor's side
            plane_sign = np.array(
                [c.normal[np.argmax(np.abs(c.normal))] if c.kind == HALF_SPACE else 0.0 for c in colliders]
            )
            is_plane = np.array([c.kind == HALF_SPACE for c in colliders])
            k = active.collider[j]
            side = np.where(active.offset[j, a] >= 0, 1.0, -1.0)
            n[j, a] = np.where(is_plane[k], plane_sign[k], side)
        return n

    def _carry_slip(self, active: _Active, v_n, V_n, colliders) -> None:
        """Advance anchors that were sliding by one step of their tangential slip velocity."""
        slip = ~active.stick
        if not slip.any():
            return
        normals = self._normals(active, colliders)[slip]
        rel = v_n[active.vertex[slip]] - V_n[active.collider[slip]]
        rel -= np.einsum("ij,ij->i", rel, normals)[:, None] * normals
        off = active.offset[slip] + self.config.dt * rel
        sphere = active.axis[slip] < 0
        if sphere.any():
            radius = np.array([colliders[c].radius for c in active.collider[slip][sphere]])
            o = off[sphere]
            off[sphere] = o * (radius / np.linalg.norm(o, axis=1))[:, None]
        active.offset[slip] = off

    def _return_map(self, active: _Active, reactions, a_diag, colliders, mu_c) -> bool:
        """Drag anchors whose tangential reaction leaves the friction cone.

        The anchor moves against the excess tangential reaction by
        ``excess / A_ii``.  The diagonal bounds the vertex's local stiffness
        from above, so the iteration approaches the cone without overshoot.
        """
        if not len(active):
            return False
        normals = self._normals(active, colliders)
        r = reactions[active.vertex]
        rn = np.einsum("ij,ij->i", r, normals)
        rt = r - rn[:, None] * normals
        rtn = np.linalg.norm(rt, axis=1)
        limit = mu_c[active.collider] * np.maximum(rn, 0.0)
        excess = rtn - limit
        scale = max(float(np.abs(rn).max()), 1e-300)
        slip = excess > 1e-10 * scale
        active.stick[:] = ~slip
        if not slip.any():
            return False
        shift = -(excess[slip] / a_diag[active.vertex[slip]])[:, None] * rt[slip] / rtn[slip, None]
        off = active.offset[slip] + shift
        sphere = active.axis[slip] < 0
        if sphere.any():
            radius = np.array([colliders[c].radius for c in active.collider[slip][sphere]])
            o = off[sphere]
            off[sphere] = o * (radius / np.linalg.norm(o, axis=1))[:, None]
        active.offset[slip] = off
        # keep iterating while any cone is violated by more than SLIP_TOL of its bound
        bound = np.maximum(limit[slip], 1e-9 * scale)
        return bool(np.any(excess[slip] > SLIP_TOL * bound)) or float(np.abs(shift).max()) > self.config.residual_tol

    def _complementarity(self, active: _Active, reactions, x, x_n, X_new, X_n, colliders, released) -> bool:
        changed = False
        if len(active):
            normals = self._normals(active, colliders)
            rn = np.einsum("ij,ij->i", reactions[active.vertex], normals)
            scale = max(float(np.abs(rn).max()), 1e-300)
            tensile = rn < -1e-9 * scale
            if tensile.any():
                released.update(int(v) for v in active.vertex[tensile])
                active.keep(~tensile)
                changed = True
        if self._activate(active, x, X_new, colliders, released, x_n, X_n):
            changed = True
        return changed

    def _activate(self, active: _Active, x, X, colliders, released, x_start, X_start) -> bool:
        """Constrain penetrating free vertices.

        The anchor is the vertex's start-of-step position in the collider
        frame, projected onto the surface, so activation adds no tangential
        motion.  Each vertex takes at most one collider, lowest id first.
        """
        added = False
        taken = np.zeros(len(x), dtype=bool)
        taken[active.vertex] = True
        for k, col in enumerate(colliders):
            phi, n, axis = col.query(x, X[k])
            hit = (phi < 0) & ~taken
            if released:
                rel = np.array(sorted(released), dtype=np.int64)
                rel = rel[phi[rel] > -self.config.contact_tol]
                hit[rel] = False
            idx = np.nonzero(hit)[0]
            if not len(idx):
                continue
            projected = x[idx] - X[k] - phi[idx, None] * n[idx]
            anchor = x_start[idx] - X_start[k]
            if col.kind == SPHERE:
                ax = np.full(len(idx), -1)
                norm = np.linalg.norm(anchor, axis=1)
                ok = norm > 1e-12 * col.radius
                offset = projected.copy()
                offset[ok] = anchor[ok] * (col.radius / norm[ok])[:, None]
            else:
                ax = axis[idx]
                offset = anchor.copy()
                rows = np.arange(len(idx))
                offset[rows, ax] = projected[rows, ax]
            active.add(idx, np.full(len(idx), k), ax.astype(np.int64), offset)
            taken[idx] = True
            added = True
        return added

    def _contact_set(self, active: _Active, reactions, x, X, colliders, mu_c) -> ContactSet:
        if not len(active):
            return ContactSet()
        normals = self._normals(active, colliders)
        r = reactions[active.vertex]
        rn = np.einsum("ij,ij->i", r, normals)
        rt = r - rn[:, None] * normals
        # report the cone-projected tangential force (the value the last return map enforces)
        rtn = np.linalg.norm(rt, axis=1)
        limit = mu_c[active.collider] * np.maximum(rn, 0.0)
        over = rtn > limit
        rt[over] *= (limit[over] / rtn[over])[:, None]
        pen = np.zeros(len(active))
        for k in np.unique(active.collider):
            sel = active.collider == k
            phi, _, _ = colliders[k].query(x[active.vertex[sel]], X[k])
            pen[sel] = -phi
        return ContactSet(active.vertex.copy(), active.collider.copy(), pen, normals, np.maximum(rn, 0.0), rt)

    def _max_penetration(self, x, X, colliders) -> float:
        worst = 0.0
        for k, col in enumerate(colliders):
            phi, _, _ = col.query(x, X[k])
            worst = max(worst, float(-phi.min()))
        return worst


def step(state: SimState, mesh: TetMesh, params: MaterialParams, colliders, config: SolverConfig):
    """One-shot convenience wrapper; long runs should keep a ``Solver``."""
    solver = Solver(mesh, params, config)
    if colliders is not None:
        state = replace(state, colliders=tuple(colliders))
    if state.rotations is None:
        state = replace(state, rotations=np.tile(np.eye(3), (mesh.n_tets, 1, 1)))
    if state.active is None:
        state = replace(state, active=_Active.empty())
    return solver.step(state)
