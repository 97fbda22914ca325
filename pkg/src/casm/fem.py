"""Two-material steady heat conduction on [-1, 1]^2 with P1 triangles.

The design field ``theta`` (one value per element) mixes two conductivities,
``k = k1 * theta + k2 * (1 - theta)``. The thermal energy (heat compliance)
``E = 1/2 int k |grad u|^2`` plays the role of the expensive constraint.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import splu

log = logging.getLogger(__name__)

K1 = 2.0
K2 = 1.0


def heat_source(x, y):
    """``56 (1 - |x| - |y|)^6`` inside the diamond ``|x| + |y| <= 1``, zero outside.

    The power is even, so the formula without the cutoff would also be
    nonnegative outside; the cutoff keeps the source compactly supported.
    """
    r = np.maximum(1.0 - np.abs(x) - np.abs(y), 0.0)
    return 56.0 * r**6


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    elements: np.ndarray
    boundary_vertices: np.ndarray
    n: int = 0

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def areas(self):
        p = self.vertices[self.elements]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def centroids(self):
        return self.vertices[self.elements].mean(axis=1)

    def edges(self):
        e = np.concatenate([self.elements[:, [0, 1]], self.elements[:, [1, 2]], self.elements[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def digest(self):
        h = hashlib.sha1()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.elements).tobytes())
        return h.hexdigest()

    def to_csv(self, path):
        rows = np.column_stack([np.arange(self.n_elements), self.elements])
        np.savetxt(path, rows, fmt="%d", delimiter=",", header="element,v0,v1,v2", comments="")


def build_mesh(n):
    """Structured ``n x n`` mesh of [-1, 1]^2, every square cut along the same diagonal.

    Vertex ``(i, j)`` has index ``j * (n + 1) + i``. Square ``(i, j)`` yields
    elements ``(v00, v10, v11)`` and ``(v00, v11, v01)``, both counterclockwise.
    """
    n = int(n)
    if n < 2:
        raise ValueError("mesh needs n >= 2")
    t = np.linspace(-1.0, 1.0, n + 1)
    X, Y = np.meshgrid(t, t)  # row j is y = t[j]
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    v00 = j * (n + 1) + i
    v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.stack([lower, upper], axis=1).reshape(-1, 3)
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    on_bd = (ii == 0) | (jj == 0) | (ii == n) | (jj == n)
    return TriMesh(vertices, elements, np.flatnonzero(on_bd.ravel()), n)


def design_field(mesh, theta):
    """Validated per-element design vector, clamped to [0, 1]."""
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (mesh.n_elements,)).copy()
    if not np.all(np.isfinite(theta)):
        raise ValueError("design field has non-finite entries")
    return np.clip(theta, 0.0, 1.0)


def write_design_csv(path, theta):
    rows = np.column_stack([np.arange(theta.size), theta])
    np.savetxt(path, rows, fmt=["%d", "%.17e"], delimiter=",", header="element,theta", comments="")


def design_grid(mesh, theta):
    """Square-averaged field as an ``n x n`` array (row ``j`` is the ``j``-th row of squares from y = -1)."""
    return theta.reshape(mesh.n, mesh.n, 2).mean(axis=2)


def write_design_grid(path, mesh, theta):
    np.savetxt(path, design_grid(mesh, theta)[::-1], fmt="%.6f")


def _gradients(mesh):
    """Constant gradients of the three P1 basis functions on every element (E x 3 x 2)."""
    p = mesh.vertices[mesh.elements]
    x, y = p[..., 0], p[..., 1]
    area2 = 2.0 * mesh.areas
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    return np.stack([b, c], axis=-1) / area2[:, None, None]


def load_vector(mesh, source=heat_source):
    """``int f phi_a`` by the edge-midpoint rule (exact when ``f`` is affine)."""
    p = mesh.vertices[mesh.elements]
    mids = np.stack([(p[:, 0] + p[:, 1]) / 2, (p[:, 1] + p[:, 2]) / 2, (p[:, 2] + p[:, 0]) / 2], axis=1)
    fm = source(mids[..., 0], mids[..., 1])
    # basis a is 1/2 at the two midpoints on its edges and 0 at the opposite one
    w = mesh.areas[:, None] / 3.0
    local = w * 0.5 * np.stack([fm[:, 0] + fm[:, 2], fm[:, 0] + fm[:, 1], fm[:, 1] + fm[:, 2]], axis=1)
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.elements, local)
    return out


def conductivity(theta, k1=K1, k2=K2):
    return k1 * theta + k2 * (1.0 - theta)


def stiffness(mesh, kappa):
    g = _gradients(mesh)
    local = np.einsum("eai,ebi->eab", g, g) * (kappa * mesh.areas)[:, None, None]
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _state_hash(mesh, theta, k1, k2):
    h = hashlib.sha1(mesh.digest().encode())
    h.update(np.ascontiguousarray(theta, dtype=float).tobytes())
    h.update(np.array([k1, k2], dtype=float).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class FemSolution:
    u: np.ndarray
    energy: float
    assembled_for: str
    load: np.ndarray = field(repr=False, default=None)
    residual: float = 0.0


_DENSE_LIMIT = 1200


def assemble_solve(mesh, theta, k1=K1, k2=K2, source=heat_source):
    """Galerkin P1 solution with ``u = 0`` on the boundary.

    Interior unknowns are solved with a dense Cholesky factorization up to
    1200 unknowns and a sparse LU beyond that.
    """
    if not (k1 > 0 and k2 > 0):
        raise ValueError("conductivities must be positive")
    theta = design_field(mesh, theta)
    A = stiffness(mesh, conductivity(theta, k1, k2))
    l = load_vector(mesh, source)
    free = np.setdiff1d(np.arange(mesh.n_vertices), mesh.boundary_vertices)
    Aff = A[free][:, free]
    u = np.zeros(mesh.n_vertices)
    if free.size <= _DENSE_LIMIT:
        Ad = Aff.toarray()
        try:
            u[free] = cho_solve(cho_factor(Ad, lower=True), l[free])
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("stiffness matrix is singular") from exc
    else:
        u[free] = splu(Aff.tocsc()).solve(l[free])
    nl = np.linalg.norm(l[free])
    res = float(np.linalg.norm(Aff @ u[free] - l[free]) / nl) if nl > 0 else 0.0
    if res > 1e-10:
        raise np.linalg.LinAlgError(f"linear solve residual {res:.2e} above 1e-10")
    sol = FemSolution(u, 0.0, _state_hash(mesh, theta, k1, k2), l, res)
    e = _element_energy(sol, mesh, theta, k1, k2).sum()
    return FemSolution(u, float(e), sol.assembled_for, l, res)


def _check(sol, mesh, theta, k1, k2):
    theta = design_field(mesh, theta)
    if sol.assembled_for != _state_hash(mesh, theta, k1, k2):
        raise ValueError("stale solution: it was assembled for a different mesh, design or conductivities")
    return theta


def _grad_sq(sol, mesh):
    gu = np.einsum("eai,ea->ei", _gradients(mesh), sol.u[mesh.elements])
    return np.sum(gu * gu, axis=1)


def _element_energy(sol, mesh, theta, k1, k2):
    return 0.5 * conductivity(theta, k1, k2) * _grad_sq(sol, mesh) * mesh.areas


def energy(sol, mesh, theta, k1=K1, k2=K2):
    """``1/2 sum_e k_e |grad u|^2 area_e``."""
    theta = _check(sol, mesh, theta, k1, k2)
    return float(_element_energy(sol, mesh, theta, k1, k2).sum())


def compliance(sol):
    """``1/2 l^T u``, which equals :func:`energy` for the Galerkin solution."""
    return 0.5 * float(sol.load @ sol.u)


def volume(mesh, theta):
    return float(np.sum(design_field(mesh, theta) * mesh.areas))


def energy_gradient(sol, mesh, theta, k1=K1, k2=K2):
    """Adjoint gradient ``dE/dtheta_e = -1/2 (k1 - k2) |grad u|^2 area_e``.

    The problem is self-adjoint, so the adjoint state is ``u`` itself and
    ``dE/dtheta = 1/2 u^T dl - 1/2 u^T dA u`` reduces to the element term.
    """
    _check(sol, mesh, theta, k1, k2)
    return -0.5 * (k1 - k2) * _grad_sq(sol, mesh) * mesh.areas


class ThermalModel:
    """Energy and volume as functions of the design, with a one-entry solve cache."""

    def __init__(self, n=16, k1=K1, k2=K2, source=heat_source):
        self.mesh = build_mesh(n)
        self.k1, self.k2, self.source = k1, k2, source
        self.solves = 0
        self._last = (None, None)

    @property
    def dim(self):
        return self.mesh.n_elements

    def solve(self, theta):
        theta = design_field(self.mesh, theta)
        key = theta.tobytes()
        if self._last[0] != key:
            self._last = (key, assemble_solve(self.mesh, theta, self.k1, self.k2, self.source))
            self.solves += 1
        return self._last[1]

    def energy(self, theta):
        return self.solve(theta).energy

    def energy_and_grad(self, theta):
        theta = design_field(self.mesh, theta)
        sol = self.solve(theta)
        return sol.energy, energy_gradient(sol, self.mesh, theta, self.k1, self.k2)

    def volume(self, theta):
        return volume(self.mesh, theta)

    def volume_and_grad(self, theta):
        return self.volume(theta), self.mesh.areas.copy()
