"""Finite element data for the Poisson and convection-diffusion heat problems.

Both problems live on the unit square with homogeneous Dirichlet conditions.
Boundary unknowns are eliminated, so every matrix returned here is indexed by
the interior vertices only (``FemSystem.free`` maps back to the mesh).

* Poisson: P1 elements on the grid cells split along their ``(0,0)-(1,1)``
  diagonal (``triangulation="criss_cross"`` alternates the diagonal in a
  checkerboard pattern instead), Gaussian sources evaluated at the vertices.
* Convection-diffusion: Q1 elements, wind ``w(x) = (2 x2 (1 - x1^2), -2 x1 (1 - x2^2))``,
  SUPG stabilization, piecewise constant sources on an ``m x m`` decomposition
  of the square.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp

POISSON = "poisson"
CONVECTION_DIFFUSION = "convection_diffusion"
KINDS = (POISSON, CONVECTION_DIFFUSION)

DEFAULT_OBS_BOX = (0.25, 0.5, 0.25, 0.5)

_ALIGN_TOL = 1e-12


@dataclass(frozen=True)
class StructuredMesh:
    """Uniform vertex grid on ``[0, 1]^2``.

    Vertex ``k = j * n_side + i`` sits at ``(i h, j h)``.
    """

    h: float
    n_side: int
    vertex_coords: np.ndarray
    quads: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray

    @property
    def N(self) -> int:
        return self.n_side**2

    @property
    def n_cells(self) -> int:
        return self.n_side - 1

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)


@dataclass(frozen=True)
class SourceLayout:
    """Control sources: centers plus the shape parameters shared by all of them."""

    centers: np.ndarray
    kappa: float = 100.0
    omega: float = 1.0
    grid_spacing: float = 1.0 / 6.0
    adjacency_radius: float = 0.2
    shape: str = "gaussian"

    def __post_init__(self):
        if self.kappa <= 0 or self.omega <= 0:
            raise ValueError("kappa and omega must be positive")
        if self.shape not in ("gaussian", "indicator"):
            raise ValueError(f"unknown source shape {self.shape!r}")

    @property
    def l(self) -> int:
        return len(self.centers)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Source values at ``points`` as a ``(len(points), l)`` array."""
        points = np.atleast_2d(points)
        if self.shape == "gaussian":
            d2 = ((points[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
            return self.kappa * np.exp(-d2 / self.omega)
        m = int(round(math.sqrt(self.l)))
        cell = np.clip(np.floor(points * m).astype(int), 0, m - 1)
        owner = cell[:, 1] * m + cell[:, 0]
        out = np.zeros((len(points), self.l))
        out[np.arange(len(points)), owner] = self.kappa
        return out


@dataclass(frozen=True)
class FemSystem:
    """Spatial matrices of one model problem, restricted to interior vertices."""

    M: sp.csr_matrix
    K: sp.csr_matrix
    Phi: np.ndarray
    C: sp.csr_matrix
    M_obs: sp.csr_matrix
    kind: str
    mesh: StructuredMesh
    layout: SourceLayout
    obs_box: tuple
    free: np.ndarray = field(repr=False)
    obs_vertices: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.M.shape[0]

    @property
    def l(self) -> int:
        return self.Phi.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def obs_mass(self) -> sp.csr_matrix:
        """``C^T M_obs C``, the spatial block of the tracking term."""
        return (self.C.T @ self.M_obs @ self.C).tocsr()


TRIANGULATIONS = ("uniform", "criss_cross")


def build_mesh(h: float, triangulation: str = "uniform") -> StructuredMesh:
    """Uniform mesh with step ``h``; ``1/h`` must be a power of two, at least 4."""
    if triangulation not in TRIANGULATIONS:
        raise ValueError(f"unknown triangulation {triangulation!r}")
    if h <= 0:
        raise ValueError("mesh step must be positive")
    inv = 1.0 / h
    n = int(round(inv))
    if abs(inv - n) > 1e-9 or n < 4 or n & (n - 1):
        raise ValueError(f"1/h must be a power of two >= 4, got h={h!r}")
    h = 1.0 / n
    n_side = n + 1
    x = np.arange(n_side) * h
    X, Y = np.meshgrid(x, x)
    coords = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    v00 = j * n_side + i
    v10 = v00 + 1
    v01 = v00 + n_side
    v11 = v01 + 1
    # counterclockwise: (0,0) (1,0) (1,1) (0,1)
    quads = np.column_stack([v00, v10, v11, v01])

    if triangulation == "uniform":
        flip = np.zeros(len(v00), dtype=bool)
    else:
        flip = (i + j) % 2 == 1
    t1 = np.where(flip[:, None], np.column_stack([v00, v10, v01]), np.column_stack([v00, v10, v11]))
    t2 = np.where(flip[:, None], np.column_stack([v10, v11, v01]), np.column_stack([v00, v11, v01]))
    triangles = np.vstack([t1, t2])

    ii, jj = np.meshgrid(np.arange(n_side), np.arange(n_side))
    boundary = ((ii == 0) | (jj == 0) | (ii == n) | (jj == n)).ravel()
    return StructuredMesh(h, n_side, coords, quads, triangles, boundary)


def gaussian_width_from_overlap(spacing: float, fraction: float) -> float:
    """Width ``omega`` such that a Gaussian drops to ``fraction`` of its peak at ``spacing``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    return spacing**2 / math.log(1.0 / fraction)


def default_layout(m: int = 5, kind: str = POISSON, kappa: float = 100.0,
                   overlap: float = 0.05, radius_factor: float = 1.2) -> SourceLayout:
    """Uniform ``m x m`` grid of sources.

    Gaussian sources sit at ``k / (m + 1)``; piecewise constant sources are the
    cells of an ``m x m`` decomposition with centers ``(k + 1/2) / m``.  The
    adjacency radius defaults to ``1.2`` grid spacings (``1/5`` for the 5x5
    Gaussian grid).
    """
    if kind == POISSON:
        spacing = 1.0 / (m + 1)
        ticks = np.arange(1, m + 1) * spacing
        shape = "gaussian"
    elif kind == CONVECTION_DIFFUSION:
        spacing = 1.0 / m
        ticks = (np.arange(m) + 0.5) * spacing
        shape = "indicator"
    else:
        raise ValueError(f"unknown problem kind {kind!r}")
    X, Y = np.meshgrid(ticks, ticks)
    centers = np.column_stack([X.ravel(), Y.ravel()])
    return SourceLayout(
        centers=centers,
        kappa=kappa,
        omega=gaussian_width_from_overlap(spacing, overlap),
        grid_spacing=spacing,
        adjacency_radius=radius_factor * spacing,
        shape=shape,
    )


def wind(points: np.ndarray) -> np.ndarray:
    """Wind field of the convection-diffusion problem."""
    points = np.atleast_2d(points)
    x1, x2 = points[:, 0], points[:, 1]
    return np.column_stack([2 * x2 * (1 - x1**2), -2 * x1 * (1 - x2**2)])


# ---------------------------------------------------------------------------
# element kernels


def _p1_local(coords: np.ndarray, tris: np.ndarray):
    p = coords[tris]  # (E, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * np.abs(det)
    # gradients of barycentric coordinates
    grads = np.empty((len(tris), 3, 2))
    grads[:, 1] = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
    grads[:, 2] = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    Ke = area[:, None, None] * np.einsum("eak,ebk->eab", grads, grads)
    Me = area[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))[None]
    return Me, Ke


def _scatter(elems: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    k = elems.shape[1]
    rows = np.repeat(elems, k, axis=1).ravel()
    cols = np.tile(elems, (1, k)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _gauss_1d(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _q1_reference(nq: int = 4):
    """Bilinear shape functions and gradients at tensor Gauss points on ``[0,1]^2``."""
    g, w = _gauss_1d(nq)
    xi, eta = np.meshgrid(g, g)
    xi, eta = xi.ravel(), eta.ravel()
    wq = np.outer(w, w).ravel()
    phi = np.column_stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])
    dxi = np.column_stack([-(1 - eta), (1 - eta), eta, -eta])
    deta = np.column_stack([-(1 - xi), -xi, xi, (1 - xi)])
    return np.column_stack([xi, eta]), wq, phi, np.stack([dxi, deta], axis=-1)


def supg_tau(wnorm: np.ndarray, h: float, diffusion: float = 1.0) -> np.ndarray:
    """Element SUPG parameter ``h/(2|w|) (coth(Pe) - 1/Pe)`` with ``Pe = |w| h / (2 nu)``.

    For small Peclet numbers the bracket is evaluated by its series ``Pe/3 - Pe^3/45``.
    """
    wnorm = np.asarray(wnorm, dtype=float)
    pe = wnorm * h / (2.0 * diffusion)
    tau = np.zeros_like(pe)
    small = pe < 1e-3
    big = ~small & (wnorm > 0)
    tau[big] = h / (2 * wnorm[big]) * (1.0 / np.tanh(pe[big]) - 1.0 / pe[big])
    # h/(2|w|) * Pe/3 = h^2 / (12 nu)
    ps = pe[small]
    tau[small] = h**2 / (4 * diffusion) * (1.0 / 3.0 - ps**2 / 45.0)
    return tau


def _q1_matrices(mesh: StructuredMesh, convection: bool):
    h = mesh.h
    ref, wq, phi, dphi = _q1_reference(4)
    quads = mesh.quads
    E = len(quads)
    Me1 = h**2 * np.einsum("q,qa,qb->ab", wq, phi, phi)
    Ke1 = np.einsum("q,qak,qbk->ab", wq, dphi, dphi)  # h^2 * (1/h)^2
    M = _scatter(quads, np.broadcast_to(Me1, (E, 4, 4)), mesh.N)
    Kloc = np.broadcast_to(Ke1, (E, 4, 4)).copy()
    if convection:
        origin = mesh.vertex_coords[quads[:, 0]]
        pts = origin[:, None, :] + h * ref[None, :, :]  # (E, Q, 2)
        wv = wind(pts.reshape(-1, 2)).reshape(E, -1, 2)
        # w . grad(phi_b) at each point, physical gradient = dphi / h
        wgrad = np.einsum("eqk,qbk->eqb", wv, dphi) / h
        conv = h**2 * np.einsum("q,qa,eqb->eab", wq, phi, wgrad)
        centre = wind(origin + 0.5 * h)
        tau = supg_tau(np.linalg.norm(centre, axis=1), h)
        stab = tau[:, None, None] * h**2 * np.einsum("q,eqa,eqb->eab", wq, wgrad, wgrad)
        Kloc += conv + stab
    K = _scatter(quads, Kloc, mesh.N)
    return M, K


def _p1_matrices(mesh: StructuredMesh):
    Me, Ke = _p1_local(mesh.vertex_coords, mesh.triangles)
    return _scatter(mesh.triangles, Me, mesh.N), _scatter(mesh.triangles, Ke, mesh.N)


def full_mass_matrix(mesh: StructuredMesh, kind: str = POISSON) -> sp.csr_matrix:
    """Mass matrix over all vertices, before Dirichlet elimination."""
    if kind == POISSON:
        return _p1_matrices(mesh)[0]
    return _q1_matrices(mesh, convection=False)[0]


# ---------------------------------------------------------------------------
# observation data


def _check_aligned(mesh: StructuredMesh, obs_box) -> None:
    x0, x1, y0, y1 = obs_box
    if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
        raise ValueError(f"observation box {obs_box} is not a subset of the unit square")
    for v in obs_box:
        k = v / mesh.h
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"observation box {obs_box} is not aligned with mesh step {mesh.h}")


def _in_box(points: np.ndarray, box) -> np.ndarray:
    x0, x1, y0, y1 = box
    t = _ALIGN_TOL
    return (
        (points[:, 0] >= x0 - t) & (points[:, 0] <= x1 + t)
        & (points[:, 1] >= y0 - t) & (points[:, 1] <= y1 + t)
    )


def _observation(mesh, free, obs_box, elements, local_mass):
    inside_v = _in_box(mesh.vertex_coords, obs_box)
    inside_e = inside_v[elements].all(axis=1)
    M_box = _scatter(elements[inside_e], local_mass[inside_e], mesh.N)
    # closed box; the default box never touches the boundary, but drop Dirichlet vertices anyway
    obs = np.flatnonzero(inside_v & ~mesh.boundary)
    pos = -np.ones(mesh.N, dtype=int)
    pos[free] = np.arange(len(free))
    p = len(obs)
    C = sp.csr_matrix((np.ones(p), (np.arange(p), pos[obs])), shape=(p, len(free)))
    M_obs = M_box[obs][:, obs].tocsr()
    return C, M_obs, obs


def _check_layout(layout: SourceLayout) -> None:
    c = layout.centers
    if np.any(c <= 0) or np.any(c >= 1):
        raise ValueError("source centers must lie in the open unit square")


def assemble_poisson(mesh: StructuredMesh, layout: SourceLayout,
                     obs_box=DEFAULT_OBS_BOX) -> FemSystem:
    """P1 heat-equation matrices with Gaussian sources."""
    _check_aligned(mesh, obs_box)
    _check_layout(layout)
    Me, Ke = _p1_local(mesh.vertex_coords, mesh.triangles)
    M = _scatter(mesh.triangles, Me, mesh.N)
    K = _scatter(mesh.triangles, Ke, mesh.N)
    free = mesh.interior
    Phi = layout.evaluate(mesh.vertex_coords[free])
    C, M_obs, obs = _observation(mesh, free, obs_box, mesh.triangles, Me)
    return FemSystem(
        M=M[free][:, free].tocsr(), K=K[free][:, free].tocsr(), Phi=Phi, C=C, M_obs=M_obs,
        kind=POISSON, mesh=mesh, layout=layout, obs_box=tuple(obs_box), free=free, obs_vertices=obs,
    )


def assemble_convection_diffusion(mesh: StructuredMesh, layout: SourceLayout,
                                  obs_box=DEFAULT_OBS_BOX) -> FemSystem:
    """Q1 + SUPG matrices for the convection-diffusion problem."""
    _check_aligned(mesh, obs_box)
    _check_layout(layout)
    M, K = _q1_matrices(mesh, convection=True)
    free = mesh.interior
    Phi = layout.evaluate(mesh.vertex_coords[free])
    ref, wq, phi, _ = _q1_reference(4)
    Me1 = mesh.h**2 * np.einsum("q,qa,qb->ab", wq, phi, phi)
    local = np.broadcast_to(Me1, (len(mesh.quads), 4, 4))
    C, M_obs, obs = _observation(mesh, free, obs_box, mesh.quads, local)
    return FemSystem(
        M=M[free][:, free].tocsr(), K=K[free][:, free].tocsr(), Phi=Phi, C=C, M_obs=M_obs,
        kind=CONVECTION_DIFFUSION, mesh=mesh, layout=layout, obs_box=tuple(obs_box),
        free=free, obs_vertices=obs,
    )


def assemble(kind: str, h: float, m: int = 5, obs_box=DEFAULT_OBS_BOX,
             layout: SourceLayout | None = None, triangulation: str = "uniform") -> FemSystem:
    """Convenience wrapper: mesh, default layout and assembly in one call."""
    mesh = build_mesh(h, triangulation)
    if layout is None:
        layout = default_layout(m, kind)
    if kind == POISSON:
        return assemble_poisson(mesh, layout, obs_box)
    if kind == CONVECTION_DIFFUSION:
        return assemble_convection_diffusion(mesh, layout, obs_box)
    raise ValueError(f"unknown problem kind {kind!r}")


def export_matrix_market(fem: FemSystem, directory) -> list:
    """Write M, K, Phi, C and M_obs as Matrix Market files; returns the paths."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("M", "K", "C", "M_obs"):
        path = directory / f"{name}.mtx"
        scipy.io.mmwrite(str(path), getattr(fem, name))
        paths.append(path)
    path = directory / "Phi.mtx"
    scipy.io.mmwrite(str(path), fem.Phi)
    paths.append(path)
    return paths
