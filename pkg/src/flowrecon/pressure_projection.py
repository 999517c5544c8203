"""Pressure Poisson solves and divergence-free projection.

Two discrete systems live here:

* ``solve_pressure``: the compact 7-point Laplacian with homogeneous Neumann
  walls at domain faces and solid cells, zero-mean gauge.
* ``project``: the exact orthogonal projection onto velocities whose
  central-difference divergence (the one in :mod:`flowrecon.grid_fields`) vanishes
  on fluid cells and that are zero inside solids. Its Poisson system is
  ``B B^T lam = B u`` with ``B`` the masked divergence, solved matrix-free.

The compact Laplacian is not the product of the collocated divergence and
gradient (their symbols differ by cos^2(k dx / 2)), so using it for the
projection would leave a resolution-dependent divergence residue.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np

from .grid_fields import ScalarGrid, VectorGrid, div_adjoint, div_arr

_SPATIAL = (-3, -2, -1)


@dataclass(frozen=True)
class PoissonConfig:
    max_iters: int = 2000
    tol: float = 1e-8
    solver: Literal["cg", "jacobi"] = "cg"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.solver not in ("cg", "jacobi"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class SolveInfo:
    residual: float
    iterations: int
    converged: bool


@dataclass
class PressureSolution:
    pressure: ScalarGrid
    info: SolveInfo


def _dot(a, b, axes):
    return np.sum(a * b, axis=axes, keepdims=True)


def conjugate_gradient(apply: Callable, b: np.ndarray, x0: np.ndarray, tol: float,
                       max_iters: int, axes=_SPATIAL) -> tuple[np.ndarray, SolveInfo]:
    """Batched CG for symmetric positive semi-definite ``apply``.

    Axes not listed in ``axes`` are independent systems; iteration stops once
    every system reaches ``||r|| <= tol * ||b||``.
    """
    x = x0.copy()
    r = b - apply(x)
    bnorm = np.sqrt(_dot(b, b, axes))
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    p = r.copy()
    rr = _dot(r, r, axes)
    it = 0
    rel = float(np.max(np.sqrt(rr) / bnorm))
    while rel > tol and it < max_iters:
        Ap = apply(p)
        pAp = _dot(p, Ap, axes)
        alpha = np.divide(rr, pAp, out=np.zeros_like(rr), where=pAp > 0)
        x += alpha * p
        r -= alpha * Ap
        rr_new = _dot(r, r, axes)
        beta = np.divide(rr_new, rr, out=np.zeros_like(rr), where=rr > 0)
        p = r + beta * p
        rr = rr_new
        it += 1
        rel = float(np.max(np.sqrt(rr) / bnorm))
    return x, SolveInfo(rel, it, rel <= tol)


def jacobi(apply: Callable, diag: np.ndarray, b: np.ndarray, x0: np.ndarray, tol: float,
           max_iters: int, omega: float = 2.0 / 3.0, axes=_SPATIAL) -> tuple[np.ndarray, SolveInfo]:
    """Damped Jacobi; slow, kept as an independent check on CG."""
    x = x0.copy()
    bnorm = np.sqrt(_dot(b, b, axes))
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    inv = np.divide(1.0, diag, out=np.zeros_like(diag), where=diag > 0)
    rel = np.inf
    it = 0
    while it < max_iters:
        r = b - apply(x)
        rel = float(np.max(np.sqrt(_dot(r, r, axes)) / bnorm))
        if rel <= tol:
            break
        x += omega * inv * r
        it += 1
    return x, SolveInfo(rel, it, rel <= tol)


# --- compact Neumann Laplacian ----------------------------------------------------


def _neg_laplacian(p: np.ndarray, fluid: np.ndarray, dx: float) -> np.ndarray:
    """-(7-point Laplacian) with zero flux through domain faces and solid cells."""
    out = np.zeros_like(p)
    for axis in (-3, -2, -1):
        a = [slice(None)] * p.ndim
        b = [slice(None)] * p.ndim
        a[axis] = slice(1, None)
        b[axis] = slice(None, -1)
        a, b = tuple(a), tuple(b)
        open_face = fluid[a] & fluid[b]
        flux = np.where(open_face, p[a] - p[b], 0.0)
        out[a] += flux
        out[b] -= flux
    return np.where(fluid, out, 0.0) / dx**2


def _compact_diag(fluid: np.ndarray, dx: float) -> np.ndarray:
    n = np.zeros(fluid.shape)
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(1, None)
        b[axis] = slice(None, -1)
        open_face = fluid[tuple(a)] & fluid[tuple(b)]
        n[tuple(a)] += open_face
        n[tuple(b)] += open_face
    return np.where(fluid, n, 0.0) / dx**2


def _fluid_mask(shape, sdf) -> np.ndarray:
    if sdf is None:
        return np.ones(shape, dtype=bool)
    return np.asarray(sdf) > 0


def solve_pressure(div: ScalarGrid, sdf: Optional[ScalarGrid] = None,
                   cfg: PoissonConfig = PoissonConfig()) -> PressureSolution:
    """Solve lap(p) = div with Neumann walls; p has zero mean over fluid cells."""
    dx = div.spec.dx
    fluid = _fluid_mask(div.spec.shape, None if sdf is None else sdf.data)
    rhs = np.where(fluid, div.data, 0.0)
    nf = max(int(fluid.sum()), 1)
    rhs = np.where(fluid, rhs - rhs.sum() / nf, 0.0)
    # -lap p = -div
    b = -rhs

    def apply(x):
        return _neg_laplacian(x, fluid, dx)

    x0 = np.zeros_like(b)
    if cfg.solver == "cg":
        p, info = conjugate_gradient(apply, b, x0, cfg.tol, cfg.max_iters)
    else:
        p, info = jacobi(apply, _compact_diag(fluid, dx), b, x0, cfg.tol, cfg.max_iters)
    p = np.where(fluid, p - p[fluid].mean(), 0.0)
    return PressureSolution(ScalarGrid(div.spec, p), info)


# --- consistent projection --------------------------------------------------------


class Projector:
    """Orthogonal projection onto discretely divergence-free, solid-free velocity."""

    def __init__(self, shape: tuple[int, int, int], dx: float, sdf: Optional[np.ndarray] = None,
                 cfg: PoissonConfig = PoissonConfig()):
        self.dx = dx
        self.cfg = cfg
        self.fluid = _fluid_mask(shape, sdf)
        self.has_solid = not bool(self.fluid.all())

    def zero_solids(self, u: np.ndarray) -> np.ndarray:
        return np.where(self.fluid, u, 0.0) if self.has_solid else u

    def B(self, u: np.ndarray) -> np.ndarray:
        return np.where(self.fluid, div_arr(self.zero_solids(u), self.dx), 0.0)

    def BT(self, lam: np.ndarray) -> np.ndarray:
        return self.zero_solids(div_adjoint(np.where(self.fluid, lam, 0.0), self.dx))

    def _diag(self) -> np.ndarray:
        # diagonal of B B^T: squared stencil weights over fluid neighbours
        z = self.fluid.astype(float)
        d = np.zeros(z.shape)
        for axis in range(3):
            zz = np.moveaxis(z, axis, -1)
            dd = np.zeros_like(zz)
            dd[..., 1:-1] = (zz[..., 2:] + zz[..., :-2]) / (4 * self.dx**2)
            dd[..., 0] = (zz[..., 0] + zz[..., 1]) / self.dx**2
            dd[..., -1] = (zz[..., -1] + zz[..., -2]) / self.dx**2
            d += np.moveaxis(dd, -1, axis)
        return np.where(self.fluid, d, 0.0)

    def __call__(self, u: np.ndarray, lam0: Optional[np.ndarray] = None
                 ) -> tuple[np.ndarray, np.ndarray, SolveInfo]:
        """Project ``u`` (..., 3, nx, ny, nz); returns (u_p, multiplier, info)."""
        b = self.B(u)

        def apply(x):
            return self.B(self.BT(x))

        x0 = np.zeros_like(b) if lam0 is None else lam0
        if self.cfg.solver == "cg":
            lam, info = conjugate_gradient(apply, b, x0, self.cfg.tol, self.cfg.max_iters)
        else:
            diag = np.broadcast_to(self._diag(), b.shape)
            lam, info = jacobi(apply, diag, b, x0, self.cfg.tol, self.cfg.max_iters)
        return self.zero_solids(u) - self.BT(lam), lam, info


def project(u: VectorGrid, sdf: Optional[ScalarGrid] = None,
            cfg: PoissonConfig = PoissonConfig()) -> tuple[VectorGrid, SolveInfo]:
    """Remove the divergent part of ``u``; velocities inside solids are zeroed."""
    proj = Projector(u.spec.shape, u.spec.dx, None if sdf is None else sdf.data, cfg)
    up, _, info = proj(u.data)
    return VectorGrid(u.spec, up), info


def project_compact(u: VectorGrid, sdf: Optional[ScalarGrid] = None,
                    cfg: PoissonConfig = PoissonConfig()) -> tuple[VectorGrid, SolveInfo]:
    """Textbook projection u - grad(p) with the compact Laplacian, for comparison."""
    from .grid_fields import divergence, grad_arr
    sol = solve_pressure(divergence(u), sdf, cfg)
    up = u.data - grad_arr(sol.pressure.data, u.spec.dx)
    if sdf is not None:
        up = np.where(sdf.data > 0, up, 0.0)
    return VectorGrid(u.spec, up), sol.info
