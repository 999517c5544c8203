"""Semi-Lagrangian and MacCormack advection, plus the recursive transport chain.

Velocities enter the kernels in index units per step, ``u * dt / dx``.
Departure points use an RK2 midpoint trace; both trace positions and sampled
values are differentiated by the adjoint routines below.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .grid_fields import FieldSequence, Grid, GridSpec, ScalarGrid, VectorGrid


@lru_cache(maxsize=16)
def _center_indices(shape: tuple[int, int, int]) -> np.ndarray:
    g = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij"))
    g = g.reshape(3, -1)
    g.setflags(write=False)
    return g


@dataclass
class Departure:
    """RK2 departure points of cell centers for one velocity field and step.

    ``U`` is the velocity in index units (already multiplied by the step
    length over dx); ``sign`` is +1 for a backward trace (the usual
    semi-Lagrangian step) and -1 for the reverse trace used by MacCormack.
    """

    U: np.ndarray
    sign: float
    start: np.ndarray
    mid: np.ndarray
    back: np.ndarray

    @classmethod
    def trace(cls, U: np.ndarray, sign: float, start: np.ndarray | None = None) -> "Departure":
        U = np.ascontiguousarray(U)
        if start is None:
            start = _center_indices(U.shape[1:])
        u0 = _kernels.sample(U, start)
        mid = start - 0.5 * sign * u0
        back = start - sign * _kernels.sample(U, mid)
        return cls(U, sign, start, mid, back)

    def adjoint(self, g_back: np.ndarray, gU: np.ndarray) -> None:
        """Accumulate d/dU of <g_back, back> into gU."""
        g_um = -self.sign * g_back
        g_mid = np.zeros_like(self.mid)
        _kernels.sample_adjoint(g_um, self.mid, self.U, gU, g_mid)
        _kernels.sample_adjoint(-0.5 * self.sign * g_mid, self.start, self.U, gU)


def _as_channels(data: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(data if data.ndim == 4 else data[None])


def sl_step(F: np.ndarray, dep: Departure) -> np.ndarray:
    """F is (C, nx, ny, nz); returns the advected field with the same shape."""
    return _kernels.sample(F, dep.back).reshape(F.shape)


@dataclass
class MacCormackRecord:
    F: np.ndarray
    fwd: np.ndarray
    ok: np.ndarray


def maccormack_step(F: np.ndarray, fwd_dep: Departure, bwd_dep: Departure,
                    record: bool = False):
    """Clamped MacCormack step; reverts to the semi-Lagrangian value where the
    corrected value leaves the range of its 8 source samples."""
    fwd = sl_step(F, fwd_dep)
    bwd = sl_step(fwd, bwd_dep)
    mc = fwd + 0.5 * (F - bwd)
    lo, hi = _kernels.bounds(F, fwd_dep.back)
    ok = (mc >= lo.reshape(F.shape)) & (mc <= hi.reshape(F.shape))
    out = np.where(ok, mc, fwd)
    if record:
        return out, MacCormackRecord(F, fwd, ok)
    return out


def maccormack_adjoint(g: np.ndarray, rec: MacCormackRecord, fwd_dep: Departure,
                       bwd_dep: Departure, g_back_f: np.ndarray, g_back_b: np.ndarray
                       ) -> np.ndarray:
    """Return dL/dF for one step; position cotangents accumulate in g_back_*."""
    C = g.shape[0]
    # d out / d fwd is 1 on both branches
    g_mc = np.where(rec.ok, g, 0.0)
    g_F = 0.5 * g_mc
    g_bwd = -0.5 * g_mc
    gf = np.zeros_like(rec.fwd)
    _kernels.sample_adjoint(g_bwd.reshape(C, -1), bwd_dep.back, rec.fwd, gf, g_back_b)
    g_fwd = g + gf
    gF = np.zeros_like(rec.F)
    _kernels.sample_adjoint(g_fwd.reshape(C, -1), fwd_dep.back, rec.F, gF, g_back_f)
    return g_F + gF


class FrameTrace:
    """Forward and reverse departures of one frame's velocity, shared by every
    chain that advects through that frame."""

    def __init__(self, u: np.ndarray, dt: float, dx: float, substeps: int = 1):
        self.scale = dt / (substeps * dx)
        U = u * self.scale
        self.fwd = Departure.trace(U, 1.0)
        self.bwd = Departure.trace(U, -1.0)
        self.substeps = substeps
        self.g_back_f = np.zeros_like(self.fwd.back)
        self.g_back_b = np.zeros_like(self.bwd.back)

    def advance(self, F: np.ndarray, records: list | None = None) -> np.ndarray:
        for _ in range(self.substeps):
            if records is None:
                F = maccormack_step(F, self.fwd, self.bwd)
            else:
                F, rec = maccormack_step(F, self.fwd, self.bwd, record=True)
                records.append(rec)
        return F

    def retreat(self, g: np.ndarray, records: list) -> np.ndarray:
        for rec in reversed(records):
            g = maccormack_adjoint(g, rec, self.fwd, self.bwd, self.g_back_f, self.g_back_b)
        return g

    def velocity_grad(self) -> np.ndarray:
        """Gradient w.r.t. the physical velocity from accumulated position cotangents."""
        gU = np.zeros_like(self.fwd.U)
        self.fwd.adjoint(self.g_back_f, gU)
        self.bwd.adjoint(self.g_back_b, gU)
        return gU * self.scale


# --- grid-level API ------------------------------------------------------------------


def backtrace(x, u: VectorGrid, dt: float) -> np.ndarray:
    """RK2 midpoint departure point x - dt*u(x - dt/2*u(x)) in world coordinates."""
    x = np.asarray(x, dtype=float)
    spec = u.spec
    P = spec.to_index(x.reshape(3, -1))
    dep = Departure.trace(u.data * (dt / spec.dx), 1.0, np.ascontiguousarray(P))
    return spec.to_world(dep.back).reshape(x.shape)


def _check_pair(f: Grid, u: VectorGrid):
    if f.spec != u.spec:
        raise ValueError("field and velocity must share a GridSpec")


def advect_sl(f: Grid, u: VectorGrid, dt: float) -> Grid:
    _check_pair(f, u)
    F = _as_channels(f.data)
    out = sl_step(F, Departure.trace(u.data * (dt / u.spec.dx), 1.0))
    return type(f)(f.spec, out.reshape(f.data.shape))


def advect_maccormack(f: Grid, u: VectorGrid, dt: float) -> Grid:
    _check_pair(f, u)
    F = _as_channels(f.data)
    U = u.data * (dt / u.spec.dx)
    out = maccormack_step(F, Departure.trace(U, 1.0), Departure.trace(U, -1.0))
    return type(f)(f.spec, out.reshape(f.data.shape))


def advect_arr(data: np.ndarray, u: np.ndarray, dt: float, dx: float, substeps: int = 1) -> np.ndarray:
    """MacCormack advection of raw (nx,ny,nz) or (C,nx,ny,nz) data."""
    F = _as_channels(data)
    out = FrameTrace(u, dt, dx, substeps).advance(F)
    return out.reshape(data.shape)


def transport_chain(rho_t: ScalarGrid, velocities: list[VectorGrid], dt: float,
                    substeps: int = 1) -> list[ScalarGrid]:
    """Densities after 1..k recursive MacCormack steps through ``velocities``."""
    if not velocities:
        raise ValueError("transport_chain needs at least one velocity")
    out = []
    F = rho_t.data[None]
    for u in velocities:
        _check_pair(rho_t, u)
        F = FrameTrace(u.data, dt, u.spec.dx, substeps).advance(F)
        out.append(ScalarGrid(rho_t.spec, F[0]))
    return out


def chain_arr(rho: np.ndarray, u: np.ndarray, t: int, k: int, dt: float, dx: float,
              substeps: int = 1) -> np.ndarray:
    """Predicted densities rho_hat[t+1..t+k] from sequence arrays, shape (k, nx, ny, nz)."""
    F = rho[t][None]
    out = []
    for i in range(k):
        F = FrameTrace(u[t + i], dt, dx, substeps).advance(F)
        out.append(F[0])
    return np.stack(out)


def sequence_chain(rho: FieldSequence, u: FieldSequence, t: int, k: int) -> list[ScalarGrid]:
    return transport_chain(rho.frame(t), [u.frame(t + i) for i in range(k)], rho.dt)
