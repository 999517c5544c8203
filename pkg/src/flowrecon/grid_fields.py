"""Cell-centered 3D grids, trilinear sampling and finite-difference operators.

Scalar data is stored as ``(nx, ny, nz)`` arrays, vector data component-first
as ``(3, nx, ny, nz)``. Sequences stack frames on a leading axis. Array-level
operators accept arbitrary leading batch axes; the spatial axes are always
the last three.

Derivatives use central differences at interior cells and first-order
one-sided differences at boundary cells. Each operator has a matching
``*_adjoint`` (its transpose), used by the hand-written loss gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Union

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    dx: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 4:
            raise ValueError(f"grid needs at least 4 cells per axis, got {self.shape}")
        if not self.dx > 0:
            raise ValueError(f"dx must be positive, got {self.dx}")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def cube(cls, n: int, extent: float = 1.0) -> "GridSpec":
        return cls(n, n, n, extent / n)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.shape) * self.dx

    def coarsen(self, factor: int) -> "GridSpec":
        if any(n % factor for n in self.shape):
            raise ValueError(f"factor {factor} does not divide {self.shape}")
        return GridSpec(self.nx // factor, self.ny // factor, self.nz // factor,
                        self.dx * factor, self.origin)

    def centers(self) -> np.ndarray:
        """World coordinates of all cell centers, shape (3, nx, ny, nz)."""
        axes = [self.origin[a] + (np.arange(n) + 0.5) * self.dx for a, n in enumerate(self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def to_index(self, x) -> np.ndarray:
        """World coordinates (3, ...) to continuous index coordinates."""
        x = np.asarray(x, dtype=float)
        o = np.asarray(self.origin).reshape((3,) + (1,) * (x.ndim - 1))
        return (x - o) / self.dx - 0.5

    def to_world(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        o = np.asarray(self.origin).reshape((3,) + (1,) * (g.ndim - 1))
        return o + (g + 0.5) * self.dx

    def interior(self) -> tuple[slice, slice, slice]:
        return (slice(1, -1),) * 3


def _check_data(spec: GridSpec, data, lead: tuple) -> np.ndarray:
    data = np.asarray(data, dtype=float)
    want = lead + spec.shape
    if data.shape != want:
        raise ValueError(f"expected data of shape {want}, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("grid data contains non-finite values")
    return data


@dataclass
class ScalarGrid:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = _check_data(self.spec, self.data, ())

    @classmethod
    def zeros(cls, spec: GridSpec) -> "ScalarGrid":
        return cls(spec, np.zeros(spec.shape))


@dataclass
class VectorGrid:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = _check_data(self.spec, self.data, (3,))

    @classmethod
    def zeros(cls, spec: GridSpec) -> "VectorGrid":
        return cls(spec, np.zeros((3,) + spec.shape))


Grid = Union[ScalarGrid, VectorGrid]


@dataclass
class FieldSequence:
    """Frames of one field sharing a GridSpec, ``data`` shaped (T, [3,] nx, ny, nz)."""

    spec: GridSpec
    data: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim not in (4, 5) or data.shape[-3:] != self.spec.shape:
            raise ValueError(f"sequence data {data.shape} does not match grid {self.spec.shape}")
        if data.ndim == 5 and data.shape[1] != 3:
            raise ValueError("vector sequences need 3 components")
        if data.shape[0] < 2:
            raise ValueError("a sequence needs at least 2 frames")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(data)):
            raise ValueError("sequence contains non-finite values")
        self.data = data

    @classmethod
    def from_frames(cls, frames: list[Grid], dt: float) -> "FieldSequence":
        spec = frames[0].spec
        if any(f.spec != spec for f in frames):
            raise ValueError("all frames must share one GridSpec")
        return cls(spec, np.stack([f.data for f in frames]), dt)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def components(self) -> int:
        return 3 if self.data.ndim == 5 else 1

    def frame(self, t: int) -> Grid:
        cls = VectorGrid if self.components == 3 else ScalarGrid
        return cls(self.spec, self.data[t])

    @property
    def frames(self) -> list[Grid]:
        return [self.frame(t) for t in range(self.n_frames)]


# --- array-level difference operators -------------------------------------------


def _sl(ndim: int, axis: int, s: slice | int) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def ddx(f: np.ndarray, axis: int, dx: float) -> np.ndarray:
    """First derivative along a spatial axis (0, 1, 2 -> last three array axes)."""
    a, n = axis - 3 + f.ndim, f.ndim
    out = np.empty_like(f)
    np.subtract(f[_sl(n, a, slice(2, None))], f[_sl(n, a, slice(None, -2))],
                out=out[_sl(n, a, slice(1, -1))])
    out[_sl(n, a, slice(1, -1))] *= 0.5 / dx
    out[_sl(n, a, 0)] = (f[_sl(n, a, 1)] - f[_sl(n, a, 0)]) / dx
    out[_sl(n, a, -1)] = (f[_sl(n, a, -1)] - f[_sl(n, a, -2)]) / dx
    return out


def ddx_adjoint(g: np.ndarray, axis: int, dx: float) -> np.ndarray:
    a, n = axis - 3 + g.ndim, g.ndim
    out = np.zeros_like(g)
    h = g[_sl(n, a, slice(1, -1))] * (0.5 / dx)
    out[_sl(n, a, slice(2, None))] += h
    out[_sl(n, a, slice(None, -2))] -= h
    e0 = g[_sl(n, a, 0)] / dx
    e1 = g[_sl(n, a, -1)] / dx
    out[_sl(n, a, 1)] += e0
    out[_sl(n, a, 0)] -= e0
    out[_sl(n, a, -1)] += e1
    out[_sl(n, a, -2)] -= e1
    return out


def grad_arr(f: np.ndarray, dx: float) -> np.ndarray:
    return np.stack([ddx(f, a, dx) for a in range(3)], axis=-4)


def grad_adjoint(g: np.ndarray, dx: float) -> np.ndarray:
    return sum(ddx_adjoint(g[..., a, :, :, :], a, dx) for a in range(3))


def div_arr(u: np.ndarray, dx: float) -> np.ndarray:
    return sum(ddx(u[..., a, :, :, :], a, dx) for a in range(3))


def div_adjoint(g: np.ndarray, dx: float) -> np.ndarray:
    return np.stack([ddx_adjoint(g, a, dx) for a in range(3)], axis=-4)


def curl_arr(u: np.ndarray, dx: float) -> np.ndarray:
    ux, uy, uz = (u[..., a, :, :, :] for a in range(3))
    return np.stack([
        ddx(uz, 1, dx) - ddx(uy, 2, dx),
        ddx(ux, 2, dx) - ddx(uz, 0, dx),
        ddx(uy, 0, dx) - ddx(ux, 1, dx),
    ], axis=-4)


def curl_adjoint(g: np.ndarray, dx: float) -> np.ndarray:
    gx, gy, gz = (g[..., a, :, :, :] for a in range(3))
    return np.stack([
        ddx_adjoint(gy, 2, dx) - ddx_adjoint(gz, 1, dx),
        ddx_adjoint(gz, 0, dx) - ddx_adjoint(gx, 2, dx),
        ddx_adjoint(gx, 1, dx) - ddx_adjoint(gy, 0, dx),
    ], axis=-4)


def jacobian(u: np.ndarray, dx: float) -> np.ndarray:
    """J[..., i, j, :, :, :] = d u_i / d x_j."""
    return np.stack([grad_arr(u[..., i, :, :, :], dx) for i in range(3)], axis=-5)


def directional(w: np.ndarray, u: np.ndarray, dx: float) -> np.ndarray:
    """(w . grad) u for a vector u (..., 3, ...) or a scalar u."""
    if u.ndim == w.ndim:
        J = jacobian(u, dx)
        return np.einsum("...ijxyz,...jxyz->...ixyz", J, w)
    return np.einsum("...jxyz,...jxyz->...xyz", grad_arr(u, dx), w)


def directional_adjoint(g: np.ndarray, w: np.ndarray, u: np.ndarray, dx: float,
                        wrt: str) -> np.ndarray:
    """Transpose of ``directional`` with respect to ``w`` or ``u``."""
    vector = u.ndim == w.ndim
    if wrt == "w":
        if vector:
            return np.einsum("...ijxyz,...ixyz->...jxyz", jacobian(u, dx), g)
        return grad_arr(u, dx) * g[..., None, :, :, :]
    # wrt u: sum_j D_j^T (w_j g_i)
    if vector:
        return np.stack([
            sum(ddx_adjoint(w[..., j, :, :, :] * g[..., i, :, :, :], j, dx) for j in range(3))
            for i in range(3)
        ], axis=-4)
    return sum(ddx_adjoint(w[..., j, :, :, :] * g, j, dx) for j in range(3))


def time_stencil(t: int, n_frames: int, dt: float) -> list[tuple[int, float]]:
    """(frame, coefficient) pairs of the discrete d/dt at frame ``t``."""
    if not 0 <= t < n_frames:
        raise IndexError(f"frame {t} outside [0, {n_frames})")
    if t == 0:
        return [(1, 1.0 / dt), (0, -1.0 / dt)]
    if t == n_frames - 1:
        return [(t, 1.0 / dt), (t - 1, -1.0 / dt)]
    return [(t + 1, 0.5 / dt), (t - 1, -0.5 / dt)]


def time_deriv_arr(frames: np.ndarray, t: int, dt: float) -> np.ndarray:
    (a, ca), (b, cb) = time_stencil(t, frames.shape[0], dt)
    return ca * frames[a] + cb * frames[b]


def interior_mask(shape: tuple[int, int, int]) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[1:-1, 1:-1, 1:-1] = True
    return m


# --- grid-level operations --------------------------------------------------------


def sample_trilinear(grid: Grid, x) -> Union[float, np.ndarray]:
    """Trilinear value at world position(s) ``x`` (3,) or (3, M), clamped to the hull."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    P = grid.spec.to_index(x.reshape(3, -1))
    F = grid.data[None] if isinstance(grid, ScalarGrid) else grid.data
    out = _kernels.sample(np.ascontiguousarray(F), np.ascontiguousarray(P))
    if isinstance(grid, ScalarGrid):
        out = out[0]
        return float(out[0]) if single else out
    return out[:, 0] if single else out


def gradient(f: ScalarGrid) -> VectorGrid:
    return VectorGrid(f.spec, grad_arr(f.data, f.spec.dx))


def divergence(u: VectorGrid) -> ScalarGrid:
    return ScalarGrid(u.spec, div_arr(u.data, u.spec.dx))


def curl(u: VectorGrid) -> VectorGrid:
    return VectorGrid(u.spec, curl_arr(u.data, u.spec.dx))


def jacobian_apply(u: VectorGrid, w: VectorGrid) -> VectorGrid:
    """(w . grad) u: component i is sum_j w_j du_i/dx_j."""
    if u.spec != w.spec:
        raise ValueError("u and w must share a GridSpec")
    return VectorGrid(u.spec, directional(w.data, u.data, u.spec.dx))


def time_derivative(seq: FieldSequence, t: int) -> Grid:
    data = time_deriv_arr(seq.data, t, seq.dt)
    cls = VectorGrid if seq.components == 3 else ScalarGrid
    return cls(seq.spec, data)


@lru_cache(maxsize=32)
def resample_points(source: GridSpec, target: GridSpec) -> np.ndarray:
    """Index coordinates in ``source`` of every ``target`` cell center, (3, N)."""
    P = source.to_index(target.centers()).reshape(3, -1)
    P.setflags(write=False)
    return P


def resample_arr(data: np.ndarray, source: GridSpec, target: GridSpec) -> np.ndarray:
    """Resample (..., nx, ny, nz) data; leading axes are treated as channels."""
    if source == target:
        return data.copy()
    lead = data.shape[:-3]
    F = np.ascontiguousarray(data.reshape((-1,) + source.shape))
    out = _kernels.sample(F, resample_points(source, target))
    return out.reshape(lead + target.shape)


def resample_adjoint(g: np.ndarray, source: GridSpec, target: GridSpec) -> np.ndarray:
    if source == target:
        return g.copy()
    lead = g.shape[:-3]
    G = np.ascontiguousarray(g.reshape(-1, target.n_cells))
    out = np.zeros((G.shape[0],) + source.shape)
    _kernels.sample_adjoint(G, resample_points(source, target), out, out)
    return out.reshape(lead + source.shape)


def resample(grid: Grid, target: GridSpec) -> Grid:
    return type(grid)(target, resample_arr(grid.data, grid.spec, target))
