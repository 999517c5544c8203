"""Massless tracer particles carried by a velocity sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid_fields import FieldSequence

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class ParticleSet:
    """Positions (F, N, 3) in world coordinates and alive flags (F, N)."""

    positions: np.ndarray
    alive: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.alive = np.asarray(self.alive, dtype=bool)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 3:
            raise ValueError("positions must be (frames, count, 3)")
        if self.alive.shape != self.positions.shape[:2]:
            raise ValueError("alive flags must be (frames, count)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def count(self) -> int:
        return self.positions.shape[1]


def seed_plane(axis: str | int, coordinate: float, count: int, seed: int = 0,
               lo: float = 0.0, hi: float = 1.0) -> ParticleSet:
    """Jittered-grid positions on the plane ``x[axis] = coordinate`` inside [lo, hi]^2."""
    a = _AXES[axis] if isinstance(axis, str) else int(axis)
    if a not in (0, 1, 2):
        raise ValueError(f"bad axis {axis!r}")
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    side = max(int(np.ceil(np.sqrt(count))), 1)
    cells = np.arange(side * side)[:count]
    iu, iv = cells // side, cells % side
    jit = rng.uniform(0.0, 1.0, size=(count, 2))
    h = (hi - lo) / side
    pos = np.empty((count, 3))
    others = [k for k in range(3) if k != a]
    pos[:, others[0]] = lo + (iu + jit[:, 0]) * h
    pos[:, others[1]] = lo + (iv + jit[:, 1]) * h
    pos[:, a] = coordinate
    return ParticleSet(pos[None], np.ones((1, count), bool))


def _velocity(u: np.ndarray, x: np.ndarray, origin: np.ndarray, dx: float) -> np.ndarray:
    """Trilinear world-space velocity at points x (N, 3)."""
    P = ((x - origin) / dx - 0.5).T.copy()
    return _kernels.sample(u, P).T


def advect_particles(p: ParticleSet, u_seq: FieldSequence) -> ParticleSet:
    """RK2 (midpoint) steps with frame t's velocity held over [t, t+1).

    Particles that leave the domain are marked dead and stay where they exited.
    """
    spec = u_seq.spec
    origin = np.asarray(spec.origin, dtype=float)
    extent = np.asarray(spec.extent, dtype=float)
    pos = p.positions[-1].copy()
    alive = p.alive[-1].copy()
    all_pos, all_alive = [p.positions], [p.alive]
    dt = u_seq.dt
    for t in range(u_seq.n_frames):
        u = u_seq.data[t]
        if alive.any():
            x = pos[alive]
            mid = x + 0.5 * dt * _velocity(u, x, origin, spec.dx)
            new = x + dt * _velocity(u, mid, origin, spec.dx)
            inside = np.all((new >= origin) & (new <= origin + extent), axis=1)
            idx = np.flatnonzero(alive)
            pos[idx[inside]] = new[inside]
            alive[idx[~inside]] = False
        all_pos.append(pos[None].copy())
        all_alive.append(alive[None].copy())
    return ParticleSet(np.concatenate(all_pos), np.concatenate(all_alive))


@dataclass
class DisplacementReport:
    displacement: np.ndarray   # (N,) |x_last - x_first|
    alive: np.ndarray          # (N,) alive at the last frame
    mean: float
    max: float
    moved_fraction: float      # share of particles displaced by more than ``threshold``
    threshold: float

    def rows(self) -> list[dict]:
        return [{"particle": i, "displacement": float(d), "alive": bool(a)}
                for i, (d, a) in enumerate(zip(self.displacement, self.alive))]


def displacement_report(p: ParticleSet, threshold: float = 1e-3) -> DisplacementReport:
    d = np.linalg.norm(p.positions[-1] - p.positions[0], axis=-1)
    if d.size == 0:
        return DisplacementReport(d, p.alive[-1], 0.0, 0.0, 0.0, threshold)
    return DisplacementReport(d, p.alive[-1], float(d.mean()), float(d.max()),
                              float(np.mean(d > threshold)), threshold)
