"""Coarse- and fine-level reconstruction losses with hand-written gradients.

Every squared norm is a per-cell mean (sum of squared components, averaged
over cells), so weights do not depend on resolution. PDE residuals are
averaged over interior cells only. Aggregates average each term over all
frames it is defined on.

Array conventions: densities ``(T, nx, ny, nz)``, velocities
``(T, 3, nx, ny, nz)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .grid_fields import (
    FieldSequence,
    GridSpec,
    ScalarGrid,
    VectorGrid,
    curl_adjoint,
    curl_arr,
    directional,
    directional_adjoint,
    div_adjoint,
    div_arr,
    grad_arr,
    interior_mask,
    time_stencil,
)
from .pressure_projection import PoissonConfig, Projector
from .transport import FrameTrace


@dataclass(frozen=True)
class LossWeights:
    lambda_vor: float = 1e-5
    lambda_div: float = 5e-3
    lambda_kine: float = 10.0
    lambda_bnd: float = 1000.0
    lambda_warp: float = 1.0
    lambda_proj: float = 1e6
    beta: float = 0.95
    k: int = 5

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        for name, value in asdict(self).items():
            if name.startswith("lambda_") and value < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def cylinder(cls, **overrides) -> "LossWeights":
        """Preset for obstacle scenes with weak flow."""
        return cls(**{"lambda_kine": 1.0, "lambda_bnd": 100.0, **overrides})

    def replace(self, **changes) -> "LossWeights":
        return replace(self, **changes)


@dataclass
class LossReport:
    raw: dict[str, float]
    weighted: dict[str, float]
    total: float
    step: int = 0
    weights: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict[str, float]:
        out = {"step": self.step, "total": self.total}
        for name, value in self.raw.items():
            out[name] = value
            out[f"{name}_weighted"] = self.weighted[name]
        return out


def _report(terms: dict[str, float], weights: dict[str, float], step: int = 0) -> LossReport:
    terms = {n: float(v) for n, v in terms.items()}
    weighted = {n: float(weights[n] * v) for n, v in terms.items()}
    # fixed summation order keeps totals reproducible
    total = 0.0
    for n in terms:
        total += weighted[n]
    return LossReport(dict(terms), weighted, total, step, dict(weights))


# --- array-level terms: each returns (value, grad or None) --------------------------


def _interior_count(shape) -> int:
    return int(np.prod([n - 2 for n in shape]))


def _time_apply(frames: np.ndarray, dt: float) -> np.ndarray:
    """d/dt at every frame, stacked."""
    T = frames.shape[0]
    out = np.empty_like(frames)
    for t in range(T):
        (a, ca), (b, cb) = time_stencil(t, T, dt)
        out[t] = ca * frames[a] + cb * frames[b]
    return out


def _time_adjoint(g: np.ndarray, dt: float) -> np.ndarray:
    T = g.shape[0]
    out = np.zeros_like(g)
    for t in range(T):
        for s, c in time_stencil(t, T, dt):
            out[s] += c * g[t]
    return out


def trans_term(rho: np.ndarray, u: np.ndarray, dx: float, dt: float, k: int, beta: float,
               starts=None, substeps: int = 1, grad: bool = False):
    """Discounted long-term transport mismatch, averaged over chain start frames."""
    T = rho.shape[0]
    if starts is None:
        starts = range(T - k)
    starts = list(starts)
    if not starts or min(starts) < 0 or max(starts) + k >= T:
        raise ValueError(f"need start frames t with t + k < {T} (k={k})")
    n = rho[0].size
    traces = {}

    def trace(s):
        if s not in traces:
            traces[s] = FrameTrace(u[s], dt, dx, substeps)
        return traces[s]

    value = 0.0
    tapes = []
    for t in starts:
        F = rho[t][None]
        steps = []
        for i in range(k):
            recs = [] if grad else None
            F = trace(t + i).advance(F, recs)
            diff = F[0] - rho[t + i + 1]
            value += beta**i * float(np.sum(diff * diff)) / n
            steps.append((recs, diff))
        tapes.append((t, steps))
    scale = 1.0 / len(starts)
    value *= scale
    if not grad:
        return value, None
    for t, steps in tapes:
        g = np.zeros((1,) + rho.shape[1:])
        for i in reversed(range(k)):
            recs, diff = steps[i]
            g = g + (2.0 * scale * beta**i / n) * diff[None]
            g = trace(t + i).retreat(g, recs)
    gu = np.zeros_like(u)
    for s, tr in traces.items():
        gu[s] = tr.velocity_grad()
    return value, gu


def vor_term(u: np.ndarray, dx: float, dt: float, grad: bool = False):
    """Velocity-vorticity residual d(w)/dt + (u.grad)w - (w.grad)u, all frames."""
    T = u.shape[0]
    w = curl_arr(u, dx)
    r = _time_apply(w, dt) + directional(u, w, dx) - directional(w, u, dx)
    mask = interior_mask(u.shape[-3:])
    r = np.where(mask, r, 0.0)
    norm = T * _interior_count(u.shape[-3:])
    value = float(np.sum(r * r)) / norm
    if not grad:
        return value, None
    gr = 2.0 * r / norm
    gw = (_time_adjoint(gr, dt) + directional_adjoint(gr, u, w, dx, "u")
          - directional_adjoint(gr, w, u, dx, "w"))
    gu = (directional_adjoint(gr, u, w, dx, "w") - directional_adjoint(gr, w, u, dx, "u")
          + curl_adjoint(gw, dx))
    return value, gu


def vel_term(u: np.ndarray, dx: float, dt: float, grad: bool = False):
    """Self-advection residual du/dt + (u.grad)u, all frames (ablation baseline)."""
    T = u.shape[0]
    r = _time_apply(u, dt) + directional(u, u, dx)
    mask = interior_mask(u.shape[-3:])
    r = np.where(mask, r, 0.0)
    norm = T * _interior_count(u.shape[-3:])
    value = float(np.sum(r * r)) / norm
    if not grad:
        return value, None
    gr = 2.0 * r / norm
    gu = (_time_adjoint(gr, dt) + directional_adjoint(gr, u, u, dx, "w")
          + directional_adjoint(gr, u, u, dx, "u"))
    return value, gu


def div_term(u: np.ndarray, dx: float, grad: bool = False):
    d = np.where(interior_mask(u.shape[-3:]), div_arr(u, dx), 0.0)
    norm = (u.size // (3 * np.prod(u.shape[-3:]))) * _interior_count(u.shape[-3:])
    value = float(np.sum(d * d)) / norm
    if not grad:
        return value, None
    return value, div_adjoint(2.0 * d / norm, dx)


def kine_term(u: np.ndarray, grad: bool = False):
    norm = u.size // 3
    value = float(np.sum(u * u)) / norm
    return value, (2.0 * u / norm if grad else None)


def bnd_term(u: np.ndarray, solid: Optional[np.ndarray], grad: bool = False):
    """Squared speed summed over solid cells, divided by the total cell count."""
    norm = u.size // 3
    if solid is None or not solid.any():
        return 0.0, (np.zeros_like(u) if grad else None)
    us = np.where(solid, u, 0.0)
    value = float(np.sum(us * us)) / norm
    return value, (2.0 * us / norm if grad else None)


def adv_term(rho: np.ndarray, u: np.ndarray, dx: float, dt: float, grad: bool = False,
             rho_grad: Optional[np.ndarray] = None):
    """Density transport residual drho/dt + u.grad(rho), all frames."""
    T = rho.shape[0]
    gr_rho = grad_arr(rho, dx) if rho_grad is None else rho_grad
    r = _time_apply(rho, dt) + np.sum(u * gr_rho, axis=1)
    r = np.where(interior_mask(rho.shape[-3:]), r, 0.0)
    norm = T * _interior_count(rho.shape[-3:])
    value = float(np.sum(r * r)) / norm
    if not grad:
        return value, None
    return value, (2.0 / norm) * r[:, None] * gr_rho


def warp_term(uf: np.ndarray, uc: np.ndarray, dx: float, dt: float, grad: bool = False):
    """Fine velocity carried by the coarse flow: du_f/dt + (u_c.grad)u_f."""
    T = uf.shape[0]
    r = _time_apply(uf, dt) + directional(uc, uf, dx)
    r = np.where(interior_mask(uf.shape[-3:]), r, 0.0)
    norm = T * _interior_count(uf.shape[-3:])
    value = float(np.sum(r * r)) / norm
    if not grad:
        return value, None
    gr = 2.0 * r / norm
    return value, _time_adjoint(gr, dt) + directional_adjoint(gr, uc, uf, dx, "u")


class ProjTerm:
    """Mismatch to the projected field, with the projection held constant.

    The projection is orthogonal, so the frozen-target gradient coincides
    with the exact one. The Lagrange multiplier of the previous call seeds
    the next solve.
    """

    def __init__(self, projector: Projector):
        self.projector = projector
        self._lam = None
        self.last_info = None

    def __call__(self, uf: np.ndarray, grad: bool = False, warm: bool = True):
        lam0 = self._lam if warm and self._lam is not None and self._lam.shape[0] == uf.shape[0] else None
        up, lam, info = self.projector(uf, lam0)
        self.last_info = info
        if warm:
            self._lam = lam
        r = uf - up
        norm = uf.size // 3
        value = float(np.sum(r * r)) / norm
        return value, (2.0 * r / norm if grad else None)


# --- aggregates -------------------------------------------------------------------------

COARSE_VARIANTS = ("long-w", "long-u", "short-w", "short-u")


@dataclass
class LossContext:
    """Fixed inputs shared by every evaluation in one optimization stage."""

    rho: np.ndarray
    spec: GridSpec
    dt: float
    weights: LossWeights = field(default_factory=LossWeights)
    solid: Optional[np.ndarray] = None
    variant: str = "long-w"
    substeps: int = 1
    uc: Optional[np.ndarray] = None
    poisson: PoissonConfig = field(default_factory=lambda: PoissonConfig(tol=1e-6, max_iters=2000))
    _proj: Optional[ProjTerm] = field(default=None, repr=False)
    _rho_grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in COARSE_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {COARSE_VARIANTS}")

    @property
    def dx(self) -> float:
        return self.spec.dx

    @property
    def rho_grad(self) -> np.ndarray:
        if self._rho_grad is None:
            self._rho_grad = grad_arr(self.rho, self.dx)
        return self._rho_grad

    @property
    def proj(self) -> ProjTerm:
        if self._proj is None:
            sdf = None if self.solid is None else np.where(self.solid, -1.0, 1.0)
            self._proj = ProjTerm(Projector(self.rho.shape[-3:], self.dx, sdf, self.poisson))
        return self._proj


def _combine_terms(terms: dict, weights: dict, grad: bool, step: int):
    report = _report({n: v for n, (v, _) in terms.items()}, weights, step)
    if not grad:
        return report, None
    g = None
    for n, (_, gn) in terms.items():
        if weights[n] == 0 or gn is None:
            continue
        g = weights[n] * gn if g is None else g + weights[n] * gn
    return report, g


def coarse_total(ctx: LossContext, u: np.ndarray, grad: bool = False, step: int = 0):
    """Weighted coarse objective at the density resolution; returns (LossReport, grad)."""
    w = ctx.weights
    temporal, physics = ctx.variant.split("-")
    terms = {}
    if temporal == "long":
        terms["trans"] = trans_term(ctx.rho, u, ctx.dx, ctx.dt, w.k, w.beta,
                                    substeps=ctx.substeps, grad=grad)
    else:
        terms["adv"] = adv_term(ctx.rho, u, ctx.dx, ctx.dt, grad, ctx.rho_grad)
    if physics == "w":
        terms["vor"] = vor_term(u, ctx.dx, ctx.dt, grad)
    else:
        terms["vel"] = vel_term(u, ctx.dx, ctx.dt, grad)
    terms["div"] = div_term(u, ctx.dx, grad)
    terms["kine"] = kine_term(u, grad)
    terms["bnd"] = bnd_term(u, ctx.solid, grad)
    weights = {"trans": 1.0, "adv": 1.0, "vor": w.lambda_vor, "vel": w.lambda_vor,
               "div": w.lambda_div, "kine": w.lambda_kine, "bnd": w.lambda_bnd}
    return _combine_terms(terms, {n: weights[n] for n in terms}, grad, step)


def fine_total(ctx: LossContext, uf: np.ndarray, grad: bool = False, step: int = 0,
               warm: bool = True):
    """Weighted fine objective for the fine velocity ``uf`` with ``ctx.uc`` frozen."""
    if ctx.uc is None:
        raise ValueError("fine_total needs the coarse velocity in ctx.uc")
    w = ctx.weights
    terms = {
        "adv": adv_term(ctx.rho, ctx.uc + uf, ctx.dx, ctx.dt, grad, ctx.rho_grad),
        "warp": warp_term(uf, ctx.uc, ctx.dx, ctx.dt, grad),
    }
    if w.lambda_proj > 0:
        terms["proj"] = ctx.proj(uf, grad, warm)
    else:
        terms["proj"] = (0.0, None)
    weights = {"adv": 1.0, "warp": w.lambda_warp, "proj": w.lambda_proj}
    return _combine_terms(terms, weights, grad, step)


# --- grid-level single-frame API -----------------------------------------------------


def _seq_pair(rho_seq: FieldSequence, u_seq: FieldSequence):
    if rho_seq.spec != u_seq.spec or rho_seq.n_frames != u_seq.n_frames:
        raise ValueError("density and velocity sequences must share grid and frame count")


def loss_trans(rho_seq: FieldSequence, u_seq: FieldSequence, t: int,
               w: LossWeights = LossWeights()) -> float:
    _seq_pair(rho_seq, u_seq)
    if not 0 <= t or t + w.k >= rho_seq.n_frames:
        raise IndexError(f"start frame {t} with k={w.k} exceeds {rho_seq.n_frames} frames")
    value, _ = trans_term(rho_seq.data, u_seq.data, rho_seq.spec.dx, rho_seq.dt, w.k, w.beta,
                          starts=[t])
    return value


def _frame_residual_mean(r: np.ndarray) -> float:
    r = r[..., 1:-1, 1:-1, 1:-1]
    n = int(np.prod(r.shape[-3:]))
    return float(np.sum(r * r)) / n


def loss_vor(u_seq: FieldSequence, t: int) -> float:
    dx, u = u_seq.spec.dx, u_seq.data
    w = curl_arr(u, dx)
    (a, ca), (b, cb) = time_stencil(t, u_seq.n_frames, u_seq.dt)
    r = ca * w[a] + cb * w[b] + directional(u[t], w[t], dx) - directional(w[t], u[t], dx)
    return _frame_residual_mean(r)


def loss_vel(u_seq: FieldSequence, t: int) -> float:
    dx, u = u_seq.spec.dx, u_seq.data
    (a, ca), (b, cb) = time_stencil(t, u_seq.n_frames, u_seq.dt)
    r = ca * u[a] + cb * u[b] + directional(u[t], u[t], dx)
    return _frame_residual_mean(r)


def loss_div(u: VectorGrid) -> float:
    return _frame_residual_mean(div_arr(u.data, u.spec.dx))


def loss_kine(u: VectorGrid) -> float:
    return kine_term(u.data)[0]


def loss_bnd(u: VectorGrid, sdf: ScalarGrid) -> float:
    return bnd_term(u.data, sdf.data <= 0)[0]


def loss_adv(rho_seq: FieldSequence, uc: FieldSequence, uf: FieldSequence, t: int) -> float:
    _seq_pair(rho_seq, uc)
    _seq_pair(rho_seq, uf)
    rho, dx = rho_seq.data, rho_seq.spec.dx
    (a, ca), (b, cb) = time_stencil(t, rho_seq.n_frames, rho_seq.dt)
    u = uc.data[t] + uf.data[t]
    r = ca * rho[a] + cb * rho[b] + np.sum(u * grad_arr(rho[t], dx), axis=0)
    return _frame_residual_mean(r)


def loss_warp(uf_seq: FieldSequence, uc_seq: FieldSequence, t: int) -> float:
    uf, uc, dx = uf_seq.data, uc_seq.data, uf_seq.spec.dx
    (a, ca), (b, cb) = time_stencil(t, uf_seq.n_frames, uf_seq.dt)
    r = ca * uf[a] + cb * uf[b] + directional(uc[t], uf[t], dx)
    return _frame_residual_mean(r)


def loss_proj(uf: VectorGrid, sdf: Optional[ScalarGrid] = None,
              cfg: PoissonConfig = PoissonConfig()) -> float:
    proj = Projector(uf.spec.shape, uf.spec.dx, None if sdf is None else sdf.data, cfg)
    up, _, _ = proj(uf.data)
    r = uf.data - up
    return float(np.sum(r * r)) / uf.spec.n_cells
