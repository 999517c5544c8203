"""Registry of differentiable losses and the finite-difference gradient check.

A registered loss maps ``(params, ctx)`` to ``(value, grad)`` where ``params``
is a velocity array and ``ctx`` a :class:`~flowrecon.losses.LossContext`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from .grid_fields import GridSpec, resample_adjoint, resample_arr

_REGISTRY: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn
    return deco


def registered() -> list[str]:
    return sorted(_REGISTRY)


def _lookup(name: str) -> Callable:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"{name!r} is not a registered differentiable loss; "
                       f"known: {', '.join(registered())}") from None


def evaluate(name: str, params: np.ndarray, ctx: L.LossContext) -> float:
    return _lookup(name)(params, ctx, False)[0]


def eval_with_grad(name: str, params: np.ndarray, ctx: L.LossContext) -> tuple[float, np.ndarray]:
    if not np.all(np.isfinite(params)):
        raise ValueError("parameters contain non-finite values")
    value, grad = _lookup(name)(params, ctx, True)
    if grad is None:
        grad = np.zeros_like(params)
    return value, grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: tuple
    eps: float
    samples: int


def fd_check(name: str, params: np.ndarray, ctx: L.LossContext, eps: float = 1e-6,
             samples: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare the analytic gradient with central differences at random coordinates."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    _, grad = eval_with_grad(name, params, ctx)
    rng = np.random.default_rng(seed)
    flat = rng.choice(params.size, size=min(samples, params.size), replace=False)
    worst, worst_at = 0.0, ()
    for f in flat:
        idx = np.unravel_index(f, params.shape)
        p = params.copy()
        p[idx] += eps
        plus = evaluate(name, p, ctx)
        p[idx] = params[idx] - eps
        minus = evaluate(name, p, ctx)
        fd = (plus - minus) / (2 * eps)
        an = grad[idx]
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        if err >= worst:
            worst, worst_at = err, tuple(int(i) for i in idx)
    return GradCheckReport(worst, worst_at, eps, len(flat))


# --- registered losses ----------------------------------------------------------------


@register("kine")
def _kine(u, ctx, grad):
    return L.kine_term(u, grad)


@register("bnd")
def _bnd(u, ctx, grad):
    return L.bnd_term(u, ctx.solid, grad)


@register("div")
def _div(u, ctx, grad):
    return L.div_term(u, ctx.dx, grad)


@register("vor")
def _vor(u, ctx, grad):
    return L.vor_term(u, ctx.dx, ctx.dt, grad)


@register("vel")
def _vel(u, ctx, grad):
    return L.vel_term(u, ctx.dx, ctx.dt, grad)


@register("trans")
def _trans(u, ctx, grad):
    w = ctx.weights
    return L.trans_term(ctx.rho, u, ctx.dx, ctx.dt, w.k, w.beta, substeps=ctx.substeps, grad=grad)


@register("adv")
def _adv(u, ctx, grad):
    """Density residual of the combined velocity ``ctx.uc + u`` (u_c zero if absent)."""
    full = u if ctx.uc is None else ctx.uc + u
    return L.adv_term(ctx.rho, full, ctx.dx, ctx.dt, grad, ctx.rho_grad)


@register("warp")
def _warp(u, ctx, grad):
    return L.warp_term(u, ctx.uc, ctx.dx, ctx.dt, grad)


@register("proj")
def _proj(u, ctx, grad):
    return ctx.proj(u, grad, warm=False)


def _report_pair(pair):
    report, g = pair
    return report.total, g


@register("coarse_total")
def _coarse_total(u, ctx, grad):
    return _report_pair(L.coarse_total(ctx, u, grad))


@register("fine_total")
def _fine_total(u, ctx, grad):
    return _report_pair(L.fine_total(ctx, u, grad, warm=False))


def coarse_spec(ctx: L.LossContext, params: np.ndarray) -> GridSpec:
    n = params.shape[-3:]
    factor = ctx.spec.nx // n[0]
    return ctx.spec.coarsen(factor) if factor > 1 else ctx.spec


@register("coarse_objective")
def _coarse_objective(params, ctx, grad):
    """coarse_total of the coarse parameters upsampled to the density grid."""
    src = coarse_spec(ctx, params)
    u = resample_arr(params, src, ctx.spec)
    value, g = _coarse_total(u, ctx, grad)
    if not grad:
        return value, None
    return value, resample_adjoint(g, src, ctx.spec)
