"""Grid-parameterized coarse/fine velocity reconstruction.

The coarse velocity is a per-frame grid at a reduced resolution, upsampled
trilinearly to the density grid before any loss is evaluated. The fine
velocity lives directly on the density grid. Both are optimized with Adam
from a zero initialization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np

from .grid_fields import FieldSequence, GridSpec, ScalarGrid, resample_adjoint, resample_arr
from .losses import LossContext, LossReport, LossWeights, coarse_total, fine_total
from .pressure_projection import PoissonConfig

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when an optimization produces a non-finite loss or gradient."""


@dataclass
class CoarseParams:
    spec: GridSpec
    data: np.ndarray
    dt: float
    factor: int = 4

    @classmethod
    def zeros(cls, fine: GridSpec, frames: int, dt: float, factor: int = 4) -> "CoarseParams":
        spec = fine.coarsen(factor) if factor > 1 else fine
        return cls(spec, np.zeros((frames, 3) + spec.shape), dt, factor)

    def upsample(self, target: GridSpec) -> FieldSequence:
        return upsample_coarse(self, target)


@dataclass
class FineParams:
    spec: GridSpec
    data: np.ndarray
    dt: float

    @classmethod
    def zeros(cls, spec: GridSpec, frames: int, dt: float) -> "FineParams":
        return cls(spec, np.zeros((frames, 3) + spec.shape), dt)

    def sequence(self) -> FieldSequence:
        return FieldSequence(self.spec, self.data, self.dt)


@dataclass
class StageConfig:
    stage: Literal["coarse", "fine"] = "coarse"
    iters: int = 2000
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    coarse_factor: int = 4
    variant: str = "long-w"
    substeps: int = 1
    poisson: PoissonConfig = field(default_factory=lambda: PoissonConfig(tol=1e-6, max_iters=2000))
    log_every: int = 100

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.stage not in ("coarse", "fine"):
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **kw)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float
              ) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("params, grad and moments must share a shape")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def upsample_coarse(p: CoarseParams, target: GridSpec) -> FieldSequence:
    return FieldSequence(target, resample_arr(p.data, p.spec, target), p.dt)


def combine_alpha(uc: np.ndarray) -> np.ndarray:
    """Per-cell blend weight min((|u_c| / m)^5, 1), m = twice the frame-mean speed.

    ``uc`` is (T, 3, nx, ny, nz); frames with m = 0 get alpha = 0.
    """
    speed = np.sqrt(np.sum(uc * uc, axis=1))
    m = 2.0 * speed.mean(axis=(1, 2, 3), keepdims=True)
    ratio = np.divide(speed, m, out=np.zeros_like(speed), where=m > 0)
    return np.minimum(ratio**5, 1.0)


def combine(uc: FieldSequence, uf: FieldSequence) -> FieldSequence:
    if uc.spec != uf.spec or uc.n_frames != uf.n_frames:
        raise ValueError("coarse and fine sequences must share grid and frame count")
    alpha = combine_alpha(uc.data)
    return FieldSequence(uc.spec, uc.data + alpha[:, None] * uf.data, uc.dt)


def _solid(sdf: Optional[ScalarGrid]) -> Optional[np.ndarray]:
    if sdf is None:
        return None
    solid = sdf.data <= 0
    return solid if solid.any() else None


def _optimize(objective: Callable, params: np.ndarray, cfg: StageConfig,
              callback: Optional[Callable] = None) -> tuple[np.ndarray, list[LossReport]]:
    state = AdamState.like(params)
    history = []
    for it in range(cfg.iters):
        # overflow is detected below and reported as a NumericalError
        with np.errstate(over="ignore", invalid="ignore"):
            report, grad = objective(params, it)
        if not np.isfinite(report.total) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite loss at {cfg.stage} iteration {it}: {report.raw}")
        history.append(report)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("%s it %d total %.6g %s", cfg.stage, it, report.total,
                     {k: f"{v:.3g}" for k, v in report.raw.items()})
        params, state = adam_step(params, grad, state, cfg.lr)
        if callback is not None:
            callback(it, params, report)
    return params, history


def run_coarse_stage(rho_seq: FieldSequence, sdf: Optional[ScalarGrid], cfg: StageConfig,
                     callback: Optional[Callable] = None) -> tuple[CoarseParams, list[LossReport]]:
    """Fit the coarse velocity to a density sequence; returns params and per-step reports."""
    if rho_seq.n_frames < cfg.weights.k + 1 and cfg.variant.startswith("long"):
        raise ValueError(f"need at least k+1 = {cfg.weights.k + 1} frames")
    spec = rho_seq.spec
    params = CoarseParams.zeros(spec, rho_seq.n_frames, rho_seq.dt, cfg.coarse_factor)
    ctx = LossContext(rho_seq.data, spec, rho_seq.dt, cfg.weights, _solid(sdf), cfg.variant,
                      cfg.substeps, poisson=cfg.poisson)

    def objective(p, it):
        u = resample_arr(p, params.spec, spec)
        report, g = coarse_total(ctx, u, grad=True, step=it)
        return report, resample_adjoint(g, params.spec, spec)

    data, history = _optimize(objective, params.data, cfg, callback)
    params.data = data
    return params, history


def run_fine_stage(rho_seq: FieldSequence, uc: FieldSequence, sdf: Optional[ScalarGrid],
                   cfg: StageConfig, callback: Optional[Callable] = None
                   ) -> tuple[FineParams, list[LossReport]]:
    """Fit the fine velocity with the coarse velocity frozen."""
    if uc.spec != rho_seq.spec or uc.n_frames != rho_seq.n_frames:
        raise ValueError("coarse velocity must be upsampled to the density grid")
    spec = rho_seq.spec
    params = FineParams.zeros(spec, rho_seq.n_frames, rho_seq.dt)
    ctx = LossContext(rho_seq.data, spec, rho_seq.dt, cfg.weights, _solid(sdf),
                      substeps=cfg.substeps, uc=uc.data, poisson=cfg.poisson)

    def objective(p, it):
        return fine_total(ctx, p, grad=True, step=it)

    data, history = _optimize(objective, params.data, cfg, callback)
    params.data = data
    return params, history


@dataclass
class Reconstruction:
    coarse: FieldSequence
    fine: FieldSequence
    full: FieldSequence
    coarse_history: list[LossReport]
    fine_history: list[LossReport]


def reconstruct(rho_seq: FieldSequence, sdf: Optional[ScalarGrid], coarse_cfg: StageConfig,
                fine_cfg: Optional[StageConfig] = None,
                on_step: Optional[Callable[[str, int, FieldSequence], None]] = None
                ) -> Reconstruction:
    """Run both stages and blend them into the full velocity.

    ``on_step(stage, it, params)`` sees each stage's parameter grids after every update.
    """
    coarse_spec = CoarseParams.zeros(rho_seq.spec, 1, rho_seq.dt, coarse_cfg.coarse_factor).spec

    def hook(stage, spec):
        if on_step is None:
            return None
        return lambda it, p, rep: on_step(stage, it, FieldSequence(spec, p, rho_seq.dt))

    cp, ch = run_coarse_stage(rho_seq, sdf, coarse_cfg, hook("coarse", coarse_spec))
    uc = cp.upsample(rho_seq.spec)
    if fine_cfg is None or fine_cfg.iters == 0:
        fine = FieldSequence(rho_seq.spec, np.zeros_like(uc.data), rho_seq.dt)
        fh = []
    else:
        fp, fh = run_fine_stage(rho_seq, uc, sdf, fine_cfg, hook("fine", rho_seq.spec))
        fine = fp.sequence()
    return Reconstruction(uc, fine, combine(uc, fine), ch, fh)


__all__ = [
    "AdamState", "CoarseParams", "FineParams", "NumericalError", "Reconstruction", "StageConfig",
    "adam_step", "combine", "combine_alpha", "reconstruct", "run_coarse_stage", "run_fine_stage",
    "upsample_coarse",
]
