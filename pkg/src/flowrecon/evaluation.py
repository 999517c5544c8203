"""Metrics, re-simulation, the density-threshold masking study and the ablation driver.

Masked metrics use cells where the ground-truth density exceeds ``tau``
(strictly); the default ``tau = 0`` keeps every cell with non-zero density.
The divergence metric is masked the same way as the velocity and vorticity
metrics.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from skimage.metrics import structural_similarity

from .forward_sim import Scene, SceneConfig, SceneState
from .grid_fields import FieldSequence, Grid, ScalarGrid, VectorGrid, curl_arr, div_arr
from .losses import COARSE_VARIANTS, LossWeights
from .reconstruction import StageConfig, run_coarse_stage
from .transport import advect_arr

PSNR_CAP = 99.0
MASK_CONVENTION = "rho_gt > tau for divergence, velocity and vorticity"

ArrayLike = Union[np.ndarray, Grid]


def _arr(x: ArrayLike) -> np.ndarray:
    if isinstance(x, (ScalarGrid, VectorGrid, FieldSequence)):
        return x.data
    return np.asarray(x, dtype=float)


def _region(mask: ArrayLike, tau: float) -> np.ndarray:
    region = _arr(mask) > tau
    if not region.any():
        raise ValueError(f"mask selects no cells at tau={tau}")
    return region


@dataclass
class MetricsRow:
    frame: Union[int, str]
    divergence_l2: float
    velocity_l2: float
    vorticity_l2: float
    psnr: float
    ssim: float

    def __post_init__(self):
        for name in ("divergence_l2", "velocity_l2", "vorticity_l2"):
            v = getattr(self, name)
            if not v >= 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if not np.isfinite(self.psnr) or self.psnr > PSNR_CAP:
            raise ValueError(f"psnr must be finite and <= {PSNR_CAP}")

    def as_dict(self) -> dict:
        return asdict(self)


def masked_l2(field: ArrayLike, gt_field: ArrayLike, mask: ArrayLike, tau: float = 0.0) -> float:
    """RMS of the per-cell difference magnitude over cells with mask > tau.

    Scalars are (nx, ny, nz), vectors (3, nx, ny, nz).
    """
    a, b = _arr(field), _arr(gt_field)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    region = _region(mask, tau)
    d = a - b
    sq = d * d if d.ndim == 3 else np.sum(d * d, axis=0)
    return float(np.sqrt(sq[region].mean()))


def divergence_metric(u: ArrayLike, mask: Optional[ArrayLike] = None, tau: float = 0.0,
                      dx: Optional[float] = None) -> float:
    """RMS divergence over the masked region (all cells if ``mask`` is None)."""
    if dx is None:
        dx = u.spec.dx
    d = div_arr(_arr(u), dx)
    region = np.ones(d.shape, bool) if mask is None else _region(mask, tau)
    return float(np.sqrt((d * d)[region].mean()))


def vorticity_metric(u: ArrayLike, gt: ArrayLike, mask: Optional[ArrayLike] = None,
                     tau: float = 0.0, dx: Optional[float] = None) -> float:
    """RMS magnitude of the curl difference over the masked region."""
    if dx is None:
        dx = u.spec.dx
    w = curl_arr(_arr(u), dx)
    w_gt = curl_arr(_arr(gt), dx)
    m = np.ones(w.shape[1:]) if mask is None else mask
    return masked_l2(w, w_gt, m, tau if mask is not None else -np.inf)


def resimulate(rho0: ScalarGrid, u_seq: FieldSequence, substeps: int = 1) -> FieldSequence:
    """Advect ``rho0`` through every velocity frame with MacCormack."""
    if rho0.spec != u_seq.spec:
        raise ValueError("density and velocity grids differ")
    frames = [rho0.data]
    for t in range(u_seq.n_frames - 1):
        frames.append(advect_arr(frames[-1], u_seq.data[t], u_seq.dt, u_seq.spec.dx, substeps))
    return FieldSequence(u_seq.spec, np.stack(frames), u_seq.dt)


def frozen_baseline(rho0: ScalarGrid, n_frames: int, dt: float) -> FieldSequence:
    return FieldSequence(rho0.spec, np.repeat(rho0.data[None], n_frames, axis=0), dt)


def predict(rho_t: ScalarGrid, u_t: VectorGrid, steps: int,
            cfg: Optional[SceneConfig] = None) -> list[ScalarGrid]:
    """Evolve one frame with the forward solver (no inflow); returns ``steps + 1`` densities."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    spec = rho_t.spec
    if cfg is None:
        if not spec.nx == spec.ny == spec.nz:
            raise ValueError("default prediction config needs a cubic grid")
        cfg = SceneConfig(resolution=spec.nx, inflow_steps=0)
    scene = Scene(cfg)
    if scene.spec.shape != spec.shape:
        raise ValueError("scene resolution differs from the input grid")
    state = SceneState(rho_t.data.copy(), u_t.data.copy())
    out = [ScalarGrid(spec, rho_t.data.copy())]
    for _ in range(steps):
        state = scene.advance(state, inflow=False)[2]
        out.append(ScalarGrid(spec, state.rho.copy()))
    return out


def psnr(a: ArrayLike, b: ArrayLike, peak: float) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    d = _arr(a) - _arr(b)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def ssim(a: ArrayLike, b: ArrayLike, data_range: Optional[float] = None) -> float:
    """Gaussian-window SSIM (sigma 1.5, narrower on tiny grids) averaged over the three axis-aligned mid-slices."""
    x, y = _arr(a), _arr(b)
    if x.shape != y.shape or x.ndim != 3:
        raise ValueError("ssim expects two scalar grids of equal shape")
    if data_range is None:
        data_range = float(max(x.max(), y.max()) - min(x.min(), y.min())) or 1.0
    # the 1.5-cell Gaussian window needs 11 cells; shrink it on smaller slices
    side = min(sorted(x.shape)[:2])
    if side < 3:
        raise ValueError("ssim needs slices of at least 3x3 cells")
    sigma = min(1.5, ((side - 1) // 2 - 0.25) / 3.5)
    vals = []
    for axis in range(3):
        mid = x.shape[axis] // 2
        sa, sb = np.take(x, mid, axis=axis), np.take(y, mid, axis=axis)
        vals.append(structural_similarity(sa, sb, data_range=data_range, gaussian_weights=True,
                                          sigma=sigma, use_sample_covariance=False))
    return float(np.mean(vals))


def evaluate_sequence(u: FieldSequence, gt_u: FieldSequence, rho_gt: FieldSequence,
                      tau: float = 0.0, resim: bool = True) -> list[MetricsRow]:
    """One row per frame plus a trailing summary row of frame means."""
    if not (u.spec == gt_u.spec == rho_gt.spec) or u.n_frames != gt_u.n_frames:
        raise ValueError("sequences must share grid and frame count")
    dx = u.spec.dx
    peak = float(rho_gt.data.max()) or 1.0
    rho_hat = resimulate(ScalarGrid(u.spec, rho_gt.data[0]), u).data if resim else None
    rows = []
    for t in range(u.n_frames):
        m = rho_gt.data[t]
        if not (m > tau).any():
            m = np.ones_like(m)
        p = s = 0.0
        if rho_hat is not None:
            p = psnr(rho_hat[t], rho_gt.data[t], peak)
            s = ssim(rho_hat[t], rho_gt.data[t], data_range=peak)
        rows.append(MetricsRow(
            t,
            divergence_metric(u.data[t], m, tau, dx),
            masked_l2(u.data[t], gt_u.data[t], m, tau),
            vorticity_metric(u.data[t], gt_u.data[t], m, tau, dx),
            p, s))
    rows.append(summarize(rows))
    return rows


def summarize(rows: Sequence[MetricsRow]) -> MetricsRow:
    keys = ("divergence_l2", "velocity_l2", "vorticity_l2", "psnr", "ssim")
    means = {k: float(np.mean([getattr(r, k) for r in rows])) for k in keys}
    return MetricsRow("summary", **means)


@dataclass
class MaskRow:
    tau: float
    masked_l2: float
    unmasked_l2: float


def apply_threshold(u: np.ndarray, rho_gt: np.ndarray, tau: float) -> np.ndarray:
    """Zero velocity where the ground-truth density is <= tau (per frame)."""
    keep = rho_gt > tau
    return np.where(keep[..., None, :, :, :], u, 0.0)


def threshold_mask_study(u: ArrayLike, gt_u: ArrayLike, rho_gt: ArrayLike,
                         taus: Sequence[float]) -> list[MaskRow]:
    """Velocity error after density-threshold masking, for each tau.

    ``masked_l2`` is measured over cells with non-zero ground-truth density,
    ``unmasked_l2`` over the whole domain. Arrays may carry a leading frame axis.
    """
    U, G, R = _arr(u), _arr(gt_u), _arr(rho_gt)
    if U.ndim == 4:
        U, G, R = U[None], G[None], R[None]
    full = np.ones(R.shape, bool)
    err_region = R > 0 if (R > 0).any() else full
    rows = []
    for tau in taus:
        Um = apply_threshold(U, R, tau)
        sq = np.sum((Um - G) ** 2, axis=1)
        rows.append(MaskRow(float(tau), float(np.sqrt(sq[err_region].mean())),
                            float(np.sqrt(sq.mean()))))
    return rows


@dataclass
class AblationResult:
    variant: str
    summary: MetricsRow
    div_curve: list[float]
    velocity: FieldSequence
    meta: dict = field(default_factory=dict)


def ablation_run(rho_seq: FieldSequence, gt_u: FieldSequence, sdf: Optional[ScalarGrid],
                 variant: str, cfg: Optional[StageConfig] = None) -> AblationResult:
    """Coarse-stage reconstruction with one of the four temporal/NSE variants.

    ``long-w`` is the default configuration; ``short-*`` swaps the multi-step
    transport loss for the single-step advection residual, ``*-u`` swaps the
    vorticity residual for the velocity residual at the same weight.
    """
    if variant not in COARSE_VARIANTS:
        raise ValueError(f"variant must be one of {COARSE_VARIANTS}")
    cfg = cfg or StageConfig()
    cfg = StageConfig(**{**cfg.__dict__, "variant": variant})
    params, history = run_coarse_stage(rho_seq, sdf, cfg)
    u = params.upsample(rho_seq.spec)
    rows = evaluate_sequence(u, gt_u, rho_seq, resim=False)
    curve = [float(r.raw["div"]) for r in history]
    meta = {"variant": variant, "iters": cfg.iters, "lr": cfg.lr,
            "weights": cfg.weights.__dict__ if isinstance(cfg.weights, LossWeights) else {},
            "mask": MASK_CONVENTION}
    return AblationResult(variant, rows[-1], curve, u, meta)


def smooth(curve: Sequence[float], window: int = 25) -> np.ndarray:
    """Trailing moving average, same length as the input."""
    c = np.asarray(curve, dtype=float)
    if window <= 1 or len(c) == 0:
        return c
    cs = np.cumsum(np.insert(c, 0, 0.0))
    idx = np.arange(1, len(c) + 1)
    lo = np.maximum(idx - window, 0)
    return (cs[idx] - cs[lo]) / (idx - lo)
