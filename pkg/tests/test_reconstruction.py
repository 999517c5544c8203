import numpy as np
import pytest

from flowrecon.grid_fields import FieldSequence, GridSpec
from flowrecon.losses import LossContext, LossWeights, fine_total
from flowrecon.reconstruction import (AdamState, CoarseParams, StageConfig, adam_step, combine,
                                      combine_alpha, reconstruct, run_coarse_stage,
                                      run_fine_stage)

SPEC16 = GridSpec.cube(16)


def gaussian_sequence(spec, frames, c, x0=(0.35, 0.5, 0.5), width=0.1):
    X = spec.centers()
    c = np.asarray(c, float)[:, None, None, None]
    x0 = np.asarray(x0, float)[:, None, None, None]
    return np.stack([np.exp(-np.sum((X - x0 - t * c) ** 2, 0) / (2 * width**2))
                     for t in range(frames)])


# --- Adam -----------------------------------------------------------------------------


def test_adam_zero_grad_keeps_params(rng):
    p = rng.normal(size=(4, 5))
    new, st = adam_step(p, np.zeros_like(p), AdamState.like(p), 1e-3)
    assert np.array_equal(new, p) and st.step == 1


def test_adam_constant_grad_step_tends_to_lr(rng):
    p = np.zeros(6)
    g = rng.normal(size=6) * np.logspace(-4, 2, 6)
    st = AdamState.like(p)
    for _ in range(1000):
        prev = p
        p, st = adam_step(p, g, st, 1e-3)
    step = np.abs(p - prev)
    assert np.all(step >= 0.9e-3) and np.all(step <= 1e-3)


def test_adam_deterministic_trajectory(rng):
    g = rng.normal(size=(3, 4))

    def run():
        p, st, out = np.ones((3, 4)), AdamState.like(np.ones((3, 4))), []
        for i in range(50):
            p, st = adam_step(p, g * np.cos(i) + p, st, 1e-2)
            out.append(p.copy())
        return np.array(out)

    assert np.array_equal(run(), run())


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(4), AdamState.like(np.zeros(3)), 1e-3)


# --- blending ---------------------------------------------------------------------------


def test_combine_alpha_properties(rng):
    uc = rng.normal(size=(3, 3, 6, 6, 6))
    uc[0] = 0.0
    uc[1, :, 0, 0, 0] = 0.0
    a = combine_alpha(uc)
    assert a.shape == (3, 6, 6, 6)
    assert np.all((a >= 0) & (a <= 1))
    assert np.all(a[0] == 0) and a[1, 0, 0, 0] == 0
    speed = np.linalg.norm(uc, axis=1)
    m = 2 * speed.mean(axis=(1, 2, 3), keepdims=True)
    assert np.all(a[1:][speed[1:] >= m[1:]] == 1.0)


def test_combine_alpha_half_m_exact():
    uc = np.zeros((1, 3, 2, 1, 1))
    uc[0, 0, 0] = 2.0
    uc[0, 0, 1] = 2.0
    a = combine_alpha(uc)
    # m = 4, speed 2 = m/2
    assert a[0, 0, 0, 0] == 0.03125


def test_combine_blend_and_checks(rng):
    uc = FieldSequence(GridSpec.cube(4), rng.normal(size=(2, 3, 4, 4, 4)), 1.0)
    uf = FieldSequence(GridSpec.cube(4), rng.normal(size=(2, 3, 4, 4, 4)), 1.0)
    full = combine(uc, uf)
    a = combine_alpha(uc.data)
    assert np.array_equal(full.data, uc.data + a[:, None] * uf.data)
    with pytest.raises(ValueError):
        combine(uc, FieldSequence(GridSpec.cube(4), uf.data[:1].repeat(3, 0), 1.0))


# --- stages -----------------------------------------------------------------------------


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(iters=-1)
    with pytest.raises(ValueError):
        StageConfig(lr=0)
    with pytest.raises(ValueError):
        StageConfig(stage="medium")


def test_zero_iterations_returns_initialization():
    rho = FieldSequence(SPEC16, gaussian_sequence(SPEC16, 7, (0.02, 0, 0)), 1.0)
    cp, hist = run_coarse_stage(rho, None, StageConfig(iters=0))
    assert hist == [] and np.all(cp.data == 0) and cp.spec == SPEC16.coarsen(4)
    uc = cp.upsample(SPEC16)
    fp, fh = run_fine_stage(rho, uc, None, StageConfig(stage="fine", iters=0))
    assert fh == [] and np.all(fp.data == 0)


def test_static_density_stays_at_rest():
    frames = np.repeat(gaussian_sequence(SPEC16, 1, (0, 0, 0)), 7, axis=0)
    rho = FieldSequence(SPEC16, frames, 1.0)
    cp, hist = run_coarse_stage(rho, None, StageConfig(iters=10, log_every=0))
    assert np.linalg.norm(cp.data, axis=1).mean() == 0.0
    assert all(r.total == 0.0 for r in hist)


def test_coarse_stage_reduces_transport_loss_and_is_deterministic():
    rho = FieldSequence(SPEC16, gaussian_sequence(SPEC16, 7, (0.02, 0, 0)), 1.0)
    cfg = StageConfig(iters=40, lr=2e-3, coarse_factor=2, log_every=0)
    cp1, h1 = run_coarse_stage(rho, None, cfg)
    cp2, h2 = run_coarse_stage(rho, None, cfg)
    assert np.array_equal(cp1.data, cp2.data)
    assert [r.raw for r in h1] == [r.raw for r in h2]
    assert h1[-1].raw["trans"] < 0.1 * h1[0].raw["trans"]
    # mean x velocity inside the blob points along the motion
    mask = rho.data > 0.5
    ux = cp1.upsample(SPEC16).data[:, 0]
    assert ux[mask].mean() > 0.005


def test_fine_stage_leaves_explained_motion_alone():
    c = (0.02, 0, 0)
    rho = FieldSequence(SPEC16, gaussian_sequence(SPEC16, 8, c), 1.0)
    uc = np.broadcast_to(np.asarray(c)[None, :, None, None, None], (8, 3) + SPEC16.shape).copy()
    fp, _ = run_fine_stage(rho, FieldSequence(SPEC16, uc, 1.0), None,
                           StageConfig(stage="fine", iters=20, lr=1e-4, log_every=0))
    assert np.linalg.norm(fp.data) <= 1e-2 * np.linalg.norm(uc)


def test_fine_stage_improves_advection_residual():
    rho = FieldSequence(SPEC16, gaussian_sequence(SPEC16, 6, (0.03, 0.01, 0)), 1.0)
    uc = FieldSequence(SPEC16, np.zeros((6, 3) + SPEC16.shape), 1.0)
    uc.data[:, 0] = 0.015
    cfg = StageConfig(stage="fine", iters=30, lr=1e-3, log_every=0)
    fp, hist = run_fine_stage(rho, uc, None, cfg)
    ctx = LossContext(rho.data, SPEC16, 1.0, LossWeights(), uc=uc.data)
    before = fine_total(ctx, np.zeros_like(fp.data))[0].raw["adv"]
    after = fine_total(ctx, fp.data)[0].raw["adv"]
    assert after < before


def test_reconstruct_blends_and_reports_checkpoints():
    rho = FieldSequence(SPEC16, gaussian_sequence(SPEC16, 7, (0.02, 0, 0)), 1.0)
    seen = []
    rec = reconstruct(rho, None, StageConfig(iters=3, log_every=0),
                      StageConfig(stage="fine", iters=2, log_every=0),
                      on_step=lambda s, it, p: seen.append((s, it, p.spec.nx)))
    assert seen == [("coarse", 0, 4), ("coarse", 1, 4), ("coarse", 2, 4),
                    ("fine", 0, 16), ("fine", 1, 16)]
    assert len(rec.coarse_history) == 3 and len(rec.fine_history) == 2
    a = combine_alpha(rec.coarse.data)
    assert np.array_equal(rec.full.data, rec.coarse.data + a[:, None] * rec.fine.data)


def test_coarse_params_upsample_shapes():
    p = CoarseParams.zeros(SPEC16, 3, 1.0, factor=4)
    assert p.data.shape == (3, 3, 4, 4, 4)
    assert p.upsample(SPEC16).data.shape == (3, 3, 16, 16, 16)
