import numpy as np
import pytest

from conftest import smooth_field
from flowrecon import evaluation as ev
from flowrecon.forward_sim import SceneConfig, generate
from flowrecon.grid_fields import FieldSequence, GridSpec, ScalarGrid, VectorGrid
from flowrecon.pressure_projection import project
from flowrecon.reconstruction import StageConfig

SPEC = GridSpec.cube(8)


@pytest.fixture(scope="module")
def plume32():
    return generate(SceneConfig.plume(resolution=32, frames=20))


def rotation(spec):
    X = spec.centers()
    u = np.zeros((3,) + spec.shape)
    u[0] = -(X[1] - 0.5)
    u[1] = X[0] - 0.5
    return u


def test_masked_l2_examples(rng):
    f = rng.normal(size=(3,) + SPEC.shape)
    mask = np.zeros(SPEC.shape)
    mask[2:6, 2:6, 2:6] = 1
    assert ev.masked_l2(f, f, mask) == 0.0
    one = np.zeros_like(f)
    one[0] = 1.0
    assert ev.masked_l2(one, np.zeros_like(f), mask) == 1.0
    full = np.ones(SPEC.shape)
    g = rng.normal(size=f.shape)
    assert np.isclose(ev.masked_l2(f, g, full), np.sqrt(np.mean(np.sum((f - g) ** 2, 0))))
    with pytest.raises(ValueError):
        ev.masked_l2(f, g, np.zeros(SPEC.shape))
    with pytest.raises(ValueError):
        ev.masked_l2(f, g[:2], full)


def test_zero_reconstruction_error_is_gt_speed(plume32):
    rho, u, _ = plume32
    m = rho.data[5] > 0
    speed = np.sqrt((u.data[5] ** 2).sum(0))
    err = ev.masked_l2(np.zeros_like(u.data[5]), u.data[5], rho.data[5])
    assert np.isclose(err, np.sqrt(np.mean(speed[m] ** 2)), rtol=1e-12)


def test_vorticity_and_divergence_metrics(rng):
    spec = GridSpec.cube(16)
    rot = rotation(spec)
    mask = np.ones(spec.shape)
    assert ev.vorticity_metric(rot, rot, mask, dx=spec.dx) == 0.0
    assert np.isclose(ev.vorticity_metric(rot, np.zeros_like(rot), mask, dx=spec.dx), 2.0)
    u = smooth_field(rng, spec.shape, lead=(3,))
    up, _ = project(VectorGrid(spec, u))
    assert ev.divergence_metric(up) <= 1e-2 * ev.divergence_metric(VectorGrid(spec, u))


def test_psnr_examples(rng):
    a = rng.uniform(size=SPEC.shape)
    assert ev.psnr(a, a, 1.0) == ev.PSNR_CAP
    assert np.isclose(ev.psnr(a + 0.1, a, 1.0), 20.0)
    assert np.isclose(ev.psnr(a + 0.01, a, 1.0), 40.0)
    vals = [ev.psnr(a + s * rng.uniform(-1, 1, a.shape), a, 1.0) for s in (1e-3, 1e-2, 1e-1, 1.0)]
    assert all(x > y for x, y in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        ev.psnr(a, a, 0.0)


def test_ssim_examples(rng):
    a = smooth_field(rng, (24, 24, 24), modes=4)
    assert np.isclose(ev.ssim(a, a), 1.0)
    assert ev.ssim(a, -a + 3.0) < 1.0
    n1, n2 = rng.normal(size=(2, 32, 32, 32))
    assert abs(ev.ssim(n1, n2)) <= 0.1


def test_metrics_row_validation():
    with pytest.raises(ValueError):
        ev.MetricsRow(0, -1.0, 0, 0, 10, 1)
    with pytest.raises(ValueError):
        ev.MetricsRow(0, 0, 0, 0, np.inf, 1)


def test_resimulate_with_zero_velocity_is_frozen(rng):
    rho0 = ScalarGrid(SPEC, rng.uniform(size=SPEC.shape))
    u = FieldSequence(SPEC, np.zeros((4, 3) + SPEC.shape), 1.0)
    out = ev.resimulate(rho0, u)
    assert np.all(out.data == rho0.data)
    assert np.array_equal(out.data, ev.frozen_baseline(rho0, 4, 1.0).data)


def test_resimulate_gt_beats_zero_velocity(plume32):
    rho, u, _ = plume32
    rho0 = rho.frame(0)
    peak = rho.data.max()
    gt = ev.resimulate(rho0, u)
    frozen = ev.frozen_baseline(rho0, rho.n_frames, rho.dt)
    for t in range(1, rho.n_frames):
        p_gt = ev.psnr(gt.data[t], rho.data[t], peak)
        assert p_gt >= 25.0
        assert p_gt > ev.psnr(frozen.data[t], rho.data[t], peak)


def test_predict_examples():
    # weaker buoyancy keeps the puff inside the domain, so nothing leaves through the top
    rho, u, _ = generate(SceneConfig.plume(resolution=32, frames=6, buoyancy=0.01))
    cfg = SceneConfig.plume(resolution=32, buoyancy=0.01, inflow_steps=0)
    out = ev.predict(rho.frame(5), u.frame(5), 0, cfg)
    assert len(out) == 1 and np.array_equal(out[0].data, rho.data[5])
    zero = ev.predict(ScalarGrid.zeros(rho.spec), VectorGrid.zeros(rho.spec), 2, cfg)
    assert all(np.all(g.data == 0) for g in zero)
    pred = ev.predict(rho.frame(5), u.frame(5), 10, cfg)
    assert len(pred) == 11
    m0, m10 = rho.data[5].sum(), pred[-1].data.sum()
    assert abs(m10 - m0) <= 0.05 * m0


def test_evaluate_sequence_self_comparison(plume32):
    rho, u, _ = plume32
    rows = ev.evaluate_sequence(u, u, rho)
    assert len(rows) == rho.n_frames + 1 and rows[-1].frame == "summary"
    assert all(r.velocity_l2 == 0 and r.vorticity_l2 == 0 for r in rows)
    assert rows[-1].divergence_l2 < 1e-3


def test_threshold_mask_study_limits(plume32):
    rho, u, _ = plume32
    rng = np.random.default_rng(0)
    recon = u.data + 0.01 * rng.normal(size=u.data.shape)
    rows = ev.threshold_mask_study(recon, u.data, rho.data, [-np.inf, 2 * rho.data.max()])
    full = np.sqrt(np.mean(np.sum((recon - u.data) ** 2, 1)))
    m = rho.data > 0
    inside = np.sqrt(np.sum((recon - u.data) ** 2, 1)[m].mean())
    assert np.isclose(rows[0].unmasked_l2, full) and np.isclose(rows[0].masked_l2, inside)
    gt_speed2 = np.sum(u.data**2, 1)
    assert np.isclose(rows[1].masked_l2, np.sqrt(gt_speed2[m].mean()))
    assert np.isclose(rows[1].unmasked_l2, np.sqrt(gt_speed2.mean()))


def test_apply_threshold_zeroes_outside():
    u = np.ones((2, 3, 4, 4, 4))
    rho = np.zeros((2, 4, 4, 4))
    rho[1, 0, 0, 0] = 1.0
    out = ev.apply_threshold(u, rho, 0.5)
    assert out.sum() == 3.0 and np.all(out[1, :, 0, 0, 0] == 1)


def test_smooth_trailing_mean():
    c = [1.0, 3.0, 5.0, 7.0]
    assert np.allclose(ev.smooth(c, 2), [1.0, 2.0, 4.0, 6.0])
    assert np.array_equal(ev.smooth(c, 1), np.asarray(c))


def test_ablation_records_variant(plume32):
    rho, u, sdf = plume32
    small = StageConfig(iters=2, log_every=0)
    res = ev.ablation_run(rho, u, sdf, "short-u", small)
    assert res.variant == "short-u" and res.meta["variant"] == "short-u"
    assert len(res.div_curve) == 2 and res.summary.frame == "summary"
    assert StageConfig().variant == "long-w"
    with pytest.raises(ValueError):
        ev.ablation_run(rho, u, sdf, "medium", small)
