import csv
import json

import numpy as np
import pytest
from PIL import Image

from flowrecon import cli_io
from flowrecon.cli_io import (HEADER_SIZE, FieldFormatError, RunConfig, decode_field,
                              encode_field, load_config, main, read_field, render_slice,
                              write_field)
from flowrecon.grid_fields import FieldSequence, GridSpec, ScalarGrid, VectorGrid
from flowrecon.losses import LossWeights


def f32(a):
    return a.astype(np.float32).astype(np.float64)


def test_round_trip_sequence_bitwise(tmp_path, rng):
    spec = GridSpec(8, 6, 5, 0.125)
    seq = FieldSequence(spec, f32(rng.normal(size=(3, 3, 8, 6, 5))), 0.5)
    write_field(tmp_path / "u.fvf", seq)
    back = read_field(tmp_path / "u.fvf")
    assert isinstance(back, FieldSequence) and back.spec == spec and back.dt == 0.5
    assert np.array_equal(back.data, seq.data)
    assert encode_field(back) == (tmp_path / "u.fvf").read_bytes()


def test_round_trip_single_grids(rng):
    spec = GridSpec.cube(4)
    s = ScalarGrid(spec, f32(rng.normal(size=spec.shape)))
    v = VectorGrid(spec, f32(rng.normal(size=(3,) + spec.shape)))
    assert np.array_equal(decode_field(encode_field(s)).data, s.data)
    back = decode_field(encode_field(v))
    assert isinstance(back, VectorGrid) and np.array_equal(back.data, v.data)


def test_layout_is_x_fastest_component_interleaved():
    spec = GridSpec.cube(4)
    u = np.zeros((3, 4, 4, 4))
    u[:, 0, 0, 0] = [1, 2, 3]
    u[:, 1, 0, 0] = [4, 5, 6]
    u[:, 0, 1, 0] = [7, 8, 9]
    buf = encode_field(VectorGrid(spec, u))
    assert len(buf) == HEADER_SIZE + 4 * 3 * 64 and buf[:4] == b"FVF1"
    vals = np.frombuffer(buf[HEADER_SIZE:], "<f4")
    assert vals[:6].tolist() == [1, 2, 3, 4, 5, 6] and vals[12:15].tolist() == [7, 8, 9]


def test_malformed_files_rejected(rng):
    buf = encode_field(ScalarGrid(GridSpec.cube(4), rng.normal(size=(4, 4, 4))))
    with pytest.raises(FieldFormatError, match="magic"):
        decode_field(b"XXXX" + buf[4:])
    with pytest.raises(FieldFormatError, match="length"):
        decode_field(buf[:-4])
    with pytest.raises(FieldFormatError):
        decode_field(buf[:10])
    bad = bytearray(buf)
    bad[HEADER_SIZE:HEADER_SIZE + 4] = np.array([np.nan], "<f4").tobytes()
    with pytest.raises(FieldFormatError, match="non-finite"):
        decode_field(bytes(bad))


def test_config_defaults_and_strictness(tmp_path):
    cfg = load_config(None)
    assert cfg.loss_weights() == LossWeights()
    assert cfg.stage("coarse").lr == 1e-3 and cfg.stage("coarse").iters == 2000
    cyl = RunConfig(preset="cylinder")
    assert cyl.loss_weights() == LossWeights.cylinder()
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"weights": {"lambda_kin": 1.0}}))
    with pytest.raises(Exception):
        load_config(p)
    assert cli_io.config_hash(cfg) == cli_io.config_hash(RunConfig())
    assert cli_io.config_hash(cfg) != cli_io.config_hash(cyl)


def test_render_constant_and_deterministic(tmp_path):
    spec = GridSpec.cube(8)
    render_slice(ScalarGrid(spec, np.full(spec.shape, 0.3)), "z", "mid", 0, tmp_path / "c.png")
    img = np.asarray(Image.open(tmp_path / "c.png"))[:-cli_io.FOOTER_HEIGHT]
    assert np.all(img == img[0, 0])
    rng = np.random.default_rng(0)
    g = ScalarGrid(spec, rng.normal(size=spec.shape))
    render_slice(g, "x", 2, 0, tmp_path / "a.png")
    render_slice(g, "x", 2, 0, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    with pytest.raises(IndexError):
        render_slice(g, "x", 9, 0, tmp_path / "d.png")


def test_render_rotation_brightens_outward(tmp_path):
    spec = GridSpec.cube(32)
    X = spec.centers()
    u = np.zeros((3,) + spec.shape)
    u[0], u[1] = -(X[1] - 0.5), X[0] - 0.5
    render_slice(VectorGrid(spec, u), "z", "mid", 0, tmp_path / "r.png", scale=1)
    px = np.asarray(Image.open(tmp_path / "r.png"))[:32].astype(float).sum(-1)
    row = px[15, 16:]          # centre row, moving right from the axis
    assert np.all(np.diff(row) >= 0) and row[-1] > row[0]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("gt")
    assert run("gen", "--scene", "plume", "--res", 8, "--frames", 6, "--out", d) == 0
    return d


def test_gen_outputs_and_self_eval(gen_dir, tmp_path):
    names = {p.name for p in gen_dir.iterdir()}
    assert {"density.fvf", "velocity.fvf", "sdf.fvf", "scene.json"} <= names
    assert run("eval", "--recon", gen_dir, "--gt", gen_dir, "--out", tmp_path / "m.csv",
               "--mask-sweep", "0,0.1,10") == 0
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 7 and rows[-1]["frame"] == "summary"
    assert all(float(r["velocity_l2"]) == 0.0 for r in rows)
    mask = list(csv.DictReader(open(tmp_path / "m_mask.csv")))
    assert [float(r["tau"]) for r in mask] == [0.0, 0.1, 10.0]


def test_gen_is_byte_deterministic(gen_dir, tmp_path):
    assert run("gen", "--scene", "plume", "--res", 8, "--frames", 6, "--out", tmp_path) == 0
    for name in ("density.fvf", "velocity.fvf", "sdf.fvf", "scene.json"):
        assert (tmp_path / name).read_bytes() == (gen_dir / name).read_bytes()


def test_reconstruct_outputs(gen_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "weights": {"k": 2},
        "coarse": {"iters": 3, "coarse_factor": 2, "checkpoint_every": 2},
        "fine": {"iters": 2}}))
    outs = []
    for name in ("r1", "r2"):
        assert run("reconstruct", "--data", gen_dir, "--config", cfg, "--out", tmp_path / name) == 0
        outs.append(tmp_path / name)
    for name in ("coarse.fvf", "fine.fvf", "full.fvf", "loss_history.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    hist = list(csv.DictReader(open(outs[0] / "loss_history.csv")))
    assert [r["stage"] for r in hist] == ["coarse"] * 3 + ["fine"] * 2
    assert (outs[0] / "checkpoints" / "coarse_000002.fvf").exists()
    meta = json.loads((outs[0] / "run_meta.json").read_text())
    assert meta["config"]["weights"]["k"] == 2 and len(meta["config_hash"]) == 64
    assert meta["config"]["weights"]["lambda_kine"] == 10.0
    full = read_field(outs[0] / "full.fvf")
    assert full.n_frames == 6 and full.components == 3


def test_resim_trace_render(gen_dir, tmp_path):
    assert run("resim", "--velocity", gen_dir / "velocity.fvf", "--density",
               gen_dir / "density.fvf", "--out", tmp_path / "r.fvf") == 0
    assert read_field(tmp_path / "r.fvf").n_frames == 6
    assert run("trace", "--velocity", gen_dir / "velocity.fvf", "--plane", "axis=y,coord=0.1",
               "--count", 5, "--out", tmp_path / "t.csv") == 0
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == list(cli_io.TRACER_HEADER) and len(rows) == 1 + 5 * 7
    assert run("render", "--field", gen_dir / "velocity.fvf", "--axis", "z", "--index", "mid",
               "--frame", 2, "--out", tmp_path / "v.png") == 0
    assert (tmp_path / "v.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_exit_codes(gen_dir, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"coarse": {"iterations": 5}}))
    assert run("reconstruct", "--data", gen_dir, "--config", bad, "--out", tmp_path / "o") == 2
    assert "error" in capsys.readouterr().err
    assert run("trace", "--velocity", gen_dir / "velocity.fvf", "--plane", "axis=q",
               "--count", 2, "--out", tmp_path / "t.csv") == 2
    assert run("render", "--field", tmp_path / "missing.fvf", "--out", tmp_path / "x.png") == 2
    assert run("gen", "--scene", "lake", "--out", tmp_path) == 2
    huge = tmp_path / "huge.json"
    huge.write_text(json.dumps({"weights": {"k": 2}, "coarse": {"iters": 5, "lr": 1e300, "coarse_factor": 2},
                                "fine": {"iters": 0}}))
    assert run("reconstruct", "--data", gen_dir, "--config", huge, "--out", tmp_path / "h") == 3
    assert "numerical" in capsys.readouterr().err
