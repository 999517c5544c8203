"""Field files, run configuration, PNG slices, CSV tables and the command line.

Field file layout (all little-endian)::

    magic  4s   b"FVF1"
    version u32  1
    nx ny nz u32
    components u32  (1 or 3)
    frames u32
    dx f32, dt f32
    reserved 8 bytes of zero
    payload f32[frames][nz][ny][nx][components]

so x varies fastest over cells, components are interleaved per cell and
frames are outermost.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import struct
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from filelock import FileLock, Timeout
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from .forward_sim import SceneConfig, generate
from .grid_fields import FieldSequence, GridSpec, ScalarGrid, VectorGrid
from .losses import LossReport, LossWeights
from .pressure_projection import PoissonConfig
from .reconstruction import NumericalError, StageConfig, reconstruct

log = logging.getLogger(__name__)

MAGIC = b"FVF1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIff8s")
HEADER_SIZE = _HEADER.size  # 44 bytes


class FieldFormatError(ValueError):
    """Malformed field file."""


# --- binary field format ----------------------------------------------------------


def _as_frames(field) -> tuple[GridSpec, np.ndarray, float, int]:
    """(spec, data (T, C, nx, ny, nz), dt, components)."""
    if isinstance(field, FieldSequence):
        data = field.data
        if data.ndim == 4:
            data = data[:, None]
        return field.spec, data, field.dt, data.shape[1]
    if isinstance(field, (ScalarGrid, VectorGrid)):
        data = field.data if field.data.ndim == 4 else field.data[None]
        return field.spec, data[None], 1.0, data.shape[0]
    raise TypeError(f"cannot write {type(field).__name__}")


def encode_field(field, dt: Optional[float] = None) -> bytes:
    spec, data, seq_dt, comps = _as_frames(field)
    if comps not in (1, 3):
        raise FieldFormatError("components must be 1 or 3")
    if not np.all(np.isfinite(data)):
        raise FieldFormatError("refusing to write non-finite values")
    T = data.shape[0]
    header = _HEADER.pack(MAGIC, VERSION, spec.nx, spec.ny, spec.nz, comps, T,
                          spec.dx, seq_dt if dt is None else dt, b"\0" * 8)
    # (T, C, x, y, z) -> (T, z, y, x, C)
    payload = np.ascontiguousarray(data.transpose(0, 4, 3, 2, 1), dtype="<f4")
    return header + payload.tobytes()


def decode_field(buf: bytes) -> Union[FieldSequence, ScalarGrid, VectorGrid]:
    if len(buf) < HEADER_SIZE:
        raise FieldFormatError(f"file shorter than the {HEADER_SIZE}-byte header")
    magic, version, nx, ny, nz, comps, T, dx, dt, reserved = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FieldFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FieldFormatError(f"unsupported version {version}")
    if comps not in (1, 3):
        raise FieldFormatError(f"components must be 1 or 3, got {comps}")
    if min(nx, ny, nz) < 1 or T < 1:
        raise FieldFormatError("empty grid or frame count")
    if not (np.isfinite(dx) and dx > 0 and np.isfinite(dt) and dt > 0):
        raise FieldFormatError("dx and dt must be positive")
    expected = T * nx * ny * nz * comps * 4
    got = len(buf) - HEADER_SIZE
    if got != expected:
        raise FieldFormatError(f"payload length {got} bytes, expected {expected}")
    raw = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(T, nz, ny, nx, comps)
    if not np.all(np.isfinite(raw)):
        raise FieldFormatError("payload contains non-finite values")
    data = raw.transpose(0, 4, 3, 2, 1).astype(np.float64)
    spec = GridSpec(nx, ny, nz, float(dx))
    if comps == 1:
        data = data[:, 0]
    if T == 1:
        return ScalarGrid(spec, data[0]) if comps == 1 else VectorGrid(spec, data[0])
    return FieldSequence(spec, data, float(dt))


def write_field(path: Union[str, Path], field, dt: Optional[float] = None) -> None:
    Path(path).write_bytes(encode_field(field, dt))


def read_field(path: Union[str, Path]) -> Union[FieldSequence, ScalarGrid, VectorGrid]:
    """Read a field file: sequences for T >= 2, a single grid for T = 1."""
    return decode_field(Path(path).read_bytes())


def read_sequence(path: Union[str, Path]) -> FieldSequence:
    f = read_field(path)
    if not isinstance(f, FieldSequence):
        raise FieldFormatError(f"{path} holds a single frame, expected a sequence")
    return f


# --- run configuration ------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WeightsModel(_Strict):
    lambda_vor: float = 1e-5
    lambda_div: float = 5e-3
    lambda_kine: float = 10.0
    lambda_bnd: float = 1000.0
    lambda_warp: float = 1.0
    lambda_proj: float = 1e6
    k: int = 5
    beta: float = 0.95


class PoissonModel(_Strict):
    max_iters: int = 2000
    tol: float = 1e-6
    solver: Literal["cg", "jacobi"] = "cg"


class StageModel(_Strict):
    iters: int = 2000
    lr: float = 1e-3
    seed: int = 0
    coarse_factor: int = 4
    variant: Literal["long-w", "long-u", "short-w", "short-u"] = "long-w"
    substeps: int = 1
    log_every: int = 100
    checkpoint_every: int = Field(0, ge=0)


class SceneModel(_Strict):
    scene: Literal["plume", "cylinder"] = "plume"
    resolution: int = 32
    frames: int = 20
    seed: int = 0


class PathsModel(_Strict):
    data: Optional[str] = None
    out: Optional[str] = None


class RunConfig(_Strict):
    """Strict JSON run document; omitted fields take the documented defaults."""

    preset: Literal["default", "cylinder"] = "default"
    weights: WeightsModel = WeightsModel()
    coarse: StageModel = StageModel()
    fine: StageModel = StageModel()
    poisson: PoissonModel = PoissonModel()
    scene: SceneModel = SceneModel()
    paths: PathsModel = PathsModel()

    def loss_weights(self) -> LossWeights:
        given = self.weights.model_dump(exclude_unset=True)
        if self.preset == "cylinder":
            return LossWeights.cylinder(**given)
        return LossWeights(**given)

    def poisson_config(self) -> PoissonConfig:
        return PoissonConfig(**self.poisson.model_dump())

    def stage(self, name: Literal["coarse", "fine"]) -> StageConfig:
        s = getattr(self, name).model_dump()
        s.pop("checkpoint_every")
        return StageConfig(stage=name, weights=self.loss_weights(), poisson=self.poisson_config(), **s)

    def effective(self) -> dict:
        """Every effective setting, defaults included."""
        d = self.model_dump()
        d["weights"] = dataclasses.asdict(self.loss_weights())
        return d


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.model_validate_json(Path(path).read_text())


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.effective(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# --- CSV ----------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


LOSS_TERMS = ("trans", "adv", "vor", "vel", "div", "kine", "bnd", "warp", "proj")
LOSS_HISTORY_HEADER = (("stage", "step", "total") + LOSS_TERMS
                       + tuple(f"{t}_weighted" for t in LOSS_TERMS))


def loss_history_rows(stage: str, history: Sequence[LossReport]) -> list[tuple]:
    """One row per optimizer step; terms a stage does not use are left empty."""
    rows = []
    for rep in history:
        raw = [rep.raw.get(t, "") for t in LOSS_TERMS]
        weighted = [rep.weighted.get(t, "") for t in LOSS_TERMS]
        rows.append((stage, rep.step, rep.total, *raw, *weighted))
    return rows


METRICS_HEADER = ("frame", "divergence_l2", "velocity_l2", "vorticity_l2", "psnr", "ssim")
TRACER_HEADER = ("frame", "particle", "x", "y", "z", "alive")
MASK_HEADER = ("tau", "masked_l2", "unmasked_l2")


# --- PNG slices ---------------------------------------------------------------------

FOOTER_HEIGHT = 12
# speed colormap: linear ramp through these RGB anchors (black, blue, cyan, yellow, white)
SPEED_COLORMAP = np.array([[0, 0, 0], [0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 255, 255]],
                          dtype=float)


def _colormap(t: np.ndarray) -> np.ndarray:
    x = np.clip(t, 0.0, 1.0) * (len(SPEED_COLORMAP) - 1)
    i = np.minimum(x.astype(int), len(SPEED_COLORMAP) - 2)
    f = (x - i)[..., None]
    return SPEED_COLORMAP[i] * (1 - f) + SPEED_COLORMAP[i + 1] * f


def slice_image(data: np.ndarray, axis: int, index: int, scale: int = 4) -> Image.Image:
    """Scalar (nx,ny,nz) -> grayscale, vector (3,nx,ny,nz) -> speed heatmap.

    The slice is shown with the first remaining grid axis horizontal and the
    second vertical, increasing upward. A footer prints the value range.
    """
    if data.ndim == 4:
        data = np.sqrt(np.sum(data * data, axis=0))
        vector = True
    else:
        vector = False
    s = np.take(data, index, axis=axis)
    lo, hi = float(s.min()), float(s.max())
    t = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    t = np.flipud(t.T)
    if vector:
        px = np.round(_colormap(t)).astype(np.uint8)
    else:
        g = np.round(t * 255.0).astype(np.uint8)
        px = np.stack([g, g, g], axis=-1)
    px = np.kron(px, np.ones((scale, scale, 1), dtype=np.uint8))
    h, w = px.shape[:2]
    img = Image.new("RGB", (w, h + FOOTER_HEIGHT), (0, 0, 0))
    img.paste(Image.fromarray(px, "RGB"), (0, 0))
    label = f"{'speed' if vector else 'value'} [{lo:.4g}, {hi:.4g}]"
    ImageDraw.Draw(img).text((2, h), label, fill=(255, 255, 255))
    return img


def render_slice(field, axis: Union[int, str], index: Union[int, str], frame: int,
                 path: Union[str, Path], scale: int = 4) -> None:
    """Write a deterministic PNG of one axis-aligned slice."""
    a = {"x": 0, "y": 1, "z": 2}[axis] if isinstance(axis, str) else int(axis)
    if isinstance(field, FieldSequence):
        if not 0 <= frame < field.n_frames:
            raise IndexError(f"frame {frame} outside [0, {field.n_frames})")
        data = field.data[frame]
    else:
        data = field.data
    n = data.shape[-3:][a]
    i = n // 2 if index == "mid" else int(index)
    if not 0 <= i < n:
        raise IndexError(f"slice index {i} outside [0, {n})")
    img = slice_image(data, a, i, scale)
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    Path(path).write_bytes(buf.getvalue())


# --- command line -----------------------------------------------------------------


class ConfigError(Exception):
    pass


@contextmanager
def _locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"{out_dir} is in use by another process") from None
    try:
        yield
    finally:
        lock.release()
        try:
            os.remove(out_dir / ".lock")
        except OSError:
            pass


def _scene_json(cfg: SceneConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"


def cmd_gen(args) -> int:
    maker = SceneConfig.plume if args.scene == "plume" else SceneConfig.cylinder
    cfg = maker(resolution=args.res, frames=args.frames, seed=args.seed)
    rho, u, sdf = generate(cfg)
    out = Path(args.out)
    with _locked(out):
        write_field(out / "density.fvf", rho)
        write_field(out / "velocity.fvf", u)
        write_field(out / "sdf.fvf", sdf)
        (out / "scene.json").write_text(_scene_json(cfg))
    return 0


def _load_sdf(data_dir: Path) -> Optional[ScalarGrid]:
    p = data_dir / "sdf.fvf"
    if not p.exists():
        return None
    sdf = read_field(p)
    if not isinstance(sdf, ScalarGrid):
        raise ConfigError("sdf.fvf must hold one scalar frame")
    return sdf


def cmd_reconstruct(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid config {args.config}: {e}") from None
    data = Path(args.data)
    rho = read_sequence(data / "density.fvf")
    sdf = _load_sdf(data)
    coarse, fine = cfg.stage("coarse"), cfg.stage("fine")
    out = Path(args.out)
    every = {"coarse": cfg.coarse.checkpoint_every, "fine": cfg.fine.checkpoint_every}

    def checkpoint(stage, it, params):
        n = every[stage]
        if n > 0 and (it + 1) % n == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            write_field(out / "checkpoints" / f"{stage}_{it + 1:06d}.fvf", params)

    with _locked(out):
        rec = reconstruct(rho, sdf, coarse, fine, on_step=checkpoint)
        write_field(out / "coarse.fvf", rec.coarse)
        write_field(out / "fine.fvf", rec.fine)
        write_field(out / "full.fvf", rec.full)
        rows = loss_history_rows("coarse", rec.coarse_history)
        rows += loss_history_rows("fine", rec.fine_history)
        write_csv(out / "loss_history.csv", LOSS_HISTORY_HEADER, rows)
        meta = {"tool": "flowrecon", "version": __version__, "config_hash": config_hash(cfg),
                "config": cfg.effective(), "data": str(data),
                "mask_convention": "rho_gt > tau for divergence, velocity and vorticity"}
        (out / "run_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_resim(args) -> int:
    from .evaluation import resimulate
    u = read_sequence(args.velocity)
    rho = read_field(args.density)
    rho0 = rho.frame(0) if isinstance(rho, FieldSequence) else rho
    out = resimulate(rho0, u)
    write_field(args.out, out)
    return 0


def _parse_plane(text: str) -> tuple[str, float]:
    parts = dict(p.split("=", 1) for p in text.split(","))
    try:
        axis, coord = parts["axis"], float(parts["coord"])
    except (KeyError, ValueError):
        raise ConfigError(f"bad --plane {text!r}; expected axis=y,coord=0.1") from None
    if axis not in ("x", "y", "z"):
        raise ConfigError(f"bad plane axis {axis!r}")
    return axis, coord


def cmd_trace(args) -> int:
    from .tracers import advect_particles, seed_plane
    u = read_sequence(args.velocity)
    axis, coord = _parse_plane(args.plane)
    p = advect_particles(seed_plane(axis, coord, args.count, args.seed), u)
    rows = [(f, i, *p.positions[f, i], bool(p.alive[f, i]))
            for f in range(p.n_frames) for i in range(p.count)]
    write_csv(args.out, TRACER_HEADER, rows)
    return 0


def cmd_eval(args) -> int:
    from . import evaluation as ev
    recon, gt = Path(args.recon), Path(args.gt)
    gt_rho = read_sequence(gt / "density.fvf")
    gt_u = read_sequence(gt / "velocity.fvf")
    if args.ablation:
        sdf = _load_sdf(gt)
        res = ev.ablation_run(gt_rho, gt_u, sdf, args.ablation)
        rows = [res.summary]
        u = res.velocity
    else:
        name = "full.fvf" if (recon / "full.fvf").exists() else "velocity.fvf"
        u = read_sequence(recon / name)
        rows = ev.evaluate_sequence(u, gt_u, gt_rho)
    write_csv(args.out, METRICS_HEADER,
              [tuple(getattr(r, k) for k in METRICS_HEADER) for r in rows])
    if args.mask_sweep:
        try:
            taus = [float(t) for t in args.mask_sweep.split(",") if t]
        except ValueError:
            raise ConfigError(f"bad --mask-sweep {args.mask_sweep!r}") from None
        study = ev.threshold_mask_study(u.data, gt_u.data, gt_rho.data, taus)
        out = Path(args.out)
        write_csv(out.with_name(out.stem + "_mask.csv"), MASK_HEADER,
                  [(r.tau, r.masked_l2, r.unmasked_l2) for r in study])
    return 0


def cmd_render(args) -> int:
    field = read_field(args.field)
    index = args.index if args.index == "mid" else int(args.index)
    render_slice(field, args.axis, index, args.frame, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowrecon", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a ground-truth scene")
    g.add_argument("--scene", choices=("plume", "cylinder"), required=True)
    g.add_argument("--res", type=int, default=32)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("reconstruct", help="reconstruct velocity from density")
    r.add_argument("--data", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("resim", help="advect the first density frame through a velocity sequence")
    s.add_argument("--velocity", required=True)
    s.add_argument("--density", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_resim)

    t = sub.add_parser("trace", help="advect tracer particles seeded on a plane")
    t.add_argument("--velocity", required=True)
    t.add_argument("--plane", required=True)
    t.add_argument("--count", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_trace)

    e = sub.add_parser("eval", help="score a reconstruction against ground truth")
    e.add_argument("--recon", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ablation", choices=("short-u", "short-w", "long-u", "long-w"))
    e.add_argument("--mask-sweep")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("render", help="write a PNG of one slice")
    d.add_argument("--field", required=True)
    d.add_argument("--axis", choices=("x", "y", "z"), default="z")
    d.add_argument("--index", default="mid")
    d.add_argument("--frame", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_render)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (ConfigError, FieldFormatError, ValidationError, ValueError, KeyError,
            IndexError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
