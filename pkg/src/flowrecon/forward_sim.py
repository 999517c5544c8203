"""Small buoyant-smoke solver that produces ground-truth density/velocity pairs.

One step: inject density and inflow velocity, add buoyancy, self-advect the
velocity with MacCormack, project, then advect density with the projected
velocity. The recorded velocity of frame t is exactly the one that carries
density from frame t to frame t+1.

The vertical axis is y. Scenes live in the unit cube.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np

from .grid_fields import FieldSequence, GridSpec, ScalarGrid
from .pressure_projection import PoissonConfig, Projector
from .transport import advect_arr

# sdf value used where a scene has no obstacle
NO_OBSTACLE = 1.0e6


@dataclass
class SceneConfig:
    scene: Literal["plume", "cylinder"] = "plume"
    resolution: int = 32
    frames: int = 20
    # time is measured in frames, so velocities are domain lengths per frame
    dt: float = 1.0
    # upward acceleration per frame at the inflow density
    buoyancy: float = 0.03
    # inflow: plume uses a disk on the floor, cylinder a slab at the x=0 wall
    inflow_center: tuple[float, float, float] = (0.5, 0.12, 0.5)
    inflow_radius: float = 0.14
    inflow_height: float = 0.08
    # density is in arbitrary units; buoyancy and the floor are relative to this value
    inflow_density: float = 3.0
    inflow_velocity: float = 0.02
    inflow_noise: float = 0.5
    # densities below this fraction of the inflow density are zeroed after advection,
    # which keeps the support compact
    density_floor: float = 1e-3
    warmup_steps: int = 10
    inflow_steps: int = 10
    # cylinder obstacle, axis along z
    obstacle_center: tuple[float, float] = (0.5, 0.5)
    obstacle_radius: float = 0.12
    seed: int = 0
    poisson: PoissonConfig = field(default_factory=lambda: PoissonConfig(tol=1e-10, max_iters=4000))

    def __post_init__(self):
        if self.scene not in ("plume", "cylinder"):
            raise ValueError(f"unknown scene {self.scene!r}")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.buoyancy < 0:
            raise ValueError("buoyancy must be >= 0")
        if not self.inflow_density > 0:
            raise ValueError("inflow_density must be positive")
        if self.resolution < 4:
            raise ValueError("resolution must be >= 4")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @classmethod
    def plume(cls, **kw) -> "SceneConfig":
        return cls(scene="plume", **kw)

    @classmethod
    def cylinder(cls, **kw) -> "SceneConfig":
        defaults = dict(scene="cylinder", buoyancy=0.0, inflow_center=(0.06, 0.5, 0.5),
                        inflow_radius=0.22, inflow_height=0.1, inflow_velocity=0.025,
                        warmup_steps=12, inflow_steps=10_000)
        defaults.update(kw)
        return cls(**defaults)

    @property
    def spec(self) -> GridSpec:
        return GridSpec.cube(self.resolution)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["poisson"] = asdict(self.poisson)
        return d


@dataclass
class SceneState:
    rho: np.ndarray
    u: np.ndarray
    step: int = 0


class Scene:
    """Geometry and forcing of one configured scene."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        self.spec = cfg.spec
        X = self.spec.centers()
        self.sdf = self._sdf(X)
        self.source = self._source(X)
        self.projector = Projector(self.spec.shape, self.spec.dx,
                                   self.sdf if cfg.scene == "cylinder" else None, cfg.poisson)
        self.rng = np.random.default_rng(cfg.seed)

    def _sdf(self, X) -> np.ndarray:
        if self.cfg.scene != "cylinder":
            return np.full(self.spec.shape, NO_OBSTACLE)
        cx, cy = self.cfg.obstacle_center
        return np.sqrt((X[0] - cx) ** 2 + (X[1] - cy) ** 2) - self.cfg.obstacle_radius

    def _source(self, X) -> np.ndarray:
        c = self.cfg.inflow_center
        # at least one cell thick and wide on coarse grids
        half = max(self.cfg.inflow_height, self.spec.dx) / 2
        radius = max(self.cfg.inflow_radius, self.spec.dx)
        a = 1 if self.cfg.scene == "plume" else 0
        p, q = [k for k in range(3) if k != a]
        r = np.sqrt((X[p] - c[p]) ** 2 + (X[q] - c[q]) ** 2)
        return (r <= radius) & (np.abs(X[a] - c[a]) <= half)

    @property
    def solid(self) -> np.ndarray:
        return self.sdf <= 0

    def initial_state(self) -> SceneState:
        shape = self.spec.shape
        u = np.zeros((3,) + shape)
        if self.cfg.scene == "cylinder":
            u[0] = self.cfg.inflow_velocity
            u, _, _ = self.projector(u)
        return SceneState(np.zeros(shape), u)

    def inflow_active(self, step: int) -> bool:
        return step < self.cfg.inflow_steps

    def _inject(self, rho: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        noise = self.rng.uniform(1.0 - cfg.inflow_noise, 1.0, size=rho.shape)
        rho = np.where(self.source, np.maximum(rho, cfg.inflow_density * noise), rho)
        u = u.copy()
        axis = 1 if cfg.scene == "plume" else 0
        u[axis] = np.where(self.source, cfg.inflow_velocity, u[axis])
        return rho, u

    def velocity_update(self, rho: np.ndarray, u: np.ndarray) -> np.ndarray:
        cfg, dx = self.cfg, self.spec.dx
        if cfg.buoyancy:
            u = u.copy()
            u[1] += cfg.dt * cfg.buoyancy / cfg.inflow_density * rho
        u = advect_arr(u, u, cfg.dt, dx)
        u, _, _ = self.projector(u)
        return u

    def advance(self, state: SceneState, inflow: Optional[bool] = None
                ) -> tuple[np.ndarray, np.ndarray, SceneState]:
        """Returns (density carried this step, velocity carrying it, next state)."""
        if inflow is None:
            inflow = self.inflow_active(state.step)
        rho, u = state.rho, state.u
        if inflow:
            rho, u = self._inject(rho, u)
        u_new = self.velocity_update(rho, u)
        rho_next = advect_arr(rho, u_new, self.cfg.dt, self.spec.dx)
        floor = self.cfg.density_floor * self.cfg.inflow_density
        rho_next = np.where(rho_next > floor, rho_next, 0.0)
        return rho, u_new, SceneState(rho_next, u_new, state.step + 1)


def sim_step(state: SceneState, cfg: SceneConfig, inflow: Optional[bool] = None,
             scene: Optional[Scene] = None) -> SceneState:
    scene = scene or Scene(cfg)
    return scene.advance(state, inflow)[2]


def generate(cfg: SceneConfig) -> tuple[FieldSequence, FieldSequence, ScalarGrid]:
    """Simulate warm-up steps, then record ``cfg.frames`` aligned (density, velocity) frames."""
    scene = Scene(cfg)
    state = scene.initial_state()
    for _ in range(cfg.warmup_steps):
        state = scene.advance(state)[2]
    rhos, us = [], []
    for _ in range(cfg.frames):
        rho, u, state = scene.advance(state)
        rhos.append(rho)
        us.append(u)
    spec = scene.spec
    meta = {"scene": cfg.to_dict()}
    return (FieldSequence(spec, np.stack(rhos), cfg.dt, meta),
            FieldSequence(spec, np.stack(us), cfg.dt, meta),
            ScalarGrid(spec, scene.sdf))
