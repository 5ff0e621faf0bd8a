"""Domain types, physical configuration and unit conventions.

All quantities are SI. The gas grid is uniform with cubic cells; the
cell edge is the single length scale the ghost-layer and interpolation
machinery relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

GRAVITY_DEFAULT = (0.0, -9.81, 0.0)


class ConfigError(ValueError):
    """Raised for invalid configuration input (CLI exit code 2)."""


class SimulationError(RuntimeError):
    """Raised for numerical aborts during a run (CLI exit code 3)."""


@dataclass(frozen=True)
class DomainSpec:
    """Rectangular domain (x-width, y-height, z-depth) on a uniform cubic grid."""

    width: float
    height: float
    depth: float
    nx: int
    ny: int
    nz: int
    gravity: tuple[float, float, float] = GRAVITY_DEFAULT

    def __post_init__(self):
        if min(self.width, self.height, self.depth) <= 0.0:
            raise ConfigError("domain extents must be strictly positive")
        if min(self.nx, self.ny, self.nz) <= 0:
            raise ConfigError("cell counts must be strictly positive")
        hx = self.width / self.nx
        hy = self.height / self.ny
        hz = self.depth / self.nz
        href = hx
        if abs(hy - href) > 1e-12 * href or abs(hz - href) > 1e-12 * href:
            raise ConfigError(
                f"cells must be cubic: dx={hx:g} dy={hy:g} dz={hz:g}"
            )

    @property
    def cell_size(self) -> float:
        return self.width / self.nx

    @property
    def cell_volume(self) -> float:
        return self.cell_size ** 3

    @property
    def volume(self) -> float:
        return self.width * self.height * self.depth

    @property
    def extents(self) -> np.ndarray:
        return np.array([self.width, self.height, self.depth])

    @property
    def cells(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def gravity_vec(self) -> np.ndarray:
        return np.array(self.gravity, dtype=float)


@dataclass(frozen=True)
class FluidProps:
    """Gas-phase properties; defaults are the fluidized-bed reference values."""

    viscosity: float = 2.0e-5
    gas_density: float = 1.0
    inlet_velocity: float = 0.015
    drag_model: str = "BVK"

    def __post_init__(self):
        if self.viscosity <= 0.0 or self.gas_density <= 0.0:
            raise ConfigError("viscosity and gas density must be positive")
        if self.inlet_velocity < 0.0:
            raise ConfigError("inlet velocity must be non-negative")
        if self.drag_model != "BVK":
            raise ConfigError(f"unsupported drag model {self.drag_model!r}")


@dataclass(frozen=True)
class ParticleProps:
    """Monodisperse soft-sphere particle properties (linear spring-dashpot)."""

    diameter: float = 1.0e-4
    density: float = 1000.0
    spring_constant: float = 10.0
    friction: float = 0.0
    restitution_pp: float = 0.8
    restitution_pw: float = 1.0
    tangential_spring_factor: float = 0.28
    tangential_damping_factor: float = 0.5

    def __post_init__(self):
        if self.diameter <= 0.0 or self.density <= 0.0:
            raise ConfigError("particle diameter and density must be positive")
        if self.spring_constant <= 0.0:
            raise ConfigError("spring constant must be positive")
        if not (0.0 <= self.restitution_pp <= 1.0 and 0.0 <= self.restitution_pw <= 1.0):
            raise ConfigError("restitution coefficients must lie in [0, 1]")
        if self.friction < 0.0:
            raise ConfigError("friction coefficient must be non-negative")

    @property
    def radius(self) -> float:
        return 0.5 * self.diameter

    @property
    def mass(self) -> float:
        return self.density * math.pi / 6.0 * self.diameter ** 3

    @property
    def volume(self) -> float:
        return math.pi / 6.0 * self.diameter ** 3


class DerivedConstants(NamedTuple):
    mass: float
    mass_eff: float
    damping: float
    contact_time: float


def dashpot_coefficient(spring_constant: float, mass_eff: float, restitution: float) -> float:
    """Normal dashpot coefficient giving the requested restitution for a binary hit.

    restitution == 1 gives zero damping; restitution == 0 is rejected because the
    damping formula is singular there (perfectly plastic contact unsupported).
    """
    if restitution <= 0.0:
        raise ConfigError("restitution = 0 unsupported: dashpot formula singular")
    if restitution >= 1.0:
        return 0.0
    omega0 = math.sqrt(spring_constant / mass_eff)
    ln_e = math.log(restitution)
    return 2.0 * mass_eff * omega0 * abs(ln_e) / math.sqrt(math.pi ** 2 + ln_e ** 2)


def derived_particle_constants(props: ParticleProps) -> DerivedConstants:
    """Mass, effective pair mass, dashpot coefficient and binary contact duration."""
    m = props.mass
    m_eff = 0.5 * m  # equal-size pair
    gamma_n = dashpot_coefficient(props.spring_constant, m_eff, props.restitution_pp)
    omega0_sq = props.spring_constant / m_eff
    omega_d = math.sqrt(omega0_sq - (gamma_n / (2.0 * m_eff)) ** 2)
    t_c = math.pi / omega_d
    return DerivedConstants(m, m_eff, gamma_n, t_c)


# Little-endian fixed particle record: id + position + velocity + angular velocity.
PARTICLE_DTYPE = np.dtype(
    [("id", "<u8"), ("pos", "<f8", 3), ("vel", "<f8", 3), ("angvel", "<f8", 3)]
)


class ParticleStore:
    """Structure-of-arrays particle state, owned segment first, ghosts appended.

    The owned segment is kept sorted by global id; ghost rows are read-only
    collision partners refreshed every particle substep.
    """

    __slots__ = ("ids", "pos", "vel", "angvel", "radius", "mass", "n_owned")

    def __init__(self, ids, pos, vel, angvel, radius, mass, n_owned=None):
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.pos = np.asarray(pos, dtype=float).reshape(-1, 3)
        self.vel = np.asarray(vel, dtype=float).reshape(-1, 3)
        self.angvel = np.asarray(angvel, dtype=float).reshape(-1, 3)
        self.radius = np.asarray(radius, dtype=float)
        self.mass = np.asarray(mass, dtype=float)
        self.n_owned = len(self.ids) if n_owned is None else int(n_owned)

    @classmethod
    def empty(cls) -> "ParticleStore":
        return cls(np.empty(0, np.uint64), np.empty((0, 3)), np.empty((0, 3)),
                   np.empty((0, 3)), np.empty(0), np.empty(0), 0)

    @classmethod
    def from_positions(cls, ids, pos, props: ParticleProps, vel=None) -> "ParticleStore":
        n = len(ids)
        pos = np.asarray(pos, dtype=float).reshape(n, 3)
        vel = np.zeros((n, 3)) if vel is None else np.asarray(vel, dtype=float).reshape(n, 3)
        return cls(ids, pos, vel, np.zeros((n, 3)),
                   np.full(n, props.radius), np.full(n, props.mass), n)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_ghost(self) -> int:
        return len(self.ids) - self.n_owned

    def owned_slice(self) -> slice:
        return slice(0, self.n_owned)

    def sort_owned_by_id(self) -> None:
        order = np.argsort(self.ids[: self.n_owned], kind="stable")
        self._permute_owned(order)

    def _permute_owned(self, order) -> None:
        s = self.owned_slice()
        for name in ("ids", "pos", "vel", "angvel", "radius", "mass"):
            arr = getattr(self, name)
            arr[s] = arr[s][order]

    def drop_ghosts(self) -> None:
        self._truncate(self.n_owned)

    def _truncate(self, n: int) -> None:
        for name in ("ids", "pos", "vel", "angvel", "radius", "mass"):
            setattr(self, name, getattr(self, name)[:n])

    def set_ghosts(self, ids, pos, vel, angvel, props: ParticleProps) -> None:
        self.drop_ghosts()
        n = self.n_owned
        m = len(ids)
        self.ids = np.concatenate([self.ids, np.asarray(ids, np.uint64)])
        self.pos = np.concatenate([self.pos, np.asarray(pos, float).reshape(m, 3)])
        self.vel = np.concatenate([self.vel, np.asarray(vel, float).reshape(m, 3)])
        self.angvel = np.concatenate([self.angvel, np.asarray(angvel, float).reshape(m, 3)])
        self.radius = np.concatenate([self.radius, np.full(m, props.radius)])
        self.mass = np.concatenate([self.mass, np.full(m, props.mass)])
        self.n_owned = n

    def remove_owned(self, mask) -> "ParticleStore":
        """Drop owned rows where mask is True; returns self. Ghosts must be absent."""
        if self.n_ghost:
            raise ValueError("remove_owned requires ghosts to be dropped first")
        keep = ~np.asarray(mask, bool)
        for name in ("ids", "pos", "vel", "angvel", "radius", "mass"):
            setattr(self, name, getattr(self, name)[keep])
        self.n_owned = len(self.ids)
        return self

    def append_owned(self, ids, pos, vel, angvel, props: ParticleProps) -> None:
        if self.n_ghost:
            raise ValueError("append_owned requires ghosts to be dropped first")
        m = len(ids)
        self.ids = np.concatenate([self.ids, np.asarray(ids, np.uint64)])
        self.pos = np.concatenate([self.pos, np.asarray(pos, float).reshape(m, 3)])
        self.vel = np.concatenate([self.vel, np.asarray(vel, float).reshape(m, 3)])
        self.angvel = np.concatenate([self.angvel, np.asarray(angvel, float).reshape(m, 3)])
        self.radius = np.concatenate([self.radius, np.full(m, props.radius)])
        self.mass = np.concatenate([self.mass, np.full(m, props.mass)])
        self.n_owned = len(self.ids)
        self.sort_owned_by_id()

    def snapshot(self) -> dict:
        return {name: getattr(self, name).copy()
                for name in ("ids", "pos", "vel", "angvel", "radius", "mass")} | {
                    "n_owned": self.n_owned}

    def restore(self, snap: dict) -> None:
        for name in ("ids", "pos", "vel", "angvel", "radius", "mass"):
            setattr(self, name, snap[name].copy())
        self.n_owned = snap["n_owned"]

    def copy(self) -> "ParticleStore":
        return ParticleStore(self.ids.copy(), self.pos.copy(), self.vel.copy(),
                             self.angvel.copy(), self.radius.copy(), self.mass.copy(),
                             self.n_owned)


@dataclass
class SimConfig:
    """Full simulation configuration; mirrors the key=value config-file schema."""

    domain: DomainSpec
    fluid: FluidProps = field(default_factory=FluidProps)
    particles: ParticleProps = field(default_factory=ParticleProps)
    solids_fraction: float = 0.205
    n_particles: int | None = None  # overrides solids_fraction when given
    cfl: float = 0.5
    dt_f_max: float = 1.0e-4
    substep_divisor: float = 20.0  # fixed dt_p = t_c / divisor
    ats_enabled: bool = False
    ats_tolerance: float = 1.0e-5
    ats_dt_min: float | None = None  # default t_c / substep_divisor
    ats_dt_max: float | None = None  # default dt_f_max
    t_end: float = 2.0e-3
    rebuild_interval: int = 100
    ranks: int = 1
    box_tiling: tuple[int, int, int] | None = None  # cells per box; default whole grid
    seed: int = 1234
    inlet_ramp_time: float = 1.0e-3
    comm_backend: str = "threads"

    def __post_init__(self):
        if self.ranks < 1:
            raise ConfigError("rank count must be >= 1")
        if self.box_tiling is None:
            self.box_tiling = self.domain.cells
        bx, by, bz = self.box_tiling
        for n, b, ax in zip(self.domain.cells, (bx, by, bz), "xyz"):
            if b <= 0 or n % b != 0:
                raise ConfigError(f"box tiling must divide grid exactly: axis {ax} {n} % {b}")
        if self.n_particles is None and not (0.0 <= self.solids_fraction <= 0.60):
            raise ConfigError("solids fraction target must lie in [0, 0.60]")
        if self.cfl <= 0.0 or self.dt_f_max <= 0.0 or self.substep_divisor <= 0.0:
            raise ConfigError("cfl, dt_f_max and substep divisor must be positive")
        if self.t_end < 0.0:
            raise ConfigError("end time must be non-negative")
        if self.rebuild_interval < 1:
            raise ConfigError("rebuild interval must be >= 1")
        if self.comm_backend not in ("threads", "sockets"):
            raise ConfigError(f"unknown comm backend {self.comm_backend!r}")

    @property
    def fixed_dt(self) -> float:
        return derived_particle_constants(self.particles).contact_time / self.substep_divisor

    @property
    def ats_bounds(self) -> tuple[float, float]:
        lo = self.fixed_dt if self.ats_dt_min is None else self.ats_dt_min
        hi = self.dt_f_max if self.ats_dt_max is None else self.ats_dt_max
        return (lo, hi)

    def target_count(self) -> int:
        if self.n_particles is not None:
            return self.n_particles
        return int(round(self.solids_fraction * self.domain.volume / self.particles.volume))


# ---------------------------------------------------------------------------
# key=value config files

_CONFIG_KEYS = {
    "width": float, "height": float, "depth": float,
    "nx": int, "ny": int, "nz": int,
    "gravity_x": float, "gravity_y": float, "gravity_z": float,
    "viscosity": float, "gas_density": float, "inlet_velocity": float, "drag_model": str,
    "diameter": float, "particle_density": float, "spring_constant": float,
    "friction": float, "restitution_pp": float, "restitution_pw": float,
    "tangential_spring_factor": float, "tangential_damping_factor": float,
    "solids_fraction": float, "n_particles": int,
    "cfl": float, "dt_f_max": float, "substep_divisor": float,
    "ats_enabled": bool, "ats_tolerance": float, "ats_dt_min": float, "ats_dt_max": float,
    "t_end": float, "rebuild_interval": int, "ranks": int,
    "box_x": int, "box_y": int, "box_z": int,
    "seed": int, "inlet_ramp_time": float, "comm_backend": str,
}

_REQUIRED_KEYS = ("width", "height", "depth", "nx", "ny", "nz")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "on", "yes"):
        return True
    if t in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_config_text(text: str) -> SimConfig:
    """Parse the plain-text key=value configuration format (# comments)."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        caster = _CONFIG_KEYS[key]
        try:
            values[key] = _parse_bool(val) if caster is bool else caster(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    missing = [k for k in _REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    return config_from_values(values)


def config_from_values(values: dict) -> SimConfig:
    gravity = (values.get("gravity_x", GRAVITY_DEFAULT[0]),
               values.get("gravity_y", GRAVITY_DEFAULT[1]),
               values.get("gravity_z", GRAVITY_DEFAULT[2]))
    domain = DomainSpec(values["width"], values["height"], values["depth"],
                        values["nx"], values["ny"], values["nz"], gravity)
    fluid = FluidProps(
        viscosity=values.get("viscosity", FluidProps.viscosity),
        gas_density=values.get("gas_density", FluidProps.gas_density),
        inlet_velocity=values.get("inlet_velocity", FluidProps.inlet_velocity),
        drag_model=values.get("drag_model", FluidProps.drag_model))
    particles = ParticleProps(
        diameter=values.get("diameter", ParticleProps.diameter),
        density=values.get("particle_density", ParticleProps.density),
        spring_constant=values.get("spring_constant", ParticleProps.spring_constant),
        friction=values.get("friction", ParticleProps.friction),
        restitution_pp=values.get("restitution_pp", ParticleProps.restitution_pp),
        restitution_pw=values.get("restitution_pw", ParticleProps.restitution_pw),
        tangential_spring_factor=values.get(
            "tangential_spring_factor", ParticleProps.tangential_spring_factor),
        tangential_damping_factor=values.get(
            "tangential_damping_factor", ParticleProps.tangential_damping_factor))
    tiling = None
    if any(k in values for k in ("box_x", "box_y", "box_z")):
        tiling = (values.get("box_x", domain.nx),
                  values.get("box_y", domain.ny),
                  values.get("box_z", domain.nz))
    kwargs = {}
    for k in ("solids_fraction", "n_particles", "cfl", "dt_f_max", "substep_divisor",
              "ats_enabled", "ats_tolerance", "ats_dt_min", "ats_dt_max", "t_end",
              "rebuild_interval", "ranks", "seed", "inlet_ramp_time", "comm_backend"):
        if k in values:
            kwargs[k] = values[k]
    return SimConfig(domain=domain, fluid=fluid, particles=particles,
                     box_tiling=tiling, **kwargs)


def load_config(path) -> SimConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def with_overrides(config: SimConfig, **kwargs) -> SimConfig:
    return replace(config, **kwargs)
