"""Synthetic slab/adsorbate systems with an analytic periodic pair energy.

A system is a frozen two-layer periodic slab plus a rigid adsorbate template.
The adsorbate interacts with the slab through a shifted, truncated
Lennard-Jones potential (minimal image in x, y). Relaxation and dense-minima
enumeration on this landscape stand in for MLFF relaxation and dense DFT
placement.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

from . import manifold
from .errors import InvalidConfig, NoMinimaFound

CORE_FRACTION = 0.3  # energy is linearly extrapolated below r = 0.3 sigma
DESORB_SIGMAS = 6.0
DEDUP_DIST_SIGMAS = 0.25
DEDUP_ANGLE = 0.15
DEDUP_ENERGY = 1e-3

LATTICES = ("square", "offset")


@dataclass(frozen=True)
class SceneConfig:
    lattice: str = "square"
    box: tuple[float, float] = (10.0, 10.0)
    cells: tuple[int, int] = (4, 4)
    layer_spacing: float = 2.0
    n_slab_species: int = 2
    # probability that a slab site carries species 1 (the strongly binding one)
    alloy_fraction: float = 0.3
    n_ads_atoms: int = 3
    n_ads_species: int = 2
    bond_length: float = 1.3
    # adsorbate anchor atom (index 0) against each slab species
    eps_anchor: tuple[tuple[float, float], ...] = ((0.08, 0.14), (0.30, 0.45))
    sigma_anchor: tuple[float, float] = (2.0, 2.3)
    # remaining adsorbate atoms against the slab
    eps_other: tuple[float, float] = (0.03, 0.08)
    sigma_other: tuple[float, float] = (2.2, 2.6)
    z_init_sigmas: float = 1.5

    def validate(self) -> None:
        if self.lattice not in LATTICES:
            raise InvalidConfig(f"lattice must be one of {LATTICES}, got {self.lattice!r}")
        if len(self.box) != 2 or min(self.box) <= 0:
            raise InvalidConfig(f"box periods must be two positive numbers, got {self.box}")
        if len(self.cells) != 2 or min(self.cells) < 1:
            raise InvalidConfig(f"cells must be two positive integers, got {self.cells}")
        if not 1 <= self.n_ads_atoms <= 5:
            raise InvalidConfig(f"n_ads_atoms must be in 1..5, got {self.n_ads_atoms}")
        if self.n_slab_species < 1 or self.n_ads_species < 1:
            raise InvalidConfig("species counts must be >= 1")
        if len(self.eps_anchor) < self.n_slab_species:
            raise InvalidConfig("eps_anchor needs one (low, high) range per slab species")
        if not 0.0 <= self.alloy_fraction <= 1.0:
            raise InvalidConfig("alloy_fraction must lie in [0, 1]")
        if self.layer_spacing <= 0 or self.bond_length <= 0:
            raise InvalidConfig("layer_spacing and bond_length must be positive")
        for lo, hi in (*self.eps_anchor, self.sigma_anchor, self.eps_other, self.sigma_other):
            if not 0 < lo <= hi:
                raise InvalidConfig(f"parameter range ({lo}, {hi}) must satisfy 0 < low <= high")


@dataclass(frozen=True, eq=False)
class SystemSpec:
    system_id: str
    box: np.ndarray
    slab_pos: np.ndarray
    slab_species: np.ndarray
    ads_offsets: np.ndarray
    ads_species: np.ndarray
    eps: np.ndarray  # (S, S) well depths indexed by species
    sigma: np.ndarray  # (S, S) radii indexed by species
    z_init: float

    def __post_init__(self):
        for name in ("box", "slab_pos", "ads_offsets", "eps", "sigma"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("slab_species", "ads_species"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        object.__setattr__(self, "z_init", float(self.z_init))

    @property
    def n_ads(self) -> int:
        return len(self.ads_species)

    @property
    def z_surface(self) -> float:
        return float(self.slab_pos[:, 2].max())

    @cached_property
    def pair_eps(self) -> np.ndarray:
        return self.eps[self.ads_species[:, None], self.slab_species[None, :]]

    @cached_property
    def pair_sigma(self) -> np.ndarray:
        return self.sigma[self.ads_species[:, None], self.slab_species[None, :]]

    @cached_property
    def sigma_max(self) -> float:
        return float(self.pair_sigma.max())

    @property
    def r_cutoff(self) -> float:
        return 0.5 * float(self.box.min())

    @cached_property
    def _shift(self) -> np.ndarray:
        sr6 = (self.pair_sigma / self.r_cutoff) ** 6
        return 4.0 * self.pair_eps * (sr6 * sr6 - sr6)

    def __eq__(self, other):
        if not isinstance(other, SystemSpec):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in dataclasses.fields(self)
        )

    def to_dict(self) -> dict:
        return {
            "system_id": self.system_id,
            "box": self.box.tolist(),
            "slab_pos": self.slab_pos.tolist(),
            "slab_species": self.slab_species.tolist(),
            "ads_offsets": self.ads_offsets.tolist(),
            "ads_species": self.ads_species.tolist(),
            "eps": self.eps.tolist(),
            "sigma": self.sigma.tolist(),
            "z_init": self.z_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls)})


@dataclass(frozen=True, eq=False)
class FullPose:
    t: np.ndarray
    z: float
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "z", float(self.z))

    def __eq__(self, other):
        if not isinstance(other, FullPose):
            return NotImplemented
        return np.array_equal(self.t, other.t) and self.z == other.z and np.array_equal(self.R, other.R)

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "z": self.z, "R": self.R.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FullPose":
        return cls(d["t"], d["z"], d["R"])


@dataclass(frozen=True, eq=False)
class Pose:
    """Generative state: in-plane COM translation and rotation (no height)."""

    t: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.t, other.t) and np.array_equal(self.R, other.R)


def lift(sys: "SystemSpec", pose: Pose, z: float | None = None) -> FullPose:
    """Attach a COM height (default ``sys.z_init``) to a generative pose."""
    return FullPose(pose.t, sys.z_init if z is None else z, pose.R)


class Anomaly(str, Enum):
    NONE = "none"
    DESORBED = "desorbed"
    DIVERGED = "diverged"


@dataclass(frozen=True)
class RelaxResult:
    final_pose: FullPose
    final_energy: float
    converged: bool
    n_steps: int
    anomaly: Anomaly


@dataclass(frozen=True)
class Minimum:
    pose: FullPose
    energy: float
    e_rel: float


@dataclass(frozen=True)
class MinimaSet:
    system_id: str
    minima: tuple[Minimum, ...]
    e_min: float

    @classmethod
    def from_entries(cls, system_id: str, entries) -> "MinimaSet":
        """Build from ``(pose, energy)`` pairs; sorts ascending and labels E_rel."""
        entries = sorted(entries, key=lambda pe: pe[1])
        if not entries:
            raise NoMinimaFound(f"no minima for system {system_id}")
        e_min = float(entries[0][1])
        minima = tuple(Minimum(p, float(e), float(e) - e_min) for p, e in entries)
        return cls(system_id, minima, e_min)

    def __len__(self) -> int:
        return len(self.minima)


def ads_positions(sys: SystemSpec, pose: FullPose) -> np.ndarray:
    com = np.array([pose.t[0], pose.t[1], pose.z])
    return sys.ads_offsets @ pose.R.T + com


# ------------------------------------------------------------ generation


def _slab(cfg: SceneConfig, rng: np.random.Generator):
    (Lx, Ly), (nx, ny) = cfg.box, cfg.cells
    ax, ay = Lx / nx, Ly / ny
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    top = np.stack([ii.ravel() * ax, jj.ravel() * ay, np.zeros(nx * ny)], axis=1)
    below = top.copy()
    below[:, 2] = -cfg.layer_spacing
    if cfg.lattice == "offset":
        below[:, 0] += 0.5 * ax
        below[:, 1] += 0.5 * ay
    pos = np.concatenate([top, below])
    if cfg.n_slab_species == 1:
        species = np.zeros(len(pos), dtype=np.int64)
    else:
        # species 1 is the minority; further species share the remainder uniformly
        strong = rng.random(len(pos)) < cfg.alloy_fraction
        rest = rng.integers(0, cfg.n_slab_species - 1, size=len(pos))
        species = np.where(strong, 1, np.where(rest >= 1, rest + 1, 0))
    return pos, species


def _template(cfg: SceneConfig, rng: np.random.Generator):
    n = cfg.n_ads_atoms
    pts = [np.zeros(3)]
    direction = np.array([0.0, 0.0, 1.0])
    for _ in range(1, n):
        # random bend between 100 and 140 degrees off the previous bond
        kick = rng.standard_normal(3)
        kick -= kick.dot(direction) * direction
        kick /= np.linalg.norm(kick)
        bend = np.deg2rad(rng.uniform(40.0, 80.0))
        direction = np.cos(bend) * direction + np.sin(bend) * kick
        pts.append(pts[-1] + cfg.bond_length * direction)
    pts = np.array(pts)
    offsets = pts - pts.mean(axis=0)
    if n == 1:
        offsets = np.zeros((1, 3))
    ads_species = np.zeros(n, dtype=np.int64) + cfg.n_slab_species
    if n > 1 and cfg.n_ads_species > 1:
        ads_species[1:] = cfg.n_slab_species + 1 + rng.integers(0, cfg.n_ads_species - 1, size=n - 1)
    return offsets, ads_species


def generate_system(cfg: SceneConfig, seed: int, system_id: str | None = None) -> SystemSpec:
    """Procedurally build a deterministic synthetic system from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    slab_pos, slab_species = _slab(cfg, rng)
    offsets, ads_species = _template(cfg, rng)

    S = cfg.n_slab_species + cfg.n_ads_species
    eps = np.zeros((S, S))
    sigma = np.ones((S, S))
    anchor = cfg.n_slab_species
    for s in range(cfg.n_slab_species):
        eps[anchor, s] = eps[s, anchor] = rng.uniform(*cfg.eps_anchor[s])
        sigma[anchor, s] = sigma[s, anchor] = rng.uniform(*cfg.sigma_anchor)
        for a in range(anchor + 1, S):
            eps[a, s] = eps[s, a] = rng.uniform(*cfg.eps_other)
            sigma[a, s] = sigma[s, a] = rng.uniform(*cfg.sigma_other)

    used = sigma[ads_species[:, None], slab_species[None, :]]
    z_init = float(slab_pos[:, 2].max() + cfg.z_init_sigmas * used.max())
    return SystemSpec(
        system_id=system_id if system_id is not None else f"sys-{seed}",
        box=np.asarray(cfg.box, dtype=np.float64),
        slab_pos=slab_pos,
        slab_species=slab_species,
        ads_offsets=offsets,
        ads_species=ads_species,
        eps=eps,
        sigma=sigma,
        z_init=z_init,
    )


# ---------------------------------------------------------------- energy


def _pair_terms(sys: SystemSpec, pos: np.ndarray):
    """Pair energies and dE/dr / r for every adsorbate/slab pair."""
    d = pos[:, None, :] - sys.slab_pos[None, :, :]
    d[..., :2] = manifold.min_image(d[..., :2], sys.box)
    r = np.sqrt(np.sum(d * d, axis=-1))
    sig, eps = sys.pair_sigma, sys.pair_eps
    r_core = CORE_FRACTION * sig
    rr = np.maximum(r, r_core)
    sr6 = (sig / rr) ** 6
    e = 4.0 * eps * (sr6 * sr6 - sr6)
    de = -24.0 * eps * (2.0 * sr6 * sr6 - sr6) / rr
    core = r < r_core
    e = np.where(core, e + de * (r - r_core), e)
    inside = r < sys.r_cutoff
    e = np.where(inside, e - sys._shift, 0.0)
    de = np.where(inside, de, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        de_over_r = np.where(r > 0.0, de / r, 0.0)
    return e, de_over_r, d


def energy(sys: SystemSpec, pose: FullPose) -> float:
    e, _, _ = _pair_terms(sys, ads_positions(sys, pose))
    return float(e.sum())


def energy_force_torque(sys: SystemSpec, pose: FullPose):
    """Energy, in-plane force, vertical force and space-frame torque about the COM."""
    arm = sys.ads_offsets @ pose.R.T
    pos = arm + np.array([pose.t[0], pose.t[1], pose.z])
    e, de_over_r, d = _pair_terms(sys, pos)
    F = -np.sum(de_over_r[..., None] * d, axis=1)
    total = F.sum(axis=0)
    tau = np.cross(arm, F).sum(axis=0)
    return float(e.sum()), total[:2], float(total[2]), tau


def force_torque(sys: SystemSpec, pose: FullPose):
    _, f_xy, f_z, tau = energy_force_torque(sys, pose)
    return f_xy, f_z, tau


# ------------------------------------------------------------ relaxation


def _displace(sys: SystemSpec, pose: FullPose, step: np.ndarray) -> FullPose:
    return FullPose(
        manifold.wrap(pose.t + step[:2], sys.box),
        pose.z + step[2],
        manifold.exp_so3(step[3:]) @ pose.R,
    )


def _gradient(f_xy, f_z, tau) -> np.ndarray:
    return -np.concatenate([f_xy, [f_z], tau])


def relax(
    sys: SystemSpec,
    pose0: FullPose,
    max_steps: int = 100,
    ftol: float = 0.01,
    memory: int = 10,
    max_move: float | None = None,
    max_turn: float = 0.25,
) -> RelaxResult:
    """L-BFGS with backtracking line search over (t_x, t_y, z, rotation).

    The rotation is updated as ``R <- exp(hat(phi)) R`` so the rotational
    gradient is minus the space-frame torque; curvature pairs are kept in the
    space frame without transport.
    """
    if max_move is None:
        max_move = 0.25 * sys.sigma_max
    pose = FullPose(manifold.wrap(pose0.t, sys.box), pose0.z, pose0.R)
    e, f_xy, f_z, tau = energy_force_torque(sys, pose)
    g = _gradient(f_xy, f_z, tau)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    n_rises = 0
    converged = False
    anomaly = Anomaly.NONE
    steps = 0

    while True:
        if not (np.isfinite(e) and np.all(np.isfinite(g))):
            anomaly = Anomaly.DIVERGED
            break
        if np.max(np.abs(g)) < ftol:
            converged = True
            break
        if steps >= max_steps:
            break

        d = _two_loop(g, s_hist, y_hist)
        if d.dot(g) >= 0.0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        d = _cap(d, max_move, max_turn)

        slope = d.dot(g)
        alpha = 1.0
        for _ in range(30):
            trial = _displace(sys, pose, alpha * d)
            e_new, f_xy, f_z, tau = energy_force_torque(sys, trial)
            if np.isfinite(e_new) and e_new <= e + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            if s_hist:
                s_hist.clear()
                y_hist.clear()
                continue
            break  # no descent possible along -g at machine precision
        g_new = _gradient(f_xy, f_z, tau)
        s, y = alpha * d, g_new - g
        if s.dot(y) > 1e-12:
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        n_rises = n_rises + 1 if e_new > e else 0
        pose, e, g = trial, e_new, g_new
        steps += 1
        if n_rises >= 20:
            anomaly = Anomaly.DIVERGED
            break

    if anomaly is Anomaly.NONE and pose.z - sys.z_surface > DESORB_SIGMAS * sys.sigma_max:
        anomaly = Anomaly.DESORBED
    return RelaxResult(pose, float(e), converged, steps, anomaly)


def _two_loop(g, s_hist, y_hist):
    if not s_hist:
        return -g
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        a = s.dot(q) / y.dot(s)
        alphas.append(a)
        q -= a * y
    s, y = s_hist[-1], y_hist[-1]
    q *= s.dot(y) / y.dot(y)
    for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = y.dot(q) / y.dot(s)
        q += (a - b) * s
    return -q


def _cap(d, max_move, max_turn):
    scale = 1.0
    move = np.linalg.norm(d[:3])
    turn = np.linalg.norm(d[3:])
    if move > max_move:
        scale = min(scale, max_move / move)
    if turn > max_turn:
        scale = min(scale, max_turn / turn)
    return d * scale


# ------------------------------------------------------- minima enumeration


def pose_distance(sys: SystemSpec, a: FullPose, b: FullPose) -> tuple[float, float]:
    """In-plane minimal-image distance and geodesic rotation angle."""
    dt = manifold.min_image(b.t - a.t, sys.box)
    return float(np.linalg.norm(dt)), float(manifold.geodesic_angle(a.R, b.R))


def grid_starts(sys: SystemSpec, grid_density: int, n_rot: int, seed: int = 0) -> list[FullPose]:
    rng = np.random.default_rng(seed)
    rotations = [np.eye(3)] + list(manifold.sample_rotation(rng, n_rot)) if n_rot else [np.eye(3)]
    frac = (np.arange(grid_density) + 0.5) / grid_density
    starts = []
    for fx in frac:
        for fy in frac:
            t = np.array([fx, fy]) * sys.box
            starts.extend(FullPose(t, sys.z_init, R) for R in rotations)
    return starts


def _relax_many(args):
    sys, poses, max_steps, ftol = args
    return [relax(sys, p, max_steps=max_steps, ftol=ftol) for p in poses]


def relax_batch(sys: SystemSpec, poses, max_steps: int = 100, ftol: float = 0.01, jobs: int = 1):
    """Relax many starts; results come back in input order for any ``jobs``."""
    poses = list(poses)
    if jobs <= 1 or len(poses) < 2:
        return _relax_many((sys, poses, max_steps, ftol))
    chunks = [poses[i::jobs] for i in range(jobs)]
    with ProcessPoolExecutor(jobs) as pool:
        parts = list(pool.map(_relax_many, [(sys, c, max_steps, ftol) for c in chunks]))
    out = [None] * len(poses)
    for i, part in enumerate(parts):
        out[i::jobs] = part
    return out


def enumerate_minima(
    sys: SystemSpec,
    grid_density: int = 4,
    n_rot: int = 4,
    seed: int = 0,
    max_steps: int = 300,
    ftol: float = 0.01,
    jobs: int = 1,
) -> MinimaSet:
    """Relax from a translation grid x rotation set and deduplicate the minima."""
    if grid_density < 4:
        raise InvalidConfig(f"grid_density must be >= 4, got {grid_density}")
    starts = grid_starts(sys, grid_density, n_rot, seed)
    results = relax_batch(sys, starts, max_steps=max_steps, ftol=ftol, jobs=jobs)
    kept: list[tuple[FullPose, float]] = []
    dist_tol = DEDUP_DIST_SIGMAS * sys.sigma_max
    for res in results:
        if res.anomaly is not Anomaly.NONE or not res.converged:
            continue
        for pose, e in kept:
            dist, angle = pose_distance(sys, pose, res.final_pose)
            if dist < dist_tol and angle < DEDUP_ANGLE and abs(e - res.final_energy) < DEDUP_ENERGY:
                break
        else:
            kept.append((res.final_pose, res.final_energy))
    if not kept:
        raise NoMinimaFound(f"every start for system {sys.system_id} was anomalous or unconverged")
    return MinimaSet.from_entries(sys.system_id, kept)


# ---------------------------------------------------------------- transforms


def transform_system(sys: SystemSpec, pose: FullPose, Q: np.ndarray, shift=(0.0, 0.0)):
    """Apply an orthogonal map ``Q`` (about the origin) plus an in-plane shift.

    Proper maps rotate the pose; for improper ``Q`` the template is reflected
    and ``R -> Q R Q^T`` keeps the pose proper.
    """
    Q = np.asarray(Q, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    slab = sys.slab_pos @ Q.T
    slab[:, :2] = manifold.wrap(slab[:, :2] + shift, sys.box)
    t3 = Q @ np.array([pose.t[0], pose.t[1], pose.z])
    if np.linalg.det(Q) > 0:
        offsets, R = sys.ads_offsets, Q @ pose.R
    else:
        offsets, R = sys.ads_offsets @ Q.T, Q @ pose.R @ Q.T
    new_sys = dataclasses.replace(sys, slab_pos=slab, ads_offsets=offsets)
    return new_sys, FullPose(manifold.wrap(t3[:2] + shift, sys.box), t3[2], R)
