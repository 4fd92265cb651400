"""Deterministic few-step generation: prior draws, guided velocity, Heun steps.

A *field* is any callable ``field(systems, poses, t) -> (t_dot, omega)``
returning arrays of shape (B, 2) and (B, 3) for a list of systems and
generative poses at a common time ``t``. :class:`GuidedField` wraps a trained
network with classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import manifold
from .errors import InvalidConfig, NonFinite
from .fieldnet import FieldNet, build_graph, predict
from .scene import Pose, SystemSpec, lift

REORTHO_TOL = 1e-9


@dataclass(frozen=True)
class SampleConfig:
    K: int = 5
    w: float = 0.0
    e_rel_target: float = 0.0
    seed: int = 0
    rot_head: str = "torque"

    def validate(self) -> None:
        if self.K < 1:
            raise InvalidConfig(f"K must be >= 1, got {self.K}")
        if self.w < 0:
            raise InvalidConfig(f"guidance scale w must be >= 0, got {self.w}")


def sample_prior(sys: SystemSpec, rng: np.random.Generator) -> Pose:
    """Uniform in-plane position and Haar-random rotation."""
    return Pose(rng.random(2) * sys.box, manifold.sample_rotation(rng))


def combine_guidance(cond, uncond, w):
    """``(1 + w) cond - w uncond``."""
    return (1.0 + w) * cond - w * uncond


class GuidedField:
    """CFG-combined network velocity; the null branch is skipped when ``w == 0``."""

    def __init__(self, model: FieldNet, e_rel_target: float = 0.0, w: float = 0.0, rot_head: str = "torque"):
        self.model = model
        self.e_rel_target = float(e_rel_target)
        self.w = float(w)
        self.rot_head = rot_head
        self.n_uncond_calls = 0

    def graphs(self, systems, poses):
        cfg = self.model.cfg
        return [build_graph(s, lift(s, p), cfg.r_cut, cfg.max_neighbors) for s, p in zip(systems, poses)]

    def __call__(self, systems, poses, t):
        graphs = self.graphs(systems, poses)
        B = len(graphs)
        if self.w == 0.0:
            return predict(self.model, graphs, [t] * B, [self.e_rel_target] * B, self.rot_head)
        self.n_uncond_calls += 1
        t_dot, omega = predict(
            self.model, graphs + graphs, [t] * (2 * B), [self.e_rel_target] * B + [None] * B, self.rot_head
        )
        return combine_guidance(t_dot[:B], t_dot[B:], self.w), combine_guidance(omega[:B], omega[B:], self.w)


def cfg_velocity(model: FieldNet, sys: SystemSpec, pose: Pose, t: float, e_rel_target: float = 0.0, w: float = 0.0, rot_head="torque"):
    t_dot, omega = GuidedField(model, e_rel_target, w, rot_head)([sys], [pose], t)
    return t_dot[0], omega[0]


def _advance(systems, poses, t_dot, omega, dt):
    out = []
    for s, p, v, w in zip(systems, poses, t_dot, omega):
        R = manifold.exp_so3(dt * w) @ p.R
        ortho, det = manifold.rotation_error(R)
        if ortho > REORTHO_TOL or det > REORTHO_TOL:
            R = manifold.project_to_so3(R)
        out.append(Pose(manifold.wrap(p.t + dt * v, s.box), R))
    return out


def _check(t_dot, omega, step):
    if not (np.all(np.isfinite(t_dot)) and np.all(np.isfinite(omega))):
        raise NonFinite("non-finite velocity during integration", step=step)


def heun_step(field, systems, poses, t: float, dt: float, step: int = 0):
    """One Heun step; the averaged rotation increment is applied as a single exponential."""
    v1, w1 = field(systems, poses, t)
    _check(v1, w1, step)
    provisional = _advance(systems, poses, v1, w1, dt)
    v2, w2 = field(systems, provisional, t + dt)
    _check(v2, w2, step)
    return _advance(systems, poses, 0.5 * (v1 + v2), 0.5 * (w1 + w2), dt)


def integrate(field, systems, x1, K: int = 5, trace=None):
    """Integrate from t = 1 to t = 0 in ``K`` uniform Heun steps.

    ``systems`` and ``x1`` are parallel lists (one pose per system entry).
    If ``trace`` is a list, the intermediate poses of every step are appended.
    """
    if K < 1:
        raise InvalidConfig(f"K must be >= 1, got {K}")
    poses = list(x1)
    dt = -1.0 / K
    for k in range(K):
        t = 1.0 - k / K
        poses = heun_step(field, systems, poses, t, dt, step=k)
        if trace is not None:
            trace.append(poses)
    return poses
