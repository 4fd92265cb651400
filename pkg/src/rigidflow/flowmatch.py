"""Rectified conditional flow matching on T^2 x SO(3).

Pairs join a relaxed minimum ``x0`` (t = 0) to a prior draw ``x1`` (t = 1)
along straight torus displacements and SO(3) geodesics, so the teacher
velocity is constant along each path. The energy condition is dropped to the
null embedding with probability ``p_cfg``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import manifold
from .errors import EmptyMinima, InvalidConfig, NonFinite
from .fieldnet import FieldConfig, FieldNet, build_graph, collate, load_checkpoint, loss_terms, save_checkpoint
from .scene import MinimaSet, Pose, SystemSpec, lift

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    p_cfg: float = 0.2
    lambda_rot: float = 1.0
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    steps: int = 10_000
    seed: int = 0
    rot_head: str = "torque"
    checkpoint_every: int = 1000

    def validate(self) -> None:
        if not 0.0 <= self.p_cfg < 1.0:
            raise InvalidConfig(f"p_cfg must lie in [0, 1), got {self.p_cfg}")
        if self.lambda_rot < 0:
            raise InvalidConfig(f"lambda_rot must be >= 0, got {self.lambda_rot}")
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise InvalidConfig("batch_size >= 1, steps >= 0 and lr > 0 required")
        if self.rot_head not in ("torque", "direct"):
            raise InvalidConfig(f"rot_head must be 'torque' or 'direct', got {self.rot_head!r}")


@dataclass(frozen=True)
class TrainingPair:
    x0: Pose
    x1: Pose
    e_rel: float
    system_id: str


def make_pair(sys: SystemSpec, minima: MinimaSet, rng: np.random.Generator) -> TrainingPair:
    if len(minima) == 0:
        raise EmptyMinima(f"system {sys.system_id} has no minima")
    m = minima.minima[rng.integers(len(minima))]
    x1 = Pose(rng.random(2) * sys.box, manifold.sample_rotation(rng))
    return TrainingPair(Pose(m.pose.t, m.pose.R), x1, m.e_rel, sys.system_id)


def teacher_velocity(pair: TrainingPair, box):
    """Constant ``(t_dot*, omega*)`` of the path x0 -> x1."""
    t_dot = manifold.min_image(pair.x1.t - pair.x0.t, box)
    omega = manifold.rotation_target(pair.x0.R, pair.x1.R)
    return t_dot, omega


def interpolate(pair: TrainingPair, t: float, box) -> Pose:
    t_dot, _ = teacher_velocity(pair, box)
    return Pose(manifold.wrap(pair.x0.t + t * t_dot, box), manifold.geodesic(pair.x0.R, pair.x1.R, t))


def init_model(cfg: FieldConfig = FieldConfig(), seed: int = 0) -> FieldNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return FieldNet(cfg)


def make_optimizer(model: FieldNet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), foreach=False)


def sample_batch(dataset, cfg: TrainConfig, rng: np.random.Generator, r_cut: float, max_neighbors: int):
    """Draw pairs, times and (possibly dropped) conditions; returns the collated batch and targets."""
    graphs, ts, conds, t_dots, omegas = [], [], [], [], []
    for _ in range(cfg.batch_size):
        sys, minima = dataset[rng.integers(len(dataset))]
        pair = make_pair(sys, minima, rng)
        t = rng.random()
        drop = rng.random() < cfg.p_cfg
        t_dot, omega = teacher_velocity(pair, sys.box)
        graphs.append(build_graph(sys, lift(sys, interpolate(pair, t, sys.box)), r_cut, max_neighbors))
        ts.append(t)
        conds.append(None if drop else pair.e_rel)
        t_dots.append(t_dot)
        omegas.append(omega)
    return collate(graphs, ts, conds), torch.tensor(np.array(t_dots)), torch.tensor(np.array(omegas))


def step_rng(seed: int, step: int) -> np.random.Generator:
    # one stream per step keeps resumed runs identical to uninterrupted ones
    return np.random.default_rng([seed, step])


def training_step(model: FieldNet, optimizer, dataset, rng, cfg: TrainConfig, step: int = 0) -> dict:
    batch, t_dot, omega = sample_batch(dataset, cfg, rng, model.cfg.r_cut, model.cfg.max_neighbors)
    optimizer.zero_grad(set_to_none=False)
    trans, rot = loss_terms(model, batch, t_dot, omega, cfg.rot_head)
    loss = trans + cfg.lambda_rot * rot
    if not torch.isfinite(loss):
        raise NonFinite("non-finite training loss", step=step)
    loss.backward()
    optimizer.step()
    return {
        "loss": float(loss.detach()),
        "trans_loss": float(trans.detach()),
        "rot_loss": float(rot.detach()),
        "n_null": int(batch.is_null.sum()),
    }


def _optimizer_tensors(model: FieldNet, optimizer) -> dict:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if state:
            out[f"adam/exp_avg/{name}"] = state["exp_avg"].numpy()
            out[f"adam/exp_avg_sq/{name}"] = state["exp_avg_sq"].numpy()
            out[f"adam/step/{name}"] = np.asarray(float(state["step"]))
    return out


def _restore_optimizer(model: FieldNet, optimizer, extra: dict) -> None:
    for name, p in model.named_parameters():
        key = f"adam/exp_avg/{name}"
        if key in extra:
            optimizer.state[p] = {
                "step": torch.tensor(float(extra[f"adam/step/{name}"].reshape(()))),
                "exp_avg": torch.from_numpy(extra[key].copy()),
                "exp_avg_sq": torch.from_numpy(extra[f"adam/exp_avg_sq/{name}"].copy()),
            }


def save_training_state(path, model, optimizer, step: int, train_cfg: TrainConfig) -> None:
    meta = {"step": step, "train_config": {k: getattr(train_cfg, k) for k in train_cfg.__dataclass_fields__}}
    save_checkpoint(path, model, extra=_optimizer_tensors(model, optimizer), meta=meta)


def train(
    dataset,
    cfg: TrainConfig = TrainConfig(),
    model_cfg: FieldConfig = FieldConfig(),
    out_dir=None,
    resume=None,
    log_path=None,
    callback=None,
):
    """Run ``cfg.steps`` optimization steps; returns ``(model, log_rows)``.

    With ``out_dir`` a checkpoint is written every ``cfg.checkpoint_every``
    steps and at the end. ``resume`` is a checkpoint path from an earlier run
    with the same dataset and config.
    """
    cfg.validate()
    if not dataset:
        raise InvalidConfig("training dataset is empty")
    if resume is not None:
        model, extra, meta = load_checkpoint(resume)
        optimizer = make_optimizer(model, cfg)
        _restore_optimizer(model, optimizer, extra)
        start = int(meta.get("step", 0))
    else:
        model = init_model(model_cfg, cfg.seed)
        optimizer = make_optimizer(model, cfg)
        start = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    log_fh = open(log_path, "a" if resume is not None else "w") if log_path is not None else None
    t0 = time.perf_counter()
    try:
        for step in range(start + 1, cfg.steps + 1):
            info = training_step(model, optimizer, dataset, step_rng(cfg.seed, step), cfg, step)
            row = {
                "step": step,
                "loss": info["loss"],
                "trans_loss": info["trans_loss"],
                "rot_loss": info["rot_loss"],
                "wall_time": time.perf_counter() - t0,
            }
            rows.append(row)
            if log_fh is not None:
                log_fh.write(json.dumps(row) + "\n")
            if callback is not None:
                callback(row)
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_training_state(out_dir / f"step{step:07d}.npz", model, optimizer, step, cfg)
            if step % 500 == 0:
                log.info("step %d loss %.4f", step, info["loss"])
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_training_state(out_dir / "final.npz", model, optimizer, max(cfg.steps, start), cfg)
    return model, rows

