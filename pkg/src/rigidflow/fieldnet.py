"""Energy-conditioned equivariant vector field on T^2 x SO(3).

A PaiNN-style message-passing network over the slab + adsorbate graph with
scalar and l=1 vector channels. Scalar features are FiLM-modulated by an
embedding of the relative energy (or a learned null embedding). Two rotation
heads are provided: torque aggregation, which turns polar per-atom vectors
into a pseudovector angular velocity through the inertia tensor, and direct
pooling, kept as an ablation.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import manifold
from .errors import NonFinite, SchemaMismatch
from .scene import FullPose, SystemSpec

torch.set_default_dtype(torch.float64)

CHECKPOINT_SCHEMA = "rigidflow-checkpoint/1"
ROT_HEADS = ("torque", "direct")


@dataclass(frozen=True)
class FieldConfig:
    n_species: int = 8
    hidden: int = 64
    n_layers: int = 3
    n_rbf: int = 32
    r_cut: float = 6.0
    max_neighbors: int = 50
    n_freq: int = 8
    film_dim: int = 32
    e_max: float = 2.0
    tikhonov: float = 1e-4
    trans_scale: float = 10.0 * math.sqrt(2.0)  # box diagonal of the default 10 x 10 cell
    rot_scale: float = math.pi


# ------------------------------------------------------------------ graph


@dataclass(frozen=True, eq=False)
class GraphInput:
    pos: np.ndarray  # (n, 3), adsorbate atoms first
    species: np.ndarray
    tag: np.ndarray  # 1 adsorbate, 0 slab
    src: np.ndarray  # sender index per edge
    dst: np.ndarray  # receiver index per edge
    vec: np.ndarray  # minimal-image pos[src] - pos[dst]
    length: np.ndarray
    arm: np.ndarray  # (n_ads, 3) adsorbate offsets from the COM

    @property
    def n_ads(self) -> int:
        return len(self.arm)


def build_graph(sys: SystemSpec, pose: FullPose, r_cut: float = 6.0, max_neighbors: int = 50) -> GraphInput:
    """Radius graph over adsorbate + slab atoms with minimal image in x, y.

    Each receiver keeps its ``max_neighbors`` nearest senders, ties broken by
    sender index.
    """
    arm = sys.ads_offsets @ pose.R.T
    ads = arm + np.array([pose.t[0], pose.t[1], pose.z])
    pos = np.concatenate([ads, sys.slab_pos])
    species = np.concatenate([sys.ads_species, sys.slab_species])
    tag = np.concatenate([np.ones(sys.n_ads, dtype=np.int64), np.zeros(len(sys.slab_pos), dtype=np.int64)])
    return _radius_graph(pos, species, tag, arm, sys.box, r_cut, max_neighbors)


def _radius_graph(pos, species, tag, arm, box, r_cut, max_neighbors):
    n = len(pos)
    d = pos[None, :, :] - pos[:, None, :]  # d[i, j] = pos[j] - pos[i]
    d[..., :2] = manifold.min_image(d[..., :2], box)
    r = np.sqrt(np.sum(d * d, axis=-1))
    r[np.arange(n), np.arange(n)] = np.inf
    order = np.lexsort((np.broadcast_to(np.arange(n), (n, n)), r), axis=1)
    ranked = np.take_along_axis(r, order, axis=1)
    keep = (ranked <= r_cut) & (np.arange(n)[None, :] < max_neighbors)
    dst = np.repeat(np.arange(n), keep.sum(axis=1))
    src = order[keep]
    vec = d[dst, src]
    return GraphInput(pos, species, tag, src, dst, vec, r[dst, src], arm)


# -------------------------------------------------------------- embeddings


def cosine_envelope(d, r_cut):
    d = torch.as_tensor(d)
    return torch.where(d < r_cut, 0.5 * (torch.cos(math.pi * d / r_cut) + 1.0), torch.zeros_like(d))


def gaussian_rbf(d, r_cut, n_rbf):
    """Gaussian bases with centers uniform on [0, r_cut], without the envelope."""
    d = torch.as_tensor(d)
    centers = torch.linspace(0.0, r_cut, n_rbf)
    width = r_cut / (n_rbf - 1)
    return torch.exp(-0.5 * ((d[..., None] - centers) / width) ** 2)


def rbf_embed(d, r_cut: float = 6.0, n_rbf: int = 32):
    return gaussian_rbf(d, r_cut, n_rbf) * cosine_envelope(d, r_cut)[..., None]


def sinusoidal(t, n_freq: int):
    t = torch.as_tensor(t, dtype=torch.float64)
    freqs = torch.logspace(0.0, 3.0, n_freq)
    arg = t[..., None] * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


# ------------------------------------------------------------------- model


def _mlp(n_in, n_hidden, n_out):
    return nn.Sequential(nn.Linear(n_in, n_hidden), nn.SiLU(), nn.Linear(n_hidden, n_out))


def bound(u, scale):
    """Radial saturation ``u * s tanh(|u|/s) / |u|``: keeps direction, caps norm at ``s``."""
    r = torch.sqrt(torch.sum(u * u, dim=-1, keepdim=True) + 1e-300)
    return u * (scale * torch.tanh(r / scale) / r)


class MessageLayer(nn.Module):
    def __init__(self, F: int, n_rbf: int):
        super().__init__()
        self.F = F
        self.phi = _mlp(F, F, 3 * F)
        self.W = nn.Linear(n_rbf, 3 * F)
        self.U = nn.Linear(F, F, bias=False)
        self.V = nn.Linear(F, F, bias=False)
        self.update = _mlp(2 * F, F, 3 * F)

    def forward(self, s, v, src, dst, rbf, unit, first=False):
        F = self.F
        x = self.phi(s).index_select(0, src) * self.W(rbf)
        ds, dvv, dvs = torch.split(x, F, dim=-1)
        dv = dvs[:, None, :] * unit[:, :, None]
        if not first:  # vector features start at zero
            dv = dv + v.index_select(0, src) * dvv[:, None, :]
        s = s.index_add(0, dst, ds)
        v = v.index_add(0, dst, dv)

        Uv, Vv = self.U(v), self.V(v)
        norm = torch.sqrt(torch.sum(Vv * Vv, dim=1) + 1e-8)
        a = self.update(torch.cat([s, norm], dim=-1))
        a_vv, a_sv, a_ss = torch.split(a, F, dim=-1)
        v = v + a_vv[:, None, :] * Uv
        s = s + a_sv * torch.sum(Uv * Vv, dim=1) + a_ss
        return s, v


class FieldNet(nn.Module):
    def __init__(self, cfg: FieldConfig = FieldConfig()):
        super().__init__()
        self.cfg = cfg
        F = cfg.hidden
        self.species_embed = nn.Embedding(cfg.n_species, F)
        self.tag_embed = nn.Embedding(2, F)
        self.time_proj = nn.Linear(2 * cfg.n_freq, F)
        self.energy_embed = _mlp(1, cfg.film_dim, cfg.film_dim)
        self.null_embed = nn.Parameter(0.1 * torch.randn(cfg.film_dim))
        self.film = _mlp(cfg.film_dim, cfg.film_dim, 2 * F * cfg.n_layers)
        self.layers = nn.ModuleList(MessageLayer(F, cfg.n_rbf) for _ in range(cfg.n_layers))
        self.trans_head = nn.Linear(F, 1, bias=False)
        self.torque_head = nn.Linear(F, 1, bias=False)
        self.direct_head = nn.Linear(F, 1, bias=False)
        self.log_trans_scale = nn.Parameter(torch.tensor(math.log(cfg.trans_scale)))
        self.log_rot_scale = nn.Parameter(torch.tensor(math.log(cfg.rot_scale)))
        # gamma = 1, beta = 0 at init: conditional and null paths start identical
        nn.init.zeros_(self.film[2].weight)
        nn.init.zeros_(self.film[2].bias)

    # -- conditioning

    def condition_embedding(self, e_rel, is_null):
        e = torch.clamp(e_rel, 0.0, self.cfg.e_max)[:, None]
        emb = self.energy_embed(e)
        return torch.where(is_null[:, None], self.null_embed.expand_as(emb), emb)

    def film_params(self, e_rel, is_null):
        """Per-graph ``(gamma, beta)``, each of shape (B, n_layers, F)."""
        out = self.film(self.condition_embedding(e_rel, is_null))
        out = out.view(-1, self.cfg.n_layers, 2, self.cfg.hidden)
        return 1.0 + out[:, :, 0], out[:, :, 1]

    # -- forward

    def forward(self, batch: "Batch", rot_head: str = "torque"):
        cfg = self.cfg
        s = self.species_embed(batch.species) + self.tag_embed(batch.tag)
        s = s + self.time_proj(sinusoidal(batch.t, cfg.n_freq))[batch.node_graph]
        v = torch.zeros(len(s), 3, cfg.hidden)
        rbf = rbf_embed(batch.length, cfg.r_cut, cfg.n_rbf)
        unit = batch.vec / batch.length[:, None]
        gamma, beta = self.film_params(batch.e_rel, batch.is_null)
        # the heads read adsorbate atoms only, so the last layer needs only edges into them
        last = batch.tag.index_select(0, batch.dst) == 1
        for k, layer in enumerate(self.layers):
            if k == cfg.n_layers - 1 and k > 0:
                s, v = layer(s, v, batch.src[last], batch.dst[last], rbf[last], unit[last])
            else:
                s, v = layer(s, v, batch.src, batch.dst, rbf, unit, first=k == 0)
            s = gamma[batch.node_graph, k] * s + beta[batch.node_graph, k]

        v_ads = v[batch.ads_index]  # (A, 3, F)
        pooled = _segment_mean(self.trans_head(v_ads)[..., 0], batch.ads_graph, batch.n_graphs)
        t_dot = bound(pooled[:, :2], torch.exp(self.log_trans_scale))

        if rot_head == "torque":
            omega = torque_head(self.torque_head(v_ads)[..., 0], batch.arm, batch.ads_graph, batch.n_graphs, cfg.tikhonov)
        elif rot_head == "direct":
            omega = _segment_mean(self.direct_head(v_ads)[..., 0], batch.ads_graph, batch.n_graphs)
        else:
            raise ValueError(f"rot_head must be one of {ROT_HEADS}, got {rot_head!r}")
        omega = bound(omega, torch.exp(self.log_rot_scale))
        if not (torch.isfinite(t_dot).all() and torch.isfinite(omega).all()):
            raise NonFinite("non-finite velocity from forward pass")
        return t_dot, omega


def _segment_mean(x, seg, n):
    total = torch.zeros((n,) + x.shape[1:]).index_add(0, seg, x)
    count = torch.zeros(n).index_add(0, seg, torch.ones(len(seg)))
    return total / count.view((n,) + (1,) * (x.dim() - 1))


def inertia_tensor(arm, masses=None, tikhonov: float = 1e-4):
    """Tikhonov-regularized inertia tensor about the COM for one adsorbate."""
    arm = torch.as_tensor(arm)
    m = torch.ones(len(arm)) if masses is None else torch.as_tensor(masses)
    r2 = torch.sum(arm * arm, dim=-1)
    eye = torch.eye(3)
    I = torch.sum(m[:, None, None] * (r2[:, None, None] * eye - arm[:, :, None] * arm[:, None, :]), dim=0)
    eps = tikhonov * torch.trace(I) / 3.0 + 1e-8
    return I + eps * eye


def torque_head(vectors, arm, seg, n_graphs, tikhonov=1e-4, masses=None):
    """Angular velocity ``I^-1 L`` with ``L = sum_i arm_i x v_i`` per graph (unbounded)."""
    m = torch.ones(len(arm)) if masses is None else torch.as_tensor(masses)
    L = torch.zeros(n_graphs, 3).index_add(0, seg, torch.cross(arm, vectors, dim=-1))
    r2 = torch.sum(arm * arm, dim=-1)
    eye = torch.eye(3)
    per_atom = m[:, None, None] * (r2[:, None, None] * eye - arm[:, :, None] * arm[:, None, :])
    I = torch.zeros(n_graphs, 3, 3).index_add(0, seg, per_atom)
    eps = tikhonov * torch.diagonal(I, dim1=-2, dim2=-1).sum(-1) / 3.0 + 1e-8
    I = I + eps[:, None, None] * eye
    return torch.linalg.solve(I, L)


# ------------------------------------------------------------------- batch


@dataclass
class Batch:
    species: torch.Tensor
    tag: torch.Tensor
    node_graph: torch.Tensor
    src: torch.Tensor
    dst: torch.Tensor
    vec: torch.Tensor
    length: torch.Tensor
    ads_index: torch.Tensor
    ads_graph: torch.Tensor
    arm: torch.Tensor
    t: torch.Tensor
    e_rel: torch.Tensor
    is_null: torch.Tensor
    n_graphs: int


def collate(graphs, ts, conds) -> Batch:
    """Stack graphs into one disjoint batch. ``conds`` holds E_rel floats or None (null)."""
    offset = 0
    parts = {k: [] for k in ("species", "tag", "node_graph", "src", "dst", "vec", "length", "ads_index", "ads_graph", "arm")}
    for g_idx, g in enumerate(graphs):
        n = len(g.pos)
        parts["species"].append(g.species)
        parts["tag"].append(g.tag)
        parts["node_graph"].append(np.full(n, g_idx))
        parts["src"].append(g.src + offset)
        parts["dst"].append(g.dst + offset)
        parts["vec"].append(g.vec)
        parts["length"].append(g.length)
        parts["ads_index"].append(np.arange(g.n_ads) + offset)
        parts["ads_graph"].append(np.full(g.n_ads, g_idx))
        parts["arm"].append(g.arm)
        offset += n
    cat = {k: torch.from_numpy(np.concatenate(v)) for k, v in parts.items()}
    return Batch(
        **cat,
        t=torch.tensor(np.asarray(ts, dtype=np.float64).reshape(len(graphs))),
        e_rel=torch.tensor([0.0 if c is None else float(c) for c in conds]),
        is_null=torch.tensor([c is None for c in conds]),
        n_graphs=len(graphs),
    )


def predict(model: FieldNet, graphs, ts, conds, rot_head="torque"):
    """Forward without autograd; returns numpy ``(t_dot (B,2), omega (B,3))``."""
    with torch.no_grad():
        t_dot, omega = model(collate(graphs, ts, conds), rot_head)
    return t_dot.numpy(), omega.numpy()


# -------------------------------------------------------------------- loss


def loss_terms(model: FieldNet, batch: Batch, t_dot_target, omega_target, rot_head="torque"):
    t_dot, omega = model(batch, rot_head)
    trans = torch.mean(torch.sum((t_dot - t_dot_target) ** 2, dim=-1))
    rot = torch.mean(torch.sum((omega - omega_target) ** 2, dim=-1))
    return trans, rot


def loss_and_grad(model: FieldNet, batch: Batch, t_dot_target, omega_target, lambda_rot=1.0, rot_head="torque"):
    """Flow-matching loss and parameter gradients (returned keyed by parameter name)."""
    model.zero_grad(set_to_none=False)
    trans, rot = loss_terms(model, batch, torch.as_tensor(t_dot_target), torch.as_tensor(omega_target), rot_head)
    loss = trans + lambda_rot * rot
    if not torch.isfinite(loss):
        raise NonFinite("non-finite loss")
    loss.backward()
    grads = {
        name: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        for name, p in model.named_parameters()
    }
    return float(loss.detach()), grads


# -------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: FieldNet, extra: dict | None = None, meta: dict | None = None) -> None:
    """Write an ``.npz`` container: schema string, JSON config, one f64 array per tensor.

    Model tensors are stored under ``param/<name>``; ``extra`` tensors (e.g.
    optimizer moments) under their own keys.
    """
    arrays = {
        "schema": np.array(CHECKPOINT_SCHEMA),
        "config": np.array(json.dumps(asdict(model.cfg), sort_keys=True)),
        "meta": np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    for name, p in model.state_dict().items():
        arrays[f"param/{name}"] = np.array(p.detach().numpy(), dtype="<f8", order="C")
    for name, value in (extra or {}).items():
        arrays[name] = np.array(value, dtype="<f8", order="C")
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, extra, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        schema = str(data["schema"]) if "schema" in data else "<missing>"
        if schema != CHECKPOINT_SCHEMA:
            raise SchemaMismatch(f"checkpoint schema {schema!r} does not match expected {CHECKPOINT_SCHEMA!r}")
        cfg_dict = json.loads(str(data["config"]))
        cfg_dict = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg_dict.items()}
        model = FieldNet(FieldConfig(**cfg_dict))
        state = {k[len("param/"):]: torch.from_numpy(data[k].astype(np.float64)) for k in data.files if k.startswith("param/")}
        model.load_state_dict(state)
        extra = {k: data[k].copy() for k in data.files if k not in ("schema", "config", "meta") and not k.startswith("param/")}
        meta = json.loads(str(data["meta"]))
    return model, extra, meta
