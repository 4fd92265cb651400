"""Generate -> relax -> screen -> SR@k evaluation and the guidance/step grid.

Every system is processed as one unit of work (its N candidates integrate
together), so results do not depend on how systems are spread over workers.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import sampler
from .errors import InvalidConfig
from .fieldnet import FieldNet
from .sampler import GuidedField, SampleConfig
from .scene import Anomaly, FullPose, MinimaSet, RelaxResult, SystemSpec, lift, relax

DEFAULT_KS = (1, 2, 5, 10)


@dataclass(frozen=True)
class CandidateRecord:
    system_id: str
    seed: int
    pose: FullPose
    result: RelaxResult

    @property
    def anomaly(self) -> Anomaly:
        return self.result.anomaly

    @property
    def energy(self) -> float | None:
        if self.result.anomaly is Anomaly.NONE or self.result.converged:
            return self.result.final_energy
        return None


@dataclass(frozen=True)
class Selection:
    success: bool
    all_anomalous: bool
    delta_e: float | None  # selected energy minus e_min
    seed: int | None


@dataclass
class EvalReport:
    records: dict[str, list[CandidateRecord]]
    selections: dict[str, dict[int, Selection]]
    sr: dict[int, float]
    anomaly: dict[int, float]
    mean_abs_de: float | None  # over every valid selection at the largest k
    mean_abs_de_success: float | None  # over successful selections at the largest k
    config: dict = field(default_factory=dict)

    @property
    def n_systems(self) -> int:
        return len(self.selections)

    def successes(self, k: int) -> int:
        return sum(sel[k].success for sel in self.selections.values())

    def failures(self, k: int) -> int:
        return sum(not sel[k].success for sel in self.selections.values())

    def fully_anomalous(self, k: int) -> int:
        return sum(sel[k].all_anomalous for sel in self.selections.values())

    def summary(self) -> dict:
        out = {
            "n_systems": self.n_systems,
            "sr": {str(k): v for k, v in self.sr.items()},
            "anomaly": {str(k): v for k, v in self.anomaly.items()},
            "mean_abs_de": self.mean_abs_de,
            "mean_abs_de_success": self.mean_abs_de_success,
            "config": self.config,
        }
        return out

    def to_dict(self) -> dict:
        systems = []
        for sid, recs in self.records.items():
            systems.append(
                {
                    "system_id": sid,
                    "candidates": [
                        {
                            "seed_index": r.seed,
                            "generated": r.pose.to_dict(),
                            "relaxed": r.result.final_pose.to_dict(),
                            "energy": r.result.final_energy,
                            "converged": r.result.converged,
                            "n_steps": r.result.n_steps,
                            "anomaly": r.anomaly.value,
                        }
                        for r in recs
                    ],
                    "selections": {
                        str(k): {"success": s.success, "all_anomalous": s.all_anomalous, "delta_e": s.delta_e, "seed_index": s.seed}
                        for k, s in self.selections[sid].items()
                    },
                }
            )
        return {**self.summary(), "systems": systems}


def candidate_seed(base_seed: int, system_id: str, index: int) -> int:
    """Per-candidate seed; depends only on its own (system, index) so adding systems shifts nothing."""
    digest = hashlib.sha256(f"{base_seed}:{system_id}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def prior_draws(sys: SystemSpec, N: int, base_seed: int):
    return [sampler.sample_prior(sys, np.random.default_rng(candidate_seed(base_seed, sys.system_id, i))) for i in range(N)]


def generate_candidates(model_or_field, sys: SystemSpec, N: int, cfg: SampleConfig) -> list[FullPose]:
    """N independent integrations from hashed prior seeds, lifted to ``sys.z_init``."""
    cfg.validate()
    field = GuidedField(model_or_field, cfg.e_rel_target, cfg.w, cfg.rot_head) if isinstance(model_or_field, FieldNet) else model_or_field
    x1 = prior_draws(sys, N, cfg.seed)
    poses = sampler.integrate(field, [sys] * N, x1, cfg.K)
    return [lift(sys, p) for p in poses]


def screen(sys: SystemSpec, poses, max_steps: int = 100, ftol: float = 0.01) -> list[CandidateRecord]:
    return [CandidateRecord(sys.system_id, i, p, relax(sys, p, max_steps=max_steps, ftol=ftol)) for i, p in enumerate(poses)]


def success_at_k(records, e_min: float, k: int, tol: float = 0.1) -> Selection:
    """Lowest-energy non-anomalous candidate among seeds < k (ties -> lowest seed)."""
    if k < 1:
        raise InvalidConfig(f"k must be >= 1, got {k}")
    valid = [r for r in records if r.seed < k and r.anomaly is Anomaly.NONE and r.energy is not None]
    if not valid:
        return Selection(False, True, None, None)
    best = min(valid, key=lambda r: (r.energy, r.seed))
    de = best.energy - e_min
    return Selection(bool(de <= tol), False, float(de), best.seed)


@dataclass(frozen=True)
class EvalSettings:
    N: int = 10
    tol: float = 0.1
    ks: tuple[int, ...] = DEFAULT_KS
    relax_steps: int = 100
    ftol: float = 0.01
    baseline: bool = False


def _evaluate_system(args):
    model, sys, minima, cfg, settings = args
    with _single_thread():
        if settings.baseline:
            poses = [lift(sys, p) for p in prior_draws(sys, settings.N, cfg.seed)]
        else:
            poses = generate_candidates(model, sys, settings.N, cfg)
        records = screen(sys, poses, settings.relax_steps, settings.ftol)
    selections = {k: success_at_k(records, minima.e_min, k, settings.tol) for k in settings.ks}
    return records, selections


class _single_thread:
    def __enter__(self):
        self.n = torch.get_num_threads()
        torch.set_num_threads(1)

    def __exit__(self, *exc):
        torch.set_num_threads(self.n)


def evaluate(model, dataset, cfg: SampleConfig = SampleConfig(), settings: EvalSettings = EvalSettings(), jobs: int = 1) -> EvalReport:
    """SR@k and anomaly@k over ``dataset`` (a list of ``(SystemSpec, MinimaSet)``).

    Fully anomalous systems count as failures. ``settings.baseline`` skips
    integration and relaxes the prior draws directly (random placement).
    """
    cfg.validate()
    ks = tuple(k for k in settings.ks if k <= settings.N) or (settings.N,)
    settings = replace(settings, ks=ks)
    work = [(model, sys, minima, cfg, settings) for sys, minima in dataset]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_evaluate_system, work))
    else:
        results = [_evaluate_system(w) for w in work]

    records, selections = {}, {}
    for (sys, _), (recs, sels) in zip(dataset, results):
        records[sys.system_id] = recs
        selections[sys.system_id] = sels
    n = max(len(dataset), 1)
    sr = {k: sum(s[k].success for s in selections.values()) / n for k in ks}
    anomaly = {k: sum(s[k].all_anomalous for s in selections.values()) / n for k in ks}
    k_max = max(ks)
    de_all = [abs(s[k_max].delta_e) for s in selections.values() if s[k_max].delta_e is not None]
    de_ok = [abs(s[k_max].delta_e) for s in selections.values() if s[k_max].success]
    config = {
        "K": cfg.K,
        "w": cfg.w,
        "e_rel_target": cfg.e_rel_target,
        "seed": cfg.seed,
        "rot_head": cfg.rot_head,
        "N": settings.N,
        "tol": settings.tol,
        "relax_steps": settings.relax_steps,
        "ftol": settings.ftol,
        "baseline": settings.baseline,
    }
    return EvalReport(
        records,
        selections,
        sr,
        anomaly,
        float(np.mean(de_all)) if de_all else None,
        float(np.mean(de_ok)) if de_ok else None,
        config,
    )


GRID_COLUMNS = ("K", "w", "SR@1", "SR@2", "SR@5", "SR@10", "anom@10", "mean_dE")


def grid_columns(ks=DEFAULT_KS) -> tuple:
    """Table header for a set of k values; the default ks give ``GRID_COLUMNS``."""
    ks = sorted(ks)
    return ("K", "w", *(f"SR@{k}" for k in ks), f"anom@{ks[-1]}", "mean_dE")


def grid_row(report: EvalReport) -> dict:
    ks = sorted(report.sr)
    row = {"K": report.config["K"], "w": report.config["w"]}
    for k in ks:
        row[f"SR@{k}"] = report.sr[k]
    row[f"anom@{ks[-1]}"] = report.anomaly[ks[-1]]
    row["mean_dE"] = report.mean_abs_de if report.mean_abs_de is not None else math.nan
    return row


def grid_search(model, dataset, w_set, K_set, base: SampleConfig = SampleConfig(), settings: EvalSettings = EvalSettings(), jobs: int = 1):
    """One evaluation per (w, K) cell, shared base seed; returns ``(rows, reports)``."""
    rows, reports = [], []
    for K in K_set:
        for w in w_set:
            report = evaluate(model, dataset, replace(base, K=int(K), w=float(w)), settings, jobs=jobs)
            reports.append(report)
            rows.append(grid_row(report))
    return rows, reports


def format_table(rows) -> str:
    """Tab-separated table with a header line, one row per (K, w) cell."""
    columns = tuple(rows[0]) if rows else GRID_COLUMNS
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(_fmt(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else format(x, ".17g")
