"""Command-line entry point: ``rigidflow gen-dataset | train | sample | eval``.

Configuration comes from one INI file whose sections mirror the config
dataclasses; unknown sections or keys are rejected. Exit codes: 0 success,
2 validation error, 3 numerical failure, 4 I/O or format error.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import flowmatch, pipeline, sampler, scene, serialize
from .errors import InvalidConfig, NonFinite, RigidFlowError, SchemaMismatch
from .fieldnet import FieldConfig, load_checkpoint
from .flowmatch import TrainConfig
from .pipeline import EvalSettings
from .sampler import SampleConfig
from .scene import SceneConfig

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    n_systems: int = 50
    seed: int = 0
    grid_density: int = 5
    n_rot: int = 3
    ftol: float = 1e-3
    max_steps: int = 300

    def validate(self) -> None:
        if self.n_systems < 1:
            raise InvalidConfig(f"n_systems must be >= 1, got {self.n_systems}")
        if self.grid_density < 4:
            raise InvalidConfig(f"grid_density must be >= 4, got {self.grid_density}")


@dataclasses.dataclass(frozen=True)
class GridConfig:
    w_set: tuple[float, ...] = (0.0, 1.0, 3.0, 5.0, 7.0, 10.0)
    K_set: tuple[int, ...] = (5, 10, 30)


SECTIONS = {
    "scene": SceneConfig,
    "dataset": DatasetConfig,
    "model": FieldConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "eval": EvalSettings,
    "grid": GridConfig,
}


# ------------------------------------------------------------------ config


def _coerce(value, like):
    if isinstance(like, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"expected a list, got {value!r}")
        proto = like[0] if like else value[0] if value else 0.0
        return tuple(_coerce(v, proto) for v in value)
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ValueError(f"expected true/false, got {value!r}")
        return value
    if isinstance(like, int):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ValueError(f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    return str(value)


def _parse_value(text: str, like):
    text = text.strip()
    if isinstance(like, str):
        return text
    if isinstance(like, tuple) and not text.startswith("["):
        text = f"[{text}]"
    try:
        return json.loads(text.lower() if isinstance(like, bool) else text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"cannot parse {text!r}") from exc


def load_config(path=None) -> dict:
    """Section name -> config dataclass instance (defaults where absent)."""
    out = {name: cls() for name, cls in SECTIONS.items()}
    if path is None:
        return out
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise InvalidConfig(f"{path}: unknown section [{section}]; expected one of {sorted(SECTIONS)}")
        base = out[section]
        names = {f.name for f in dataclasses.fields(base)}
        updates = {}
        for key, text in parser.items(section):
            if key not in names:
                raise InvalidConfig(f"{path}: unknown key {key!r} in [{section}]; expected one of {sorted(names)}")
            like = getattr(base, key)
            try:
                updates[key] = _coerce(_parse_value(text, like), like)
            except (ValueError, TypeError) as exc:
                raise InvalidConfig(f"{path}: [{section}] {key}: {exc}") from exc
        out[section] = dataclasses.replace(base, **updates)
    return out


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return json.dumps(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def format_config(cfg: dict, sections=None) -> str:
    lines = []
    for name in sections or SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(cfg[name]):
            lines.append(f"{f.name} = {_format_value(getattr(cfg[name], f.name))}")
        lines.append("")
    return "\n".join(lines)


def _print_config(cfg, sections):
    click.echo(format_config(cfg, sections), nl=False)


# ------------------------------------------------------------------ commands


@click.group()
def cli():
    """Few-step rigid-body placement generation on synthetic adsorption landscapes."""


def _one_system(args):
    scene_cfg, ds_cfg, seed = args
    sys_ = scene.generate_system(scene_cfg, seed)
    minima = scene.enumerate_minima(
        sys_, ds_cfg.grid_density, ds_cfg.n_rot, seed=seed, max_steps=ds_cfg.max_steps, ftol=ds_cfg.ftol
    )
    return sys_, minima


@cli.command("gen-dataset")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="INI config file.")
@click.option("--out", type=click.Path(dir_okay=False), help="Output dataset (JSON lines).")
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--print-config", is_flag=True, help="Print the effective configuration and exit.")
def gen_dataset(config_path, out, jobs, print_config):
    """Generate systems and enumerate their minima."""
    cfg = load_config(config_path)
    if print_config:
        return _print_config(cfg, ("scene", "dataset"))
    if out is None:
        raise click.UsageError("--out is required")
    cfg["scene"].validate()
    ds = cfg["dataset"]
    ds.validate()
    work = [(cfg["scene"], ds, ds.seed + i) for i in range(ds.n_systems)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            dataset = list(pool.map(_one_system, work))
    else:
        dataset = [_one_system(w) for w in work]
    serialize.write_dataset(out, dataset)
    counts = [len(m) for _, m in dataset]
    e_mins = [m.e_min for _, m in dataset]
    click.echo(
        f"systems: {len(dataset)}  minima/system: min {min(counts)} mean {np.mean(counts):.1f} max {max(counts)}  "
        f"e_min range: [{min(e_mins):.4f}, {max(e_mins):.4f}]"
    )


@cli.command()
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Final checkpoint (.npz).")
@click.option("--checkpoint-dir", type=click.Path(file_okay=False), help="Periodic checkpoints [default: <out>.ckpt/].")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), help="Per-step JSONL log [default: <out>.log.jsonl].")
@click.option("--resume", type=click.Path(dir_okay=False), help="Continue from a training checkpoint.")
@click.option("--print-config", is_flag=True)
def train(dataset, config_path, out, checkpoint_dir, log_path, resume, print_config):
    """Train the velocity field by flow matching."""
    cfg = load_config(config_path)
    if print_config:
        return _print_config(cfg, ("model", "train"))
    if out is None:
        raise click.UsageError("--out is required")
    data = serialize.read_dataset(dataset)
    out = Path(out)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else out.with_name(out.name + ".ckpt")
    log_path = Path(log_path) if log_path else out.with_name(out.name + ".log.jsonl")
    tcfg = cfg["train"]
    model, _ = flowmatch.train(data, tcfg, cfg["model"], out_dir=checkpoint_dir, resume=resume, log_path=log_path)
    final = checkpoint_dir / "final.npz"
    out.write_bytes(final.read_bytes())
    click.echo(f"wrote {out} ({tcfg.steps} steps)")


def _sample_config(cfg, meta, k_steps, guidance, e_rel_target, seed):
    s = cfg["sample"]
    rot_head = meta.get("train_config", {}).get("rot_head", s.rot_head)
    updates = {"rot_head": rot_head}
    if k_steps is not None:
        updates["K"] = k_steps
    if guidance is not None:
        updates["w"] = guidance
    if e_rel_target is not None:
        updates["e_rel_target"] = e_rel_target
    if seed is not None:
        updates["seed"] = seed
    out = dataclasses.replace(s, **updates)
    out.validate()
    return out


@cli.command()
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Candidate records (JSON lines).")
@click.option("--k-steps", type=int, help="Heun steps K.")
@click.option("--guidance", type=float, help="Guidance scale w.")
@click.option("--seeds", type=click.IntRange(min=1), help="Candidates per system N.")
@click.option("--e-rel-target", type=float, help="Energy condition at inference.")
@click.option("--seed", type=int, help="Base seed.")
@click.option("--verbose", is_flag=True, help="Include the per-step trace in each record.")
@click.option("--print-config", is_flag=True)
def sample(checkpoint, dataset, config_path, out, k_steps, guidance, seeds, e_rel_target, seed, verbose, print_config):
    """Generate candidate placements (no relaxation)."""
    cfg = load_config(config_path)
    if print_config:
        return _print_config(cfg, ("sample", "eval"))
    if out is None:
        raise click.UsageError("--out is required")
    model, _, meta = load_checkpoint(checkpoint)
    scfg = _sample_config(cfg, meta, k_steps, guidance, e_rel_target, seed)
    N = seeds if seeds is not None else cfg["eval"].N
    records = []
    for sys_, _ in serialize.read_dataset(dataset):
        field = sampler.GuidedField(model, scfg.e_rel_target, scfg.w, scfg.rot_head)
        x1 = pipeline.prior_draws(sys_, N, scfg.seed)
        trace = [] if verbose else None
        poses = sampler.integrate(field, [sys_] * N, x1, scfg.K, trace=trace)
        for i, p in enumerate(poses):
            steps = [step[i] for step in trace] if verbose else None
            records.append(serialize.candidate_record(sys_.system_id, i, scene.lift(sys_, p), steps))
    serialize.write_jsonl(out, records)
    click.echo(f"wrote {len(records)} candidates to {out}")


def _parse_list(text, kind):
    try:
        return tuple(kind(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise click.BadParameter(f"expected a comma-separated list, got {text!r}") from exc


@cli.command("eval")
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Trained checkpoint (not needed with --baseline).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Structured report (JSON).")
@click.option("--table", type=click.Path(dir_okay=False), help="Flat table (TSV) [default: <out> with .tsv].")
@click.option("--k-steps", type=int, help="Heun steps K.")
@click.option("--guidance", type=float, help="Guidance scale w.")
@click.option("--seeds", type=click.IntRange(min=1), help="Candidates per system N.")
@click.option("--k", "ks", help="Comma-separated k values for SR@k.")
@click.option("--tol", type=float, help="Success tolerance on E - E_min.")
@click.option("--e-rel-target", type=float)
@click.option("--seed", type=int, help="Base seed.")
@click.option("--grid", is_flag=True, help="Sweep the [grid] w_set x K_set.")
@click.option("--w-set", help="Override [grid] w_set, comma-separated.")
@click.option("--k-set", help="Override [grid] K_set, comma-separated.")
@click.option("--baseline", is_flag=True, help="Random-placement arm: relax prior draws directly.")
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--print-config", is_flag=True)
def eval_cmd(dataset, checkpoint, config_path, out, table, k_steps, guidance, seeds, ks, tol, e_rel_target, seed, grid, w_set, k_set, baseline, jobs, print_config):
    """Generate, relax, screen and score SR@k."""
    cfg = load_config(config_path)
    if print_config:
        return _print_config(cfg, ("sample", "eval", "grid"))
    if out is None:
        raise click.UsageError("--out is required")
    if checkpoint is None and not baseline:
        raise click.UsageError("--checkpoint is required unless --baseline is given")
    model, meta = None, {}
    if checkpoint is not None:
        model, _, meta = load_checkpoint(checkpoint)
    scfg = _sample_config(cfg, meta, k_steps, guidance, e_rel_target, seed)
    settings = cfg["eval"]
    updates = {"baseline": baseline}
    if seeds is not None:
        updates["N"] = seeds
    if ks is not None:
        updates["ks"] = _parse_list(ks, int)
    if tol is not None:
        updates["tol"] = tol
    settings = dataclasses.replace(settings, **updates)
    data = serialize.read_dataset(dataset)
    if any(len(m) == 0 for _, m in data):
        raise InvalidConfig("every evaluated system needs at least one minimum")

    table_path = Path(table) if table else Path(out).with_suffix(".tsv")
    if grid:
        g = cfg["grid"]
        ws = _parse_list(w_set, float) if w_set else g.w_set
        Ks = _parse_list(k_set, int) if k_set else g.K_set
        rows, reports = pipeline.grid_search(model, data, ws, Ks, scfg, settings, jobs=jobs)
        serialize.write_reports(out, reports)
    else:
        report = pipeline.evaluate(model, data, scfg, settings, jobs=jobs)
        rows = [pipeline.grid_row(report)]
        serialize.write_report(out, report)
    text = pipeline.format_table(rows)
    serialize.write_table(table_path, text)
    click.echo(text, nl=False)


# ------------------------------------------------------------------ entry


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="rigidflow", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INVALID
    except click.ClickException as exc:
        exc.show()
        return EXIT_INVALID
    except NonFinite as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    except (SchemaMismatch, OSError, json.JSONDecodeError, KeyError) as exc:
        click.echo(f"I/O error: {exc}", err=True)
        return EXIT_IO
    except (RigidFlowError, ValueError) as exc:
        click.echo(f"invalid input: {exc}", err=True)
        return EXIT_INVALID
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
