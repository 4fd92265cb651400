"""Shared fixtures: acceptance verdict collection and the desk-scale experiment.

The experiment (dataset generation, training, evaluation) takes ~25 minutes on
one CPU core. Its outputs are cached under ``.acceptance_cache/`` keyed by a
hash of the configuration; set ``RIGIDFLOW_FRESH=1`` to rebuild from scratch.
"""

import dataclasses
import hashlib
import json
import os
import pickle
import time
from pathlib import Path

import pytest

VERDICTS = []


def record_verdict(line: str) -> None:
    print(line)
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


# ------------------------------------------------------------ experiment


@dataclasses.dataclass
class Experiment:
    model: object
    test_set: list
    reports: dict  # name -> EvalReport
    timings: dict  # seconds per phase
    config: dict


def experiment_config() -> dict:
    from rigidflow.cli import DatasetConfig
    from rigidflow.fieldnet import FieldConfig
    from rigidflow.flowmatch import TrainConfig
    from rigidflow.pipeline import EvalSettings
    from rigidflow.scene import SceneConfig

    return {
        "scene": SceneConfig(),
        "train_data": DatasetConfig(n_systems=300, seed=0),
        "test_data": DatasetConfig(n_systems=50, seed=10_000),
        "model": FieldConfig(hidden=32),
        "train": TrainConfig(steps=4000, lr=2e-3, seed=0),
        "eval": EvalSettings(N=10),
        "cells": [(5, 0.0), (30, 0.0), (5, 3.0), (5, 5.0), (5, 7.0)],
    }


def _config_key(cfg: dict) -> str:
    text = json.dumps({k: dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v for k, v in cfg.items()}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _build(cfg: dict) -> Experiment:
    from rigidflow import flowmatch, pipeline
    from rigidflow.cli import _one_system
    from rigidflow.sampler import SampleConfig

    timings = {}
    t0 = time.perf_counter()
    train_set = [_one_system((cfg["scene"], cfg["train_data"], cfg["train_data"].seed + i)) for i in range(cfg["train_data"].n_systems)]
    test_set = [_one_system((cfg["scene"], cfg["test_data"], cfg["test_data"].seed + i)) for i in range(cfg["test_data"].n_systems)]
    timings["datasets"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model, _ = flowmatch.train(train_set, cfg["train"], cfg["model"])
    timings["train"] = time.perf_counter() - t0

    reports = {}
    t0 = time.perf_counter()
    reports["baseline"] = pipeline.evaluate(None, test_set, SampleConfig(), dataclasses.replace(cfg["eval"], baseline=True))
    timings["eval:baseline"] = time.perf_counter() - t0
    for K, w in cfg["cells"]:
        t0 = time.perf_counter()
        reports[(K, w)] = pipeline.evaluate(model, test_set, SampleConfig(K=K, w=w), cfg["eval"])
        timings[f"eval:K={K},w={w:g}"] = time.perf_counter() - t0
    return Experiment(model, test_set, reports, timings, cfg)


@pytest.fixture(scope="session")
def experiment():
    cfg = experiment_config()
    cache = Path(__file__).resolve().parent.parent / ".acceptance_cache" / f"experiment-{_config_key(cfg)}.pkl"
    if cache.exists() and os.environ.get("RIGIDFLOW_FRESH") != "1":
        with open(cache, "rb") as fh:
            return pickle.load(fh)
    exp = _build(cfg)
    cache.parent.mkdir(parents=True, exist_ok=True)
    with open(cache, "wb") as fh:
        pickle.dump(exp, fh)
    return exp
