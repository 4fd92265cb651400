import json

import numpy as np
import pytest

from rigidflow import flowmatch as fm
from rigidflow import pipeline as pl
from rigidflow import serialize
from rigidflow.cli import EXIT_INVALID, EXIT_IO, format_config, load_config, main
from rigidflow.fieldnet import FieldConfig, load_checkpoint
from rigidflow.sampler import SampleConfig

CONFIG = """
[scene]
box = 7.5, 7.5
cells = 3, 3

[dataset]
n_systems = 2
seed = 40
grid_density = 4
n_rot = 1

[model]
hidden = 8
n_layers = 2
n_rbf = 6
film_dim = 6
n_freq = 4
r_cut = 4.5

[train]
steps = 4
batch_size = 2
checkpoint_every = 2

[eval]
N = 4
ks = 1, 2, 4
relax_steps = 30

[grid]
w_set = 0, 3
K_set = 1, 2
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.ini").write_text(CONFIG)
    assert main(["gen-dataset", "--config", str(d / "run.ini"), "--out", str(d / "ds.jsonl")]) == 0
    assert main(["train", str(d / "ds.jsonl"), "--config", str(d / "run.ini"), "--out", str(d / "model.npz")]) == 0
    return d


def run_main(args, capsys):
    code = main(args)
    return code, capsys.readouterr()


def test_print_config_roundtrip(tmp_path, capsys):
    code, out = run_main(["gen-dataset", "--print-config"], capsys)
    assert code == 0 and "[scene]" in out.out and "grid_density = 5" in out.out
    path = tmp_path / "all.ini"
    path.write_text(format_config(load_config()))
    assert load_config(path) == load_config()


@pytest.mark.parametrize(
    "text",
    ["[train]\nstepz = 3\n", "[nope]\na = 1\n", "[train]\nsteps = many\n", "[train]\nsteps = 1.5\n"],
)
def test_bad_config_rejected(tmp_path, capsys, text):
    (tmp_path / "bad.ini").write_text(text)
    code, out = run_main(["gen-dataset", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "x")], capsys)
    assert code == EXIT_INVALID
    assert not (tmp_path / "x").exists()


def test_zero_systems_rejected(tmp_path, capsys):
    (tmp_path / "zero.ini").write_text("[dataset]\nn_systems = 0\n")
    code, out = run_main(["gen-dataset", "--config", str(tmp_path / "zero.ini"), "--out", str(tmp_path / "ds.jsonl")], capsys)
    assert code == EXIT_INVALID and "n_systems" in out.err
    assert not (tmp_path / "ds.jsonl").exists()


def test_dataset_deterministic_and_lossless(work, tmp_path):
    assert main(["gen-dataset", "--config", str(work / "run.ini"), "--out", str(tmp_path / "again.jsonl"), "--jobs", "2"]) == 0
    assert (tmp_path / "again.jsonl").read_bytes() == (work / "ds.jsonl").read_bytes()
    data = serialize.read_dataset(work / "ds.jsonl")
    serialize.write_dataset(tmp_path / "rewritten.jsonl", data)
    assert (tmp_path / "rewritten.jsonl").read_bytes() == (work / "ds.jsonl").read_bytes()
    first = json.loads((work / "ds.jsonl").read_text().splitlines()[0])
    assert first["schema"] == serialize.DATASET_SCHEMA
    assert list(first) == ["schema", "system", "minima"]


def test_train_outputs(work):
    rows = (work / "model.npz.log.jsonl").read_text().splitlines()
    assert len(rows) == 4
    assert (work / "model.npz.ckpt" / "step0000002.npz").exists()
    _, _, meta = load_checkpoint(work / "model.npz")
    assert meta["step"] == 4


def test_train_zero_steps_is_init(work, tmp_path):
    ini = tmp_path / "zero.ini"
    ini.write_text(CONFIG.replace("steps = 4", "steps = 0"))
    assert main(["train", str(work / "ds.jsonl"), "--config", str(ini), "--out", str(tmp_path / "m.npz")]) == 0
    model, _, _ = load_checkpoint(tmp_path / "m.npz")
    ref = fm.init_model(load_config(ini)["model"], 0)
    for (name, a), (_, b) in zip(model.state_dict().items(), ref.state_dict().items()):
        assert (a == b).all(), name


def test_train_resume_matches(work, tmp_path):
    assert main(
        ["train", str(work / "ds.jsonl"), "--config", str(work / "run.ini"), "--out", str(tmp_path / "r.npz"),
         "--resume", str(work / "model.npz.ckpt" / "step0000002.npz")]
    ) == 0
    a, _, _ = load_checkpoint(work / "model.npz")
    b, _, _ = load_checkpoint(tmp_path / "r.npz")
    for (name, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert (x == y).all(), name


def test_sample(work, tmp_path):
    out = tmp_path / "cand.jsonl"
    assert main(["sample", str(work / "model.npz"), str(work / "ds.jsonl"), "--out", str(out), "--seeds", "3", "--k-steps", "2", "--verbose"]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 6 and [r["seed_index"] for r in recs[:3]] == [0, 1, 2]
    assert len(recs[0]["trace"]) == 2


def test_eval_matches_library(work, tmp_path):
    out = tmp_path / "rep.json"
    assert main(["eval", str(work / "ds.jsonl"), "--checkpoint", str(work / "model.npz"), "--config", str(work / "run.ini"),
                 "--out", str(out), "--k-steps", "2", "--guidance", "0"]) == 0
    model, _, _ = load_checkpoint(work / "model.npz")
    settings = pl.EvalSettings(N=4, ks=(1, 2, 4), relax_steps=30)
    direct = pl.evaluate(model, serialize.read_dataset(work / "ds.jsonl"), SampleConfig(K=2, w=0.0), settings)
    serialize.write_report(tmp_path / "direct.json", direct)
    assert out.read_bytes() == (tmp_path / "direct.json").read_bytes()
    assert (tmp_path / "rep.tsv").read_text().splitlines()[0].startswith("K\tw\tSR@1")


def test_eval_grid_and_jobs(work, tmp_path):
    paths = []
    for jobs in ("1", "2"):
        out = tmp_path / f"grid{jobs}.json"
        assert main(["eval", str(work / "ds.jsonl"), "--checkpoint", str(work / "model.npz"), "--config", str(work / "run.ini"),
                     "--out", str(out), "--grid", "--jobs", jobs]) == 0
        paths.append(out)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    table = (tmp_path / "grid1.tsv").read_text().splitlines()
    assert len(table) == 1 + 2 * 2
    assert len(json.loads(paths[0].read_text())["cells"]) == 4


def test_eval_monotone_columns(work, tmp_path):
    out = tmp_path / "m.json"
    assert main(["eval", str(work / "ds.jsonl"), "--checkpoint", str(work / "model.npz"), "--out", str(out),
                 "--seeds", "10", "--k", "1,2,5,10", "--k-steps", "1", "--tol", "0.2"]) == 0
    rep = json.loads(out.read_text())
    sr = [rep["sr"][k] for k in ("1", "2", "5", "10")]
    anom = [rep["anomaly"][k] for k in ("1", "2", "5", "10")]
    assert sr == sorted(sr) and anom == sorted(anom, reverse=True)


def test_eval_baseline_without_checkpoint(work, tmp_path):
    out = tmp_path / "b.json"
    assert main(["eval", str(work / "ds.jsonl"), "--baseline", "--config", str(work / "run.ini"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["config"]["baseline"] is True


def test_schema_mismatch_exit_code(work, tmp_path, capsys):
    bad = tmp_path / "bad.npz"
    np.savez(bad, schema=np.array("other-format/7"))
    code, out = run_main(["eval", str(work / "ds.jsonl"), "--checkpoint", str(bad), "--out", str(tmp_path / "r.json")], capsys)
    assert code == EXIT_IO
    assert "other-format/7" in out.err and "rigidflow-checkpoint/1" in out.err


def test_missing_dataset_is_io_error(tmp_path, capsys):
    code, _ = run_main(["train", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "m.npz")], capsys)
    assert code == EXIT_IO


def test_unknown_flag_is_usage_error(capsys):
    code, _ = run_main(["eval", "--no-such-flag"], capsys)
    assert code == EXIT_INVALID
