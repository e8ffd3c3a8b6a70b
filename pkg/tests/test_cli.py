import json
import os

import numpy as np
import pytest

from skysplat.cli import main
from skysplat.io.images import read_image


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_validate_toy(toy_dataset, capsys):
    code, out, _ = run(["validate", toy_dataset], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["aerial"] == 12 and rep["street"] == 12


def test_usage_errors(capsys):
    assert run(["frobnicate"], capsys)[0] == 2
    assert run([], capsys)[0] == 2
    code, _, err = run(["train"], capsys)
    assert code == 2 and "usage" in err


def test_domain_error_exit_code(tmp_path, toy_dataset, capsys):
    doc = json.load(open(toy_dataset))
    del doc["frames"][0]["class"]
    bad = os.path.join(os.path.dirname(toy_dataset), "no_class.json")
    with open(bad, "w") as fh:
        json.dump(doc, fh)
    code, _, err = run(["validate", bad], capsys)
    assert code == 1 and "ClassTagMissing" in err


def test_missing_model_is_usage_error(tmp_path, toy_dataset, capsys):
    assert run(["eval", tmp_path, toy_dataset], capsys)[0] == 2


@pytest.fixture(scope="module")
def trained_twice(toy_dataset, tmp_path_factory):
    outs = []
    for rep in range(2):
        d = tmp_path_factory.mktemp(f"run{rep}")
        assert main(["train", toy_dataset, "--desk", "0.001", "--seed", "5", "--out", str(d)]) == 0
        outs.append(d)
    return outs


def test_train_outputs(trained_twice):
    d = trained_twice[0]
    for name in ("anchors.ply", "bank.npz", "checkpoint.npz", "train_log.jsonl", "config.json"):
        assert (d / name).exists(), name
    log = [json.loads(line) for line in open(d / "train_log.jsonl")]
    assert log[-1]["iter"] == 99 and any(e.get("event") == "stage_transition" for e in log)
    assert json.load(open(d / "config.json"))["seed"] == 5


def test_train_render_eval_deterministic(trained_twice, toy_dataset, capsys):
    metrics = []
    for d in trained_twice:
        assert run(["render", d, toy_dataset, "--split", "all"], capsys)[0] == 0
        code, out, _ = run(["eval", d, toy_dataset], capsys)
        assert code == 0
        metrics.append(json.loads(out))
    assert metrics[0] == metrics[1]
    assert metrics[0]["per_image"] and np.isfinite(metrics[0]["per_image"][0]["psnr"])
    a = read_image(trained_twice[0] / "renders" / "aerial_03.png")
    b = read_image(trained_twice[1] / "renders" / "aerial_03.png")
    assert np.array_equal(a, b)
    ca = np.load(trained_twice[0] / "checkpoint.npz")
    cb = np.load(trained_twice[1] / "checkpoint.npz")
    assert all(np.array_equal(ca[k], cb[k]) for k in ca.files)


def test_resume_from_checkpoint(trained_twice, toy_dataset, tmp_path, capsys):
    half = tmp_path / "half"
    assert run(["train", toy_dataset, "--desk", "0.001", "--seed", "5", "--until", "60", "--out", half], capsys)[0] == 0
    code, _, _ = run(["train", toy_dataset, "--desk", "0.001", "--seed", "5", "--resume", half / "checkpoint.npz",
                      "--out", half], capsys)
    assert code == 0
    ca = np.load(trained_twice[0] / "checkpoint.npz")
    cb = np.load(half / "checkpoint.npz")
    assert all(np.array_equal(ca[k], cb[k]) for k in ca.files if k != "__meta__")


def test_bake_and_render_baked(trained_twice, toy_dataset, capsys):
    d = trained_twice[0]
    code, out, _ = run(["bake", d], capsys)
    assert code == 0 and json.loads(out)["gaussians"] > 0
    code, _, _ = run(["render", d, toy_dataset, "--baked", d / "baked.ply", "--out", d / "baked_renders"], capsys)
    assert code == 0 and (d / "baked_renders" / "aerial_00.png").exists()


def test_mesh_command(trained_twice, toy_dataset, capsys):
    code, out, _ = run(["mesh", trained_twice[0], toy_dataset, "--resolution", "32"], capsys)
    assert code == 0 and json.loads(out)["triangles"] > 0


def test_chunk_pipeline(toy_dataset, tmp_path, capsys):
    code, out, _ = run(["partition", toy_dataset, "--grid", "2", "1", "--out", tmp_path / "plan"], capsys)
    assert code == 0 and len(json.loads(out)["chunks"]) == 2
    plan = tmp_path / "plan" / "plan.json"
    code, out, _ = run(["train-chunks", plan, toy_dataset, "--desk", "0.0005", "--out", tmp_path / "chunks"], capsys)
    assert code == 0 and all(e["ok"] for e in json.loads(out))
    code, out, _ = run(["merge", plan, tmp_path / "chunks"], capsys)
    assert code == 0 and json.loads(out)["gaussians"] > 0
