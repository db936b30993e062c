import csv
import json
from pathlib import Path

import numpy as np
import pytest

from vlfuse import autodiff as ad
from vlfuse import cli, harness
from vlfuse.features import SceneConfig, generate_synthetic_scene, read_sample, write_sample
from vlfuse.inheritable import read_pgm
from vlfuse.model import ModelParams, TrainConfig, model_forward
from vlfuse.projector import SRProjParams
from vlfuse.training import load_checkpoint

SMALL_TRAIN = {"d_model": 16, "n_layers": 2, "hidden": 8, "epochs": 3, "shift_epoch": 2,
               "batch_size": 4}


def _tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    harness.cmd_gen(harness.RunConfig(n_train=24, n_eval=24, data_seed=5), out)
    return out


@pytest.fixture(scope="module")
def small_run(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r"
    rc = harness.RunConfig(dataset=str(small_data), train=dict(SMALL_TRAIN))
    harness.cmd_train(rc, out)
    return out


def test_gen_default_counts_and_reproducible(tmp_path):
    a = harness.cmd_gen(harness.RunConfig(), tmp_path / "a")
    assert (len(a["train"]), len(a["eval"])) == (256, 1024)
    harness.cmd_gen(harness.RunConfig(), tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_gen_refuses_nonempty_dir(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "junk").write_text("x")
    with pytest.raises(FileExistsError):
        harness.cmd_gen(harness.RunConfig(n_train=1, n_eval=1), tmp_path / "d")
    harness.cmd_gen(harness.RunConfig(n_train=1, n_eval=1), tmp_path / "d", force=True)
    assert not (tmp_path / "d" / "junk").exists()


def test_run_seed_env(tmp_path, monkeypatch):
    monkeypatch.setenv("RUN_SEED", "77")
    index = harness.cmd_gen(harness.RunConfig(n_train=1, n_eval=1), tmp_path / "d")
    assert index["seed"] == 77
    gen = json.loads((tmp_path / "d" / "gen_config.json").read_text())
    assert gen["data_seed"] == 77
    assert harness.resolve_train_config({}, index).seed == 77


def test_single_relation_task_is_trivial(tmp_path):
    rc = harness.RunConfig(n_train=16, n_eval=32, generator={"n_relations": 1})
    index = harness.cmd_gen(rc, tmp_path / "d")
    rc.dataset = str(tmp_path / "d")
    rc.train = dict(SMALL_TRAIN, epochs=1, shift_epoch=1)
    _, records = harness.cmd_train(rc, tmp_path / "run")
    answers = {tuple(read_sample(tmp_path / "d" / "samples", sid).answer)
               for sid in index["train"] + index["eval"]}
    assert len(answers) == 1
    assert records[-1]["eval_accuracy"] == 1.0


def test_train_outputs(small_run):
    lines = (small_run / "metrics.jsonl").read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    assert [r["epoch"] for r in recs] == [1, 2, 3]
    assert set(recs[0]) == set(harness.METRIC_FIELDS)
    assert recs[0]["m_sparsity"] == 0 and all(r["m_sparsity"] > 0 for r in recs[1:])
    assert recs[-1]["train_loss"] < recs[0]["train_loss"]
    ckpts = sorted(p.name for p in (small_run / "checkpoints").iterdir())
    assert ckpts == [f"epoch_{e:03d}.ckpt" for e in range(4)]
    cfg = json.loads((small_run / "config.json").read_text())
    assert cfg["train"]["answer_vocab"] == SceneConfig().answer_vocab


def test_rerun_from_stored_config(small_run, tmp_path):
    rc = harness.RunConfig.load(small_run / "config.json")
    harness.cmd_train(rc, tmp_path / "again")
    assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == \
        (small_run / "metrics.jsonl").read_bytes()


def test_eval_outputs(small_run, small_data, tmp_path):
    ck = small_run / "checkpoints" / "epoch_003.ckpt"
    a = harness.cmd_eval(ck, small_data, out_path=tmp_path / "a.json")
    harness.cmd_eval(ck, small_data, out_path=tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert a["active"] is True and a["epoch"] == 3
    early = harness.cmd_eval(small_run / "checkpoints" / "epoch_001.ckpt", small_data)
    assert early["active"] is False


def test_eval_replays_shift_flag(small_run, small_data):
    _, _, ev = harness.load_dataset(small_data)
    for epoch, expect_change in ((1, False), (3, True)):
        params, cfg, manifest = load_checkpoint(small_run / "checkpoints" / f"epoch_{epoch:03d}.ckpt")
        with ad.record(False):
            replay, _ = model_forward(ev[0], params, cfg, active=manifest["shift_passed"])
            forced, _ = model_forward(ev[0], params, cfg, active=False)
        delta = np.abs(replay.data - forced.data).max()
        assert (delta > 0) == expect_change


def test_epoch0_near_chance(small_run, small_data):
    # 24 samples: a wide binomial band
    acc = harness.cmd_eval(small_run / "checkpoints" / "epoch_000.ckpt", small_data)["accuracy"]
    assert acc <= 0.25 + 3 * np.sqrt(0.25 * 0.75 / 24)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_ablate_small_grid(small_data, tmp_path):
    rc = harness.RunConfig(dataset=str(small_data), train=dict(SMALL_TRAIN, epochs=2),
                           grid={"delta": [0.3, 0.1], "decay": [0.9, 0.8]})
    harness.cmd_ablate(rc, tmp_path / "ab", controls=True)
    rows = _read_csv(tmp_path / "ab" / "summary.csv")
    assert list(rows[0]) == harness.ABLATION_COLUMNS
    assert [(r["delta"], r["decay"]) for r in rows] == \
        [("0.1", "0.8"), ("0.1", "0.9"), ("0.3", "0.8"), ("0.3", "0.9")]
    assert all(r["status"] == "ok" for r in rows)
    ctrl = {r["label"]: r for r in _read_csv(tmp_path / "ab" / "controls.csv")}
    for key in ("eval_accuracy", "train_accuracy", "final_train_loss"):
        assert ctrl["delta0"][key] == ctrl["baseline"][key]
    assert json.loads((tmp_path / "ab" / "config.json").read_text())["grid"]["delta"] == [0.3, 0.1]


def test_ablate_records_failures(small_data, tmp_path):
    rc = harness.RunConfig(dataset=str(small_data), train=dict(SMALL_TRAIN, epochs=1, shift_epoch=1),
                           grid={"fusion": ["average", "max"]})
    out = harness.cmd_ablate(rc, tmp_path / "ab")
    status = {r["fusion"]: r["status"] for r in out["summary"]}
    assert status["average"] == "ok" and status["max"].startswith("error")


def test_ablate_parallel_matches_serial(small_data, tmp_path):
    rc = harness.RunConfig(dataset=str(small_data), train=dict(SMALL_TRAIN, epochs=1, shift_epoch=1),
                           grid={"delta": [0.1, 0.2]})
    serial = harness.cmd_ablate(rc, tmp_path / "s")["summary"]
    parallel = harness.cmd_ablate(rc, tmp_path / "p", jobs=2)["summary"]
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time_s"} for r in rows]
    assert strip(serial) == strip(parallel)


def test_export_attn(small_run, small_data, tmp_path):
    s = harness.cmd_export_attn(small_run / "checkpoints" / "epoch_003.ckpt", small_data,
                                "eval-00000", tmp_path / "x")
    files = sorted(p.name for p in (tmp_path / "x").iterdir())
    assert sum(f.endswith(".csv") and f.startswith("mask") for f in files) == 2
    assert sum(f.endswith(".pgm") for f in files) == 2
    for layer, lo in enumerate(s["layer_min"], start=1):
        assert lo >= 0.85 ** layer - 1e-6
    assert len(np.unique(read_pgm(tmp_path / "x" / "mask_layer2.pgm"))) > 1


def test_export_attn_zero_delta_uniform(small_data, tmp_path):
    rc = harness.RunConfig(dataset=str(small_data),
                           train=dict(SMALL_TRAIN, epochs=1, shift_epoch=1, delta=0.0))
    harness.cmd_train(rc, tmp_path / "r")
    harness.cmd_export_attn(tmp_path / "r" / "checkpoints" / "epoch_001.ckpt", small_data,
                            "eval-00001", tmp_path / "x")
    for layer in (1, 2):
        assert (read_pgm(tmp_path / "x" / f"mask_layer{layer}.pgm") == 255).all()


def test_export_saliency_files(small_run, small_data, tmp_path):
    s = harness.cmd_export_saliency(small_run / "checkpoints" / "epoch_000.ckpt", small_data,
                                    "eval-00002", tmp_path / "x", top_k=2)
    assert set(s["layers"]) == {"12", "24"}
    for k in ("12", "24"):
        assert len(s["layers"][k]["saliency"]) == 16
        assert len(_read_csv(tmp_path / "x" / f"saliency_layer{k}.csv")) == 16
    # untrained checkpoint: all weights are exactly one
    assert [m["lam"] for m in s["hidden_maps"]] == [1.0] * len(s["hidden_maps"])
    for m in s["hidden_maps"]:
        assert "_lam1.0000.csv" in m["file"]
        assert len(_read_csv(tmp_path / "x" / m["file"])) == 16


def test_saliency_without_relation_signal(tmp_path):
    # with one projector shared by both layers, only the noise separates the maps
    scene = SceneConfig(relation_amplitude=0.0)
    sample = generate_synthetic_scene(3, scene)
    cfg = TrainConfig()
    params = ModelParams.init(cfg)
    rng = np.random.default_rng(0)
    p = params.projectors[24]
    p.W2.assign_(rng.standard_normal(p.W2.shape))
    params.projectors[12] = SRProjParams(p.W1, p.lam, p.W2, 12)
    s = harness.export_saliency(params, sample, tmp_path)
    a, b = (np.array(s["layers"][k]["saliency"]) for k in ("12", "24"))
    assert a @ b / np.linalg.norm(a) / np.linalg.norm(b) >= 0.99


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"train": dict(SMALL_TRAIN, epochs=1, shift_epoch=1)}))
    assert cli.main(["gen", "--out", str(tmp_path / "d"), "--n-train", "8", "--n-eval", "8"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "r"), "--lr", "0.3"]) == 0
    stored = json.loads((tmp_path / "r" / "config.json").read_text())
    assert stored["train"]["lr"] == 0.3 and stored["train"]["d_model"] == 16
    ck = str(tmp_path / "r" / "checkpoints" / "epoch_001.ckpt")
    assert cli.main(["eval", "--checkpoint", ck, "--data", str(tmp_path / "d")]) == 0
    assert cli.main(["ablate", "--config", str(cfg), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "ab"), "--grid-delta", "0.1,0.2",
                     "--grid-fusion", "average,weighted-average:0.9:0.1"]) == 0
    rows = _read_csv(tmp_path / "ab" / "summary.csv")
    assert len(rows) == 4 and all(r["status"] == "ok" for r in rows)
    assert {r["fusion"] for r in rows} == {"average", "weighted-average:0.9,0.1"}
    for cmd in ("export-attn", "export-saliency"):
        assert cli.main([cmd, "--checkpoint", ck, "--data", str(tmp_path / "d"),
                         "--sample", "eval-00000", "--out", str(tmp_path / cmd)]) == 0
    out = capsys.readouterr().out
    assert "4 grid points, 0 failed" in out


def test_constructed_sample_roundtrip(tmp_path):
    s = generate_synthetic_scene(1)
    write_sample(s, tmp_path, "one")
    back = read_sample(tmp_path, "one")
    assert back.answer == s.answer and back.relation == tuple(s.relation)
