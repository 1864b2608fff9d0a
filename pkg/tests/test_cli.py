import json
import os

import pytest

from memsg import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "attn-dump" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["bogus"], [], ["train"], ["synth", "--out", "x", "--seed", "abc"]])
def test_usage_errors_exit_one(argv, capsys):
    assert run(*argv) == 1
    assert "usage" in capsys.readouterr().err


def test_data_error_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run("eval", "--pred", bad, "--gt", bad) == 2
    assert "line 1" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 7, "stride": 3, "lr": 0.01}}))
    args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o", "--config", str(cfg),
                                          "--stride", "4", "--no-toi"])
    tc = cli.resolve_train_config(args, cli._load_config(str(cfg)))
    assert (tc.epochs, tc.stride, tc.lr, tc.use_toi, tc.use_augmentation) == (7, 4, 0.01, False, True)


def test_smoke_pipeline(tmp_path, capsys):
    bench = tmp_path / "bench"
    assert run("synth", "--out", bench, "--seed", 3, "--train", 2, "--val", 1, "--test", 1) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 2, "hidden": 16}}))
    vis, mem = tmp_path / "vis.ckpt", tmp_path / "mem.ckpt"
    assert run("train", "--data", bench, "--config", cfg, "--variant", "visual_only", "--out", vis) == 0
    assert run("train", "--data", bench, "--config", cfg, "--init-from", vis, "--out", mem, "--seed", 1) == 0
    pred = tmp_path / "pred.jsonl"
    assert run("infer", "--ckpt", mem, "--data", bench, "--out", pred) == 0
    capsys.readouterr()
    assert run("eval", "--pred", pred, "--gt", bench) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["macro_f1"] <= 1.0 and report["gt_consistency"] is not None
    attn = tmp_path / "attn.json"
    png = tmp_path / "attn.png"
    assert run("attn-dump", "--ckpt", mem, "--data", bench, "--out", attn, "--plot", png) == 0
    dump = json.loads(attn.read_text())
    rec = dump["records"][12]
    assert rec["t"] == 12
    for layer in rec["layers"]:
        assert [e["toi_id"] for e in layer] == [12 - e["t"] for e in layer]
        assert abs(sum(e["weight"] for e in layer) - 1) <= 1e-12
    assert png.stat().st_size > 0
    for artifact in (vis, mem, pred, attn, png):
        man = json.loads(open(f"{artifact}.manifest.json").read())
        assert man["artifact"]["sha256"] and man["tool_version"]
    man = json.loads(open(f"{mem}.manifest.json").read())
    assert man["config"]["seed"] == 1 and man["config"]["init_from"] == str(vis)
    assert os.path.abspath(vis) in man["inputs"]


def test_repeat_runs_are_hash_identical(tmp_path):
    bench = tmp_path / "bench"
    run("synth", "--out", bench, "--seed", 5, "--train", 1, "--val", 1, "--test", 1)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "hidden": 8, "variant": "visual_only"}}))
    outs = []
    for name in ("a.ckpt", "b.ckpt"):
        assert run("train", "--data", bench, "--config", cfg, "--out", tmp_path / name) == 0
        outs.append(json.loads(open(tmp_path / f"{name}.manifest.json").read())["artifact"]["sha256"])
    assert outs[0] == outs[1]


def test_ablate_command(tmp_path, capsys):
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps({
        "seeds": [0], "counts": {"train": 1, "val": 1, "test": 1},
        "techniques": ["full", "-toi"], "modes": ["short"], "models": ["visual_only", "memory"],
        "train": {"epochs": 1, "hidden": 8},
    }))
    out = tmp_path / "out"
    assert run("ablate", "--config", cfg, "--out", out) == 0
    data = json.loads((out / "results.json").read_text())
    assert len(data["rows"]) == 4
    assert (out / "results.csv").read_text().startswith("technique,mode,model")
    assert (out / "ablation.png").stat().st_size > 0
    assert "memory" in capsys.readouterr().out
