import json
import os

import pytest

from rdasteal.cli import main
from rdasteal.encoders import RandomFeatureEncoder, TrainableEncoder, default_architecture, save_checkpoint

SMALL = ["--surrogate-size", "40", "--surrogate-channels", "4,8", "--probe-epochs", "2", "--batch-size", "20"]


@pytest.fixture(scope="module")
def target_ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("t")
    enc = TrainableEncoder(default_architecture(channels=(4, 8, 8, 8), dim=16), seed=0, dtype="float32")
    path = d / "target.ckpt"
    save_checkpoint(enc, path)
    return str(path)


def manifest(d):
    with open(os.path.join(d, "manifest.json")) as f:
        return json.load(f)


def test_steal_rda_ledger_and_replay(tmp_path, target_ckpt, capsys):
    out = str(tmp_path / "run")
    rc = main(["steal", "--method", "rda", "--target", target_ckpt, "--out", out, "--epochs", "2",
               "--n-proto-patches", "3", "--precision", "float64", "--no-eval"] + SMALL)
    assert rc == 0
    text = capsys.readouterr().out
    assert "epoch=1 loss=" in text and "queries=120" in text
    man = manifest(out)
    assert man["ledger"]["prototype_generation"] == 120 and man["ledger"]["training"] == 0
    assert set(man["versions"]) >= {"rdasteal", "numpy", "torch", "python"}
    assert man["seed"] == 0 and man["config"]["n_proto_patches"] == 3
    assert any(n.startswith("surrogate-") and n.endswith(".ckpt") for n in os.listdir(out))
    assert main(["replay", out]) == 0
    assert "identical=yes" in capsys.readouterr().out


def test_steal_writes_once(tmp_path, target_ckpt):
    out = str(tmp_path / "run")
    args = ["steal", "--method", "conventional", "--target", target_ckpt, "--out", out, "--epochs", "1",
            "--no-eval"] + SMALL
    assert main(args) == 0
    assert main(args) == 2


def test_unknown_method_exits_2_with_usage(tmp_path, target_ckpt, capsys):
    with pytest.raises(SystemExit) as e:
        main(["steal", "--method", "bogus", "--target", target_ckpt, "--out", str(tmp_path / "x")])
    assert e.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_exit_codes(tmp_path, target_ckpt):
    assert main(["steal", "--method", "rda", "--target", str(tmp_path / "missing.ckpt"),
                 "--out", str(tmp_path / "a")]) == 3
    bad = tmp_path / "bad.toml"
    bad.write_text("tau = -1\n")
    assert main(["steal", "--method", "rda", "--target", target_ckpt, "--config", str(bad),
                 "--out", str(tmp_path / "b")]) == 2
    assert main(["steal", "--method", "rda", "--target", target_ckpt, "--defense", "blur:r=1",
                 "--out", str(tmp_path / "c")]) == 2
    # a learning rate that overflows the surrogate parameters aborts numerically
    assert main(["steal", "--method", "conventional", "--target", target_ckpt, "--lr", "1e300", "--epochs", "3",
                 "--no-eval", "--out", str(tmp_path / "d")] + SMALL) == 4


def test_config_file_and_ordered_defenses(tmp_path, target_ckpt):
    cfg = tmp_path / "c.toml"
    cfg.write_text("epochs = 1\nn_proto_patches = 2\n")
    out = str(tmp_path / "run")
    assert main(["build-bank", "--target", target_ckpt, "--config", str(cfg), "--defense", "round:precision=2",
                 "--defense", "noise:sigma=0.1", "--out", out] + SMALL) == 0
    man = manifest(out)
    assert [d["kind"] for d in man["config"]["defenses"]] == ["round", "noise"]
    assert man["ledger"]["prototype_generation"] == 80
    bank = [n for n in os.listdir(out) if n.endswith(".rdab")][0]
    out2 = str(tmp_path / "s")
    assert main(["steal", "--method", "rda", "--target", target_ckpt, "--config", str(cfg), "--bank",
                 os.path.join(out, bank), "--out", out2, "--no-eval"] + SMALL) == 2  # defended vs plain target
    assert main(["steal", "--method", "rda", "--target", target_ckpt, "--config", str(cfg), "--bank",
                 os.path.join(out, bank), "--defense", "round:precision=2", "--defense", "noise:sigma=0.1",
                 "--out", out2, "--no-eval"] + SMALL) == 0
    assert manifest(out2)["ledger"]["prototype_generation"] == 0


def test_compare_report_and_sweep(tmp_path, target_ckpt, capsys):
    cmp_dir, sw_dir, rep_dir = (str(tmp_path / n) for n in ("cmp", "sw", "rep"))
    assert main(["compare", "--target", target_ckpt, "--methods", "rda,conventional", "--seeds", "0",
                 "--epochs", "1", "--n-proto-patches", "2", "--out", cmp_dir] + SMALL) == 0
    assert {"reports.csv", "reports.json", "loss_curves.png", "sa_vs_queries.png"} <= set(os.listdir(cmp_dir))
    assert main(["defend-sweep", "--target", target_ckpt, "--kind", "topk", "--values", "4,16",
                 "--out", sw_dir] + SMALL) == 0
    assert "sweep_topk.png" in os.listdir(sw_dir)
    capsys.readouterr()
    assert main(["report", cmp_dir, sw_dir, "--out", rep_dir]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].split("\t") == ["attack", "downstream", "sa", "ta", "ratio", "queries", "epochs",
                                                "seed"]
    assert {"reports.csv", "reports.json", "loss_curves.png", "sweep_topk.png"} <= set(os.listdir(rep_dir))
    assert main(["report", str(tmp_path / "nothing"), "--out", str(tmp_path / "r2")]) == 3


def test_eval_and_watermark(tmp_path, target_ckpt, capsys):
    assert main(["eval", "--encoder", target_ckpt, "--probe-epochs", "1", "--export-embeddings",
                 str(tmp_path / "emb")]) == 0
    out = capsys.readouterr().out
    assert "\tselect\tknn\t" in out
    assert "embeddings-shapes.csv" in os.listdir(tmp_path / "emb")
    wm = str(tmp_path / "wm")
    assert main(["watermark", "--target", target_ckpt, "--steps", "5", "--images", "100", "--out", wm]) == 0
    man = manifest(wm)
    assert 0.0 <= man["result"]["target_wr"] <= 1.0
    assert any(n.startswith("target-wm-") for n in os.listdir(wm))


def test_pretrain_target(tmp_path, capsys):
    out = str(tmp_path / "t")
    assert main(["pretrain-target", "--out", out, "--pretrain-epochs", "1"]) == 0
    assert "epoch=1 loss=" in capsys.readouterr().out
    assert manifest(out)["fingerprint"]
