import json

import pytest

from ssmae3d.cli import main
from ssmae3d.data import load_dataset, read_volume
from ssmae3d.model import load_model
from ssmae3d.saliency import read_pgm

TINY = """\
synth.dims = (8, 8, 8)
synth.radius = (2.0, 3.0)
model.volume = (8, 8, 8)
model.patch = 4
model.enc_depth = 1
model.enc_dim = 8
model.dec_dim = 8
model.d_state = 2
pretrain.batch_size = 4
finetune.batch_size = 4
k = 2
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    return cfg


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_is_deterministic(tmp_path, tiny, capsys):
    for d in ("a", "b"):
        assert run("synth", "--config", tiny, "--n", 8, "--seed", 4, "--out-dir", tmp_path / d) == 0
    assert "4, 4 per class" in capsys.readouterr().out
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.tsv" in files and len(files) == 9
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    X, y = load_dataset(tmp_path / "a")
    assert X.shape == (8, 2, 8, 8, 8)


def test_pipeline(tmp_path, tiny, capsys):
    data, pre, ft, ev, sal, pe = (tmp_path / n for n in ("data", "pre", "ft", "ev", "sal", "pe"))
    assert run("synth", "--config", tiny, "--n", 8, "--out-dir", data) == 0
    assert run("pretrain", "--config", tiny, "--data", data, "--epochs", 2, "--out-dir", pre) == 0
    mae, meta = load_model(pre / "mae.ck")
    assert meta["kind"] == "mae" and mae.cfg.enc_dim == 8
    assert (pre / "loss.csv").read_text().startswith("epoch,loss\n1,")
    assert run("finetune", "--config", tiny, "--data", data, "--checkpoint", pre / "mae.ck",
               "--epochs", 1, "--out-dir", ft) == 0
    assert json.loads((ft / "report.json").read_text())["pretrained"] is True
    assert run("eval", "--config", tiny, "--data", data, "--checkpoint", pre / "mae.ck",
               "--epochs", 1, "--out-dir", ev) == 0
    assert len((ev / "folds.csv").read_text().splitlines()) == 3
    assert run("eval", "--data", data, "--classifier", ft / "classifier.ck", "--out-dir", ev / "h") == 0
    assert run("saliency", "--checkpoint", pre / "mae.ck", "--data", data, "--slices", 1, 5,
               "--overlay", "--out-dir", sal) == 0
    assert read_volume(sal / "saliency.mv3d").data.shape == (1, 8, 8, 8)
    assert read_pgm(sal / "saliency_ax0_005.pgm").shape == (8, 8)
    assert run("perturb-eval", "--classifier", ft / "classifier.ck", "--data", data, "--out-dir", pe) == 0
    assert (pe / "perturb.txt").read_text().startswith("Test-time Perturbation")


def test_eval_without_training_is_chance(tmp_path, tiny):
    data, ev = tmp_path / "data", tmp_path / "ev"
    run("synth", "--config", tiny, "--n", 20, "--out-dir", data)
    assert run("eval", "--config", tiny, "--data", data, "--epochs", 0, "--out-dir", ev) == 0
    rep = json.loads((ev / "report.json").read_text())
    # an untrained head gives near-constant scores; accuracy sits at the class prior
    assert rep["mean"]["accuracy"] == pytest.approx(0.5, abs=0.2)


def test_bench_table(tmp_path, capsys):
    assert run("bench", "--seq", "49,196,784,3136", "--out-dir", tmp_path) == 0
    out = capsys.readouterr().out
    assert "R^2" in out and "34.46" in out
    rows = (tmp_path / "scaling.csv").read_text().splitlines()
    assert len(rows) == 9
    ssm = {int(r.split(",")[2]): int(r.split(",")[3]) for r in rows[1:] if r.startswith("ssm")}
    assert 14 <= ssm[3136] / ssm[196] <= 18


@pytest.mark.parametrize("argv, code, msg", [
    (["pretrain", "--data", "nowhere"], 2, "no manifest.tsv"),
    (["bench", "--seq", "a,b"], 2, "comma-separated integers"),
    (["bench", "--seq", "200"], 1, "square grid"),
    (["eval", "--data", "{data}", "--classifier", "missing.ck"], 2, "checkpoint not found"),
    (["synth", "--config", "{bad}"], 2, "unknown SyntheticSpec keys: colour"),
])
def test_errors_exit_nonzero(tmp_path, tiny, capsys, argv, code, msg):
    data = tmp_path / "data"
    run("synth", "--config", tiny, "--n", 4, "--out-dir", data)
    bad = tmp_path / "bad.cfg"
    bad.write_text("synth.colour = 3\n")
    argv = [a.format(data=data, bad=bad) for a in argv]
    capsys.readouterr()
    assert run(*argv, "--out-dir", tmp_path / "o") == code
    assert msg in capsys.readouterr().err


def test_wrong_checkpoint_kind(tmp_path, tiny, capsys):
    data, pre = tmp_path / "data", tmp_path / "pre"
    run("synth", "--config", tiny, "--n", 4, "--out-dir", data)
    run("pretrain", "--config", tiny, "--data", data, "--epochs", 1, "--out-dir", pre)
    assert run("perturb-eval", "--classifier", pre / "mae.ck", "--data", data) == 2
    assert "expected classifier" in capsys.readouterr().err


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("synth", "pretrain", "finetune", "eval", "saliency", "bench", "perturb-eval"):
        assert cmd in out
