import csv
import shutil
import subprocess

import pytest

from omoq import cli
from omoq.audio import load_clip
from omoq.training import read_manifest


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out.strip(), err.strip()


def test_parse_seeds():
    assert cli.parse_seeds("0..2") == [0, 1, 2]
    assert cli.parse_seeds("1,4,7..8") == [1, 4, 7, 8]
    with pytest.raises(cli.CliError):
        cli.parse_seeds(",")


def test_synth_contract(tmp_path, capsys):
    code, out, _ = _run(capsys, "synth", "--n", 20, "--out", tmp_path / "d", "--seed", 3)
    assert code == 0 and "clips=20" in out
    rows = read_manifest(tmp_path / "d" / "manifest.csv")
    assert len(rows) == 20 and min(r.smos for r in rows) == 1.0 and max(r.smos for r in rows) == 5.0
    assert {r.split for r in rows} == {"train", "val", "test"}
    for r in rows[:5]:
        assert len(load_clip(r.path)) > 0


def test_features_cache_and_errors(synth20, tmp_path, capsys):
    cache = tmp_path / "cache"
    code, out, _ = _run(capsys, "features", synth20, "--kind", "mfcc_d", "--out", cache)
    assert code == 0 and "D_F=256" in out and "computed=20" in out
    index = cache / "index.csv"
    stamp = index.stat().st_mtime_ns
    blobs = {p.name: p.stat().st_mtime_ns for p in cache.glob("*.feat")}
    code, out, _ = _run(capsys, "features", synth20, "--kind", "mfcc_d", "--out", cache, "--standardize", "overall")
    assert code == 0 and "hits=20 computed=0" in out
    assert blobs == {p.name: p.stat().st_mtime_ns for p in cache.glob("*.feat")}
    assert index.stat().st_mtime_ns >= stamp
    assert (cache / "stats_mfcc_d_overall.json").exists()
    with open(index) as fh:
        assert {row["D_F"] for row in csv.DictReader(fh)} == {"256"}
    code, _, err = _run(capsys, "features", tmp_path / "missing.wav")
    assert code == 1 and "missing.wav" in err and len(err.splitlines()) == 1


def test_train_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("config_version = 1\nmodel = bgru-ff\nepochs = 4\nhidden = 8\n")
    args = cli.build_parser().parse_args(["train", "--manifest", "m.csv", "--config", str(cfg_file), "--epochs", "2"])
    cfg = cli.build_train_config(args)
    assert (cfg.model, cfg.epochs, cfg.hidden, cfg.batch_size) == ("bgru-ff", 2, 8, 48)
    cfg_file.write_text("model = cnn\n")
    with pytest.raises(cli.CliError, match="config_version"):
        cli.build_train_config(args)
    cfg_file.write_text("config_version = 1\nbogus = 3\n")
    with pytest.raises(cli.CliError, match="bogus"):
        cli.build_train_config(args)


def test_train_predict_select_sweep(synth20, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("OMOQ_CACHE_DIR", str(tmp_path / "cache"))
    base = ["--manifest", synth20, "--model", "bgru-ft", "--epochs", 2, "--hidden", 8]
    code, out, _ = _run(capsys, "train", *base, "--seed", 7, "--out", tmp_path / "r1")
    assert code == 0 and "best_epoch=" in out
    assert (tmp_path / "cache" / "index.csv").exists()
    _run(capsys, "train", *base, "--seed", 7, "--out", tmp_path / "r2")
    assert (tmp_path / "r1" / "metrics.csv").read_bytes() == (tmp_path / "r2" / "metrics.csv").read_bytes()

    wav = read_manifest(synth20)[0].path
    code, out, _ = _run(capsys, "predict", "--checkpoint", tmp_path / "r1" / "best.ckpt", wav)
    assert code == 0
    omos = float(out.split(",")[-1])
    assert 1.0 <= omos <= 5.0

    code, out, _ = _run(capsys, "select", tmp_path / "r1", "--out", tmp_path / "best.csv")
    assert code == 0 and "seed=7" in out

    code, out, _ = _run(capsys, "sweep", *base, "--seeds", "0..2", "--out", tmp_path / "sw")
    assert code == 0 and "runs=3" in out
    assert len(list((tmp_path / "sw").glob("seed_*"))) == 3
    first = (tmp_path / "sw" / "summary.csv").read_bytes()
    _run(capsys, "sweep", *base, "--seeds", "0..2", "--out", tmp_path / "sw2")
    assert (tmp_path / "sw2" / "summary.csv").read_bytes() == first


def test_evaluate(tmp_path, capsys):
    preds = tmp_path / "p.csv"
    lines = ["file,method,beta,class,omos"]
    for i in range(8):
        lines.append(f"a{i},A,0.5,Voice,{3.0 + 0.1 * i}")
        lines.append(f"b{i},B,2.0,Music,{2.0 + 0.1 * i}")
    lines.append("u,A,1.0,Voice,1.0")
    preds.write_text("\n".join(lines) + "\n")
    code, out, _ = _run(capsys, "evaluate", "--preds", preds, "--out", tmp_path / "rep")
    assert code == 0 and "methods=2" in out
    assert (tmp_path / "rep" / "pvalues_masked.csv").exists()
    preds.write_text("file,method,beta,class,omos\nx,A,0.5,Voice,9\n")
    code, _, err = _run(capsys, "evaluate", "--preds", preds, "--out", tmp_path / "rep2")
    assert code == 1 and err.startswith("omoq: error: EvaluationError:")


def test_usage_error_single_line(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--manifest", "m.csv", "--model", "nope"])
    assert exc.value.code == 2
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


@pytest.mark.skipif(shutil.which("omoq") is None, reason="console script not installed")
def test_console_script(tmp_path):
    res = subprocess.run(["omoq", "synth", "--n", "4", "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0 and "clips=4" in res.stdout
