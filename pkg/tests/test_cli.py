import json
import subprocess
import sys

import pytest

from d2monitor.cli import main
from d2monitor.trajectory import read_dataset


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_smoke(tmp_path):
    out = tmp_path / "d.d2t"
    assert run("synth", "--out", out, "--samples", 100, "--steps", 16, "--dim", 32, "--seed", 7) == 0
    ds = read_dataset(out)
    assert ds.states.shape == (100, 16, 32)
    man = json.loads((tmp_path / "d.d2t.manifest.json").read_text())
    assert man["command"] == "synth" and man["seeds"] == {"seed": 7}
    assert str(out) in man["artifacts"] and all(v >= 0 for v in man["timings_s"].values())


def test_missing_data_is_data_error(tmp_path, capsys):
    out = tmp_path / "p.d2p"
    assert run("train", "--probe", "lp", "--readout", "mv", "--data", tmp_path / "missing.d2t", "--out", out) == 2
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_corrupt_data_is_data_error(tmp_path):
    bad = tmp_path / "bad.d2t"
    bad.write_bytes(b"XXXXXXXX" + bytes(20))
    assert run("oof", "--data", bad, "--out", tmp_path / "o.csv") == 2


@pytest.mark.parametrize("argv", [[], ["nope"], ["train", "--probe", "zz", "--data", "x"], ["synth", "--out", "x"]])
def test_usage_errors(argv, capsys):
    assert run(*argv) == 1
    assert "usage" in capsys.readouterr().err


def test_threads_must_be_positive(tmp_path):
    assert run("--threads", 0, "synth", "--out", tmp_path / "d", "--samples", 5) == 1


def test_env_thread_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("D2M_THREADS", "3")
    run("synth", "--out", tmp_path / "d", "--samples", 5)
    assert json.loads((tmp_path / "d.manifest.json").read_text())["config"]["threads"] == 3


def test_flops_table(capsys):
    assert run("flops", "--steps", 32, "--dim", 4096, "--json") == 0
    rows = {r["method"]: r for r in json.loads(capsys.readouterr().out)}
    assert rows["LP (MV)"]["mflops"] == pytest.approx(0.262144)
    assert rows["TimeAttn"]["mflops"] == pytest.approx(35.65, abs=0.01)


def _pipeline(d, threads=1):
    d.mkdir()
    common = ["--steps", 8, "--dim", 8, "--seed", 5]
    assert run("--threads", threads, "synth", "--out", d / "tr.d2t", "--samples", 300, *common) == 0
    assert run("synth", "--out", d / "va.d2t", "--samples", 100, "--start", 300, *common) == 0
    assert run("synth", "--out", d / "te.d2t", "--samples", 100, "--start", 400, *common) == 0
    assert run("--threads", threads, "oof", "--data", d / "tr.d2t", "--out", d / "oof.csv", "--k", 3) == 0
    assert run("--threads", threads, "cascade-train", "--data", d / "tr.d2t", "--out", d / "b", "--k", 3) == 0
    assert run("select-lambda", "--bundle", d / "b", "--data", d / "va.d2t") == 0
    assert run("eval", "--model", d / "b", "--data", d / "te.d2t", "--out", d / "rep.json",
               "--routes", d / "routes.csv") == 0
    return d


def test_end_to_end_replay(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b", threads=3)
    for name in ("tr.d2t", "oof.csv", "b/base.d2p", "b/expert.d2p", "b/cascade.json", "rep.json", "routes.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "b" / "manifest-cascade-train.json").exists() and (a / "b" / "manifest-select-lambda.json").exists()
    rep = json.loads((a / "rep.json").read_text())
    assert 0 <= rep["routed_fraction"] <= 1

    assert run("train", "--data", a / "tr.d2t", "--probe", "lp", "--readout", "mv", "--out", a / "lp.d2p",
               "--epochs", 5) == 0
    assert run("eval", "--model", a / "lp.d2p", "--data", a / "te.d2t", "--out", a / "lp.json") == 0
    assert "routed_fraction" not in json.loads((a / "lp.json").read_text())
    assert run("eval", "--model", a / "lp.d2p", "--data", a / "te.d2t", "--out", a / "x.json",
               "--routes", a / "x.csv") == 1

    assert run("analyze", "--oof", a / "oof.csv", "--out-prefix", a / "dyn", "--max-lag", 3) == 0
    assert (a / "dyn_crossing.csv").read_text().startswith("bin_lo,")
    assert len((a / "dyn_persistence.csv").read_text().splitlines()) == 4
    assert run("analyze", "--data", a / "te.d2t", "--probe", a / "b", "--tau", 0.5, "--out-prefix", a / "dyn2") == 0

    assert run("select-lambda", "--bundle", a / "b", "--data", a / "va.d2t", "--retune-tau") == 0
    assert run("bench", "--data", a / "te.d2t", "--probe", a / "lp.d2p", "--bundle", a / "b",
               "--repeats", 1, "--out", a / "bench.json") == 0
    assert len(json.loads((a / "bench.json").read_text())["results"]) == 2


def test_train_grid(tmp_path, capsys):
    run("synth", "--out", tmp_path / "d", "--samples", 120, "--steps", 4, "--dim", 6)
    assert run("train", "--data", tmp_path / "d", "--probe", "lp", "--grid", "--epochs", 2,
               "--out", tmp_path / "p.d2p") == 0
    assert "grid winner" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "d2monitor", "flops", "--steps", "128", "--dim", "2048"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "LSTM" in r.stdout
    r = subprocess.run([sys.executable, "-m", "d2monitor", "bogus"], capture_output=True, text=True)
    assert r.returncode == 1
