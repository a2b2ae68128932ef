import subprocess
import sys

import pytest

from embsp.cli import main


def _counters(text):
    block = text.split("-------- counters --------")[1].split("-------- end --------")[0]
    rows = [line.split("\t") for line in block.strip().splitlines()[1:]]
    return {k: int(v) for k, v in rows}


def test_psrs_pass(capsys):
    assert main(["--app", "psrs", "--v", "4", "--k", "2", "--n", "4096", "--io", "mmap"]) == 0
    out = capsys.readouterr().out
    assert "verification: PASS" in out
    c = _counters(out)
    assert c["swap_in"] == c["resume_in"] == c["swap_out"] == 0


@pytest.mark.parametrize("app", ["psum", "alltoall", "collectives"])
def test_other_apps_pass(app, capsys):
    assert main(["--app", app, "--v", "4", "--k", "2"]) == 0
    assert "verification: PASS" in capsys.readouterr().out


def test_bad_config_exit_code(capsys):
    assert main(["--v", "4", "--k", "8"]) == 2
    assert "k exceeds v/P" in capsys.readouterr().err


def test_budget_failure_exit_code(capsys):
    assert main(["--app", "psrs", "--v", "4", "--n", "65536", "--mu", "4096"]) == 1
    assert "verification: FAIL" in capsys.readouterr().out


def test_predict(capsys):
    assert main(["predict", "--v", "4", "--k", "2", "--mu", "1024", "--block-size", "16",
                 "--omega", "64"]) == 0
    out = capsys.readouterr().out
    rows = dict(line.split("\t")[0::2] for line in out.splitlines() if "\t" in line)
    assert rows["io_alltoallv_seq"] == "4864"


def test_bench_out_writes_png(tmp_path, capsys):
    path = tmp_path / "marks.dat"
    assert main(["--app", "psrs", "--v", "4", "--k", "2", "--bench-out", str(path)]) == 0
    out = capsys.readouterr().out
    assert f"wrote {path}" in out
    assert path.exists() and (tmp_path / "marks.png").exists()
    assert path.read_text().startswith('# "Init" "Benchmark Start"')


def test_dump(tmp_path, capsys):
    assert main(["--app", "psum", "--v", "2", "--dump", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["vp0.npy", "vp1.npy"]


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "embsp", "--app", "psum", "--v", "2", "--io", "mem"],
                       capture_output=True, text=True, timeout=120)
    assert r.returncode == 0, r.stderr
    assert "verification: PASS" in r.stdout
