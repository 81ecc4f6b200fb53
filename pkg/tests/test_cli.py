import csv
import subprocess
import sys

import pytest
import yaml

from mtlab.cli import COMMANDS, main
from mtlab.scenarios import CATALOG


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    for name in CATALOG:
        assert name in out


def test_help_documents_columns():
    res = subprocess.run([sys.executable, "-m", "mtlab.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "Report columns" in res.stdout
    for cmd in COMMANDS:
        assert cmd in res.stdout


def test_unknown_scenario_is_usage_error(tmp_path, capsys):
    assert main(["run", "--scenario", "no-such-thing", "--out", str(tmp_path)]) == 2
    assert "no-such-thing" in capsys.readouterr().err


def test_malformed_override_is_usage_error(tmp_path):
    assert main(["run", "--scenario", "fast-direct", "--override", "R", "--out", str(tmp_path)]) == 2


def test_missing_config_is_usage_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == 2


def test_plancherel_scenario(tmp_path):
    assert main(["run", "--scenario", "plancherel-slices", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "plancherel-slices.csv")
    assert len(rows) >= 2 * 128 + 1
    assert (tmp_path / "plancherel-slices.json").exists()


def test_failed_check_names_invariant(tmp_path, capsys):
    code = main(["run", "--scenario", "plancherel-slices", "--override", "R=32",
                 "--override", "tolerances.plancherel=1e-30", "--out", str(tmp_path)])
    assert code == 1
    assert "invariant failed" in capsys.readouterr().err


def test_config_file(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({"scenario": "fast-direct", "R": 8, "seed": 3, "out": str(tmp_path / "o")}))
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "o" / "fast-direct.csv").exists()


def test_guth_sweep_is_deterministic_and_fits(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = main(["sweep", "--scenario", "guth-cex", "--seed", "7", "--override", "R_list=[64, 128, 256]",
                     "--out", str(out)])
        assert code in (0, 1)
        outs.append(out)
    for name in ("guth-cex.csv", "guth-cex.json", "guth-cex.svg"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = read_csv(outs[0] / "guth-cex.csv")
    assert [float(r["R"]) for r in rows] == [64, 128, 256]
    assert main(["fit", str(outs[0] / "guth-cex.csv"), "--out", str(tmp_path / "fit")]) == 0
    fit = read_csv(tmp_path / "fit" / "fit.csv")
    assert fit[0]["column"] == "ratio" and float(fit[0]["slope"]) > 0


def test_fit_needs_R_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,ratio\n1,2\n")
    assert main(["fit", str(p)]) == 2


@pytest.mark.parametrize("argv, files", [
    (["extend", "--override", "R=16"], ["extend.csv", "field.mtla"]),
    (["xray", "--override", "R=16"], ["xray.csv", "weight.mtla"]),
    (["afunc", "--override", "R=16", "--override", "rho=2"], ["afunc.csv"]),
    (["mt", "--override", "R=16"], ["mt.csv", "mt.json"]),
    (["wavepacket", "--override", "R=32"], ["packets.csv", "wavepacket.csv"]),
    (["decouple", "--kind", "refined", "--override", "R=32"], ["decouple.csv"]),
    (["decouple", "--kind", "slab", "--override", "R=32", "--override", "rho=16"], ["decouple.csv"]),
    (["decouple", "--kind", "flake", "--override", "R=32"], ["decouple.csv", "decouple.json"]),
    (["cex", "--override", "R=32"], ["cex.csv", "cex_state.json", "cex_weight.mtla"]),
])
def test_subcommands_write_reports(tmp_path, argv, files):
    assert main(argv + ["--out", str(tmp_path), "--threads", "1"]) == 0
    for f in files:
        assert (tmp_path / f).stat().st_size > 0
