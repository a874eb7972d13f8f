from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from latent.cli import main

DIVIDER = "divider\nV1 in 0 1\nR1 in mid 1k\nR2 mid 0 1k\n.end\n"


@pytest.fixture
def divider_file(tmp_path):
    p = tmp_path / "div.sp"
    p.write_text(DIVIDER)
    return p


class TestSimulate:
    def test_divider_csv(self, divider_file, tmp_path):
        out = tmp_path / "o"
        assert main(["--out-dir", str(out), "simulate", str(divider_file), "--sweep", "V1", "0", "2", "26"]) == 0
        rows = list(csv.reader((out / "div.trace.csv").open()))
        assert len(rows) == 27 and rows[0][:3] == ["sweep", "V(in)", "V(mid)"]

    def test_parse_error_names_line(self, tmp_path, capsys):
        p = tmp_path / "bad.sp"
        p.write_text("bad\nR1 a b 1k\nR2 a\n")
        assert main(["simulate", str(p)]) == 1
        assert "line 3" in capsys.readouterr().err

    def test_floating_node(self, tmp_path, capsys):
        p = tmp_path / "flt.sp"
        p.write_text("flt\nV1 a 0 1\nR1 a 0 1k\nC1 x y 1p\n")
        assert main(["--out-dir", str(tmp_path), "simulate", str(p)]) == 1
        err = capsys.readouterr().err
        assert "SingularMatrix" in err and "x" in err and "y" in err

    def test_missing_file(self, capsys):
        assert main(["simulate", "/nonexistent.sp"]) == 1


class TestDetect:
    def test_report_written(self, divider_file, tmp_path, capsys):
        assert main(["--out-dir", str(tmp_path), "detect", str(divider_file)]) == 0
        data = json.loads((tmp_path / "div.report.json").read_text())
        assert data["detector"] == "rules"
        assert "DETECTION REPORT" in capsys.readouterr().out

    def test_resistor_toggle(self, tmp_path):
        p = tmp_path / "shunt.sp"
        p.write_text(DIVIDER.replace(".end", "R9 in 0 1k\n.end"))
        main(["--out-dir", str(tmp_path), "detect", str(p)])
        on = json.loads((tmp_path / "shunt.report.json").read_text())["records"]
        main(["--out-dir", str(tmp_path), "detect", str(p), "--no-resistor-rules"])
        off = json.loads((tmp_path / "shunt.report.json").read_text())["records"]
        assert any(r["element"] == "R9" for r in on)
        assert not any(r["element"].startswith("R") for r in off)


class TestCampaign:
    def test_bundle_and_reproducible(self, tmp_path):
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert main(["--seed", "42", "--out-dir", str(out), "campaign", "--benchmark", "ladder20"]) == 0
            outs.append(out / "ladder20")
        for name in ("final.sp", "history.jsonl", "metrics.csv", "metrics.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        bundle = json.loads((outs[0] / "metrics.json").read_text())
        assert bundle["reason"] in ("ConsecutiveEvasion", "UpperBound")
        assert bundle["n_it"] <= 120
        hist = [json.loads(x) for x in (outs[0] / "history.jsonl").read_text().splitlines()]
        assert max(len(h["inserted"]) for h in hist) <= 12

    def test_config_file(self, tmp_path, divider_file):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("alpha: 1.0\nT: 2\nseed: 5\nsweep: {source: V1, start: 0, stop: 1, points: 4}\n")
        assert main(["--config", str(cfg), "--out-dir", str(tmp_path), "campaign", str(divider_file)]) == 0
        bundle = json.loads((tmp_path / "div" / "metrics.json").read_text())
        assert bundle["seed"] == 5 and bundle["L_max"] == 2

    def test_bad_config(self, tmp_path, divider_file, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("alpha: 0.6\nbogus: 1\n")
        assert main(["--config", str(cfg), "campaign", str(divider_file)]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_empty_cua(self, tmp_path):
        p = tmp_path / "e.sp"
        p.write_text("empty\n")
        assert main(["--out-dir", str(tmp_path), "campaign", str(p), "--sweep", "V1", "0", "1", "3"]) == 1


class TestBaselineAndReport:
    def test_report_rows_and_average(self, tmp_path):
        res = tmp_path / "res"
        for name in ("ladder20", "synth01", "thresh"):
            assert main(["--seed", "42", "--out-dir", str(res), "campaign", "--benchmark", name]) == 0
        rep = tmp_path / "rep"
        assert main(["--out-dir", str(rep), "report", str(res)]) == 0
        rows = list(csv.DictReader((rep / "report.csv").open()))
        assert [r["netlist"] for r in rows] == ["ladder20", "synth01", "thresh", "Average"]
        for col in ("n_it", "L_T", "node_impact"):
            vals = [float(r[col]) for r in rows[:3]]
            assert float(rows[3][col]) == pytest.approx(sum(vals) / 3, rel=1e-3)
        text = (rep / "report.txt").read_text()
        for name in ("ladder20", "synth01", "thresh"):
            bundle = json.loads((res / name / "metrics.json").read_text())
            if bundle["reason"] == "ConsecutiveEvasion":
                assert bundle["r_evade_series"][-3:] == [100.0] * 3
            assert f"{name} (" in text

    def test_report_is_row_local(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["--out-dir", str(a), "campaign", "--benchmark", "synth02"])
        main(["--out-dir", str(b), "campaign", "--benchmark", "synth03"])
        main(["--out-dir", str(tmp_path / "ra"), "report", str(a)])
        main(["--out-dir", str(tmp_path / "rb"), "report", str(b)])
        main(["--out-dir", str(tmp_path / "rab"), "report", str(a), str(b)])

        def rows(d):
            return [r for r in csv.DictReader((tmp_path / d / "report.csv").open()) if r["netlist"] != "Average"]

        assert rows("rab") == rows("ra") + rows("rb")

    def test_baseline(self, tmp_path):
        assert main(["--seed", "3", "--out-dir", str(tmp_path), "baseline", "--benchmark", "thresh",
                     "--pattern", "A2-like"]) == 0
        bundle = json.loads((tmp_path / "thresh.A2-like" / "metrics.json").read_text())
        assert bundle["record"]["delta_a_pct"] > 0
        assert (tmp_path / "thresh.A2-like" / "trojan.sp").exists()

    def test_report_without_bundles(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 1


def test_module_entry_point(tmp_path, divider_file):
    proc = subprocess.run([sys.executable, "-m", "latent", "--out-dir", str(tmp_path), "simulate",
                           str(divider_file)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
