import io
import json
import math
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metabias import remeta
from metabias.cli import main
from metabias.dataset import CSV_COLUMNS, MetaDataset, serialize_csv
from metabias.funnel import FunnelSpec, render_svg
from metabias.report import FIT_COLUMNS, SIM_COLUMNS, ReportError, ReportTable

SVG = "{http://www.w3.org/2000/svg}"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def table(out, fmt="tsv"):
    return ReportTable.parse(out, fmt)


@pytest.fixture
def tio_csv(tmp_path, tiotropium):
    p = tmp_path / "tiotropium.csv"
    p.write_text(serialize_csv(tiotropium))
    return str(p)


class TestFit:
    def test_reml_rows_and_tests(self, capsys, tio_csv):
        code, out, _ = run(capsys, "fit", "--data", tio_csv, "--method", "reml")
        assert code == 0
        t = table(out)
        assert t.scale == "or"
        (row,) = t.find(method="REML")
        assert row["estimate"] == pytest.approx(0.768, abs=5e-4)
        assert {r["method"] for r in t.find(description="funnel asymmetry")} == {"Egger", "Macaskill"}
        assert not t.find(method="REML.KnHa")

    def test_knha_only(self, capsys):
        code, out, _ = run(capsys, "fit", "--dataset", "tiotropium", "--method", "knha")
        t = table(out)
        assert code == 0 and [r["method"] for r in t.records()] == ["REML.KnHa"]
        assert t.records()[0]["ci_lower"] == pytest.approx(0.691, abs=2e-3)

    def test_mle_clopidogrel(self, capsys):
        code, out, _ = run(capsys, "fit", "--dataset", "clopidogrel", "--method", "mle")
        assert code == 0
        rows = table(out).records()
        assert [r["method"] for r in rows] == ["MLE(N)", "MLE(T)", "MLE(SE#)"]
        for r in rows:
            assert r["estimate"] == pytest.approx(0.692, abs=0.01)
            assert r["expected_m"] == 3.0
        assert rows[2]["ci_upper"] == pytest.approx(1.041, abs=0.01)

    def test_all_tiotropium(self, capsys, tio_csv):
        code, out, _ = run(capsys, "fit", "--data", tio_csv, "--method", "all", "--format", "json")
        assert code == 0
        t = table(out, "json")
        assert t.find(method="REML")[0]["estimate"] == pytest.approx(0.768, abs=5e-4)
        assert t.find(method="MLE(N)")[0]["estimate"] == pytest.approx(0.787, abs=5e-3)
        curve = t.find(description="sensitivity curve")
        ms = [r["expected_m"] for r in curve]
        assert len(curve) > 10 and ms == sorted(ms)
        assert len([r for r in t.records() if r["description"].startswith("selected")]) == 1

    def test_log_scale(self, capsys, tiotropium):
        code, out, _ = run(capsys, "fit", "--dataset", "tiotropium", "--method", "reml", "--scale", "log")
        t = table(out)
        assert t.scale == "log"
        assert t.find(method="REML")[0]["estimate"] == pytest.approx(remeta.fit_random_effects(tiotropium).theta_hat)

    def test_output_file(self, capsys, tmp_path):
        dest = tmp_path / "out.tsv"
        code, out, _ = run(capsys, "fit", "--dataset", "clopidogrel", "--method", "reml", "-o", str(dest))
        assert code == 0 and out == ""
        assert table(dest.read_text()).find(method="REML")

    def test_level(self, capsys):
        _, out90, _ = run(capsys, "fit", "--dataset", "clopidogrel", "--method", "reml", "--level", "0.9")
        _, out95, _ = run(capsys, "fit", "--dataset", "clopidogrel", "--method", "reml")
        r90, r95 = table(out90).find(method="REML")[0], table(out95).find(method="REML")[0]
        assert r95["ci_lower"] < r90["ci_lower"] < r90["ci_upper"] < r95["ci_upper"]

    def test_empty_file(self, capsys, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text(",".join(CSV_COLUMNS) + "\n")
        code, out, err = run(capsys, "fit", "--data", str(p))
        assert code == 2 and out == ""
        assert "at least 2 published" in err

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "fit", "--data", str(tmp_path / "nope.csv"))
        assert code == 2 and "not found" in err

    def test_schema_violation(self, capsys, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text(",".join(CSV_COLUMNS) + "\nA,,,,,10,0.1,-0.2,1\nB,,,,,10,0.1,0.2,1\n")
        code, _, err = run(capsys, "fit", "--data", str(p))
        assert code == 2 and "sei" in err

    def test_unknown_bundled(self, capsys):
        code, _, err = run(capsys, "fit", "--dataset", "nope")
        assert code == 2 and "unknown bundled dataset" in err

    def test_convergence_failure(self, capsys, monkeypatch):
        monkeypatch.setattr(remeta, "MAX_ITER", 1)
        code, _, err = run(capsys, "fit", "--dataset", "clopidogrel", "--method", "reml")
        assert code == 3 and "REML" in err

    def test_bad_level(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["fit", "--dataset", "clopidogrel", "--level", "1.5"])
        assert exc.value.code == 2


class TestSimulate:
    args = ("simulate", "--theta", "-0.25", "--tau", "0.05", "--rho", "-0.8", "--p20", "0.1", "--p500", "0.99",
            "--total", "20", "--reps", "4", "--seed", "7", "--methods", "REML,REML.KnHa,MLE(N),MLE(T),MLE(SE#)")

    def test_deterministic(self, capsys):
        code1, out1, _ = run(capsys, *self.args)
        code2, out2, _ = run(capsys, *self.args, "--workers", "2")
        assert code1 == code2 == 0 and out1 == out2
        t = table(out1)
        assert t.columns == SIM_COLUMNS
        assert [r["method"] for r in t.records()] == ["REML", "REML.KnHa", "MLE(N)", "MLE(T)", "MLE(SE#)"]
        assert all(r["replications"] == 4 for r in t.records())

    def test_config_file_with_override(self, capsys, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text("theta = -0.25\ntau = 0.05\nrho = -0.8\np20 = 0.1\np500 = 0.99\ntotal = 20\nreps = 9\nseed = 7\n")
        code, out, _ = run(capsys, "simulate", "--config", str(cfg), "--reps", "4", "--methods", "REML,REML.KnHa,MLE(N),MLE(T),MLE(SE#)")
        assert code == 0
        _, ref, _ = run(capsys, *self.args)
        assert out == ref

    @pytest.mark.parametrize(
        "extra,match",
        [(("--rho", "1.5"), "rho"), (("--alpha0", "-1"), "together"), (("--alpha0", "-1", "--alpha1", "0.1", "--p20", "0.2"), "either"),
         (("--methods", "OLS"), "unknown methods")],
    )
    def test_invalid(self, capsys, extra, match):
        code, _, err = run(capsys, "simulate", "--reps", "1", *extra)
        assert code == 2 and match in err

    def test_missing_config(self, capsys, tmp_path):
        code, _, err = run(capsys, "simulate", "--config", str(tmp_path / "none.cfg"))
        assert code == 2 and "not found" in err


def _svg_counts(text):
    root = ET.fromstring(text)
    circles = root.findall(f".//{SVG}circle")
    lines = root.findall(f".//{SVG}line")
    return root, circles, lines


class TestFunnel:
    @pytest.mark.parametrize("name,n_pub,n_unpub", [("tiotropium", 24, 8), ("clopidogrel", 12, 3)])
    def test_modified_counts(self, capsys, name, n_pub, n_unpub):
        code, out, _ = run(capsys, "funnel", "--dataset", name)
        assert code == 0
        root, circles, lines = _svg_counts(out)
        assert root.tag == f"{SVG}svg"
        assert len(circles) == n_pub and len(lines) == n_unpub
        assert [c.get("id") for c in circles] == [f"pub-{i}" for i in range(1, n_pub + 1)]
        assert [ln.get("id") for ln in lines] == [f"unpub-{i}" for i in range(1, n_unpub + 1)]
        # unpublished lines are horizontal and span the plot width
        assert all(ln.get("y1") == ln.get("y2") for ln in lines)
        assert len({(ln.get("x1"), ln.get("x2")) for ln in lines}) == 1
        assert root.find(f".//{SVG}path[@id='reference']") is not None

    def test_no_unpublished(self, clopidogrel):
        _, circles, lines = _svg_counts(render_svg(clopidogrel.published_only()))
        assert len(circles) == 12 and lines == []

    def test_circle_heights_follow_sqrt_n(self, clopidogrel):
        _, circles, _ = _svg_counts(render_svg(clopidogrel))
        ns = [s.n for s in clopidogrel.published]
        ys = [float(c.get("cy")) for c in circles]
        order_n = sorted(range(len(ns)), key=lambda i: ns[i])
        # SVG y grows downward
        assert [ys[i] for i in order_n] == sorted(ys, reverse=True)

    def test_standard_mode(self, capsys, tmp_path):
        dest = tmp_path / "f.svg"
        code, _, _ = run(capsys, "funnel", "--dataset", "tiotropium", "--mode", "standard", "-o", str(dest))
        _, circles, lines = _svg_counts(dest.read_text())
        assert code == 0 and len(circles) == 24 and lines == []

    def test_modified_requires_n(self, capsys, tmp_path):
        d = MetaDataset.from_arrays([0.1, 0.2, -0.1], [0.1, 0.2, 0.3])
        p = tmp_path / "no_n.csv"
        p.write_text(serialize_csv(d))
        code, _, err = run(capsys, "funnel", "--data", str(p))
        assert code == 2 and "n" in err
        assert run(capsys, "funnel", "--data", str(p), "--mode", "standard")[0] == 0

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            FunnelSpec(mode="weird")
        with pytest.raises(ValueError):
            FunnelSpec(width=100, margin=60)


finite = st.floats(-1e6, 1e6, allow_nan=False)
text = st.text(st.characters(blacklist_categories=("Cs", "Cc")), max_size=12).filter(lambda s: s != "NA")


@st.composite
def fit_rows(draw):
    a, b, c = sorted(draw(st.tuples(finite, finite, finite)))
    return dict(
        description=draw(text), method=draw(text),
        expected_m=draw(st.one_of(st.none(), st.floats(0, 100))),
        estimate=b, ci_lower=a, ci_upper=c,
        p_value=draw(st.one_of(st.none(), st.floats(0, 1))),
    )


class TestReportRoundTrip:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(fit_rows(), max_size=6), st.sampled_from(["or", "log"]), st.sampled_from(["tsv", "json"]))
    def test_idempotent(self, rows, scale, fmt):
        t = ReportTable(scale=scale)
        for r in rows:
            t.add(**r)
        once = t.serialize(fmt)
        again = ReportTable.parse(once, fmt)
        assert again.rows == t.rows and again.scale == scale
        assert again.serialize(fmt) == once

    def test_sim_columns_round_trip(self):
        t = ReportTable(columns=SIM_COLUMNS, scale="log")
        t.add(method="REML", ave=-0.3, sd=0.03, cp=0.6, loci=0.1, noc=200, replications=200)
        t.add(method="Copas", noc=0, replications=200)
        for fmt in ("tsv", "json"):
            assert ReportTable.parse(t.serialize(fmt), fmt).rows == t.rows

    def test_nan_becomes_missing(self):
        t = ReportTable()
        t.add(description="x", method="y", p_value=math.nan)
        assert t.records()[0]["p_value"] is None
        assert "\tNA" in t.to_tsv()
        assert json.loads(t.to_json())["rows"][0]["p_value"] is None

    @pytest.mark.parametrize(
        "bad",
        ["", "# scale: or\nfoo\tbar\n", "# scale: or\n" + "\t".join(c for c, _ in FIT_COLUMNS) + "\nx\ty\n"],
    )
    def test_malformed_tsv(self, bad):
        with pytest.raises(ReportError):
            ReportTable.from_tsv(bad)

    def test_interval_order_enforced(self):
        with pytest.raises(ReportError):
            ReportTable().add(description="x", method="y", estimate=2.0, ci_lower=0.0, ci_upper=1.0)

    def test_tab_in_text_rejected(self):
        t = ReportTable()
        t.add(description="a\tb", method="y")
        with pytest.raises(ReportError):
            t.to_tsv()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "metabias", "fit", "--dataset", "clopidogrel", "--method", "reml"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert ReportTable.from_tsv(res.stdout).find(method="REML")
