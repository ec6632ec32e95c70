import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from ssm_ptq.cli import _schema, main

GOLDEN = json.loads((Path(__file__).parent / "golden" / "eval_w8_golden.json").read_text())


def _synth(tmp_path, **kw):
    args = [
        "synth", "--d-model", "64", "--layers", "2", "--outlier-frac", "0.01",
        "--magnitude", "50", "--seed", "7", "--out", str(tmp_path / "toy.sptq"),
    ]
    assert main(args) == 0
    return str(tmp_path / "toy.sptq"), str(tmp_path / "toy.json")


def _expected_injected_channels(seed=7, d_inner=128, frac=0.01):
    n = max(1, round(frac * d_inner))
    rng = np.random.default_rng([seed, 1])
    return sorted(int(c) for c in rng.choice(d_inner, n, replace=False))


class TestPipeline:
    def test_synth_calibrate_analyze_recovers_injection(self, tmp_path):
        model, config = _synth(tmp_path)
        stats = str(tmp_path / "stats.json")
        outliers = str(tmp_path / "outliers.json")
        assert main(["calibrate", "--model", model, "--config", config, "--out", stats]) == 0
        assert main(["analyze", "--stats", stats, "--sigma", "6", "--out", outliers]) == 0
        payload = json.loads(Path(outliers).read_text())
        jsonschema.validate(payload, _schema("outliers"))
        expected = _expected_injected_channels()
        in_proj = [r for r in payload["reports"] if r["tap"].endswith("in_proj_out")]
        assert len(in_proj) == 2
        for rep in in_proj:
            assert rep["outlier_channels"] == expected

        csv = Path(outliers).with_suffix(".csv")
        lines = csv.read_text().splitlines()
        assert lines[0] == "tap,channel,absmax"
        assert len(lines) > 100

    def test_quantize_then_eval_meets_golden(self, tmp_path):
        model, config = _synth(tmp_path)
        qpath = str(tmp_path / "toy_w8.sptq")
        report = str(tmp_path / "report.json")
        assert main(["quantize", "--model", model, "--config", config,
                     "--wbits", "8", "--out", qpath]) == 0
        assert main(["eval", "--baseline", model, "--candidate", qpath,
                     "--config", config, "--out", report]) == 0
        rep = json.loads(Path(report).read_text())
        jsonschema.validate(rep, _schema("report"))
        assert rep["config"] == "W8"
        assert rep["metrics"]["cosine"] >= GOLDEN["cosine_min"]

    def test_huge_sigma_finds_nothing(self, tmp_path):
        model, config = _synth(tmp_path)
        stats = str(tmp_path / "stats.json")
        outliers = str(tmp_path / "big.json")
        main(["calibrate", "--model", model, "--config", config, "--out", stats])
        assert main(["analyze", "--stats", stats, "--sigma", "1e9", "--out", outliers]) == 0
        payload = json.loads(Path(outliers).read_text())
        assert all(r["outlier_channels"] == [] for r in payload["reports"])

    def test_ablate_prints_delta(self, tmp_path, capsys):
        model, config = _synth(tmp_path)
        stats = str(tmp_path / "stats.json")
        outliers = str(tmp_path / "outliers.json")
        report = str(tmp_path / "ablate.json")
        main(["calibrate", "--model", model, "--config", config, "--out", stats])
        main(["analyze", "--stats", stats, "--out", outliers])
        assert main(["ablate", "--model", model, "--config", config,
                     "--outliers", outliers, "--scope", "all", "--out", report]) == 0
        out = capsys.readouterr().out
        assert "top1_agreement" in out and "logit_mse" in out
        rep = json.loads(Path(report).read_text())
        jsonschema.validate(rep, _schema("report"))
        assert rep["ablate"] is True
        # zeroing injected outliers devastates the synthetic model
        assert rep["metrics"]["cosine"] < 0.99

    def test_grid_shape_and_schema(self, tmp_path):
        model, config = _synth(tmp_path)
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps([
            {"config": "fp"},
            {"config": "W8", "scope": "mlp"},
            {"config": "W4", "scope": "all"},
            {"config": "W8A8", "scope": "mlp", "alpha": 0.5},
        ]))
        out = str(tmp_path / "reports.json")
        assert main(["grid", "--model", model, "--config", config,
                     "--configs", str(grid), "--out", out]) == 0
        reports = json.loads(Path(out).read_text())
        jsonschema.validate(reports, _schema("report"))
        assert [r["config"] for r in reports] == ["fp", "W8", "W4", "W8A8"]
        assert reports[0]["metrics"]["mse"] == 0.0
        assert reports[0]["metrics"]["top1_agreement"] == 1.0
        assert reports[3]["alpha"] == 0.5 and "smoothing" in reports[3]


class TestDeterminism:
    def test_synth_byte_identical(self, tmp_path):
        a = tmp_path / "a.sptq"
        b = tmp_path / "b.sptq"
        for out in (a, b):
            main(["synth", "--d-model", "32", "--layers", "1", "--outlier-frac", "0.05",
                  "--seed", "3", "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_calibrate_and_analyze_byte_identical(self, tmp_path):
        model, config = _synth(tmp_path)
        outs = []
        for tag in ("1", "2"):
            s = tmp_path / f"s{tag}.json"
            o = tmp_path / f"o{tag}.json"
            main(["calibrate", "--model", model, "--config", config, "--out", str(s)])
            main(["analyze", "--stats", str(s), "--out", str(o)])
            outs.append((s.read_bytes(), o.read_bytes()))
        assert outs[0] == outs[1]

    def test_bare_alpha_flag_defaults_to_half(self, tmp_path):
        from ssm_ptq.archive import load_archive

        model, config = _synth(tmp_path)
        stats = str(tmp_path / "stats.json")
        main(["calibrate", "--model", model, "--config", config, "--out", stats])
        out = str(tmp_path / "qa.sptq")
        assert main(["quantize", "--model", model, "--config", config, "--wbits", "8",
                     "--alpha", "--stats", stats, "--out", out]) == 0
        tensors = load_archive(out)
        assert "layers.0.x_proj.pre_scale" in tensors  # smoothing was applied

    def test_quantize_byte_identical(self, tmp_path):
        model, config = _synth(tmp_path)
        a = tmp_path / "qa.sptq"
        b = tmp_path / "qb.sptq"
        for out in (a, b):
            main(["quantize", "--model", model, "--config", config,
                  "--wbits", "4", "--scope", "all", "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()


class TestExitCodes:
    def test_usage_error_is_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["quantize", "--model", "x.sptq"])  # missing required flags
        assert exc.value.code == 2

    def test_unknown_command_is_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_file_is_1(self, tmp_path, capsys):
        rc = main(["calibrate", "--model", str(tmp_path / "no.sptq"),
                   "--config", str(tmp_path / "no.json"), "--out", str(tmp_path / "s.json")])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_quantize_abits_without_stats_is_1(self, tmp_path, capsys):
        model, config = _synth(tmp_path)
        rc = main(["quantize", "--model", model, "--config", config,
                   "--wbits", "8", "--abits", "8", "--out", str(tmp_path / "q.sptq")])
        assert rc == 1
        assert "--stats" in capsys.readouterr().err

    def test_bad_archive_is_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.sptq"
        bad.write_bytes(b"JUNKJUNKJUNK")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_layers": 1, "d_model": 8, "d_state": 2,
                                   "d_conv": 2, "dt_rank": 1, "vocab_size": 16}))
        rc = main(["calibrate", "--model", str(bad), "--config", str(cfg),
                   "--out", str(tmp_path / "s.json")])
        assert rc == 1
