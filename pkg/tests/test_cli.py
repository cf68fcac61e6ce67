import csv
import json
from pathlib import Path

import pytest

from pc_lab.cli import main

GOLDEN = Path(__file__).parent / "golden"
CONFIGS = Path(__file__).parents[1] / "configs"


def read_csv(path):
    text = Path(path).read_text(encoding="utf-8")
    meta = [l for l in text.splitlines() if l.startswith("#")]
    rows = list(csv.DictReader(l for l in text.splitlines() if not l.startswith("#")))
    return meta, rows


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


SMALL_DATA = {"source": "synthetic", "d_in": 8, "n_classes": 3,
              "n_train": 120, "n_validation": 30, "n_test": 30}


def test_compare_matches_golden(tmp_path):
    out = tmp_path / "compare.csv"
    assert main(["compare", "--config", str(GOLDEN / "compare_depth6.config.json"),
                 "--out", str(out), "--no-figures"]) == 0
    meta, rows = read_csv(out)
    gmeta, grows = read_csv(GOLDEN / "compare_depth6.csv")
    assert meta == gmeta and len(rows) == len(grows)
    for r, g in zip(rows, grows):
        for col in ("depth", "variant", "gamma", "steps", "rel_steps", "layer", "zero_block_flag"):
            assert r[col] == g[col]
        for col in ("cosine", "global_cosine"):
            assert (r[col] == "") == (g[col] == "")
            if g[col]:
                assert float(r[col]) == pytest.approx(float(g[col]), abs=1e-9)


def test_compare_examples_and_provenance(tmp_path):
    out = tmp_path / "compare.csv"
    main(["compare", "--config", str(GOLDEN / "compare_depth6.config.json"),
          "--out", str(out), "--no-figures"])
    text = out.read_bytes()
    assert b"\r\n" in text and text.startswith(b"# config_sha256: ")
    meta, rows = read_csv(out)
    assert meta[1] == "# seed: 0"
    exact = [r for r in rows if r["gamma"] == "1.0" and r["rel_steps"] == "1.0"]
    assert all(float(r["global_cosine"]) == 1.0 for r in exact)
    short = [r for r in rows if r["rel_steps"] == "0.25"]
    assert all(r["zero_block_flag"] == "true" for r in short if r["layer"] == "0")


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, {"spec": {"depth": 3, "width": 8}, "dataset": SMALL_DATA,
                               "sweep": {"gammas": [0.5, 1.0], "rel_steps": [0.5, 1.0]}})
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["compare", "--config", cfg, "--out", str(a), "--threads", "1", "--no-figures"]) == 0
    assert main(["compare", "--config", cfg, "--out", str(b), "--threads", "1", "--no-figures"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_figure_written_next_to_csv(tmp_path):
    cfg = write_cfg(tmp_path, {"spec": {"depth": 3, "width": 8}, "dataset": SMALL_DATA})
    out = tmp_path / "sub" / "c.csv"
    assert main(["compare", "--config", cfg, "--out", str(out)]) == 0
    assert out.with_suffix(".png").stat().st_size > 0


def test_stdout_when_no_out(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"spec": {"depth": 2, "width": 4}, "dataset": SMALL_DATA})
    assert main(["compare", "--config", cfg]) == 0
    assert "global_cosine" in capsys.readouterr().out


def test_trace_all_match(tmp_path):
    out = tmp_path / "trace.csv"
    assert main(["trace", "--config", str(CONFIGS / "trace.json"), "--out", str(out), "--no-figures"]) == 0
    _, rows = read_csv(out)
    assert len(rows) == 12 and all(r["match_flag"] == "true" for r in rows)
    by = {v: [r["first_nonzero_step"] for r in rows if r["variant"] == v] for v in ("vpc", "fpa")}
    assert by["vpc"] == by["fpa"]


def test_trace_zero_loss(tmp_path):
    out = tmp_path / "trace.csv"
    with pytest.warns(RuntimeWarning, match="zero output loss"):
        assert main(["trace", "--config", str(CONFIGS / "trace.json"), "--zero-loss",
                     "--out", str(out), "--no-figures"]) == 0
    _, rows = read_csv(out)
    assert all(r["first_nonzero_step"] == "never" and r["warning"] for r in rows)


def test_bench(tmp_path):
    cfg = write_cfg(tmp_path, {"spec": {"depth": 3, "width": 16}, "dataset": SMALL_DATA,
                               "batch_size": 8, "repetitions": 3})
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", cfg, "--out", str(out)]) == 0
    _, rows = read_csv(out)
    assert [r["variant"] for r in rows] == ["backprop", "fpa", "zil"]
    assert all(r["bound_satisfied"] == "true" for r in rows)
    assert out.with_suffix(".png").exists()


def test_train_sweep(tmp_path):
    cfg = write_cfg(tmp_path, {"spec": {"depth": 3, "width": 8}, "dataset": SMALL_DATA,
                               "epochs": 2, "sweep": {"variants": ["fpa", "zil"],
                                                      "gammas": [1.0], "rel_steps": [1.0]}})
    out = tmp_path / "train.csv"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    _, rows = read_csv(out)
    finals = {r["variant"]: r for r in rows if r["epoch"] == "final"}
    assert set(finals) == {"backprop", "fpa", "zil"}
    assert finals["zil"]["test_acc"] == finals["backprop"]["test_acc"]
    zil = [r["val_acc"] for r in rows if r["variant"] == "zil" and r["epoch"] != "final"]
    bp = [r["val_acc"] for r in rows if r["variant"] == "backprop" and r["epoch"] != "final"]
    assert zil == bp and len(bp) == 2


def test_train_divergence_exit_3(tmp_path):
    cfg = write_cfg(tmp_path, {"spec": {"depth": 3, "width": 8}, "dataset": SMALL_DATA,
                               "variant": "vpc", "gamma": 40.0, "steps": 30, "epochs": 1})
    out = tmp_path / "train.csv"
    assert main(["train", "--config", cfg, "--out", str(out), "--no-figures"]) == 3
    _, rows = read_csv(out)
    assert rows[-1]["status"] == "diverged"


def test_check_passes(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert len(lines) == 6 and all(l.startswith("PASS") and " tol " in l for l in lines)


def test_check_fault_injection(capsys):
    assert main(["check", "--inject-fault", "pc-vjp-sign"]) == 1
    out = capsys.readouterr().out
    assert any(l.startswith("FAIL") and "Z-IL" in l for l in out.splitlines())


def test_unknown_key_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"gamma": 1.0, "gama": 1.0})
    assert main(["compare", "--config", cfg]) == 2
    assert "gama" in capsys.readouterr().err


def test_nested_field_path_in_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"sweep": {"gammas": [0.0]}})
    assert main(["compare", "--config", cfg]) == 2
    assert "sweep.gammas" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["trace", "--config", str(tmp_path / "nope.json")]) == 2


def test_seed_override_changes_header(tmp_path):
    cfg = write_cfg(tmp_path, {"spec": {"depth": 2, "width": 4}, "dataset": SMALL_DATA})
    out = tmp_path / "c.csv"
    main(["compare", "--config", cfg, "--seed", "5", "--out", str(out), "--no-figures"])
    meta, rows = read_csv(out)
    assert meta[1] == "# seed: 5" and all(r["seed"] == "5" for r in rows)
