import csv
import filecmp
import io
import math
import subprocess
import sys
from dataclasses import replace

import pytest

from aggrisk.cli import BENCH_COLUMNS, main
from aggrisk.engine import run_query, sequential_oracle
from aggrisk.genio import StepSpec, build_step_yet, load_dataset
from aggrisk.querylang import compile_query, parse_query

FLORIDA = (
    "SELECT VAR(0.01) FROM PORTFOLIO WHERE lob IN ('commercial') AND region IN ('FL') "
    "AND peril IN ('HU','FLD') GROUP BY season"
)
GEN = ["generate", "--trials", "60", "--events", "10", "--layers", "8", "--elts-per-layer", "3", "--catalogue", "40"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(GEN + ["--seed", "42", "--out", str(out)]) == 0
    return out


def _body(text):
    return [line for line in text.splitlines() if not line.startswith("#")]


def test_generate_repeatable(data_dir, tmp_path):
    again = tmp_path / "again"
    assert main(GEN + ["--seed", "42", "--out", str(again)]) == 0
    names = sorted(p.name for p in data_dir.iterdir())
    _, mismatch, errors = filecmp.cmpfiles(data_dir, again, names, shallow=False)
    assert not mismatch and not errors
    assert "manifest.txt" in names


def test_generate_missing_out_is_usage_error(capsys):
    assert main(["generate", "--trials", "5"]) == 2
    assert "--out" in capsys.readouterr().err


def test_generate_bad_config(tmp_path):
    assert main(["generate", "--trials", "0", "--out", str(tmp_path / "x")]) == 2


def test_query_engine_equals_oracle(data_dir, capsys):
    assert main(["query", "--data", str(data_dir), "--sql", FLORIDA, "--workers", "4"]) == 0
    engine = capsys.readouterr().out
    assert main(["query", "--data", str(data_dir), "--sql", FLORIDA, "--oracle"]) == 0
    assert capsys.readouterr().out == engine
    assert "season=1" in engine


def test_query_mean_single_total_row(data_dir, capsys):
    assert main(["query", "--data", str(data_dir), "--sql", "SELECT MEAN FROM PORTFOLIO"]) == 0
    body = _body(capsys.readouterr().out)
    assert body[0] == "group_key,statistic,x,value"
    assert len(body) == 2 and body[1].startswith("TOTAL,mean,,")


def test_query_from_file_to_file(data_dir, tmp_path):
    qfile = tmp_path / "q.sql"
    qfile.write_text("SELECT STATS\nFROM PORTFOLIO\nGROUP BY region\n")
    out = tmp_path / "report.csv"
    assert main(["query", "--data", str(data_dir), "--query", str(qfile), "--out", str(out)]) == 0
    assert "region=" in out.read_text()


def test_query_parse_error_exit_3(data_dir, capsys):
    assert main(["query", "--data", str(data_dir), "--sql", "SELECT MEAN FRM PORTFOLIO"]) == 3
    err = capsys.readouterr().err.splitlines()
    assert err[0] == "SELECT MEAN FRM PORTFOLIO"
    assert err[1] == " " * 12 + "^"


def test_query_semantic_error_exit_3(data_dir):
    assert main(["query", "--data", str(data_dir), "--sql", "SELECT VAR(1.5) FROM PORTFOLIO"]) == 3


def test_query_data_errors_exit_4(data_dir, tmp_path):
    assert main(["query", "--data", str(tmp_path / "missing"), "--sql", "SELECT MEAN FROM PORTFOLIO"]) == 4
    broken = tmp_path / "broken"
    broken.mkdir()
    for p in data_dir.iterdir():
        (broken / p.name).write_bytes(p.read_bytes())
    lines = (broken / "yet.csv").read_text().splitlines()
    lines[3] = "1,1,3,1.5"
    (broken / "yet.csv").write_text("\n".join(lines) + "\n")
    assert main(["query", "--data", str(broken), "--sql", "SELECT MEAN FROM PORTFOLIO"]) == 4


def test_query_requires_text(data_dir):
    assert main(["query", "--data", str(data_dir)]) == 2


def test_query_marginal(data_dir, capsys):
    sql = "SELECT MEAN FROM PORTFOLIO WHERE layer_id IN (1, 2) MARGINAL (3, 4)"
    assert main(["query", "--data", str(data_dir), "--sql", sql, "--workers", "2"]) == 0
    engine = capsys.readouterr().out
    assert main(["query", "--data", str(data_dir), "--sql", sql, "--oracle"]) == 0
    assert capsys.readouterr().out == engine
    labels = {row.split(",")[0] for row in _body(engine)[1:]}
    assert {"subset=none;TOTAL", "subset=3+4;TOTAL", "delta=3;TOTAL", "delta=4;TOTAL"} <= labels


def _step_report(ds, events, trials, seed, sql):
    step = replace(ds, yet=build_step_yet(StepSpec(tuple(events), trials), seed))
    return sequential_oracle(compile_query(parse_query(sql), step, sql), step)


def _event_loss(ds, event):
    return _step_report(ds, [(event, 1.0)], 1, 0, "SELECT MEAN FROM PORTFOLIO").value("mean")


def test_step_single_event_distribution(data_dir, capsys):
    ds = load_dataset(data_dir)
    sql = "SELECT DISTRIBUTION FROM PORTFOLIO WITH SECONDARY UNCERTAINTY"
    args = ["step", "--data", str(data_dir), "--events", "5:1", "--trials", "200", "--seed", "3", "--sql", sql]
    assert main(args) == 0
    assert capsys.readouterr().out == _step_report(ds, [(5, 1.0)], 200, 3, sql).to_csv()


def test_step_two_equal_events_mean(data_dir, capsys):
    ds = load_dataset(data_dir)
    losses = {e: _event_loss(ds, e) for e in range(1, 41)}
    a, b = sorted(losses, key=losses.get)[0], sorted(losses, key=losses.get)[-1]
    assert losses[a] != losses[b]
    n = 20_000
    args = ["step", "--data", str(data_dir), "--events", f"{a}:1,{b}:1", "--trials", str(n), "--sql",
            "SELECT MEAN FROM PORTFOLIO"]  # fmt: skip
    assert main(args) == 0
    body = _body(capsys.readouterr().out)
    mean = float(body[1].split(",")[-1])
    sigma = abs(losses[a] - losses[b]) / 2 / math.sqrt(n)
    assert abs(mean - (losses[a] + losses[b]) / 2) <= 3 * sigma


def test_step_default_query_reports_stats(data_dir, capsys):
    assert main(["step", "--data", str(data_dir), "--events", "2:1,7:2", "--trials", "50"]) == 0
    stats = {row.split(",")[1] for row in _body(capsys.readouterr().out)[1:]}
    assert stats == {"mean", "variance", "min", "max", "quantile"}


def test_step_errors(data_dir):
    assert main(["step", "--data", str(data_dir), "--events", "", "--trials", "5"]) == 2
    assert main(["step", "--data", str(data_dir), "--events", "3:0", "--trials", "5"]) == 2
    assert main(["step", "--data", str(data_dir), "--events", "99999:1", "--trials", "5"]) == 4


def _bench_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_bench_workers_list(data_dir, capsys):
    args = ["bench", "--data", str(data_dir), "--workers-list", "1,2,4", "--layers-list", "8", "--repeats", "3"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(BENCH_COLUMNS)
    rows = _bench_rows(out)
    totals = [r for r in rows if r["phase"] == "total"]
    assert [int(r["workers"]) for r in totals] == [1, 2, 4]
    for t in totals:
        parts = [float(r["seconds"]) for r in rows if r["workers"] == t["workers"] and r["phase"] != "total"]
        assert all(p >= 0 for p in parts) and float(t["seconds"]) > 0
        # medians of parts need not add to the median total; allow for that and timer resolution
        assert sum(parts) <= 1.5 * float(t["seconds"]) + 1e-3


def test_bench_generated_layers(tmp_path):
    out = tmp_path / "bench.csv"
    args = ["bench", "--trials", "30", "--events", "5", "--layers-list", "4,8", "--repeats", "1", "--out", str(out)]
    assert main(args) == 0
    rows = _bench_rows(out.read_text())
    assert sorted({int(r["layers"]) for r in rows}) == [4, 8]
    assert {r["trials"] for r in rows} == {"30"}


def test_bench_too_many_layers(data_dir):
    assert main(["bench", "--data", str(data_dir), "--layers-list", "999", "--repeats", "1"]) == 2


def test_module_entry_point(data_dir):
    proc = subprocess.run(
        [sys.executable, "-m", "aggrisk", "query", "--data", str(data_dir), "--sql", "SELECT MEAN FROM PORTFOLIO"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0 and "TOTAL,mean" in proc.stdout
    ds = load_dataset(data_dir)
    plan = compile_query(parse_query("SELECT MEAN FROM PORTFOLIO"), ds, "SELECT MEAN FROM PORTFOLIO")
    assert proc.stdout == run_query(plan, ds).to_csv()
