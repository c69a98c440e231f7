import io
import subprocess
import sys

import pytest

from cake_kv import bench, cli
from cake_kv.config import ConfigError, ExperimentConfig, load_experiment, parse_breakpoints, read_ini, trace_from
from cake_kv.model import BandwidthTrace, RequestSpec
from cake_kv.scheduler import run


def write_cfg(tmp_path, body):
    path = tmp_path / "exp.ini"
    path.write_text(body)
    return path


SMALL = """
[profile.tiny]
n_layers = 1
hidden_size = 8
per_token_bytes = 4096

[experiment]
profiles = tiny
context_lengths = 1024, 3000
chunk_size = 256
bandwidths = 100
traces = fluct
power_fractions = 1.0
codecs = identity, quant8
modes = cake, compute_only, io_only
out = out/results.csv
store_root = store

[trace.fluct]
breakpoints = 0:1000, 20:50, 60:400

[calibration.small]
alpha_ms = 5
beta_ms_per_token = 0.002
"""


@pytest.fixture
def small_cfg(tmp_path):
    return write_cfg(tmp_path, SMALL.replace("[experiment]", "[experiment]\ncalibration = small"))


def test_default_matrix_has_144_unique_rows(tmp_path):
    cfg = load_experiment(None, out=tmp_path / "r.csv")
    out = io.StringIO()
    assert bench.cmd_bench(cfg, out=out) == 0
    rows = bench.read_results(tmp_path / "r.csv")
    assert len(rows) == 144
    keys = {(r["profile"], r["context_tokens"], r["trace"], r["power_fraction"], r["codec"], r["mode"]) for r in rows}
    assert len(keys) == 144
    for r in rows:
        assert r["status"] == "ok"
        assert 0 <= float(r["computed_fraction"]) <= 1
        ttft = int(r["ttft_us"])
        assert int(r["compute_busy_us"]) <= ttft and int(r["io_busy_us"]) <= ttft


def test_fixture_row_strictly_dominates(tmp_path):
    cfg = load_experiment(None)
    by_mode = {}
    for spec in cfg.runs():
        if spec.context_tokens == 32768 and spec.trace.name == "10000mbps" and spec.power_fraction == 1.0:
            by_mode[spec.mode] = bench.execute(cfg, spec).report.ttft_us
    assert by_mode["cake"] < by_mode["compute_only"] and by_mode["cake"] < by_mode["io_only"]


def test_bench_is_byte_reproducible(small_cfg, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["bench", "--config", str(small_cfg), "--out", str(a)]) == 0
    assert cli.main(["bench", "--config", str(small_cfg), "--out", str(b), "--parallel"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().startswith(bench.RESULTS_VERSION + "\n")


def test_verbose_writes_event_logs(small_cfg, tmp_path):
    out = tmp_path / "v.csv"
    assert cli.main(["bench", "--config", str(small_cfg), "--out", str(out), "--verbose"]) == 0
    logs = sorted(out.with_suffix(".events").glob("*.csv"))
    rows = bench.read_results(out)
    assert len(logs) == len(rows) == 2 * 2 * 2 * 3
    for log in logs:
        lines = log.read_text().splitlines()
        n_chunks = int(lines[-1].split(",")[2])
        assert len(lines) == 1 + n_chunks + 1


def test_dynamic_trace_collapse_shifts_merge_point(small_cfg):
    cfg = load_experiment(small_cfg)
    rows = [bench.execute(cfg, s) for s in cfg.runs() if s.mode == "cake" and s.codec.id == "identity"]
    merges = {(r.spec.context_tokens, r.spec.trace.name): r.report.merge_point for r in rows}
    for length in cfg.context_lengths:
        fluct = merges[(length, "fluct")]
        assert 0 <= fluct <= RequestSpec(length, 256).n_chunks
    # the collapse to 50 mbps leaves compute with more of the long prompt
    # than a flat 1000 mbps would
    fast = BandwidthTrace.constant(1000)
    spec = next(s for s in cfg.runs() if s.context_tokens == 3000 and s.mode == "cake")
    steady = run(RequestSpec(3000, 256), spec.profile, cfg.calibration, fast).merge_point
    assert merges[(3000, "fluct")] > steady


def test_error_rows_recorded_and_exit_nonzero(small_cfg, tmp_path):
    out = tmp_path / "e.csv"
    code = cli.main(["bench", "--config", str(small_cfg), "--out", str(out), "--mode", "live"])
    assert code == 1
    rows = bench.read_results(out)
    assert len(rows) == 24
    assert all(r["status"].startswith("error:") for r in rows)


def test_populate_oracle_overhead_verbs(small_cfg, capsys):
    assert cli.main(["populate", "--config", str(small_cfg)]) == 0
    text = capsys.readouterr().out
    assert "total bytes written:" in text
    # both prompts come from one seed, so the 1024-token one is a prefix of
    # the 3000-token one: 12 distinct chunks, the last holding 184 tokens
    total = int(text.strip().splitlines()[-1].split(":")[1])
    tokens = 11 * 256 + 184
    assert total == tokens * 4096 + tokens * 2048 + 12 * 4
    assert cli.main(["populate", "--config", str(small_cfg)]) == 0
    assert capsys.readouterr().out.strip().endswith("total bytes written: 0")
    assert cli.main(["oracle", "--config", str(small_cfg)]) == 0
    text = capsys.readouterr().out
    assert "0 over the one-chunk slack" in text and "skip" in text
    assert cli.main(["overhead", "--config", str(small_cfg)]) == 0
    text = capsys.readouterr().out
    assert "fetch-disabled cake steps match compute_only: True" in text


def test_live_bench_after_populate(small_cfg, tmp_path):
    assert cli.main(["populate", "--config", str(small_cfg)]) == 0
    cfg = load_experiment(small_cfg, clock="live")
    spec = next(s for s in cfg.runs() if s.context_tokens == 1024 and s.trace.name == "100mbps" and s.codec.id == "quant8" and s.mode == "cake")
    row = bench.execute(cfg, spec)
    assert row.error == "" and row.report.coverage_ok()


def test_bad_config_exit_code(tmp_path, capsys):
    assert cli.main(["bench", "--config", str(tmp_path / "missing.ini")]) == 2
    bad = write_cfg(tmp_path, "[experiment]\nprofiles = nope\ncontext_lengths = 1024\nbandwidths = 10\n")
    assert cli.main(["bench", "--config", str(bad)]) == 2


def test_config_validation():
    cfg = load_experiment(None)
    with pytest.raises(ConfigError):
        ExperimentConfig(cfg.profiles, cfg.calibration, [100], traces=cfg.traces)
    with pytest.raises(ConfigError):
        ExperimentConfig(cfg.profiles, cfg.calibration, [4096], traces=cfg.traces, modes=["turbo"])
    with pytest.raises(ConfigError):
        ExperimentConfig(cfg.profiles, cfg.calibration, [4096], traces=cfg.traces * 2)
    with pytest.raises(ConfigError):
        parse_breakpoints("0-1000")


def test_trace_references(tmp_path):
    csv_path = tmp_path / "net.csv"
    csv_path.write_text("# measured\n0,800\n500,1600\n")
    ini = write_cfg(tmp_path, "[trace.lab]\ncsv = net.csv\n")
    cp = read_ini(ini)
    assert trace_from(cp, "lab").breakpoints == ((0.0, 800.0), (500.0, 1600.0))
    assert trace_from(cp, "lab").name == "lab"
    assert trace_from(cp, "ssd").rate_at(0) == 10000
    assert trace_from(cp, "2500").name == "2500mbps"
    assert trace_from(cp, str(csv_path)).name == "net"
    assert trace_from(cp, "fluctuating").rate_at(2000) == 2000
    with pytest.raises(ConfigError):
        trace_from(cp, "no-such-trace")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cake_kv", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("populate", "bench", "oracle", "overhead"):
        assert verb in res.stdout
