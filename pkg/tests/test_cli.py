import socket
import threading

import numpy as np
import pytest

from entlink import timetag
from entlink.cli import (
    EXIT_EPOCH,
    EXIT_KEY,
    EXIT_NETWORK,
    EXIT_OK,
    EXIT_SCHEMA,
    EXIT_SYNC,
    EXIT_USAGE,
    main,
)
from entlink.timetag import BOB, TagStream

SHORT = """\
name = "short"
duration_s = 12.0
seed = 5
[source]
pair_prob_per_pulse = 0.0277
local_coupling_eff = 0.145
multi_pair = true
[channel]
link_loss_db = 22.0
background_cps_per_detector = 50.0
[alice.detector]
efficiency = 1.0
dark_cps = 200.0
jitter_sigma_s = 400e-12
[bob.detector]
efficiency = 0.25
dark_cps = 200.0
jitter_sigma_s = 400e-12
[bob.clock]
offset_s = 487e-6
[bob.analyzer]
angles = [22.5, 67.5]
[analysis]
segment_s = 5.0
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "short.toml").write_text(SHORT)
    assert main(["simulate", "--scenario", str(d / "short.toml"), "--out", str(d / "run")]) == EXIT_OK
    return d


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_simulate_writes_outputs(run_dir):
    run = run_dir / "run"
    assert {p.name for p in run.iterdir()} == {"alice.etag", "bob.etag", "truth.txt"}
    assert "bob_clock = offset 0.000487 s" in (run / "truth.txt").read_text()


def test_simulate_is_deterministic(run_dir):
    again = run_dir / "again"
    assert main(["simulate", "--scenario", str(run_dir / "short.toml"), "--out", str(again),
                 "--duration", "12"]) == EXIT_OK
    for name in ("alice.etag", "bob.etag", "truth.txt"):
        assert (again / name).read_bytes() == (run_dir / "run" / name).read_bytes()


def test_seed_changes_output(run_dir, tmp_path):
    assert main(["simulate", "--scenario", str(run_dir / "short.toml"), "--out", str(tmp_path),
                 "--seed", "6", "--duration", "0.5"]) == EXIT_OK
    assert (tmp_path / "truth.txt").read_text().splitlines()[2] == "seed = 6"


def test_analyze_bell(run_dir, tmp_path, capsys):
    run = run_dir / "run"
    rc = main(["analyze", str(run / "alice.etag"), str(run / "bob.etag"),
               "--scenario", str(run_dir / "short.toml"), "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    assert "offset_s = 0.00048" in out and "|S| = " in out
    s = float(out.split("|S| = ")[1].split()[0])
    assert 2.3 < s < 2.9
    rows = (tmp_path / "bell.csv").read_text().splitlines()
    assert len(rows) == 5


def test_analyze_histogram_csv(run_dir, capsys):
    run = run_dir / "run"
    rc = main(["analyze", str(run / "alice.etag"), str(run / "bob.etag"),
               "--scenario", str(run_dir / "short.toml"), "--mode", "histogram"])
    lines = capsys.readouterr().out.splitlines()
    assert rc == EXIT_OK
    assert lines[0] == "bin_center_s,count"
    data = np.array([[float(x) for x in line.split(",")] for line in lines[1:]])
    assert data[:, 0].min() < -19e-9 and data[:, 0].max() > 19e-9
    assert abs(data[np.argmax(data[:, 1]), 0]) < 0.5e-9


def test_analyze_qkd_exhausted_key(run_dir, tmp_path, capsys):
    # Bell analyzer angles give a high QBER, so privacy amplification leaves nothing
    run = run_dir / "run"
    rc = main(["analyze", str(run / "alice.etag"), str(run / "bob.etag"),
               "--scenario", str(run_dir / "short.toml"), "--mode", "qkd", "--out", str(tmp_path)])
    captured = capsys.readouterr()
    assert rc == EXIT_KEY
    assert "key exhausted" in captured.err
    assert (tmp_path / "qkd.txt").exists()


def test_analyze_unrelated_streams_is_sync_error(run_dir, tmp_path, capsys):
    rng = np.random.default_rng(0)
    ticks = np.sort(rng.integers(0, int(12 / timetag.TICK_S), 2000)).astype(np.uint64)
    noise = TagStream(BOB, 1_000_000_000, ticks, rng.integers(0, 4, ticks.size))
    timetag.save(noise, tmp_path / "noise.etag")
    rc = main(["analyze", str(run_dir / "run" / "alice.etag"), str(tmp_path / "noise.etag"),
               "--scenario", str(run_dir / "short.toml")])
    assert rc == EXIT_SYNC
    assert "sync error" in capsys.readouterr().err


def test_corrupt_tag_file_is_schema_error(run_dir, tmp_path, capsys):
    bad = tmp_path / "bad.etag"
    bad.write_bytes(b"not a tag file at all")
    rc = main(["analyze", str(run_dir / "run" / "alice.etag"), str(bad)])
    assert rc == EXIT_SCHEMA
    assert "error" in capsys.readouterr().err


def test_scenario_error_carries_line(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text('name = "x"\nduration_s = 1.0\nfrobnicate = 2\n')
    assert main(["simulate", "--scenario", str(p), "--out", str(tmp_path)]) == EXIT_SCHEMA
    assert f"{p}:3:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["simulate", "--seed", "x"], ["analyze"], ["net", "--role", "carol",
                                                                                   "--endpoint", "h:1"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == EXIT_USAGE


def test_replay(capsys):
    assert main(["replay"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "|S| = 2.508" in out
    sigma = float(out.split("S = -2.508 +- ")[1].split()[0])
    assert sigma == pytest.approx(0.037, abs=5e-4)
    assert "violation = 13." in out


def test_net_unreachable_endpoint(run_dir, capsys):
    port = _free_port()
    rc = main(["net", "--role", "bob", "--endpoint", f"127.0.0.1:{port}",
               "--tags", str(run_dir / "run" / "bob.etag"), "--timeout", "0.5"])
    assert rc == EXIT_NETWORK
    assert "network error" in capsys.readouterr().err


def test_net_loopback_matches_analyze(run_dir, tmp_path):
    run = run_dir / "run"
    scenario = str(run_dir / "short.toml")
    port = _free_port()
    endpoint = f"127.0.0.1:{port}"
    result = {}

    def alice():
        result["rc"] = main(["net", "--role", "alice", "--endpoint", endpoint, "--scenario", scenario,
                             "--tags", str(run / "alice.etag"), "--out", str(tmp_path / "live"),
                             "--timeout", "60"])

    t = threading.Thread(target=alice)
    t.start()
    rc_bob = main(["net", "--role", "bob", "--endpoint", endpoint, "--scenario", scenario,
                   "--tags", str(run / "bob.etag"), "--batch", "1000", "--loss", "0.05", "--timeout", "60"])
    t.join(90)
    assert rc_bob == EXIT_OK and result["rc"] == EXIT_OK
    assert main(["analyze", str(run / "alice.etag"), str(run / "bob.etag"), "--scenario", scenario,
                 "--out", str(tmp_path / "offline")]) == EXIT_OK
    live = (tmp_path / "live" / "bell.csv").read_text()
    assert live == (tmp_path / "offline" / "bell.csv").read_text()


def test_net_epoch_disagreement(run_dir, tmp_path, capsys):
    bob = timetag.load(run_dir / "run" / "bob.etag")
    shifted = TagStream(BOB, bob.epoch + 5, bob.ticks[:100], bob.channels[:100])
    timetag.save(shifted, tmp_path / "late.etag")
    endpoint = f"127.0.0.1:{_free_port()}"
    result = {}

    def alice():
        result["rc"] = main(["net", "--role", "alice", "--endpoint", endpoint,
                             "--tags", str(run_dir / "run" / "alice.etag"), "--timeout", "20"])

    t = threading.Thread(target=alice)
    t.start()
    rc_bob = main(["net", "--role", "bob", "--endpoint", endpoint, "--tags", str(tmp_path / "late.etag"),
                   "--timeout", "20"])
    t.join(30)
    assert EXIT_EPOCH in (rc_bob, result["rc"])
