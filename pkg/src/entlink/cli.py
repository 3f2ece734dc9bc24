"""Command-line front end: ``entlink {simulate,analyze,net,replay}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import timetag
from .analysis import SyncedPairs, bell_analysis, extract_pairs, qkd_analysis
from .bell import Correlation, chsh_s
from .net.session import (
    AliceReceiver,
    EpochDisagreementError,
    FaultInjector,
    NetworkError,
    stream_tags,
)
from .scenario import Scenario, ScenarioError, load_scenario
from .simulate import simulate_run
from .sync import SyncError, coincidence_histogram

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_SYNC = 4
EXIT_KEY = 5
EXIT_NETWORK = 6
EXIT_EPOCH = 7

# published correlations, in the order E(a,b), E(a,b'), E(a',b), E(a',b')
TABLE1 = ((-0.775, 0.015), (0.486, 0.020), (-0.435, 0.023), (-0.812, 0.014))

log = logging.getLogger("entlink")


class KeyFailure(RuntimeError):
    pass


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "duration", None) is not None:
        changes["duration_s"] = args.duration
    return sc.replace(**changes) if changes else sc


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args) or Path(".")
    alice, bob, truth = simulate_run(sc)
    timetag.save(alice, out / "alice.etag")
    timetag.save(bob, out / "bob.etag")
    summary = f"scenario = {sc.name}\n" + truth.summary()
    (out / "truth.txt").write_text(summary)
    sys.stdout.write(summary)
    return EXIT_OK


def render_report(sc: Scenario, synced: SyncedPairs, mode: str) -> tuple[str, dict[str, str]]:
    """Text report plus CSV files for one analysis mode."""
    text = synced.sync_report()
    files: dict[str, str] = {}
    if mode == "bell":
        bell = bell_analysis(synced.pairs, sc)
        text += bell.report()
        files["bell.csv"] = bell.csv()
    elif mode == "qkd":
        res = qkd_analysis(synced.pairs, sc)
        text += res.report()
        files["qkd.txt"] = res.report() + (res.ledger.dump() if res.ledger else "")
        if res.transcript is not None:
            files["transcript.txt"] = res.transcript.dump()
        if res.alice_key is not None:
            files["key.txt"] = res.alice_key.hex() + "\n"
        if res.exhausted:
            files["error"] = res.exhausted
    return text, files


def _write(out: Path | None, files: dict[str, str]) -> None:
    failure = files.pop("error", None)
    if out is not None:
        for name, body in files.items():
            (out / name).write_text(body)
    if failure:
        raise KeyFailure(failure)


def cmd_analyze(args) -> int:
    sc = _scenario(args)
    a = timetag.load(args.alice)
    b = timetag.load(args.bob)
    window = args.window if args.window is not None else sc.analysis.window_s
    out = _out_dir(args)
    synced = extract_pairs(a, b, sc.analysis, window_s=window)
    if args.mode == "histogram":
        hist = coincidence_histogram(a, b, synced.clock, args.span, args.bin)
        csv = hist.to_csv()
        if out is None:
            sys.stdout.write(csv)
        _write(out, {"histogram.csv": csv})
        return EXIT_OK
    text, files = render_report(sc, synced, args.mode)
    sys.stdout.write(text)
    _write(out, files)
    return EXIT_OK


def cmd_net(args) -> int:
    sc = _scenario(args)
    if args.tags:
        stream = timetag.load(args.tags)
    else:
        alice, bob, _ = simulate_run(sc)
        stream = alice if args.role == "alice" else bob
    window = args.window if args.window is not None else sc.analysis.window_s
    if args.role == "bob":
        faults = FaultInjector(args.loss, seed=sc.seed) if args.loss > 0 else None
        rep = stream_tags(stream, args.endpoint, batch_size=args.batch, faults=faults,
                          connect_timeout_s=args.timeout, session_timeout_s=args.timeout)
        st = rep.alice_stats
        sys.stdout.write(
            f"batches = {rep.batches}\ntags_sent = {rep.tags_sent}\n"
            f"retransmissions = {rep.retransmissions}\nreconnects = {rep.reconnects}\n"
            f"live_rate_cps = {st.live_rate_cps if st else 0.0:.3f}\n"
        )
        return EXIT_OK
    host, _, port = args.endpoint.rpartition(":")
    receiver = AliceReceiver(stream, sc.analysis, host=host or "127.0.0.1", port=int(port), window_s=window)
    try:
        rx = receiver.serve(args.timeout)
    finally:
        receiver.close()
    engine = rx.engine
    if engine.estimate is None or engine.phase != "locked":
        raise SyncError(f"session ended in phase {engine.phase}: {engine.error}")
    st = rx.bob_stats
    log.info("batches %d, reconnects %d, retransmissions %d", rx.batches, rx.reconnects,
             st.retransmissions if st else 0)
    text, files = render_report(sc, engine.result(), args.mode)
    sys.stdout.write(text)
    _write(_out_dir(args), files)
    return EXIT_OK


def cmd_replay(args) -> int:
    corr = [Correlation(e, s) for e, s in TABLE1]
    res = chsh_s(*corr)
    sys.stdout.write(
        "E(0,22.5) = -0.775 +- 0.015\nE(0,67.5) = +0.486 +- 0.020\n"
        "E(45,22.5) = -0.435 +- 0.023\nE(45,67.5) = -0.812 +- 0.014\n"
        f"S = {res.s_value:+.3f} +- {res.sigma_s:.4f}   |S| = {res.abs_s:.3f}\n"
        f"violation = {res.violation_sigmas:.1f} sigma\n"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="entlink", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a run and write alice.etag, bob.etag, truth.txt")
    s.add_argument("--scenario", default="paper-144km", help="bundled name or TOML path")
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="synchronise two tag files and report")
    a.add_argument("alice")
    a.add_argument("bob")
    a.add_argument("--mode", choices=("bell", "qkd", "histogram"), default="bell")
    a.add_argument("--scenario", default="paper-144km", help="supplies analyzer settings and analysis options")
    a.add_argument("--window", type=float, help="coincidence window in seconds")
    a.add_argument("--span", type=float, default=40e-9, help="histogram span in seconds")
    a.add_argument("--bin", type=float, default=2 * timetag.TICK_S, help="histogram bin in seconds")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    n = sub.add_parser("net", help="run one side of a two-node session")
    n.add_argument("--role", choices=("alice", "bob"), required=True)
    n.add_argument("--endpoint", required=True, help="host:port (Alice listens, Bob connects)")
    n.add_argument("--scenario", default="paper-144km")
    n.add_argument("--seed", type=int)
    n.add_argument("--duration", type=float)
    n.add_argument("--tags", help="recorded .etag for this role instead of simulating")
    n.add_argument("--mode", choices=("bell", "qkd"), default="bell")
    n.add_argument("--window", type=float)
    n.add_argument("--batch", type=int, default=4096)
    n.add_argument("--loss", type=float, default=0.0, help="inject TAG_BATCH frame loss (Bob)")
    n.add_argument("--timeout", type=float, default=30.0)
    n.add_argument("--out")
    n.set_defaults(func=cmd_net)

    r = sub.add_parser("replay", help="recompute S from the published correlation table")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, timetag.TagFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except SyncError as exc:
        print(f"sync error: {exc}", file=sys.stderr)
        return EXIT_SYNC
    except KeyFailure as exc:
        print(f"key error: {exc}", file=sys.stderr)
        return EXIT_KEY
    except EpochDisagreementError as exc:
        print(f"handshake error: {exc}", file=sys.stderr)
        return EXIT_EPOCH
    except (NetworkError, OSError) as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK


if __name__ == "__main__":
    sys.exit(main())
