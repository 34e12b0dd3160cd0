"""Command-line tools: ``mkpmo`` and ``pmoctl``.

Exit status is 0 on success, 1 on a violation or a failed operation, and 2 on
usage or parse errors.  Output is plain text, one record per line, with a
fixed field order.
"""

from __future__ import annotations

import argparse
import re
import sys

from .bench import DEFAULT_PMO_SIZE, WORKLOADS, open_bench_device, run_workload
from .errors import ConfigError, PmoError, ScriptError
from .harness import WorkloadScript, minimize, run_exhaustive, run_recovery_idempotence
from .layout import format_device, inspect_lines
from .linkedlist import read_list
from .pmem import MappedDevice
from .store import MUTANTS, PmoSystem, SyncConfig

_UNITS = {"": 1, "b": 1, "k": 1 << 10, "kib": 1 << 10, "m": 1 << 20, "mib": 1 << 20,
          "g": 1 << 30, "gib": 1 << 30}


def parse_size(text: str) -> int:
    m = re.fullmatch(r"\s*(\d+)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"bad size {text!r} (use e.g. 16MiB, 8KiB, 1GiB)")
    return int(m.group(1)) * _UNITS[m.group(2).lower()]


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_mkpmo(args) -> int:
    try:
        with MappedDevice.create(args.device, args.size) as dev:
            format_device(dev, args.name, args.max_pmos)
            for line in inspect_lines(dev):
                print(line)
    except (PmoError, OSError) as exc:
        _err(str(exc))
        return 1
    return 0


def cmd_inspect(args) -> int:
    try:
        with MappedDevice(args.device, sync=False) as dev:
            for line in inspect_lines(dev):
                print(line)
    except (PmoError, OSError) as exc:
        _err(str(exc))
        return 1
    return 0


def cmd_recover(args) -> int:
    try:
        with MappedDevice(args.device) as dev:
            system = PmoSystem.open(dev)
            reports = system.recover_all()
            dev.fence()
    except (PmoError, OSError) as exc:
        _err(str(exc))
        return 1
    for r in reports:
        print(r)
    print(f"recovered {len(reports)}")
    return 0


def cmd_crashtest(args) -> int:
    try:
        with open(args.script) as f:
            script = WorkloadScript.parse(f.read(), seed=args.seed)
    except OSError as exc:
        _err(str(exc))
        return 2
    except ScriptError as exc:
        _err(f"{args.script}: {exc}")
        return 2
    mutations = tuple(args.mutate or ())
    try:
        result = run_exhaustive(script, args.budget, seed=args.seed, mutations=mutations)
        idem = run_recovery_idempotence(script, args.budget, seed=args.seed, mutations=mutations)
    except ScriptError as exc:
        _err(f"{args.script}: {exc}")
        return 2
    except ConfigError as exc:
        _err(str(exc))
        return 2
    bad = result.violations
    print(f"schedules {result.schedules} crash_points {result.crash_points} "
          f"distinct_images {result.distinct_images}")
    for (pmo, k), n in sorted(result.histogram().items(), key=lambda kv: (kv[0][0], kv[0][1])):
        print(f"boundary pmo {pmo} {'absent' if k == -1 else k} count {n}")
    for pmo in sorted(result.trace.oracle.committed):
        print(f"distinct_states pmo {pmo} {len(result.distinct_states(pmo))}")
    print(f"idempotence {'pass' if idem.passed else 'fail'} images {idem.images} "
          f"schedules {idem.schedules} failures {len(idem.failures)}")
    for v in bad[:20]:
        print(v)
    print(f"violations {len(bad)}")

    image = result.trace.model.media
    if bad:
        state = result.trace.model.state_at(bad[0].schedule.crash_seq)
        image = state.crash_image(bad[0].schedule.survivors).media_snapshot
        reduced = minimize(bad[0], script, mutations=mutations, budget=args.budget)
        print(f"minimized steps {len(reduced.script.steps)}")
        print(f"minimized {reduced.verdict}")
        for line in reduced.script.dumps().splitlines():
            print(f"  {line}")
    if args.device:
        with open(args.device, "wb") as f:
            f.write(image.tobytes())
    return 1 if bad or not idem.passed else 0


def cmd_bench(args) -> int:
    try:
        cfg = SyncConfig(args.delta_ms / 1000.0, args.threads)
        dev = open_bench_device(args.device, args.size)
    except (PmoError, OSError) as exc:
        _err(str(exc))
        return 2 if isinstance(exc, ConfigError) else 1
    try:
        system = PmoSystem.open(dev)
        res = run_workload(system, args.workload, cfg, args.duration_s, args.size, args.seed)
        for line in res.lines():
            print(line)
        if args.workload == "linkedlist":
            n = len(read_list(system, f"bench-{args.workload}", "bench"))
            print(f"reattach_check ok nodes {n}")
    except PmoError as exc:
        _err(str(exc))
        return 1
    finally:
        dev.close()
    return 0


def _mkpmo_flags(p):
    p.add_argument("--size", type=parse_size, required=True)
    p.add_argument("--name", default="pmo")
    p.add_argument("--max-pmos", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmoctl", description="Inspect, recover, crash-test "
                                     "and benchmark a PMO device image.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--device", required=True)
        p.set_defaults(func=fn)
        return p

    _mkpmo_flags(add("mkpmo", cmd_mkpmo, "format a device image"))
    add("inspect", cmd_inspect, "print header and entries (read-only)")
    add("recover", cmd_recover, "recover every PMO")
    p = add("crashtest", cmd_crashtest, "exhaustive crash test of a workload script")
    p.add_argument("--script", required=True)
    p.add_argument("--budget", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mutate", action="append", choices=sorted(MUTANTS))
    p = add("bench", cmd_bench, "run a workload with periodic psync")
    p.add_argument("--workload", required=True, choices=WORKLOADS)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--delta-ms", type=float, default=10.0)
    p.add_argument("--duration-s", type=float, default=1.0)
    p.add_argument("--size", type=parse_size, default=DEFAULT_PMO_SIZE,
                   help="PMO size (the image is created to fit if missing)")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def mkpmo_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mkpmo", description="Format a PMO device image.")
    parser.add_argument("--device", required=True)
    _mkpmo_flags(parser)
    return cmd_mkpmo(parser.parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
