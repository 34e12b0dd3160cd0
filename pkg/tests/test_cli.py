import hashlib

import pytest

from pmo import PersistenceModel, PmoSystem, parse_inspect
from pmo.cli import main, mkpmo_main, parse_size
from pmo.harness import STANDARD_SCRIPT
from pmo.pmem import MappedDevice


def run(capsys, argv, entry=main):
    code = entry(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("text,value", [("16MiB", 16 << 20), ("8KiB", 8192), ("1GiB", 1 << 30),
                                        ("4096", 4096), ("2m", 2 << 20)])
def test_parse_size(text, value):
    assert parse_size(text) == value


def test_mkpmo_and_inspect(tmp_path, capsys):
    img = str(tmp_path / "img")
    code, out, _ = run(capsys, ["--device", img, "--size", "1MiB", "--name", "lab",
                                "--max-pmos", "16"], mkpmo_main)
    assert code == 0 and "allocated_count 0" in out
    code, out, _ = run(capsys, ["inspect", "--device", img])
    info = parse_inspect(out.splitlines())
    assert code == 0
    assert info["header"]["magic"] == "PMOSYS01" and info["header"]["name"] == "lab"
    assert info["header"]["max_pmos"] == 16 and info["header"]["total_size"] == 1 << 20
    assert info["entries"] == []


def test_mkpmo_too_small(tmp_path, capsys):
    code, _, err = run(capsys, ["mkpmo", "--device", str(tmp_path / "i"), "--size", "8KiB",
                                "--max-pmos", "64"])
    assert code == 1 and "cannot hold" in err


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["inspect"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--device", str(tmp_path / "b"), "--workload", "fileserver"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_inspect_unformatted(tmp_path, capsys):
    p = tmp_path / "blank"
    p.write_bytes(bytes(64 * 1024))
    assert run(capsys, ["inspect", "--device", str(p)])[0] == 1


def test_inspect_entries_and_non_mutating(tmp_path, capsys):
    img = tmp_path / "img"
    run(capsys, ["mkpmo", "--device", str(img), "--size", "1MiB"])
    with MappedDevice(img) as dev:
        s = PmoSystem.open(dev)
        s.pcreate("A", 4096, 1)
        s.pcreate("B", 8192, 1)
    before = hashlib.sha256(img.read_bytes()).hexdigest()
    code, out, _ = run(capsys, ["inspect", "--device", str(img)])
    assert hashlib.sha256(img.read_bytes()).hexdigest() == before
    ents = parse_inspect(out.splitlines())["entries"]
    assert sorted((e["name"], e["state"]) for e in ents) == [("A", "D"), ("B", "D")]


def test_crashtest_standard_then_recover(tmp_path, capsys):
    script = tmp_path / "s.txt"
    script.write_text(STANDARD_SCRIPT)
    img = tmp_path / "c.img"
    code, out, _ = run(capsys, ["crashtest", "--device", str(img), "--script", str(script)])
    assert code == 0
    assert "violations 0" in out and "distinct_states pmo A 3" in out
    assert "idempotence pass" in out
    code, out, _ = run(capsys, ["recover", "--device", str(img)])
    assert code == 0 and "recover A state D action none" in out


def test_crashtest_mutant_writes_violating_image(tmp_path, capsys):
    script = tmp_path / "s.txt"
    script.write_text(STANDARD_SCRIPT)
    img = tmp_path / "c.img"
    code, out, _ = run(capsys, ["crashtest", "--device", str(img), "--script", str(script),
                                "--mutate", "drop-fence-4"])
    assert code == 1
    assert "VIOLATION" in out and "minimized steps" in out
    steps = int(out.split("minimized steps ")[1].split()[0])
    assert steps <= 5


def test_crashtest_parse_error_and_empty(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("create A 4 k1\nexplode A\n")
    code, _, err = run(capsys, ["crashtest", "--device", str(tmp_path / "x"), "--script", str(bad)])
    assert code == 2 and "line 2" in err
    assert run(capsys, ["crashtest", "--device", str(tmp_path / "x"),
                        "--script", str(tmp_path / "missing")])[0] == 2
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    code, out, _ = run(capsys, ["crashtest", "--device", str(tmp_path / "x"), "--script", str(empty)])
    assert code == 0 and out.startswith("schedules 1 ")


def test_recover_c_state_image(tmp_path, capsys):
    from pmo.harness import execute, WorkloadScript
    from pmo.layout import STATE_C
    trace = execute(WorkloadScript.parse(STANDARD_SCRIPT))
    rec = trace.system.stats.psync_log[1]
    k = next(ev.seq for ev in trace.model.event_log[rec.start_seq:]
             if ev.kind.name == "UNCACHED" and ev.data[0] == STATE_C) + 1
    img = tmp_path / "c.img"
    trace.model.state_at(k).crash_image(()).media_snapshot.tofile(img)
    code, out, _ = run(capsys, ["inspect", "--device", str(img)])
    assert parse_inspect(out.splitlines())["entries"][0]["state"] == "C"
    code, out, _ = run(capsys, ["recover", "--device", str(img)])
    assert "recover A state C action copy-shadow-to-primary 3 pages" in out
    code, out, _ = run(capsys, ["inspect", "--device", str(img)])
    assert parse_inspect(out.splitlines())["entries"][0]["state"] == "D"
    code, out, _ = run(capsys, ["recover", "--device", str(img)])
    assert "action none" in out
    prim = PmoSystem.open(PersistenceModel.from_file(img)).read_primary("A")
    assert prim == trace.oracle.committed["A"][2]


def test_bench_linkedlist(tmp_path, capsys):
    code, out, _ = run(capsys, ["bench", "--device", str(tmp_path / "b.img"), "--workload",
                                "linkedlist", "--threads", "2", "--delta-ms", "20",
                                "--duration-s", "0.3", "--size", "256KiB"])
    assert code == 0
    assert "reattach_check ok" in out
    assert int(out.split("list_length ")[1].split()[0]) > 0


def test_bench_randwrite(tmp_path, capsys):
    code, out, _ = run(capsys, ["bench", "--device", str(tmp_path / "b.img"), "--workload",
                                "randwrite", "--delta-ms", "5", "--duration-s", "0.2",
                                "--size", "1MiB"])
    assert code == 0 and "pages_copied_per_psync" in out
