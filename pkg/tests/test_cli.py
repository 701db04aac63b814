import json
import subprocess
import sys

import pytest

from declassify.cli import run

PY = [sys.executable, "-m", "declassify.cli"]


def cli(capsys, *argv):
    code = run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_running_example_json(capsys, fixtures):
    code, out, _ = cli(capsys, "analyze", "--facts", fixtures / "running_example.facts",
                       "--vtables", fixtures / "running_example.vt", "--format", "json")
    assert code == 0
    obj = json.loads(out)
    assert [(e["derived"], e["base"], e["kind"], e.get("offset")) for e in obj["edges"]] == [
        ("0x401228", "0x401208", "primary", None), ("0x401228", "0x401260", "secondary", 16)]
    assert "0x401278" in obj["nodes"]


def test_unknown_subcommand(capsys):
    code, _, err = cli(capsys, "frobnicate")
    assert code == 1 and "usage" in err


def test_no_subcommand(capsys):
    code, _, err = cli(capsys)
    assert code == 1 and "usage" in err


def test_facts_without_vtables_is_usage(capsys, fixtures):
    code, _, err = cli(capsys, "analyze", "--facts", fixtures / "running_example.facts")
    assert code == 1 and "--vtables" in err


def test_parse_error_exit_2(capsys, tmp_path, fixtures):
    bad = tmp_path / "bad.facts"
    bad.write_text("V nonsense\n")
    code, out, err = cli(capsys, "analyze", "--facts", bad, "--vtables", fixtures / "running_example.vt")
    assert code == 2 and out == "" and "ParseError" in err


def test_missing_file_exit_2(capsys, tmp_path):
    code, _, _ = cli(capsys, "sections", tmp_path / "absent")
    assert code == 2


def test_not_elf_exit_2(capsys, fixtures):
    code, _, err = cli(capsys, "vtables", fixtures / "running_example.facts")
    assert code == 2 and "NotElf" in err


def test_bad_gen_config_exit_2(capsys):
    code, _, err = cli(capsys, "gen", "--inlining", "2")
    assert code == 2 and "InvalidConfig" in err


def test_invariant_violation_exit_3(capsys, fixtures, monkeypatch):
    from declassify import cht
    from declassify.errors import InvariantViolation

    def boom(*a, **k):
        raise InvariantViolation("forced")

    monkeypatch.setattr(cht, "build_cht", boom)
    code, _, _ = cli(capsys, "analyze", "--facts", fixtures / "running_example.facts",
                     "--vtables", fixtures / "running_example.vt")
    assert code == 3


def test_sections(capsys, fixtures):
    code, out, _ = cli(capsys, "sections", fixtures / "aliasing")
    assert code == 0
    assert out.splitlines()[0].split("\t")[0] == ".text"


def test_vtables_and_ingest_feed_analyze(capsys, tmp_path, fixtures):
    vt, facts = tmp_path / "z.vt", tmp_path / "z.facts"
    code, out, _ = cli(capsys, "vtables", fixtures / "zoo_O0", "-o", vt)
    assert code == 0 and out.count("\n") == 8
    assert cli(capsys, "ingest", fixtures / "zoo_O0", "-o", facts)[0] == 0
    assert facts.read_text() == (fixtures / "zoo_O0.facts").read_text()
    _, from_files, _ = cli(capsys, "analyze", "--facts", facts, "--vtables", vt, "--format", "json")
    _, from_binary, _ = cli(capsys, "analyze", fixtures / "zoo_O0", "--format", "json")
    assert from_files == from_binary


def test_eval_and_falses(capsys, tmp_path, fixtures):
    out_json = tmp_path / "cht.json"
    cli(capsys, "analyze", fixtures / "aliasing", "--format", "json", "-o", out_json)
    code, out, _ = cli(capsys, "eval", "--cht", out_json, "--gt", fixtures / "aliasing.gt.json", "--falses")
    assert code == 0
    assert "fp=1\n" in out
    assert "actual_false overwrite:0x401010/0,2" in out


def test_bad_cht_json(capsys, tmp_path, fixtures):
    p = tmp_path / "x.json"
    p.write_text("[1, 2")
    code, _, _ = cli(capsys, "eval", "--cht", p, "--gt", fixtures / "aliasing.gt.json")
    assert code == 2


def test_gen_writes_sidecars(capsys, tmp_path):
    prefix = tmp_path / "c"
    assert cli(capsys, "gen", "--classes", "6", "--seed", "0x10", "-o", prefix)[0] == 0
    for ext in (".facts", ".vt", ".gt.json"):
        assert (tmp_path / f"c{ext}").stat().st_size > 0
    code, out, _ = cli(capsys, "analyze", "--facts", f"{prefix}.facts", "--vtables", f"{prefix}.vt",
                       "--format", "json", "-o", tmp_path / "c.cht.json")
    code, out, _ = cli(capsys, "eval", "--cht", tmp_path / "c.cht.json", "--gt", f"{prefix}.gt.json")
    assert "fp=0\n" in out and "recall=1.000000\n" in out


def test_classify_and_ola(capsys, fixtures):
    args = ["--facts", fixtures / "running_example.facts", "--vtables", fixtures / "running_example.vt"]
    code, out, _ = cli(capsys, "classify", *args)
    assert code == 0 and out == "0x401000 ctor owner=0x401228 coi=4\n"
    code, out, _ = cli(capsys, "ola", *args)
    assert code == 0 and out.count("class ") == 4


def test_verbose_after_subcommand(capsys, fixtures):
    code, _, err = cli(capsys, "analyze", fixtures / "aliasing", "-v", "-v")
    assert code == 0


def test_entry_point_process(fixtures):
    res = subprocess.run(PY + ["analyze", "--facts", str(fixtures / "running_example.facts"),
                               "--vtables", str(fixtures / "running_example.vt")],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.startswith("digraph cht {")
    res = subprocess.run(PY + ["nope"], capture_output=True, text=True, check=False)
    assert res.returncode == 1


@pytest.mark.parametrize("fmt", ["dot", "json"])
def test_dot_and_json_are_stable(capsys, fixtures, fmt):
    a = cli(capsys, "analyze", fixtures / "zoo_O2", "--format", fmt)
    b = cli(capsys, "analyze", fixtures / "zoo_O2", "--format", fmt)
    assert a == b
