import csv
import io
import json

import pytest

import main
from src.ppimce.config import DispatchConfig
from src.ppimce.dispatcher import run_program
from src.ppimce.isa import assemble

WALKTHROUGH_ASM = """\
# FreeXOR then four Half-Gates
FREEXOR 0x100, 0x200, 0x204
HALFGATE 0x110, 0x208, 0x20C
HALFGATE 0x120, 0x100, 0x200
HALFGATE 0x130, 0x110, 0x100
HALFGATE 0x140, 0x120, 0x204
"""


def _rows(text):
    return list(csv.reader(io.StringIO(text)))


class TestCli:
    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as err:
            main.main(["gc-bench", "--bogus"])
        assert err.value.code == 2

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as err:
            main.main([])
        assert err.value.code == 2

    def test_gc_bench_relu32(self, capsys):
        assert main.main(["-q", "gc-bench", "--circuit", "relu32", "--units", "16"]) == 0
        header, row = _rows(capsys.readouterr().out)
        assert header[:4] == ["circuit", "gates", "and", "free"]
        assert row[:5] == ["relu32", "33", "32", "1", "16"]
        assert int(row[5]) > 0

    def test_eval_adder(self, capsys):
        assert main.main(["-q", "eval", "--circuit", "adder4", "--inputs", "10100110"]) == 0
        assert capsys.readouterr().out.strip() == "11"

    def test_eval_bad_bits(self, capsys):
        assert main.main(["-q", "eval", "--circuit", "adder4", "--inputs", "101"]) == 1
        assert "error" in capsys.readouterr().err

    def test_he_bench_add(self, capsys):
        assert main.main(["-q", "he-bench", "--op", "add", "--n", "16", "--preset", "toy", "--simulate"]) == 0
        header, row = _rows(capsys.readouterr().out)
        assert header == ["op", "n", "limbs", "cycles", "latency_s", "max_error", "check"]
        assert row[0] == "add" and row[1] == "16" and row[-1] == "pass"

    def test_report_budget(self, capsys):
        assert main.main(["-q", "report"]) == 0
        rows = _rows(capsys.readouterr().out)
        assert rows[-1] == ["total", "", "138.3", "9.4"]

    def test_simulate_walkthrough(self, tmp_path, capsys):
        asm = tmp_path / "walk.asm"
        asm.write_text(WALKTHROUGH_ASM)
        trace_path = tmp_path / "trace.jsonl"
        assert main.main(["-q", "simulate", str(asm), "--units", "2", "--trace", str(trace_path)]) == 0
        out = json.loads(capsys.readouterr().out)
        _, cost = run_program(assemble(WALKTHROUGH_ASM), DispatchConfig(units=2))
        assert out["cycles"]["cycles"] == cost.cycles
        assert len(trace_path.read_text().splitlines()) == 5

    def test_garble_container(self, tmp_path, capsys):
        out = tmp_path / "relu8.pgc"
        assert main.main(["-q", "garble", "--circuit", "relu8", "--out", str(out)]) == 0
        header, row = _rows(capsys.readouterr().out)
        assert row[0] == "relu8"
        assert int(row[3]) == 32 * int(row[2])
        assert out.read_bytes()[:4] == b"PGC1"

    def test_ppml_csv(self, capsys):
        assert main.main(["-q", "--seed", "3", "ppml", "--format", "csv"]) == 0
        rows = _rows(capsys.readouterr().out)
        assert rows[0][0] == "name" and rows[1][0] == "mlp-8-4-2"
        assert ["bandwidth_bps", "compute_s", "comm_s", "total_s"] in rows

    def test_gc_bench_verify(self, capsys):
        assert main.main(["-q", "--seed", "5", "gc-bench", "--circuit", "hamm50", "--verify", "50"]) == 0
        header, row = _rows(capsys.readouterr().out)
        assert header[-1] == "check"
        assert row[0] == "hamm50" and row[2] == "106" and row[-1] == "pass"

    def test_corpus_export(self, tmp_path, capsys):
        assert main.main(["-q", "corpus", "--out", str(tmp_path), "--circuit", "relu32"]) == 0
        header, row = _rows(capsys.readouterr().out)
        assert header == ["circuit", "gates", "and", "xor", "inv", "inputs", "outputs"]
        assert row == ["relu32", "33", "32", "0", "1", "32", "32"]
        assert (tmp_path / "relu32.txt").read_text().splitlines()[0] == "33 65"
        assert json.loads((tmp_path / "MANIFEST.json").read_text())["relu32"]["and"] == 32
