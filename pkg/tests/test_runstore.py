import json

import pytest

from src.ppimce import runstore
from src.ppimce.dispatcher import ScheduleRecord
from src.ppimce.errors import DomainError
from src.ppimce.isa import CInst, CInstKind


def _records():
    return [
        ScheduleRecord(0, CInst(CInstKind.FREEXOR, 0x100, 0x200, 0x204), 3, submit=1, issue=1, complete=3, unit=0),
        ScheduleRecord(1, CInst(CInstKind.HALFGATE, 0x110, 0x208, 0x20C), 45, submit=2, issue=2, complete=46,
                       unit=1),
        ScheduleRecord(2, CInst(CInstKind.HALFGATE, 0x120, 0x100, 0x200), 45, submit=3, issue=4, complete=48,
                       unit=0, banked=True),
    ]


class TestRunStore:
    @pytest.mark.asyncio
    async def test_schedule_roundtrip(self, runs_db):
        await runstore.init_runs_db(runs_db)
        run_id = await runstore.create_run("walk", "simulate", {"units": 2}, db_path=runs_db)
        assert await runstore.write_schedule(run_id, _records(), db_path=runs_db) == 3
        rows = await runstore.read_schedule(run_id, db_path=runs_db)
        assert [r["seq"] for r in rows] == [0, 1, 2]
        assert rows[1]["kind"] == "HALFGATE"
        assert rows[2]["issue"] == 4 and rows[2]["banked"] == 1

    @pytest.mark.asyncio
    async def test_ledger_and_report(self, runs_db):
        await runstore.init_runs_db(runs_db)
        run_id = await runstore.create_run("mlp", "ppml", {}, db_path=runs_db)
        counters = {"online-he": 1200, "online-gc": 300, "preprocessing": 9000}
        await runstore.write_ledger(run_id, counters, {"online-he": 3}, db_path=runs_db)
        assert await runstore.read_ledger(run_id, db_path=runs_db) == counters
        await runstore.write_report(run_id, json.dumps({"cycles": 7}), db_path=runs_db)
        assert json.loads(await runstore.read_report(run_id, db_path=runs_db)) == {"cycles": 7}

    @pytest.mark.asyncio
    async def test_resolve_by_name_and_id(self, runs_db):
        await runstore.init_runs_db(runs_db)
        first = await runstore.create_run("bench", "gc-bench", {}, db_path=runs_db)
        second = await runstore.create_run("bench", "gc-bench", {}, db_path=runs_db)
        assert await runstore.resolve_run("bench", db_path=runs_db) == second
        assert await runstore.resolve_run(str(first), db_path=runs_db) == first
        with pytest.raises(DomainError):
            await runstore.resolve_run("nothing", db_path=runs_db)
        runs = await runstore.list_runs(db_path=runs_db)
        assert [r["id"] for r in runs] == [first, second]

    @pytest.mark.asyncio
    async def test_missing_report(self, runs_db):
        await runstore.init_runs_db(runs_db)
        run_id = await runstore.create_run("empty", "simulate", {}, db_path=runs_db)
        assert await runstore.read_report(run_id, db_path=runs_db) is None
