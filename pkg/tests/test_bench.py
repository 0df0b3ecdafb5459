from __future__ import annotations

import pytest

from gittheta import bench
from gittheta.cli import main


@pytest.fixture(scope="module")
def small_result(tmp_path_factory):
    cfg = bench.BenchConfig(groups=3, elements=4096, sparsity=0.01, rank=2, seed=1,
                            workdir=tmp_path_factory.mktemp("bench"))
    return bench.run_bench(cfg, log=lambda msg: None)


def test_bench_steps_and_savings(small_result):
    names = [s.name for s in small_result.steps]
    assert names == ["base", "lora", "sparse", "rte", "anli", "merge", "remove", "resave"]
    by_name = {s.name: s for s in small_result.steps}
    assert small_result.total_bytes["theta"] < small_result.total_bytes["blob"]
    for step in ("lora", "sparse"):
        assert by_name[step].new_bytes["theta"] < by_name[step].new_bytes["blob"]
    assert by_name["remove"].new_bytes["theta"] == 0
    assert by_name["resave"].new_bytes["theta"] == 0


def test_bench_table_reports_every_commit(small_result):
    table = small_result.table()
    for step in small_result.steps:
        assert step.name in table
    assert "theta store is" in table


def test_blob_filters_round_trip(git_repo):
    pointer = bench.blob_clean(git_repo.repo, b"checkpoint bytes")
    assert pointer.startswith(bench.BLOB_POINTER)
    assert bench.blob_clean(git_repo.repo, pointer) == pointer
    assert bench.blob_smudge(git_repo.repo, pointer) == b"checkpoint bytes"


def test_cli_bench(tmp_path, capsys):
    rc = main(["bench", "--groups", "2", "--elements", "1024", "--workdir", str(tmp_path)])
    assert rc == 0
    assert "total" in capsys.readouterr().out
