import torch
import pytest

from av_colearn.colearn import LossBreakdown
from av_colearn.exceptions import ContractViolation
from av_colearn.runlog import SCHEMA_VERSION, RunLog, mean_losses


def _losses(value):
    return LossBreakdown(l_sep=torch.tensor(value), objective="l_sep")


def test_steps_are_monotone(tmp_path):
    log = RunLog(tmp_path / "runlog.jsonl", seed=3, config_hash="abc")
    assert log.log_step(_losses(1.0), stage=1, epoch=0, lr=1e-4) == 1
    assert log.log_step(_losses(0.5), stage=1, epoch=0, lr=1e-4) == 2
    with pytest.raises(ContractViolation):
        log.log_step(_losses(0.5), stage=1, epoch=0, lr=1e-4, step=2)

    records = log.records("step")
    assert [r["step"] for r in records] == [1, 2]
    assert records[0]["schema_version"] == SCHEMA_VERSION
    assert records[0]["seed"] == 3 and records[0]["config_hash"] == "abc"
    assert records[1]["losses"]["l_sep"] == 0.5
    assert records[1]["losses"]["l_ccol"] is None


def test_reopened_log_continues_without_gaps(tmp_path):
    path = tmp_path / "runlog.jsonl"
    first = RunLog(path)
    for _ in range(3):
        first.log_step(_losses(1.0), stage=1, epoch=0, lr=1e-4)
    first.log_event("stage_end", stage=1)

    second = RunLog(path)
    assert second.step == 3
    assert second.log_step(_losses(1.0), stage=2, epoch=0, lr=1e-4) == 4
    assert [r["step"] for r in second.records("step")] == [1, 2, 3, 4]
    assert [r["kind"] for r in second.records()][3] == "stage_end"


def test_epoch_records(tmp_path):
    log = RunLog(tmp_path / "runlog.jsonl")
    log.log_step(_losses(2.0), stage=1, epoch=0, lr=1e-4)
    log.log_epoch(1, 0, {"l_sep": 2.0}, {"metric": "val_sdr", "value": 3.5})
    (epoch,) = log.records("epoch")
    assert epoch["step"] == 1
    assert epoch["metrics"]["value"] == 3.5


def test_mean_losses():
    means = mean_losses([{"l_sep": 1.0, "l_col": None}, {"l_sep": 3.0}])
    assert means["l_sep"] == 2.0
    assert means["l_col"] is None
    assert set(means) == set(LossBreakdown.TERMS)
    assert all(v is None for v in mean_losses([]).values())


def test_discarding_a_stage_rewinds_the_counter(tmp_path):
    path = tmp_path / "runlog.jsonl"
    log = RunLog(path)
    for stage in (1, 2):
        log.log_event("stage_start", stage=stage)
        for _ in range(2):
            log.log_step(_losses(1.0), stage=stage, epoch=0, lr=1e-4)
        log.log_event("stage_end", stage=stage)

    assert log.discard_from(2) == 2
    assert [r["step"] for r in log.records("step")] == [1, 2]
    assert [r["kind"] for r in log.records()] == ["stage_start", "step", "step", "stage_end"]
    assert log.log_step(_losses(0.5), stage=2, epoch=0, lr=1e-4) == 3

    assert RunLog(path).discard_from(1) == 0
    assert RunLog(path).records() == []
    assert RunLog(tmp_path / "missing.jsonl").discard_from(1) == 0
