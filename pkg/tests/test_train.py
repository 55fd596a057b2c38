import json
import math
from dataclasses import replace

import pytest
import torch

from bilctc.data import generate
from bilctc.decode import DecodeConfig
from bilctc.errors import ConfigurationError, TrainingDivergedError
from bilctc.model import CTC, XCTC, BiLCTCModel, ModelSpec, model_from_checkpoint
from bilctc.nn import load_checkpoint
from bilctc.report import plot_ladder, read_tsv, write_tsv, TABLE_COLUMNS
from bilctc.train import (
    LADDER_ROWS,
    TrainConfig,
    ladder_spec,
    ladder_table,
    run_ablation_ladder,
    train,
)

from helpers import TASK, tiny_spec

SMALL = dict(max_frames=200, warmup=2, valid_interval=3, log_interval=1, keep_checkpoints=3, average_k=2)


@pytest.fixture(scope="module")
def data():
    return generate(TASK, 24), generate(TASK, 6, 24)


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        TrainConfig(steps=10, warmup=10)
    with pytest.raises(ConfigurationError):
        TrainConfig(keep_checkpoints=3, average_k=4)


def test_zero_steps_writes_initial_checkpoint_only(tmp_path, data):
    res = train(tiny_spec(), *data, TrainConfig(steps=0, **SMALL), tmp_path)
    files = sorted(p.name for p in tmp_path.glob("*.npz"))
    assert files == ["checkpoint_000000.npz"]
    ck = load_checkpoint(res.final_checkpoint)
    assert ck.step == 0 and ck.dev_loss is not None


def test_training_writes_log_and_averaged_checkpoint(tmp_path, data):
    res = train(tiny_spec(), *data, TrainConfig(steps=12, **SMALL), tmp_path)
    records = [json.loads(l) for l in res.log_path.read_text().splitlines()]
    train_recs = [r for r in records if r["event"] == "train"]
    assert [r["step"] for r in train_recs] == list(range(1, 13))
    assert {"lr", "ce", "ctc", "xctc", "inter_ctc", "inter_xctc", "total"} <= set(train_recs[0])
    valid = [r for r in records if r["event"] == "valid"]
    assert [r["step"] for r in valid] == [3, 6, 9, 12]
    kept = sorted(tmp_path.glob("checkpoint_0*.npz"))
    assert len(kept) == 3
    ranked = sorted(valid, key=lambda r: (r["dev_loss"], r["step"]))
    avg = load_checkpoint(res.final_checkpoint)
    assert avg.meta["averaged_from"] == [r["step"] for r in ranked[:2]]
    assert res.best_dev_loss == pytest.approx(ranked[0]["dev_loss"])
    last = load_checkpoint(tmp_path / "checkpoint_last.npz")
    assert last.optimizer and last.step == 12
    model_from_checkpoint(res.final_checkpoint)


def test_equal_seeds_give_identical_logs(tmp_path, data):
    cfg = TrainConfig(steps=6, **SMALL)
    a = train(tiny_spec(dropout=0.1), *data, cfg, tmp_path / "a")
    b = train(tiny_spec(dropout=0.1), *data, cfg, tmp_path / "b")
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
    c = train(tiny_spec(dropout=0.1), *data, replace(cfg, seed=1), tmp_path / "c")
    assert a.log_path.read_bytes() != c.log_path.read_bytes()


def test_divergence_keeps_last_good_checkpoint(tmp_path, data, monkeypatch):
    real = BiLCTCModel.loss
    calls = {"n": 0}

    def flaky(self, batch, clm=None):
        total, br = real(self, batch, clm)
        if self.training:
            calls["n"] += 1
            if calls["n"] == 5:
                total = total * math.nan
                br.total = math.nan
        return total, br

    monkeypatch.setattr(BiLCTCModel, "loss", flaky)
    with pytest.raises(TrainingDivergedError, match="checkpoint_000003"):
        train(tiny_spec(), *data, TrainConfig(steps=9, **SMALL), tmp_path)
    assert (tmp_path / "checkpoint_000003.npz").exists()
    last = json.loads(tmp_path.joinpath("train_log.jsonl").read_text().splitlines()[-1])
    assert last == {"event": "diverged", "step": 5}


@pytest.mark.slow
def test_default_spec_loss_decreases_on_toy_set(tmp_path):
    from bilctc.data import SyntheticTaskSpec

    task = SyntheticTaskSpec()
    samples = generate(task, 50)
    cfg = TrainConfig(steps=500, warmup=100, valid_interval=500, log_interval=500, keep_checkpoints=1, average_k=1)
    res = train(ModelSpec(), samples, samples[:10], cfg, tmp_path)
    recs = [json.loads(l) for l in res.log_path.read_text().splitlines()]
    first = next(r for r in recs if r.get("step") == 1 and r["event"] == "train")
    final = next(r for r in recs if r.get("step") == 500 and r["event"] == "train")
    assert final["total"] < first["total"]


# ablation ladder


def test_ladder_rows_are_cumulative():
    base = tiny_spec(taps=[(1, CTC), (3, XCTC)], pae=[], clm_ratio=0.0)
    specs = [ladder_spec(base, "synchronous", r) for r in LADDER_ROWS]
    assert (specs[0].beta, specs[0].taps) == (0.0, [])
    assert specs[1].beta == 0.1 and specs[1].taps == []
    assert specs[2].taps == [(1, CTC), (3, XCTC)] and specs[2].pae == []
    assert specs[3].pae == [CTC, XCTC] and specs[3].clm_ratio == 0.0
    assert specs[4].clm_ratio > 0
    fields = ["beta", "taps", "pae", "clm_ratio"]
    for prev, cur in zip(specs, specs[1:]):
        changed = [f for f in fields if getattr(prev, f) != getattr(cur, f)]
        assert len(changed) == 1


def test_ladder_report_shape(tmp_path, data):
    base = tiny_spec(taps=[(1, CTC), (3, XCTC)], pae=[], clm_ratio=0.0)
    splits = {"train": data[0], "dev": data[1], "test": generate(TASK, 3, 40)}
    cfg = TrainConfig(steps=3, **dict(SMALL, average_k=1))
    cells = run_ablation_ladder(base, splits, cfg, DecodeConfig(beam=2), tmp_path)
    table = ladder_table(cells)
    assert len(table) == 10
    assert {(r["topology"], r["method"]) for r in table} == {
        (t, m) for t in ("progressive", "synchronous") for m in LADDER_ROWS
    }
    for r in table:
        available = [r[m] is not None for m in ("ctc_greedy", "attn_only", "rescoring")]
        assert available == ([False, True, False] if r["method"] == "CTC" else [True, True, True])
    # metrics are recomputed from the persisted n-best files
    run = next(tmp_path.glob("st_synchronous_1_*"))
    assert (run / "nbest_attn_only.tsv").exists()
    path = write_tsv(table, tmp_path / "ladder.tsv", TABLE_COLUMNS)
    assert len(read_tsv(path)) == 10
    plot_ladder(table, tmp_path / "ladder.png")
    assert (tmp_path / "ladder.png").stat().st_size > 0
