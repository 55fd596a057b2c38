"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 9 trains twelve models (about an hour on one CPU core); it carries the
``slow`` marker but is part of the default run.  Its tables and figures are
copied to ``reports/acceptance/``.
"""

import json
import math
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from bilctc import ctc
from bilctc import nn as bnn
from bilctc.cli import main as cli_main
from bilctc.data import SyntheticTaskSpec, generate, generate_splits
from bilctc.decode import DecodeConfig, attn_beam, ctc_prefix_beam, joint_rescoring
from bilctc.metrics import bleu, edit_distance
from bilctc.model import CTC, XCTC, ClmContext, ModelSpec, build_model
from bilctc.data import collate
from bilctc.report import plot_ladder, plot_training_curves, read_train_log, write_tsv, TABLE_COLUMNS
from bilctc.train import TrainConfig, ladder_table, run_ablation_ladder

from helpers import TASK, tiny_batch, tiny_model, tiny_spec
from oracles import (
    central_diff,
    enum_best_path,
    enum_log_likelihood,
    enum_sequence_posteriors,
    fd_check,
    levenshtein_ref,
    random_log_probs,
    random_target,
    rel_error,
)

REPORT_DIR = Path(__file__).resolve().parent.parent / "reports" / "acceptance"


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, text):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}")
        assert ok, text

    return emit


def test_c01_likelihood_matches_enumeration(verdict):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(1, 4))
        lp = random_log_probs(rng, T, V + 1)
        tg = random_target(rng, T, V)
        worst = max(worst, abs(ctc.ctc_log_likelihood(lp, tg) - enum_log_likelihood(lp, tg)))
    secs = time.perf_counter() - start
    verdict(1, worst <= 1e-9 and secs < 10, f"200 instances, max |diff| {worst:.2e} (tol 1e-9), {secs:.2f}s (limit 10s)")


def _label_sequences(T, V):
    for U in range(T + 1):
        for seq in np.ndindex(*([V] * U)):
            yield [s + 1 for s in seq]


def test_c02_normalization(verdict):
    rng = np.random.default_rng(102)
    worst = 0.0
    count = 0
    for T in range(1, 5):
        for V in (1, 2):
            for _ in range(5):
                lp = random_log_probs(rng, T, V + 1)
                total = math.fsum(
                    math.exp(ctc.ctc_log_likelihood(lp, s))
                    for s in _label_sequences(T, V)
                    if ctc.is_feasible(T, s)
                )
                worst = max(worst, abs(total - 1.0))
                count += 1
    verdict(2, worst <= 1e-6, f"{count} distributions, max |sum - 1| {worst:.2e} (tol 1e-6)")


def test_c03_gradient_suite(verdict):
    start = time.perf_counter()
    D = torch.float64
    errors = {}

    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(10):
        T, V = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        z = rng.normal(size=(T, V + 1))
        tg = random_target(rng, T, V)
        num = central_diff(lambda x: -ctc.ctc_log_likelihood(ctc.log_softmax(x), tg), z)
        worst = max(worst, rel_error(ctc.ctc_gradient_wrt_logits(z, tg), num))
    errors["ctc_gradient_wrt_logits"] = worst

    def t(*shape, seed):
        return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D).requires_grad_()

    logits = t(2, 3, 6, seed=1)
    tg = torch.tensor([[1, 5, 0], [2, 2, 3]])
    mask = torch.tensor([[True] * 3, [True, True, False]])
    errors["label_smoothed_ce"] = fd_check(lambda: bnn.label_smoothed_ce(logits, tg, 0.1, mask), [logits])

    torch.manual_seed(0)
    x = t(2, 4, 8, seed=2)
    w = torch.randn(2, 4, 8, dtype=D)
    pm = torch.tensor([[False] * 4, [False, False, False, True]])
    lin = bnn.Linear(8, 8).to(D)
    errors["Linear"] = fd_check(lambda: (lin(x) * w).sum(), [x, *lin.parameters()])
    emb = bnn.Embedding(7, 8).to(D)
    idx = torch.tensor([[0, 3, 3, 6]])
    errors["Embedding"] = fd_check(lambda: (emb(idx).tanh()).sum(), [emb.weight])
    ln = bnn.LayerNorm(8).to(D)
    errors["LayerNorm"] = fd_check(lambda: (ln(x) * w).sum(), [x, *ln.parameters()])
    mha = bnn.MultiHeadAttention(8, 2).to(D)
    errors["MultiHeadAttention"] = fd_check(lambda: (mha(x, x, x, pm, causal=True) * w).sum(), [x, *mha.parameters()])
    ff = bnn.FeedForward(8, 16).to(D)
    errors["FeedForward"] = fd_check(lambda: (ff(x) * w).sum(), [x, *ff.parameters()])
    enc = bnn.EncoderLayer(8, 2, 16, 0.0).to(D)
    errors["EncoderLayer"] = fd_check(lambda: (enc(x, pm) * w).sum(), [x, *enc.parameters()])
    dec = bnn.DecoderLayer(8, 2, 16, 0.0).to(D)
    y = t(2, 4, 8, seed=3)
    errors["DecoderLayer"] = fd_check(lambda: (dec(y, x, pm, pm) * w).sum(), [x, y, *dec.parameters()])
    fs = bnn.FrameStacker(4, 8).to(D)
    feats = t(2, 8, 4, seed=4)
    lens = torch.tensor([8, 5])
    errors["FrameStacker"] = fd_check(lambda: (fs(feats, lens)[0] * w).sum(), [feats, *fs.parameters()])
    ctc_logits = t(2, 5, 4, seed=5)
    errors["ctc_nll"] = fd_check(lambda: bnn.ctc_nll(ctc_logits, [5, 4], [[1, 2], [3, 3]])[0].sum(), [ctc_logits])

    model = tiny_model(tiny_spec(clm_ratio=0.5))
    model.train()
    batch = tiny_batch(2)
    aligned = model.clm_alignments(batch.features, batch.feature_lengths, batch.y)

    def full_loss():
        return model.loss(batch, clm=ClmContext(aligned, np.random.default_rng(7), 0.5))[0]

    errors["BiL-CTC+ loss (PAE+CLM)"] = fd_check(full_loss, list(model.parameters()), n_dirs=1)
    secs = time.perf_counter() - start
    worst_name = max(errors, key=errors.get)
    ok = max(errors.values()) <= 1e-3 and secs < 120
    verdict(3, ok, f"{len(errors)} checks, worst {worst_name} rel err {errors[worst_name]:.2e} (tol 1e-3), {secs:.1f}s (limit 120s)")


def test_c04_forced_alignment_matches_exhaustive(verdict):
    rng = np.random.default_rng(104)
    bad = 0
    n = 150
    for i in range(n):
        T, V = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        # every fifth instance is uniform, so the tie-break decides the path
        lp = np.full((T, V + 1), -math.log(V + 1)) if i % 5 == 0 else random_log_probs(rng, T, V + 1)
        tg = random_target(rng, T, V)
        path, score = ctc.forced_align(lp, tg)
        ref_path, ref_score = enum_best_path(lp, tg)
        if list(path) != list(ref_path) or abs(score - ref_score) > 1e-12:
            bad += 1
    verdict(4, bad == 0, f"{n} instances with T <= 6, {bad} mismatches in path or score")


def test_c05_prefix_eos_identity(verdict):
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(100):
        T, V = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        lp = random_log_probs(rng, T, V + 1)
        tg = random_target(rng, T, V)
        state = ctc.prefix_score_init(lp)
        for label in tg:
            state, _ = ctc.prefix_score_extend(state, label)
        _, full = ctc.prefix_score_extend(state, ctc.EOS)
        worst = max(worst, abs(full - ctc.ctc_log_likelihood(lp, tg)))
    verdict(5, worst <= 1e-9, f"100 instances, max |diff| {worst:.2e} (tol 1e-9)")


def test_c06_decoder_exactness(verdict):
    rng = np.random.default_rng(106)
    beam_bad = 0
    for _ in range(40):
        T, V = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        lp = random_log_probs(rng, T, V + 1)
        post = enum_sequence_posteriors(lp)
        best_seq = max(post, key=post.get)
        got, score = ctc_prefix_beam(lp, beam=None)[0]
        if got != best_seq or abs(score - math.log(post[best_seq])) > 1e-9:
            beam_bad += 1

    bin_task = SyntheticTaskSpec(vocab_x=2, vocab_y=2, min_len=1, max_len=2, d_in=4, upsample=2, seed=6)
    bmodel = tiny_model(tiny_spec(vocab_x=2, vocab_y=2, clm_ratio=0.0), seed=3).eval()
    joint_bad = 0
    with torch.no_grad():
        for s in generate(bin_task, 20):
            f = torch.as_tensor(s.features, dtype=torch.float64)[None]
            enc = bmodel.encode(f, torch.tensor([f.shape[1]]))
            T = int(enc.lengths[0])
            lp = random_log_probs(rng, T, 3)
            post = enum_sequence_posteriors(lp)
            best_seq = max(post, key=post.get)
            hyps = joint_rescoring(bmodel, enc, DecodeConfig(beam=None, ctc_weight=1.0), ctc_log_probs=lp)
            if hyps[0].prefix != best_seq:
                joint_bad += 1

    model = tiny_model(tiny_spec(clm_ratio=0.0, d_model=16, ffn=32), seed=4).eval()
    fuse_bad = 0
    with torch.no_grad():
        for s in generate(TASK, 50, 500):
            f = torch.as_tensor(s.features, dtype=torch.float64)[None]
            enc = model.encode(f, torch.tensor([f.shape[1]]))
            a = attn_beam(model, enc, DecodeConfig(beam=5))[0].prefix
            j = joint_rescoring(model, enc, DecodeConfig(beam=5, ctc_weight=0.0))[0].prefix
            fuse_bad += a != j
    ok = beam_bad == joint_bad == fuse_bad == 0
    verdict(
        6, ok,
        f"prefix beam {beam_bad}/40 and lambda=1 joint {joint_bad}/20 miss the enumeration optimum; "
        f"lambda=0 differs from attn_beam on {fuse_bad}/50 utterances",
    )


def test_c07_loss_accounting(verdict):
    task = SyntheticTaskSpec()
    spec = ModelSpec(d_model=32, ffn=64, taps=[(2, CTC), (4, XCTC)], pae=[CTC, XCTC], clm_ratio=0.1)
    assert (spec.alpha, spec.beta, spec.inter_weight) == (0.2, 0.1, 0.5)
    model = build_model(spec, seed=0)
    model.train()
    worst = 0.0
    for i in range(3):
        batch = collate(generate(task, 6, 6 * i))
        aligned = model.clm_alignments(batch.features, batch.feature_lengths, batch.y)
        total, br = model.loss(batch, clm=ClmContext(aligned, np.random.default_rng(i), spec.clm_ratio))
        worst = max(worst, abs(br.recombine() - br.total), abs(float(total.detach()) - br.total))
    verdict(7, worst <= 1e-6, f"3 batches, max |recombined - total| {worst:.2e} (tol 1e-6)")


def test_c08_metric_oracles(verdict):
    rng = np.random.default_rng(108)
    mism = 0
    for _ in range(1000):
        a = rng.integers(1, 6, size=int(rng.integers(0, 12))).tolist()
        b = rng.integers(1, 6, size=int(rng.integers(1, 12))).tolist()
        mism += edit_distance(a, b) != levenshtein_ref(a, b)
    score = bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
    ok = mism == 0 and abs(score - 77.88) <= 1e-2
    verdict(8, ok, f"WER DP mismatches {mism}/1000; BLEU hand example {score:.4f} (target 77.88 +- 0.01)")


# end-to-end trend

TREND_TASK = SyntheticTaskSpec()
TREND_BASE = ModelSpec(d_model=64, ffn=256, heads=4, encoder_layers=6, decoder_layers=3)
TREND_TRAIN = TrainConfig(
    steps=3000, max_frames=1600, lr_peak=2e-3, warmup=400, valid_interval=300,
    log_interval=100, keep_checkpoints=5, average_k=5,
)
TREND_DECODE = DecodeConfig(beam=5, ctc_weight=0.1)
TREND_SEEDS = (0, 1, 2)


def _mean(cells, row, mode, metric):
    vals = [c.metrics[mode][metric] for c in cells if c.row == row]
    assert len(vals) == len(TREND_SEEDS)
    return float(np.mean(vals))


@pytest.mark.slow
def test_c09_end_to_end_trend(verdict, tmp_path_factory):
    start = time.perf_counter()
    work = tmp_path_factory.mktemp("trend")
    splits = generate_splits(TREND_TASK, 3000, 200, 200)
    st_cells = run_ablation_ladder(
        TREND_BASE, splits, TREND_TRAIN, TREND_DECODE, work,
        topologies=("synchronous",), rows=("CTC", "+CLM"), seeds=TREND_SEEDS, task="st",
    )
    asr_cells = run_ablation_ladder(
        TREND_BASE, splits, TREND_TRAIN, TREND_DECODE, work,
        topologies=("synchronous",), rows=("CTC", "+XCTC"), seeds=TREND_SEEDS, task="asr",
    )
    secs = time.perf_counter() - start

    REPORT_DIR.mkdir(parents=True, exist_ok=True)
    cells = st_cells + asr_cells
    write_tsv(ladder_table(st_cells, "exact_match") + ladder_table(asr_cells, "wer"), REPORT_DIR / "trend.tsv", TABLE_COLUMNS)
    write_tsv(
        [
            {"task": c.task, "method": c.row, "seed": c.seed, "mode": m, **v}
            for c in cells for m, v in c.metrics.items() if v is not None
        ],
        REPORT_DIR / "trend_runs.tsv",
        ["task", "method", "seed", "mode", "exact_match", "bleu", "wer"],
    )
    plot_ladder(ladder_table(st_cells, "exact_match"), REPORT_DIR / "trend_st.png", "exact match")
    plot_ladder(ladder_table(asr_cells, "wer"), REPORT_DIR / "trend_asr.png", "WER")
    plot_training_curves(
        {Path(c.checkpoint).parent.name: read_train_log(Path(c.checkpoint).parent / "train_log.jsonl") for c in cells},
        REPORT_DIR / "trend_training_curves.png",
    )

    base_attn = _mean(st_cells, "CTC", "attn_only", "exact_match")
    full_attn = _mean(st_cells, "+CLM", "attn_only", "exact_match")
    full_resc = _mean(st_cells, "+CLM", "rescoring", "exact_match")
    asr_ctc = _mean(asr_cells, "CTC", "rescoring", "wer")
    asr_x = _mean(asr_cells, "+XCTC", "rescoring", "wer")
    checks = {
        "a": (full_attn >= base_attn, f"(a) full attn-only EM {full_attn:.3f} vs CTC baseline {base_attn:.3f}"),
        "b": (full_resc >= full_attn, f"(b) full rescoring EM {full_resc:.3f} vs attn-only {full_attn:.3f}"),
        "c": (asr_x <= asr_ctc, f"(c) ASR WER +XCTC {asr_x:.3f} vs CTC-only {asr_ctc:.3f}"),
    }
    (REPORT_DIR / "trend_summary.json").write_text(
        json.dumps({k: {"pass": v[0], "detail": v[1]} for k, v in checks.items()} | {"seconds": secs}, indent=2) + "\n"
    )
    ok = all(v[0] for v in checks.values()) and secs < 3 * 3600
    detail = "; ".join(v[1] for v in checks.values())
    verdict(9, ok, f"3 seeds, {secs / 60:.0f} min (limit 180): {detail}")


def test_c10_determinism(verdict, tmp_path):
    gen = ["--set", "data.n_train=120", "--set", "data.n_dev=20", "--set", "data.n_test=10"]
    for name in ("a", "b"):
        assert cli_main(["gen-data", "--out", str(tmp_path / f"data_{name}"), "--seed", "11", *gen]) == 0
    same_data = all(
        (tmp_path / "data_a" / f).read_bytes() == (tmp_path / "data_b" / f).read_bytes()
        for f in ("train.jsonl", "dev.jsonl", "test.jsonl")
    )
    train_args = [
        "--steps", "200", "--seed", "5", "--set", "model.d_model=32", "--set", "model.ffn=64",
        "--set", "model.taps=2:ctc,4:xctc", "--set", "model.pae=ctc,xctc", "--set", "model.clm_ratio=0.1",
        "--set", "train.warmup=50", "--set", "train.valid_interval=50", "--set", "train.log_interval=10",
        "--set", "train.keep_checkpoints=4", "--set", "train.average_k=4", *gen,
    ]
    for name in ("a", "b"):
        assert cli_main(["train", "--out", str(tmp_path / f"run_{name}"), "--data", str(tmp_path / "data_a"), *train_args]) == 0
    log_a = (tmp_path / "run_a" / "train_log.jsonl").read_bytes()
    log_b = (tmp_path / "run_b" / "train_log.jsonl").read_bytes()
    n_lines = len(log_a.splitlines())
    verdict(10, same_data and log_a == log_b, f"gen-data identical: {same_data}; 200-step train logs identical: {log_a == log_b} ({n_lines} records)")
