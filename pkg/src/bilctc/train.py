"""Training loop, checkpoint selection and the ablation ladder."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .data import Batch, Sample, build_batches, iterate_epochs
from .decode import DecodeConfig, best_tokens, decode_samples, write_nbest, read_nbest
from .errors import ConfigurationError, InfeasibleTargetError, TrainingDivergedError
from .metrics import bleu, corpus_wer, exact_match
from .model import (
    CTC,
    XCTC,
    BiLCTCModel,
    ClmContext,
    ModelSpec,
    average_checkpoints,
    build_model,
    model_from_checkpoint,
)
from .nn import Adam, Checkpoint, inv_sqrt_lr, module_arrays, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    max_frames: int = 1600
    lr_peak: float = 2e-3
    warmup: int = 400
    dropout: float = 0.15
    label_smoothing: float = 0.1
    seed: int = 0
    valid_interval: int = 200
    log_interval: int = 50
    keep_checkpoints: int = 10
    average_k: int = 10

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative")
        if self.steps > 0 and self.warmup >= self.steps:
            raise ConfigurationError("warmup must be smaller than steps")
        if self.average_k > self.keep_checkpoints:
            raise ConfigurationError("average_k cannot exceed keep_checkpoints")
        if self.valid_interval < 1 or self.log_interval < 1:
            raise ConfigurationError("intervals must be positive")


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    log_path: Path
    best_dev_loss: float | None


def _jsonl(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


@torch.no_grad()
def dev_loss(model: BiLCTCModel, batches: Sequence[Batch]) -> float:
    """Frame-weighted mean of the full objective in evaluation mode."""
    was = model.training
    model.eval()
    total = weight = 0.0
    for b in batches:
        _, br = model.loss(b)
        total += br.total * len(b)
        weight += len(b)
    model.train(was)
    return total / max(weight, 1.0)


def _checkpoint(model, spec, step, dev, extra=None) -> Checkpoint:
    meta = {
        "model_spec": spec.to_dict(),
        "step": step,
        "dev_loss": dev,
        "tool_version": __version__,
    }
    meta.update(extra or {})
    return Checkpoint(params=module_arrays(model), meta=meta)


def train(
    spec: ModelSpec,
    train_samples: Sequence[Sample],
    dev_samples: Sequence[Sample],
    config: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    """Train from scratch and write checkpoints plus ``train_log.jsonl``.

    The returned ``final_checkpoint`` averages the ``average_k`` kept
    checkpoints with the lowest dev loss.  Selection never looks at test data.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    spec = replace(spec, dropout=config.dropout, label_smoothing=config.label_smoothing)

    torch.use_deterministic_algorithms(True)
    model = build_model(spec, seed=config.seed)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    clm_rng = np.random.default_rng([config.seed, 1])

    train_batches = build_batches(train_samples, config.max_frames)
    dev_batches = build_batches(dev_samples, config.max_frames)
    if not train_batches:
        raise InfeasibleTargetError("no training sample has CTC-feasible targets")
    _jsonl(
        log_path,
        {
            "event": "start",
            "train_batches": len(train_batches),
            "train_samples": sum(len(b) for b in train_batches),
            "dev_samples": sum(len(b) for b in dev_batches),
            "parameters": sum(p.numel() for p in model.parameters()),
        },
    )

    kept: list[tuple[float, int, Path]] = []

    def validate_and_save(step: int) -> float | None:
        dev = dev_loss(model, dev_batches) if dev_batches else None
        path = out / f"checkpoint_{step:06d}.npz"
        save_checkpoint(path, _checkpoint(model, spec, step, dev))
        _jsonl(log_path, {"event": "valid", "step": step, "dev_loss": dev})
        kept.append((math.inf if dev is None else dev, step, path))
        kept.sort()
        while len(kept) > config.keep_checkpoints:
            _, _, drop = kept.pop()
            drop.unlink(missing_ok=True)
        return dev

    model.train()
    adam = Adam(dict(model.named_parameters()))
    if config.steps == 0:
        dev = validate_and_save(0)
        _jsonl(log_path, {"event": "done", "averaged_steps": [], "best_dev_loss": dev})
        return TrainResult(out, kept[0][2], log_path, dev)
    stream = iterate_epochs(train_batches, rng)
    last_good = None
    for step in range(1, config.steps + 1):
        batch = next(stream)
        lr = inv_sqrt_lr(step, config.warmup, config.lr_peak)
        clm = None
        if spec.clm_ratio > 0:
            aligned = model.clm_alignments(batch.features, batch.feature_lengths, batch.y)
            clm = ClmContext(aligned=aligned, rng=clm_rng, ratio=spec.clm_ratio)
        model.zero_grad(set_to_none=True)
        loss, breakdown = model.loss(batch, clm=clm)
        if not math.isfinite(breakdown.total):
            _jsonl(log_path, {"event": "diverged", "step": step})
            raise TrainingDivergedError(
                f"non-finite loss at step {step}; last good checkpoint: {last_good}"
            )
        loss.backward()
        try:
            adam.step(lr)
        except TrainingDivergedError as exc:
            _jsonl(log_path, {"event": "diverged", "step": step})
            raise TrainingDivergedError(f"{exc} at step {step}; last good checkpoint: {last_good}")
        if step % config.log_interval == 0 or step == 1:
            _jsonl(log_path, {"event": "train", "step": step, "lr": lr, **breakdown.as_record()})
        if step % config.valid_interval == 0 or step == config.steps:
            validate_and_save(step)
            last_good = kept[0][2] if kept else None

    last = _checkpoint(model, spec, config.steps, None)
    last.optimizer = adam.state_arrays()
    save_checkpoint(out / "checkpoint_last.npz", last)

    ranked = [p for _, _, p in kept]
    k = min(config.average_k, len(ranked))
    avg = average_checkpoints(ranked, k=k) if all(d < math.inf for d, _, _ in kept) else (
        average_checkpoints(ranked[-k:])
    )
    final = save_checkpoint(out / "checkpoint_avg.npz", avg)
    best = kept[0][0] if kept and kept[0][0] < math.inf else None
    _jsonl(log_path, {"event": "done", "averaged_steps": avg.meta["averaged_from"], "best_dev_loss": best})
    return TrainResult(out, final, log_path, best)


# ablation ladder

LADDER_ROWS = ("CTC", "+XCTC", "+InterCTC", "+PAE", "+CLM")
INFERENCE_MODES = ("ctc_greedy", "attn_only", "rescoring")
DEFAULT_TAPS = ((2, CTC), (4, XCTC))


def ladder_spec(base: ModelSpec, topology: str, row: str, alpha=0.2, beta=0.1, clm_ratio=None) -> ModelSpec:
    """Model spec of one cumulative ladder row.

    ``base`` supplies sizes, the tap schedule used from ``+InterCTC`` on (an
    empty schedule falls back to ``DEFAULT_TAPS``) and the mixing ratio of
    ``+CLM`` (0.1 when unset).
    """
    if clm_ratio is None:
        clm_ratio = base.clm_ratio or 0.1
    if row not in LADDER_ROWS:
        raise ConfigurationError(f"unknown ladder row {row!r}")
    level = LADDER_ROWS.index(row)
    return replace(
        base,
        topology=topology,
        alpha=alpha,
        beta=beta if level >= 1 else 0.0,
        taps=list(base.taps or DEFAULT_TAPS) if level >= 2 else [],
        pae=[CTC, XCTC] if level >= 3 else [],
        clm_ratio=clm_ratio if level >= 4 else 0.0,
    )


def evaluate_modes(
    model: BiLCTCModel,
    samples: Sequence[Sample],
    out_dir: Path,
    decode: DecodeConfig,
    modes: Sequence[str] = INFERENCE_MODES,
) -> dict[str, dict | None]:
    """Decode with each mode, persist n-best files, then score from those files.

    Modes needing a CTC head the model lacks are reported as ``None``.
    """
    results: dict[str, dict | None] = {}
    head = XCTC if model.spec.decoder_target == "y" else CTC
    has_head = model.spec.beta > 0 if head == XCTC else model.spec.alpha > 0
    for mode in modes:
        if mode != "attn_only" and not has_head:
            results[mode] = None
            continue
        cfg = replace(decode, mode=mode, nbest=1)
        path = out_dir / f"nbest_{mode}.tsv"
        write_nbest(decode_samples(model, samples, cfg), path)
        results[mode] = score_nbest(path, samples, model.spec.decoder_target)
    return results


def score_nbest(path: Path, samples: Sequence[Sample], target: str = "y") -> dict:
    hyp_map = best_tokens(read_nbest(path))
    refs = [s.y if target == "y" else s.x for s in samples]
    hyps = [hyp_map.get(s.id, []) for s in samples]
    return {
        "exact_match": exact_match(hyps, refs),
        "bleu": bleu(hyps, refs),
        "wer": corpus_wer(hyps, refs),
    }


@dataclass
class LadderCell:
    topology: str
    row: str
    seed: int
    task: str
    metrics: dict[str, dict | None]
    checkpoint: str


def run_ablation_ladder(
    base: ModelSpec,
    splits: dict[str, list[Sample]],
    train_config: TrainConfig,
    decode: DecodeConfig,
    out_dir: str | Path,
    topologies: Sequence[str] = ("progressive", "synchronous"),
    rows: Sequence[str] = LADDER_ROWS,
    seeds: Sequence[int] = (0,),
    task: str = "st",
) -> list[LadderCell]:
    """Train and decode every (topology, row, seed) combination.

    ``task="asr"`` makes the decoder emit the transcript instead of the
    translation, the XCTC head still predicting the translation.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = "y" if task == "st" else "x"
    cells = []
    for topo in topologies:
        for row in rows:
            spec = replace(ladder_spec(base, topo, row), decoder_target=target)
            for seed in seeds:
                run = out / f"{task}_{topo}_{LADDER_ROWS.index(row)}_{row.strip('+')}_seed{seed}"
                cfg = replace(train_config, seed=seed)
                result = train(spec, splits["train"], splits["dev"], cfg, run)
                model = model_from_checkpoint(result.final_checkpoint)
                metrics = evaluate_modes(model, splits["test"], run, decode)
                (run / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
                cells.append(LadderCell(topo, row, seed, task, metrics, str(result.final_checkpoint)))
                log.info("%s %s seed=%d %s", topo, row, seed, metrics)
    return cells


def ladder_table(cells: Sequence[LadderCell], metric: str = "exact_match") -> list[dict]:
    """Seed-averaged rows: one per (task, topology, ladder row)."""
    groups: dict[tuple, list[LadderCell]] = {}
    for c in cells:
        groups.setdefault((c.task, c.topology, c.row), []).append(c)
    table = []
    for (task, topo, row), group in groups.items():
        entry = {"task": task, "topology": topo, "method": row, "seeds": len(group)}
        for mode in INFERENCE_MODES:
            vals = [c.metrics.get(mode) for c in group]
            entry[mode] = (
                None if any(v is None for v in vals) else float(np.mean([v[metric] for v in vals]))
            )
        table.append(entry)
    return table
