"""Inference: greedy and prefix-beam CTC, attention beam search and joint
CTC/attention decoding.

Joint decoding scores every candidate extension with
``lam * ctc_prefix + (1 - lam) * attention`` inside a single beam search.
Finished hypotheses are ranked with the attention part divided by the
output length (EOS included); the CTC part is never length normalized.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import ctc
from .errors import ConfigurationError, InvalidInputError
from .model import CTC, EOS_TOKEN, XCTC, BiLCTCModel, EncoderOutput

MODES = ("ctc_greedy", "ctc_prefix_beam", "attn_only", "rescoring", "rescoring_two_pass")


@dataclass
class DecodeConfig:
    mode: str = "rescoring"
    beam: int | None = 5
    ctc_weight: float = 0.1
    max_len_factor: float = 1.5
    length_norm: bool = True
    head: str = "auto"  # "auto", "ctc" or "xctc"
    nbest: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown decode mode {self.mode!r}; choose from {MODES}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigurationError("ctc_weight (lambda) must lie in [0, 1]")
        if self.beam is not None and self.beam < 1:
            raise ConfigurationError("beam must be at least 1")
        if self.head not in ("auto", CTC, XCTC):
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.max_len_factor <= 0:
            raise ConfigurationError("max_len_factor must be positive")


def fuse(lam: float, ctc_score: float, attn_score: float) -> float:
    # written out so that 0 * -inf never produces nan
    if lam == 0.0:
        return attn_score
    if lam == 1.0:
        return ctc_score
    return lam * ctc_score + (1.0 - lam) * attn_score


@dataclass
class Hypothesis:
    prefix: tuple[int, ...]
    attn_logscore: float = 0.0
    ctc_logscore: float = 0.0
    ctc_state: ctc.PrefixState | None = field(default=None, repr=False)
    lam: float = 0.0
    length_norm: bool = True
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.prefix) + (1 if self.finished else 0)

    @property
    def attn_normalized(self) -> float:
        if not self.length_norm:
            return self.attn_logscore
        return self.attn_logscore / max(self.length, 1)

    @property
    def fused(self) -> float:
        """Final ranking score."""
        return fuse(self.lam, self.ctc_logscore, self.attn_normalized)

    def record(self, utt_id: str, rank: int) -> dict:
        return {
            "id": utt_id,
            "rank": rank,
            "fused": self.fused,
            "attn": self.attn_logscore,
            "ctc": self.ctc_logscore,
            "finished": self.finished,
            "tokens": list(self.prefix),
        }


# CTC-only decoders


def ctc_greedy(probs: np.ndarray) -> list[int]:
    """Per-frame argmax (ties go to the lowest class index), then collapse."""
    return ctc.collapse(np.argmax(np.asarray(probs), axis=1).tolist())


def ctc_prefix_beam(probs: np.ndarray, beam: int | None = 5) -> list[tuple[tuple[int, ...], float]]:
    """Prefix-merging beam search over label sequences.

    Scores are marginal log-probabilities of each label sequence (summed
    over its alignments).  ``beam=None`` keeps every prefix, which makes the
    search exact.
    """
    probs = np.asarray(probs, dtype=np.float64)
    T, C = probs.shape
    if beam is not None and beam < 1:
        raise ConfigurationError("beam must be at least 1")
    neg = -math.inf
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, neg)}
    for t in range(T):
        row = probs[t]
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [neg, neg])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            entry = nxt[prefix]
            entry[0] = np.logaddexp(entry[0], total + row[ctc.BLANK])
            last = prefix[-1] if prefix else None
            for c in range(1, C):
                ext = nxt[prefix + (c,)]
                if c == last:
                    ext[1] = np.logaddexp(ext[1], pb + row[c])
                    entry[1] = np.logaddexp(entry[1], pnb + row[c])
                else:
                    ext[1] = np.logaddexp(ext[1], total + row[c])
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        ranked = [kv for kv in ranked if np.logaddexp(*kv[1]) > neg]
        if beam is not None:
            ranked = ranked[:beam]
        beams = {k: (v[0], v[1]) for k, v in ranked}
    out = [(k, float(np.logaddexp(*v))) for k, v in beams.items()]
    out.sort(key=lambda kv: (-kv[1], kv[0]))
    return out


# attention / joint beam search


def _max_len(num_frames: int, factor: float) -> int:
    return max(1, math.ceil(factor * num_frames))


@torch.no_grad()
def _beam_search(
    model: BiLCTCModel,
    enc: EncoderOutput,
    beam: int | None,
    lam: float,
    ctc_log_probs: np.ndarray | None,
    max_len: int,
    length_norm: bool,
) -> list[Hypothesis]:
    use_ctc = ctc_log_probs is not None
    V = model.decoder_vocab
    if use_ctc and ctc_log_probs.shape[1] != V + 1:
        raise ConfigurationError(
            f"CTC head has {ctc_log_probs.shape[1]} classes but the decoder emits {V + 1}"
        )
    init_state = ctc.prefix_score_init(ctc_log_probs) if use_ctc else None
    active = [Hypothesis((), ctc_state=init_state, lam=lam, length_norm=length_norm)]
    finished: list[Hypothesis] = []
    pre_beam = None if beam is None else max(beam, math.ceil(1.5 * beam))

    for step in range(max_len + 1):
        if not active:
            break
        attn = model.next_token_log_probs(enc, [h.prefix for h in active]).to(torch.float64).numpy()
        cands: list[tuple[float, tuple[int, ...], Hypothesis]] = []
        for i, h in enumerate(active):
            if step == max_len:
                tokens = [EOS_TOKEN]
            elif pre_beam is None:
                tokens = list(range(V + 1))
            else:
                order = np.argsort(-attn[i], kind="stable")
                tokens = [int(t) for t in order[:pre_beam]]
            for tok in tokens:
                a = h.attn_logscore + float(attn[i, tok])
                state, c = None, 0.0
                if use_ctc:
                    label = ctc.EOS if tok == EOS_TOKEN else tok
                    state, c = ctc.prefix_score_extend(h.ctc_state, label)
                    if lam > 0 and c == -math.inf:
                        continue
                new = Hypothesis(
                    prefix=h.prefix if tok == EOS_TOKEN else h.prefix + (tok,),
                    attn_logscore=a,
                    ctc_logscore=c,
                    ctc_state=state,
                    lam=lam,
                    length_norm=length_norm,
                    finished=tok == EOS_TOKEN,
                )
                key = h.prefix + (tok,)
                cands.append((fuse(lam, c, a), key, new))
        cands.sort(key=lambda item: (-item[0], item[1]))
        if beam is not None:
            cands = cands[:beam]
        active = []
        for _, _, hyp in cands:
            (finished if hyp.finished else active).append(hyp)

    pool = finished if finished else active
    return sorted(pool, key=lambda h: (-h.fused, h.prefix))


def _ctc_matrix(enc: EncoderOutput, kind: str) -> np.ndarray:
    lp = enc.log_probs(kind)[0, : int(enc.lengths[0])].detach().to(torch.float64).numpy()
    return ctc.log_softmax(lp)


def decode_head(model: BiLCTCModel, config: DecodeConfig) -> str:
    if config.head != "auto":
        return config.head
    return XCTC if model.spec.decoder_target == "y" else CTC


def attn_beam(model: BiLCTCModel, enc: EncoderOutput, config: DecodeConfig) -> list[Hypothesis]:
    """Attention-only beam search on a single encoded utterance."""
    T = int(enc.lengths[0])
    return _beam_search(
        model, enc, config.beam, 0.0, None, _max_len(T, config.max_len_factor), config.length_norm
    )


def joint_rescoring(
    model: BiLCTCModel,
    enc: EncoderOutput,
    config: DecodeConfig,
    ctc_log_probs: np.ndarray | None = None,
) -> list[Hypothesis]:
    """One-pass joint decoding fusing CTC prefix scores with attention scores."""
    if ctc_log_probs is None:
        ctc_log_probs = _ctc_matrix(enc, decode_head(model, config))
    T = ctc_log_probs.shape[0]
    return _beam_search(
        model,
        enc,
        config.beam,
        config.ctc_weight,
        ctc_log_probs,
        _max_len(T, config.max_len_factor),
        config.length_norm,
    )


def rescore_two_pass(
    model: BiLCTCModel,
    enc: EncoderOutput,
    config: DecodeConfig,
    ctc_log_probs: np.ndarray | None = None,
) -> list[Hypothesis]:
    """Attention n-best list re-ranked with full-sequence CTC likelihoods."""
    if ctc_log_probs is None:
        ctc_log_probs = _ctc_matrix(enc, decode_head(model, config))
    nbest = attn_beam(model, enc, config)
    out = []
    for h in nbest:
        if ctc.is_feasible(ctc_log_probs.shape[0], h.prefix):
            c = ctc.ctc_log_likelihood(ctc_log_probs, h.prefix)
        else:
            c = -math.inf
        out.append(replace(h, ctc_logscore=c, lam=config.ctc_weight))
    return sorted(out, key=lambda h: (-h.fused, h.prefix))


@torch.no_grad()
def decode_features(
    model: BiLCTCModel, features: np.ndarray | torch.Tensor, config: DecodeConfig
) -> list[Hypothesis]:
    """Decode one utterance given its ``(T0, d_in)`` feature matrix."""
    model.eval()
    feats = torch.as_tensor(np.asarray(features), dtype=next(model.parameters()).dtype)[None]
    enc = model.encode(feats, torch.tensor([feats.shape[1]]))
    if config.mode in ("ctc_greedy", "ctc_prefix_beam"):
        lp = _ctc_matrix(enc, decode_head(model, config))
        if config.mode == "ctc_greedy":
            tokens = tuple(ctc_greedy(lp))
            score = ctc.ctc_log_likelihood(lp, tokens) if ctc.is_feasible(len(lp), tokens) else -math.inf
            return [Hypothesis(tokens, ctc_logscore=score, lam=1.0, finished=True)]
        return [
            Hypothesis(tokens, ctc_logscore=score, lam=1.0, finished=True)
            for tokens, score in ctc_prefix_beam(lp, config.beam)
        ]
    if config.mode == "attn_only":
        return attn_beam(model, enc, config)
    if config.mode == "rescoring":
        return joint_rescoring(model, enc, config)
    return rescore_two_pass(model, enc, config)


def decode_samples(model: BiLCTCModel, samples: Iterable, config: DecodeConfig) -> list[dict]:
    """n-best records (see :func:`write_nbest`) for every sample."""
    records = []
    for s in samples:
        hyps = decode_features(model, s.features, config)
        for rank, h in enumerate(hyps[: config.nbest], start=1):
            records.append(h.record(s.id, rank))
    return records


NBEST_COLUMNS = ("id", "rank", "fused", "attn", "ctc", "finished", "tokens")


def write_nbest(records: Sequence[dict], path: str | Path) -> Path:
    """Tab-separated n-best file with a header row; tokens are space separated."""
    path = Path(path)
    lines = ["\t".join(NBEST_COLUMNS)]
    for r in records:
        lines.append(
            "\t".join(
                [
                    r["id"],
                    str(r["rank"]),
                    repr(float(r["fused"])),
                    repr(float(r["attn"])),
                    repr(float(r["ctc"])),
                    "1" if r["finished"] else "0",
                    " ".join(str(t) for t in r["tokens"]),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_nbest(path: str | Path) -> list[dict]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != NBEST_COLUMNS:
        raise InvalidInputError(f"{path}: missing n-best header")
    out = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split("\t")
        if len(parts) != len(NBEST_COLUMNS):
            raise InvalidInputError(f"{path}:{lineno}: expected {len(NBEST_COLUMNS)} columns")
        out.append(
            {
                "id": parts[0],
                "rank": int(parts[1]),
                "fused": float(parts[2]),
                "attn": float(parts[3]),
                "ctc": float(parts[4]),
                "finished": parts[5] == "1",
                "tokens": [int(t) for t in parts[6].split()],
            }
        )
    return out


def best_tokens(records: Sequence[dict]) -> dict[str, list[int]]:
    return {r["id"]: r["tokens"] for r in records if r["rank"] == 1}
