"""Encoder-decoder with transcript (CTC) and translation (XCTC) heads.

Two encoder topologies are supported:

``synchronous``
    a single stack; both final heads read the last layer.
``progressive``
    the first ``acoustic_layers`` form the acoustic encoder whose output feeds
    the CTC head, the remaining layers form the textual encoder whose output
    feeds the XCTC head.

Intermediate taps add auxiliary CTC losses on inner layers, optionally
re-injecting their expected head embedding (prediction-aware encoding).  For
XCTC taps the injected distribution can be mixed with forced-alignment
ground truth (curriculum mixing).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import ctc
from .errors import ConfigurationError, InvalidInputError
from .nn import (
    Checkpoint,
    DecoderLayer,
    Embedding,
    EncoderLayer,
    FrameStacker,
    Linear,
    ctc_nll,
    dropout,
    label_smoothed_ce,
    load_checkpoint,
    padding_mask,
    sinusoidal_position_encoding,
)

CTC, XCTC = "ctc", "xctc"
EOS_TOKEN = 0  # decoder-side start/end symbol; never a CTC label


@dataclass
class ModelSpec:
    topology: str = "synchronous"
    encoder_layers: int = 6
    acoustic_layers: int = 3  # progressive only
    decoder_layers: int = 3
    d_model: int = 128
    heads: int = 4
    ffn: int = 512
    d_in: int = 16
    vocab_x: int = 20
    vocab_y: int = 20
    taps: list[tuple[int, str]] = field(default_factory=list)
    alpha: float = 0.2
    beta: float = 0.1
    inter_weight: float = 0.5
    pae: list[str] = field(default_factory=list)
    clm_ratio: float = 0.0
    dropout: float = 0.15
    label_smoothing: float = 0.1
    decoder_target: str = "y"  # "y": translation, "x": transcription

    def __post_init__(self):
        self.taps = [(int(l), str(k)) for l, k in self.taps]
        self.pae = sorted(set(self.pae))
        self.validate()

    def validate(self) -> None:
        if self.topology not in ("synchronous", "progressive"):
            raise ConfigurationError(f"unknown topology {self.topology!r}")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ConfigurationError("encoder and decoder need at least one layer")
        if self.d_model % self.heads:
            raise ConfigurationError("d_model must be divisible by heads")
        if self.decoder_target not in ("x", "y"):
            raise ConfigurationError("decoder_target must be 'x' or 'y'")
        if self.alpha < 0 or self.beta < 0 or self.inter_weight < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0.0 <= self.clm_ratio <= 1.0:
            raise ConfigurationError("clm_ratio must lie in [0, 1]")
        for kind in self.pae:
            if kind not in (CTC, XCTC):
                raise ConfigurationError(f"unknown PAE head kind {kind!r}")
        L, A = self.encoder_layers, self.acoustic_layers
        if self.topology == "progressive" and not 1 <= A < L:
            raise ConfigurationError("progressive topology needs 1 <= acoustic_layers < encoder_layers")
        seen = set()
        for layer, kind in self.taps:
            if kind not in (CTC, XCTC):
                raise ConfigurationError(f"unknown tap kind {kind!r}")
            if not 1 <= layer < L:
                raise ConfigurationError(
                    f"tap at layer {layer} outside the inner layers 1..{L - 1}"
                )
            if (layer, kind) in seen:
                raise ConfigurationError(f"duplicate tap {(layer, kind)}")
            seen.add((layer, kind))
            if self.topology == "progressive":
                if kind == CTC and layer >= A:
                    raise ConfigurationError(
                        f"CTC tap at layer {layer} lies outside the acoustic encoder (1..{A - 1})"
                    )
                if kind == XCTC and layer <= A:
                    raise ConfigurationError(
                        f"XCTC tap at layer {layer} lies outside the textual encoder ({A + 1}..{L - 1})"
                    )
            if kind == CTC and self.alpha == 0:
                raise ConfigurationError("CTC taps need alpha > 0")
            if kind == XCTC and self.beta == 0:
                raise ConfigurationError("XCTC taps need beta > 0")
        if self.clm_ratio > 0 and XCTC not in self.pae:
            raise ConfigurationError("curriculum mixing acts on XCTC prediction-aware encoding")

    def tap_weight(self, kind: str) -> float:
        return self.inter_weight * (self.alpha if kind == CTC else self.beta)

    @property
    def has_ctc(self) -> bool:
        return self.alpha > 0 or any(k == CTC for _, k in self.taps)

    @property
    def has_xctc(self) -> bool:
        return self.beta > 0 or any(k == XCTC for _, k in self.taps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["taps"] = [list(t) for t in self.taps]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["taps"] = [tuple(t) for t in d.get("taps", [])]
        return cls(**d)


@dataclass
class EncoderOutput:
    states: Tensor  # (B, T, d)
    lengths: Tensor  # (B,)
    pad_mask: Tensor  # (B, T), True on padding
    ctc_logits: Tensor | None
    xctc_logits: Tensor | None
    taps: list[tuple[int, str, Tensor]]  # (layer, kind, logits)

    def log_probs(self, kind: str) -> Tensor:
        logits = self.ctc_logits if kind == CTC else self.xctc_logits
        if logits is None:
            raise ConfigurationError(f"model has no final {kind.upper()} head")
        return torch.log_softmax(logits, dim=-1)


@dataclass
class LossBreakdown:
    ce: float
    ctc_final: float
    xctc_final: float
    inter_ctc: dict[int, float]
    inter_xctc: dict[int, float]
    weights: dict[str, float]
    total: float
    skipped: int = 0

    def recombine(self) -> float:
        w = self.weights
        out = self.ce + w["ctc"] * self.ctc_final + w["xctc"] * self.xctc_final
        out += sum(w["inter_ctc"] * v for v in self.inter_ctc.values())
        out += sum(w["inter_xctc"] * v for v in self.inter_xctc.values())
        return out

    def as_record(self) -> dict:
        return {
            "ce": self.ce,
            "ctc": self.ctc_final,
            "xctc": self.xctc_final,
            "inter_ctc": {str(k): v for k, v in self.inter_ctc.items()},
            "inter_xctc": {str(k): v for k, v in self.inter_xctc.items()},
            "total": self.total,
            "skipped": self.skipped,
        }


def pae_inject(states: Tensor, probs: Tensor, weight: Tensor) -> Tensor:
    """Add the expected head embedding ``probs @ weight`` to every frame.

    ``probs`` is ``(..., T, C)`` in probability space and ``weight`` the
    ``(C, d)`` projection of the head that produced it.
    """
    if weight.shape[0] != probs.shape[-1] or weight.shape[1] != states.shape[-1]:
        raise ConfigurationError(
            f"PAE weight {tuple(weight.shape)} does not fit probs {tuple(probs.shape)} "
            f"and states {tuple(states.shape)}"
        )
    return states + probs @ weight


def clm_mix(
    log_probs: Tensor,
    aligned: Tensor,
    ratio: float,
    rng: np.random.Generator,
) -> Tensor:
    """Replace some wrongly predicted frames by one-hot alignment targets.

    ``log_probs`` is ``(B, T, C)`` (or ``(T, C)``); ``aligned`` holds the
    forced-alignment class per frame, ``-1`` where no alignment is available.
    A frame whose greedy prediction differs from its aligned class is
    replaced with probability ``ratio``.  Returns probabilities.
    """
    squeeze = log_probs.dim() == 2
    if squeeze:
        log_probs, aligned = log_probs[None], aligned[None]
    probs = log_probs.exp()
    known = aligned >= 0
    wrong = (log_probs.argmax(dim=-1) != aligned) & known
    draw = torch.from_numpy(rng.random(wrong.shape)) < ratio
    replace = wrong & draw
    onehot = torch.nn.functional.one_hot(aligned.clamp_min(0), probs.shape[-1]).to(probs.dtype)
    mixed = torch.where(replace[..., None], onehot, probs)
    return mixed[0] if squeeze else mixed


@dataclass
class ClmContext:
    aligned: Tensor  # (B, T) long, -1 where unavailable
    rng: np.random.Generator
    ratio: float


class BiLCTCModel(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        d = spec.d_model
        self.front = FrameStacker(spec.d_in, d)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, spec.heads, spec.ffn, spec.dropout) for _ in range(spec.encoder_layers)
        )
        self.ctc_head = Linear(d, spec.vocab_x + 1) if spec.has_ctc else None
        self.xctc_head = Linear(d, spec.vocab_y + 1) if spec.has_xctc else None
        v_dec = self.decoder_vocab
        self.embed = Embedding(v_dec + 1, d)
        self.decoder = nn.ModuleList(
            DecoderLayer(d, spec.heads, spec.ffn, spec.dropout) for _ in range(spec.decoder_layers)
        )
        self.output = Linear(d, v_dec + 1)

    @property
    def decoder_vocab(self) -> int:
        return self.spec.vocab_y if self.spec.decoder_target == "y" else self.spec.vocab_x

    def head(self, kind: str) -> Linear:
        head = self.ctc_head if kind == CTC else self.xctc_head
        if head is None:
            raise ConfigurationError(f"model has no {kind.upper()} head")
        return head

    # encoder

    def encode(
        self, feats: Tensor, lengths: Tensor, clm: ClmContext | None = None
    ) -> EncoderOutput:
        spec = self.spec
        x, out_len = self.front(feats, lengths)
        T = x.shape[1]
        mask = padding_mask(out_len, T)
        x = x + sinusoidal_position_encoding(T, spec.d_model, x.dtype)
        x = dropout(x, spec.dropout, self.training)

        taps_at: dict[int, list[str]] = {}
        for layer, kind in spec.taps:
            taps_at.setdefault(layer, []).append(kind)
        progressive_split = spec.acoustic_layers if spec.topology == "progressive" else None

        tap_out: list[tuple[int, str, Tensor]] = []
        ctc_logits = None
        for idx, layer in enumerate(self.encoder, start=1):
            x = layer(x, mask)
            heads_here = [(k, True) for k in taps_at.get(idx, [])]
            if idx == progressive_split and spec.has_ctc:
                heads_here.append((CTC, False))
            base = x
            for kind, is_tap in heads_here:
                logits = self.head(kind)(base)
                if is_tap:
                    tap_out.append((idx, kind, logits))
                else:
                    ctc_logits = logits
                if kind in spec.pae:
                    lp = torch.log_softmax(logits, dim=-1)
                    if kind == XCTC and clm is not None and clm.ratio > 0:
                        probs = clm_mix(lp, clm.aligned, clm.ratio, clm.rng)
                    else:
                        probs = lp.exp()
                    x = pae_inject(x, probs, self.head(kind).weight)

        if spec.topology == "synchronous" and self.ctc_head is not None and spec.alpha > 0:
            ctc_logits = self.ctc_head(x)
        if spec.topology == "progressive" and spec.alpha == 0:
            ctc_logits = None
        xctc_logits = self.xctc_head(x) if self.xctc_head is not None and spec.beta > 0 else None
        return EncoderOutput(
            states=x,
            lengths=out_len,
            pad_mask=mask,
            ctc_logits=ctc_logits,
            xctc_logits=xctc_logits,
            taps=tap_out,
        )

    # decoder

    def decode_logits(self, enc: EncoderOutput, prev: Tensor, prev_mask: Tensor | None) -> Tensor:
        """Teacher-forced logits for decoder inputs ``prev`` (B, L)."""
        d = self.spec.d_model
        y = self.embed(prev) * math.sqrt(d)
        y = y + sinusoidal_position_encoding(prev.shape[1], d, y.dtype)
        y = dropout(y, self.spec.dropout, self.training)
        for layer in self.decoder:
            y = layer(y, enc.states, enc.pad_mask, prev_mask)
        return self.output(y)

    def next_token_log_probs(self, enc: EncoderOutput, prefixes: Sequence[Sequence[int]]) -> Tensor:
        """Log-distribution of the next decoder token for each prefix.

        ``enc`` must describe a single utterance; it is broadcast over prefixes.
        """
        n = len(prefixes)
        L = max(len(p) for p in prefixes) + 1
        prev = torch.full((n, L), EOS_TOKEN, dtype=torch.long)
        for i, p in enumerate(prefixes):
            if p:
                prev[i, 1 : len(p) + 1] = torch.tensor(list(p), dtype=torch.long)
        lens = torch.tensor([len(p) + 1 for p in prefixes])
        tiled = EncoderOutput(
            states=enc.states.expand(n, -1, -1),
            lengths=enc.lengths.expand(n),
            pad_mask=enc.pad_mask.expand(n, -1),
            ctc_logits=None,
            xctc_logits=None,
            taps=[],
        )
        logits = self.decode_logits(tiled, prev, padding_mask(lens, L))
        last = logits[torch.arange(n), lens - 1]
        return torch.log_softmax(last, dim=-1)

    def teacher_forced_score(self, enc: EncoderOutput, tokens: Sequence[int]) -> float:
        """Summed log-probability of ``tokens`` followed by EOS."""
        tokens = list(tokens)
        prev = torch.tensor([[EOS_TOKEN] + tokens], dtype=torch.long)
        gold = torch.tensor(tokens + [EOS_TOKEN], dtype=torch.long)
        single = EncoderOutput(enc.states[:1], enc.lengths[:1], enc.pad_mask[:1], None, None, [])
        lp = torch.log_softmax(self.decode_logits(single, prev, None)[0], dim=-1)
        return float(lp[torch.arange(len(gold)), gold].sum().detach())

    # training objective

    def clm_alignments(
        self, feats: Tensor, lengths: Tensor, targets_y: Sequence[Sequence[int]]
    ) -> Tensor:
        """Forced alignments of ``targets_y`` under the current final XCTC head.

        Computed without gradient tracking and with dropout disabled; frames
        of infeasible samples are marked ``-1`` so curriculum mixing skips them.
        """
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                enc = self.encode(feats, lengths)
                lp = enc.log_probs(XCTC).to(torch.float64).numpy()
        finally:
            self.train(was_training)
        T = lp.shape[1]
        aligned = torch.full((len(targets_y), T), -1, dtype=torch.long)
        for b, tg in enumerate(targets_y):
            n = int(enc.lengths[b])
            if not ctc.is_feasible(n, tg):
                continue
            rows = ctc.log_softmax(lp[b, :n])
            path, _ = ctc.forced_align(rows, tg)
            aligned[b, :n] = torch.tensor(path, dtype=torch.long)
        return aligned

    def loss(self, batch, clm: ClmContext | None = None) -> tuple[Tensor, LossBreakdown]:
        """Aggregated objective: CE + alpha*CTC + beta*XCTC + weighted tap losses."""
        spec = self.spec
        enc = self.encode(batch.features, batch.feature_lengths, clm=clm)
        dec_targets = batch.y if spec.decoder_target == "y" else batch.x

        prev, gold, gold_mask = teacher_forcing_tensors(dec_targets)
        logits = self.decode_logits(enc, prev, ~gold_mask)
        ce = label_smoothed_ce(logits, gold, spec.label_smoothing, gold_mask)

        lengths = enc.lengths.tolist()
        skipped: set[int] = set()

        def ctc_term(logits, targets):
            nll, feasible = ctc_nll(logits, lengths, targets)
            skipped.update(int(i) for i in torch.nonzero(~feasible).flatten())
            denom = sum(len(t) for t, f in zip(targets, feasible.tolist()) if f)
            return nll.sum() / max(denom, 1)

        zero = ce.new_zeros(())
        ctc_final = ctc_term(enc.ctc_logits, batch.x) if spec.alpha > 0 else zero
        xctc_final = ctc_term(enc.xctc_logits, batch.y) if spec.beta > 0 else zero
        inter = {CTC: {}, XCTC: {}}
        for layer, kind, tap_logits in enc.taps:
            inter[kind][layer] = ctc_term(tap_logits, batch.x if kind == CTC else batch.y)

        total = ce + spec.alpha * ctc_final + spec.beta * xctc_final
        for kind in (CTC, XCTC):
            for v in inter[kind].values():
                total = total + spec.tap_weight(kind) * v

        breakdown = LossBreakdown(
            ce=float(ce.detach()),
            ctc_final=float(ctc_final.detach()),
            xctc_final=float(xctc_final.detach()),
            inter_ctc={k: float(v.detach()) for k, v in inter[CTC].items()},
            inter_xctc={k: float(v.detach()) for k, v in inter[XCTC].items()},
            weights={
                "ctc": spec.alpha,
                "xctc": spec.beta,
                "inter_ctc": spec.tap_weight(CTC),
                "inter_xctc": spec.tap_weight(XCTC),
            },
            total=float(total.detach()),
            skipped=len(skipped),
        )
        return total, breakdown


def teacher_forcing_tensors(targets: Sequence[Sequence[int]]) -> tuple[Tensor, Tensor, Tensor]:
    """Decoder inputs ``[EOS] + t``, outputs ``t + [EOS]`` and the valid-position mask."""
    B = len(targets)
    L = max(len(t) for t in targets) + 1
    prev = torch.full((B, L), EOS_TOKEN, dtype=torch.long)
    gold = torch.full((B, L), EOS_TOKEN, dtype=torch.long)
    mask = torch.zeros((B, L), dtype=torch.bool)
    for b, t in enumerate(targets):
        t = list(t)
        prev[b, 1 : len(t) + 1] = torch.tensor(t, dtype=torch.long)
        gold[b, : len(t) + 1] = torch.tensor(t + [EOS_TOKEN], dtype=torch.long)
        mask[b, : len(t) + 1] = True
    return prev, gold, mask


def build_model(spec: ModelSpec, seed: int = 0, dtype=torch.float32) -> BiLCTCModel:
    torch.manual_seed(seed)
    return BiLCTCModel(spec).to(dtype)


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> BiLCTCModel:
    from .nn import load_module_arrays

    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = BiLCTCModel(ModelSpec.from_dict(ckpt.meta["model_spec"]))
    load_module_arrays(model, ckpt.params)
    model.eval()
    return model


def average_checkpoints(paths: Sequence[str | Path], k: int | None = None) -> Checkpoint:
    """Mean parameters of the ``k`` checkpoints with the lowest recorded dev loss.

    With ``k=None`` every given checkpoint is averaged.
    """
    if not paths:
        raise InvalidInputError("no checkpoints to average")
    ckpts = [load_checkpoint(p) for p in paths]
    if k is not None:
        if k < 1:
            raise InvalidInputError("k must be positive")
        for p, c in zip(paths, ckpts):
            if c.dev_loss is None:
                raise InvalidInputError(f"{p} carries no dev loss; cannot rank it")
        order = sorted(range(len(ckpts)), key=lambda i: (ckpts[i].dev_loss, str(paths[i])))
        ckpts = [ckpts[i] for i in order[:k]]
    ref = ckpts[0]
    for c, p in zip(ckpts[1:], paths):
        bad = sorted(
            set(ref.params) ^ set(c.params)
            | {n for n in set(ref.params) & set(c.params) if ref.params[n].shape != c.params[n].shape}
        )
        if bad:
            raise InvalidInputError(f"checkpoints differ in parameters: {bad}")
    params = {}
    for name, first in ref.params.items():
        acc = np.zeros(first.shape, dtype=np.float64)
        for c in ckpts:
            acc += c.params[name]
        params[name] = (acc / len(ckpts)).astype(first.dtype)
    meta = dict(ref.meta)
    meta["averaged_from"] = [int(c.step) for c in ckpts]
    meta["dev_loss"] = float(np.mean([c.dev_loss for c in ckpts])) if all(
        c.dev_loss is not None for c in ckpts
    ) else None
    return Checkpoint(params=params, meta=meta)
