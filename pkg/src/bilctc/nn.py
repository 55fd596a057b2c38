"""Transformer building blocks, losses, optimizer and checkpoint I/O.

Layers are written from tensor primitives on top of torch autograd; only
``torch.nn.Module`` bookkeeping and elementwise kernels come from torch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import ctc
from .errors import ConfigurationError, InvalidInputError, TrainingDivergedError

CHECKPOINT_FORMAT = "bilctc-checkpoint"
CHECKPOINT_VERSION = 1


def xavier_uniform_(weight: Tensor) -> Tensor:
    fan_out, fan_in = weight.shape[0], weight.shape[1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return weight.uniform_(-bound, bound)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(xavier_uniform_(torch.empty(d_out, d_in)))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ConfigurationError(
                f"linear expects last dim {self.weight.shape[1]}, got {x.shape[-1]}"
            )
        y = x @ self.weight.t()
        if self.bias is not None:
            y = y + self.bias
        return y


class Embedding(nn.Module):
    def __init__(self, num: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(xavier_uniform_(torch.empty(num, dim)))

    def forward(self, idx: Tensor) -> Tensor:
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= self.weight.shape[0]):
            raise InvalidInputError("embedding index out of range")
        return self.weight[idx]


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.weight + self.bias


def sinusoidal_position_encoding(length: int, dim: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


def dropout(x: Tensor, rate: float, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return x
    return torch.nn.functional.dropout(x, rate, training=True)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"hidden size {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.out = Linear(dim, dim)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_padding_mask: Tensor | None = None,
        causal: bool = False,
    ) -> Tensor:
        """``key_padding_mask`` is ``(B, Lk)`` with True on padded keys."""
        B, Lq, D = query.shape
        Lk = key.shape[1]
        h, dk = self.heads, D // self.heads

        def split(x, L):
            return x.reshape(B, L, h, dk).transpose(1, 2)

        q, k, v = split(self.q(query), Lq), split(self.k(key), Lk), split(self.v(value), Lk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dk)
        neg = torch.full((), -math.inf, dtype=scores.dtype)
        if key_padding_mask is not None:
            scores = torch.where(key_padding_mask[:, None, None, :], neg, scores)
        if causal:
            future = torch.ones(Lq, Lk, dtype=torch.bool).triu(1)
            scores = torch.where(future, neg, scores)
        attn = torch.softmax(scores, dim=-1)
        ctxt = (attn @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.out(ctxt)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x: Tensor, rate: float = 0.0, training: bool = False) -> Tensor:
        return self.fc2(dropout(torch.relu(self.fc1(x)), rate, training))


class EncoderLayer(nn.Module):
    """Post-norm self-attention block."""

    def __init__(self, dim: int, heads: int, ffn: int, rate: float):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, ffn)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.rate = rate

    def forward(self, x: Tensor, pad_mask: Tensor | None) -> Tensor:
        x = self.norm1(x + dropout(self.attn(x, x, x, pad_mask), self.rate, self.training))
        y = self.ffn(x, self.rate, self.training)
        return self.norm2(x + dropout(y, self.rate, self.training))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn: int, rate: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, ffn)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.norm3 = LayerNorm(dim)
        self.rate = rate

    def forward(
        self, x: Tensor, memory: Tensor, memory_mask: Tensor | None, tgt_mask: Tensor | None
    ) -> Tensor:
        r, tr = self.rate, self.training
        x = self.norm1(x + dropout(self.self_attn(x, x, x, tgt_mask, causal=True), r, tr))
        x = self.norm2(x + dropout(self.cross_attn(x, memory, memory, memory_mask), r, tr))
        return self.norm3(x + dropout(self.ffn(x, r, tr), r, tr))


class FrameStacker(nn.Module):
    """Concatenate frame pairs and project: a stand-in for conv subsampling."""

    def __init__(self, d_in: int, dim: int):
        super().__init__()
        self.d_in = d_in
        self.proj = Linear(2 * d_in, dim)

    def forward(self, feats: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        B, T0, d = feats.shape
        if d != self.d_in:
            raise ConfigurationError(f"features have dim {d}, model expects {self.d_in}")
        if T0 % 2:
            feats = torch.cat([feats, feats.new_zeros(B, 1, d)], dim=1)
        stacked = feats.reshape(B, -1, 2 * d)
        return self.proj(stacked), (lengths + 1) // 2


def padding_mask(lengths: Tensor, max_len: int) -> Tensor:
    """True on padded positions."""
    return torch.arange(max_len)[None, :] >= lengths[:, None]


def label_smoothed_ce(
    logits: Tensor, targets: Tensor, epsilon: float, mask: Tensor | None = None
) -> Tensor:
    """Cross-entropy against ``(1-eps)*onehot + eps*uniform``, averaged over kept positions.

    ``mask`` is True where a position counts.  Written out this is
    ``(1-eps) * NLL + eps * mean_k(-log p_k)``.
    """
    if not 0.0 <= epsilon < 1.0:
        raise InvalidInputError(f"epsilon must lie in [0, 1), got {epsilon}")
    K = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= K):
        raise InvalidInputError("target index out of range")
    lp = torch.log_softmax(logits, dim=-1)
    nll = -lp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    smooth = -lp.mean(dim=-1)
    loss = (1.0 - epsilon) * nll + epsilon * smooth
    if mask is None:
        return loss.mean()
    mask = mask.to(loss.dtype)
    return (loss * mask).sum() / mask.sum().clamp_min(1.0)


class _CTCLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, lengths, targets):
        z = logits.detach().to(torch.float64).cpu().numpy()
        nll, grad, feasible = ctc.ctc_loss_batch(z, lengths, targets)
        ctx.save_for_backward(torch.from_numpy(grad).to(logits.dtype))
        feas = torch.from_numpy(feasible)
        ctx.mark_non_differentiable(feas)
        return torch.from_numpy(nll).to(logits.dtype), feas

    @staticmethod
    def backward(ctx, g_nll, _g_feas):
        (grad,) = ctx.saved_tensors
        return grad * g_nll[:, None, None], None, None


def ctc_nll(
    logits: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]
) -> tuple[Tensor, Tensor]:
    """Per-sample CTC negative log-likelihood with the lattice engine's gradient.

    Returns ``(nll, feasible)``; infeasible samples contribute zero.
    """
    return _CTCLoss.apply(logits, [int(n) for n in lengths], [list(t) for t in targets])


def inv_sqrt_lr(step: int, warmup: int, peak: float) -> float:
    """Inverse square-root schedule with linear warm-up, equal to ``peak`` at ``warmup``."""
    if step < 1:
        raise InvalidInputError("learning-rate steps are counted from 1")
    return peak * min(step**-0.5, step * warmup**-1.5) * warmup**0.5


@dataclass
class Adam:
    """Adam with bias correction over a name -> parameter mapping."""

    params: dict[str, nn.Parameter]
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step_count: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, torch.zeros_like(p))
            self.exp_avg_sq.setdefault(name, torch.zeros_like(p))

    def step(self, lr: float, grads: dict[str, Tensor] | None = None) -> None:
        if grads is None:
            grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        for name, g in grads.items():
            if not torch.isfinite(g).all():
                raise TrainingDivergedError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        with torch.no_grad():
            for name, g in grads.items():
                m, v = self.exp_avg[name], self.exp_avg_sq[name]
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                denom = (v / c2).sqrt_().add_(self.eps)
                self.params[name].addcdiv_(m, denom, value=-lr / c1)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam_m/{name}"] = self.exp_avg[name].detach().cpu().numpy()
            out[f"adam_v/{name}"] = self.exp_avg_sq[name].detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for name in self.params:
            self.exp_avg[name] = torch.from_numpy(arrays[f"adam_m/{name}"]).clone()
            self.exp_avg_sq[name] = torch.from_numpy(arrays[f"adam_v/{name}"]).clone()
        self.step_count = step


@dataclass
class Checkpoint:
    """Named parameters plus metadata, as stored on disk.

    File layout (``numpy.savez``): one array per parameter under
    ``param/<name>``, optional Adam moments under ``adam_m/<name>`` and
    ``adam_v/<name>``, and a JSON string under ``__meta__`` holding
    ``format``, ``version``, ``step``, ``dev_loss`` and ``model_spec``.
    """

    params: dict[str, np.ndarray]
    meta: dict
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def dev_loss(self) -> float | None:
        return self.meta.get("dev_loss")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    meta = dict(ckpt.meta, format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION)
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays.update(ckpt.optimizer)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise InvalidInputError(f"{path} is not a bilctc checkpoint")
        if meta.get("version", 0) > CHECKPOINT_VERSION:
            raise InvalidInputError(f"{path} has unsupported version {meta['version']}")
        params = {k[len("param/") :]: data[k] for k in data.files if k.startswith("param/")}
        opt = {k: data[k] for k in data.files if k.startswith("adam_")}
    return Checkpoint(params=params, meta=meta, optimizer=opt)


def module_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {n: p.detach().cpu().numpy().copy() for n, p in module.named_parameters()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    own = dict(module.named_parameters())
    missing = sorted(set(own) - set(arrays))
    unexpected = sorted(set(arrays) - set(own))
    bad = [n for n in own if n in arrays and tuple(arrays[n].shape) != tuple(own[n].shape)]
    if missing or unexpected or bad:
        raise InvalidInputError(
            f"parameter mismatch: missing={missing} unexpected={unexpected} shape={bad}"
        )
    with torch.no_grad():
        for n, p in own.items():
            p.copy_(torch.from_numpy(np.asarray(arrays[n])).to(p.dtype))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)
