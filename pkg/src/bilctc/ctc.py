"""CTC lattice mathematics in log space.

Everything here works on plain numpy arrays in double precision.  Class 0 is
the blank symbol; labels are the integers ``1..V``.  A ``LogProbMatrix`` is a
``(T, C)`` array of natural-log probabilities whose rows are normalized.

The single-utterance functions (:func:`forward_backward`,
:func:`forced_align`, :class:`PrefixScorer`) favour clarity.
:func:`ctc_loss_batch` is the vectorized variant used during training; it is
cross-checked against the single-utterance path in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InfeasibleTargetError, InvalidInputError, UsageError

BLANK = 0
NEG_INF = -np.inf

__all__ = [
    "BLANK",
    "LatticeTables",
    "PrefixState",
    "PrefixScorer",
    "collapse",
    "ctc_gradient_wrt_logits",
    "ctc_log_likelihood",
    "ctc_loss_batch",
    "forced_align",
    "forward_backward",
    "is_feasible",
    "log_softmax",
    "logsumexp",
    "min_frames",
    "path_log_prob",
    "prefix_score_extend",
    "prefix_score_init",
]


def logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Max-subtracted log-sum-exp that maps all ``-inf`` input to ``-inf``."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m_safe), axis=axis, keepdims=True)) + m_safe
    if axis is None:
        return out.reshape(())[()]
    return np.squeeze(out, axis=axis)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return logits - logsumexp(logits, axis=-1)[..., None]


def _check_log_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 1 or probs.shape[1] < 2:
        raise InvalidInputError(f"expected a (T>=1, C>=2) matrix, got shape {probs.shape}")
    norms = logsumexp(probs, axis=1)
    if not np.all(np.abs(norms) <= 1e-6):
        raise InvalidInputError("rows of a log-probability matrix must log-sum-exp to 0")
    return probs


def _check_labels(target: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(list(target), dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() >= num_classes):
        raise InvalidInputError(
            f"labels must lie in [1, {num_classes - 1}], got {labels.tolist()}"
        )
    return labels


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames able to emit ``target``: one per label plus one blank per repeat."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(num_frames: int, target: Sequence[int]) -> bool:
    return num_frames >= min_frames(target)


def _require_feasible(num_frames: int, target: np.ndarray) -> None:
    need = min_frames(target.tolist())
    if num_frames < need:
        raise InfeasibleTargetError(
            f"target of length {len(target)} needs {need} frames, only {num_frames} available"
        )


def collapse(path: Sequence[int], num_classes: int | None = None) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for p in path:
        p = int(p)
        if p < 0 or (num_classes is not None and p >= num_classes):
            raise InvalidInputError(f"path index {p} outside [0, {num_classes})")
        if p != prev and p != BLANK:
            out.append(p)
        prev = p
    return out


def path_log_prob(probs: np.ndarray, path: Sequence[int]) -> float:
    score = 0.0
    for t, c in enumerate(path):
        score += probs[t, c]
    return float(score)


def _extend(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved state labels and the mask of states reachable by a skip."""
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ext, skip


@dataclass(frozen=True)
class LatticeTables:
    """Forward/backward tables for one utterance.

    ``alpha[t, s]`` includes the emission at frame ``t``; ``beta[t, s]``
    excludes it.  ``gamma[t, c]`` is the log posterior occupancy of class
    ``c`` at frame ``t`` given that the path collapses to the target.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    log_likelihood: float


def _alpha(probs: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T, S = probs.shape[0], len(ext)
    em = probs[:, ext]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = em[0, 0]
    if S > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + em[t]
    return alpha


def _final(row: np.ndarray) -> float:
    if len(row) == 1:
        return float(row[0])
    return float(np.logaddexp(row[-1], row[-2]))


def ctc_log_likelihood(probs: np.ndarray, target: Sequence[int]) -> float:
    """``log`` of the summed probability of every path collapsing to ``target``."""
    probs = _check_log_probs(probs)
    labels = _check_labels(target, probs.shape[1])
    _require_feasible(probs.shape[0], labels)
    ext, skip = _extend(labels)
    return _final(_alpha(probs, ext, skip)[-1])


def forward_backward(probs: np.ndarray, target: Sequence[int]) -> LatticeTables:
    probs = _check_log_probs(probs)
    T, C = probs.shape
    labels = _check_labels(target, C)
    _require_feasible(T, labels)
    ext, skip = _extend(labels)
    S = len(ext)
    em = probs[:, ext]

    alpha = _alpha(probs, ext, skip)
    log_z = _final(alpha[-1])

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    # a state s at t can move to s, s+1 or (when skip[s+2]) s+2 at t+1
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + em[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    occupancy = alpha + beta - log_z
    gamma = np.full((T, C), NEG_INF)
    for c in np.unique(ext):
        gamma[:, c] = logsumexp(occupancy[:, ext == c], axis=1)
    return LatticeTables(alpha=alpha, beta=beta, gamma=gamma, log_likelihood=log_z)


def ctc_gradient_wrt_logits(logits: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Gradient of ``-log P(target)`` with respect to unnormalized frame logits."""
    lp = log_softmax(logits)
    tables = forward_backward(lp, target)
    return np.exp(lp) - np.exp(tables.gamma)


def forced_align(probs: np.ndarray, target: Sequence[int]) -> tuple[list[int], float]:
    """Most probable path in the lattice of ``target`` (Viterbi).

    Ties are resolved deterministically while backtracking: the final state
    prefers the trailing blank over the last label, and each back-pointer
    prefers staying in the same lattice state, then advancing by one, then
    skipping a blank.
    """
    probs = _check_log_probs(probs)
    T = probs.shape[0]
    labels = _check_labels(target, probs.shape[1])
    _require_feasible(T, labels)
    ext, skip = _extend(labels)
    S = len(ext)
    em = probs[:, ext]

    delta = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.int64)
    delta[0, 0] = em[0, 0]
    if S > 1:
        delta[0, 1] = em[0, 1]
    for t in range(1, T):
        prev = delta[t - 1]
        cands = np.full((3, S), NEG_INF)
        cands[0] = prev
        cands[1, 1:] = prev[:-1]
        cands[2, 2:] = np.where(skip[2:], prev[:-2], NEG_INF)
        # argmax returns the first maximum, i.e. stay before advance before skip
        choice = np.argmax(cands, axis=0)
        back[t] = choice
        delta[t] = cands[choice, np.arange(S)] + em[t]

    s = S - 1
    if S > 1 and delta[T - 1, S - 2] > delta[T - 1, S - 1]:
        s = S - 2
    score = float(delta[T - 1, s])
    states = [s]
    for t in range(T - 1, 0, -1):
        s -= int(back[t, s])
        states.append(s)
    states.reverse()
    return [int(ext[s]) for s in states], score


@dataclass
class PrefixState:
    """CTC forward variables of a label prefix.

    ``r_nonblank[t]``/``r_blank[t]`` are the log-probabilities of having
    emitted exactly the prefix by frame ``t`` with the path ending in its
    last label or in blank.
    """

    prefix: tuple[int, ...]
    r_nonblank: np.ndarray
    r_blank: np.ndarray
    log_prefix_prob: float = 0.0
    ended: bool = False
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def last(self) -> int | None:
        return self.prefix[-1] if self.prefix else None


EOS = -1


def prefix_score_init(probs: np.ndarray) -> PrefixState:
    probs = _check_log_probs(probs)
    T = probs.shape[0]
    r_blank = np.cumsum(probs[:, BLANK])
    return PrefixState(
        prefix=(),
        r_nonblank=np.full(T, NEG_INF),
        r_blank=r_blank,
        extra={"probs": probs},
    )


def prefix_score_extend(state: PrefixState, next_label: int) -> tuple[PrefixState, float]:
    """Extend a prefix by one label, or by :data:`EOS` to close it.

    Returns the new state and the log prefix probability: the probability
    that the emitted label sequence starts with the extended prefix, or for
    :data:`EOS` that it equals the prefix exactly.
    """
    if state.ended:
        raise UsageError("cannot extend a prefix that already ended")
    probs = state.extra["probs"]
    if next_label == EOS:
        score = float(np.logaddexp(state.r_nonblank[-1], state.r_blank[-1]))
        return (
            PrefixState(
                prefix=state.prefix,
                r_nonblank=state.r_nonblank,
                r_blank=state.r_blank,
                log_prefix_prob=score,
                ended=True,
                extra=state.extra,
            ),
            score,
        )
    T, C = probs.shape
    if not 1 <= next_label < C:
        raise InvalidInputError(f"label {next_label} outside [1, {C - 1}]")
    r_n, r_b, psi = _extend_prefix(
        probs, state.r_nonblank, state.r_blank, state.last, next_label, empty=not state.prefix
    )
    return (
        PrefixState(
            prefix=state.prefix + (next_label,),
            r_nonblank=r_n,
            r_blank=r_b,
            log_prefix_prob=psi,
            extra=state.extra,
        ),
        psi,
    )


def _extend_prefix(probs, prev_n, prev_b, last, c, empty):
    T = probs.shape[0]
    emit = probs[:, c]
    blank = probs[:, BLANK]
    r_n = np.full(T, NEG_INF)
    r_b = np.full(T, NEG_INF)
    # phi[t]: prefix complete at t with a path that may be followed by a new c
    if c == last:
        phi = prev_b
    else:
        phi = np.logaddexp(prev_b, prev_n)
    if empty:
        r_n[0] = emit[0]
    psi_terms = [r_n[0]]
    for t in range(1, T):
        r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + emit[t]
        r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + blank[t]
        psi_terms.append(phi[t - 1] + emit[t])
    psi = float(logsumexp(np.asarray(psi_terms)))
    return r_n, r_b, psi


class PrefixScorer:
    """Convenience wrapper holding one utterance's log-probabilities."""

    def __init__(self, probs: np.ndarray):
        self.probs = _check_log_probs(probs)
        self.initial = prefix_score_init(self.probs)

    def score(self, prefix: Sequence[int], eos: bool = False) -> float:
        state = self.initial
        score = 0.0
        for label in prefix:
            state, score = prefix_score_extend(state, label)
        if eos:
            state, score = prefix_score_extend(state, EOS)
        return score


def ctc_loss_batch(
    logits: np.ndarray,
    lengths: Sequence[int],
    targets: Sequence[Sequence[int]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Negative log-likelihoods and logit gradients for a padded batch.

    ``logits`` is ``(B, T, C)``; frames at or beyond ``lengths[b]`` are
    ignored.  Returns ``(nll, grad, feasible)``; infeasible samples get a
    zero loss and a zero gradient so the caller can skip and count them.
    """
    logits = np.asarray(logits, dtype=np.float64)
    B, T_max, C = logits.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    lp = log_softmax(logits)

    feasible = np.array([is_feasible(int(n), tg) for n, tg in zip(lengths, targets)])
    u_max = max((len(tg) for tg in targets), default=0)
    S_max = 2 * u_max + 1
    ext = np.zeros((B, S_max), dtype=np.int64)
    n_states = np.zeros(B, dtype=np.int64)
    for b, tg in enumerate(targets):
        if len(tg) and (min(tg) < 1 or max(tg) >= C):
            raise InvalidInputError(f"labels of sample {b} outside [1, {C - 1}]")
        ext[b, 1 : 2 * len(tg) : 2] = tg
        n_states[b] = 2 * len(tg) + 1
    state_ok = np.arange(S_max)[None, :] < n_states[:, None]
    skip = np.zeros((B, S_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])

    em = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T_max, S_max)), axis=2)
    em = np.where(state_ok[:, None, :], em, NEG_INF)

    alpha = np.full((B, T_max, S_max), NEG_INF)
    alpha[:, 0, 0] = em[:, 0, 0]
    if S_max > 1:
        alpha[:, 0, 1] = em[:, 0, 1]
    for t in range(1, T_max):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
        acc[:, 2:] = np.where(skip[:, 2:], np.logaddexp(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
        alpha[:, t] = acc + em[:, t]

    bidx = np.arange(B)
    last_t = np.maximum(lengths - 1, 0)
    end_a = alpha[bidx, last_t, n_states - 1]
    end_b = np.where(n_states > 1, alpha[bidx, last_t, np.maximum(n_states - 2, 0)], NEG_INF)
    log_z = np.logaddexp(end_a, end_b)

    final_mask = (np.arange(S_max)[None, :] == (n_states - 1)[:, None]) | (
        np.arange(S_max)[None, :] == (n_states - 2)[:, None]
    )
    beta = np.full((B, T_max, S_max), NEG_INF)
    for t in range(T_max - 1, -1, -1):
        if t < T_max - 1:
            nxt = beta[:, t + 1] + em[:, t + 1]
            acc = nxt.copy()
            acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
            acc[:, :-2] = np.where(skip[:, 2:], np.logaddexp(acc[:, :-2], nxt[:, 2:]), acc[:, :-2])
        else:
            acc = np.full((B, S_max), NEG_INF)
        init = np.where(final_mask, 0.0, NEG_INF)
        here = np.where((t == lengths - 1)[:, None], init, acc)
        here = np.where((t < lengths)[:, None] & state_ok, here, NEG_INF)
        beta[:, t] = here

    safe_z = np.where(feasible, log_z, 0.0)
    with np.errstate(invalid="ignore"):
        post = np.exp(alpha + beta - safe_z[:, None, None])
    post = np.nan_to_num(post, nan=0.0)
    onehot = np.zeros((B, S_max, C))
    onehot[bidx[:, None], np.arange(S_max)[None, :], ext] = state_ok.astype(np.float64)
    occupancy = np.einsum("bts,bsc->btc", post, onehot)

    frame_ok = (np.arange(T_max)[None, :] < lengths[:, None])[..., None]
    grad = np.where(frame_ok, np.exp(lp) - occupancy, 0.0)
    grad[~feasible] = 0.0
    nll = np.where(feasible, -safe_z, 0.0)
    return nll, grad, feasible
