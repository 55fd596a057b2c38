"""Synthetic speech-translation task, dataset files and batching.

A source sentence ``x`` is a string of symbols.  Its "audio" repeats a fixed
random embedding of each symbol ``upsample`` times and adds Gaussian noise.
The translation ``y`` reverses ``x`` inside non-overlapping windows and then
rewrites each symbol using the symbol before it, so producing ``y`` needs
cross-position context.  Setting ``easy_target`` keeps the source order,
which gives a monotone target that CTC finds much easier.

Dataset files are JSON lines, one sample per line::

    {"id": "utt000001", "x": [3, 17, 5], "y": [5, 8, 20],
     "features": [[0.12, -1.3, ...], ...]}

``x`` and ``y`` hold 1-based labels (0 is the CTC blank).  Instead of
``features`` a record may carry ``"task"`` (a :class:`SyntheticTaskSpec` as a
mapping) and ``"index"``; the features are then regenerated on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .ctc import is_feasible
from .errors import ConfigurationError, InvalidInputError


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_x: int = 20
    vocab_y: int = 20
    min_len: int = 4
    max_len: int = 12
    upsample: int = 4
    d_in: int = 16
    noise: float = 0.1
    window: int = 3
    substitution: str = "context"  # or "identity"
    easy_target: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.upsample < 2:
            raise ConfigurationError("upsample factor must be at least 2")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError("need 1 <= min_len <= max_len")
        if self.window < 1:
            raise ConfigurationError("window must be positive")
        if self.substitution not in ("context", "identity"):
            raise ConfigurationError(f"unknown substitution {self.substitution!r}")
        if self.substitution == "identity" and self.vocab_y < self.vocab_x:
            raise ConfigurationError("identity substitution needs vocab_y >= vocab_x")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    id: str
    features: np.ndarray  # (T0, d_in) float32
    x: list[int]
    y: list[int]

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


def translate(x: Sequence[int], spec: SyntheticTaskSpec) -> list[int]:
    """Map a 1-based source label sequence to its 1-based translation."""
    sym = [v - 1 for v in x]
    if spec.easy_target or spec.window == 1:
        z = sym
    else:
        z = []
        for start in range(0, len(sym), spec.window):
            z.extend(reversed(sym[start : start + spec.window]))
    if spec.substitution == "identity":
        out = [k % spec.vocab_y for k in z]
    else:
        out = [(k + (z[i - 1] if i else 0)) % spec.vocab_y for i, k in enumerate(z)]
    return [k + 1 for k in out]


def symbol_embeddings(spec: SyntheticTaskSpec) -> np.ndarray:
    return np.random.default_rng([spec.seed, 0]).normal(size=(spec.vocab_x, spec.d_in))


def make_sample(spec: SyntheticTaskSpec, index: int, table: np.ndarray | None = None) -> Sample:
    if table is None:
        table = symbol_embeddings(spec)
    rng = np.random.default_rng([spec.seed, 1, index])
    U = int(rng.integers(spec.min_len, spec.max_len + 1))
    x = [int(v) for v in rng.integers(1, spec.vocab_x + 1, size=U)]
    frames = np.repeat(table[np.asarray(x) - 1], spec.upsample, axis=0)
    frames = frames + spec.noise * rng.normal(size=frames.shape)
    return Sample(
        id=f"utt{index:06d}",
        features=frames.astype(np.float32),
        x=x,
        y=translate(x, spec),
    )


def generate(spec: SyntheticTaskSpec, n: int, start: int = 0) -> list[Sample]:
    table = symbol_embeddings(spec)
    return [make_sample(spec, i, table) for i in range(start, start + n)]


def generate_splits(
    spec: SyntheticTaskSpec, n_train: int, n_dev: int, n_test: int
) -> dict[str, list[Sample]]:
    """Consecutive index ranges, so the splits never share an id."""
    return {
        "train": generate(spec, n_train, 0),
        "dev": generate(spec, n_dev, n_train),
        "test": generate(spec, n_test, n_train + n_dev),
    }


# files


def _record(sample: Sample, task: SyntheticTaskSpec | None, index: int | None) -> dict:
    rec = {"id": sample.id, "x": list(sample.x), "y": list(sample.y)}
    if task is not None and index is not None:
        rec["task"] = task.to_dict()
        rec["index"] = index
    else:
        rec["features"] = [[float(v) for v in row] for row in sample.features]
    return rec


def save_dataset(
    path: str | Path,
    samples: Iterable[Sample],
    task: SyntheticTaskSpec | None = None,
    indices: Sequence[int] | None = None,
) -> Path:
    """Write JSON lines; with ``task`` and ``indices`` only generation seeds are stored."""
    path = Path(path)
    samples = list(samples)
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            idx = indices[i] if indices is not None else None
            rec = _record(s, task if indices is not None else None, idx)
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return path


def load_dataset(path: str | Path) -> list[Sample]:
    path = Path(path)
    out = []
    tables: dict[SyntheticTaskSpec, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                x = [int(v) for v in rec["x"]]
                y = [int(v) for v in rec["y"]]
                if "features" in rec:
                    feats = np.asarray(rec["features"], dtype=np.float32)
                    if feats.ndim != 2:
                        raise ValueError("features must be a matrix")
                else:
                    task = SyntheticTaskSpec(**rec["task"])
                    if task not in tables:
                        tables[task] = symbol_embeddings(task)
                    feats = make_sample(task, int(rec["index"]), tables[task]).features
                if min(x + y, default=1) < 1:
                    raise ValueError("labels must be >= 1")
                out.append(Sample(id=str(rec["id"]), features=feats, x=x, y=y))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out


def write_vocab(path: str | Path, tokens: Sequence[str]) -> Path:
    """One token per line; the line number is the index, line 0 the blank."""
    path = Path(path)
    path.write_text("".join(f"{t}\n" for t in tokens), encoding="utf-8")
    return path


def read_vocab(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def synthetic_vocabs(spec: SyntheticTaskSpec) -> tuple[list[str], list[str]]:
    src = ["<blank>"] + [f"s{k}" for k in range(1, spec.vocab_x + 1)]
    tgt = ["<blank>"] + [f"t{k}" for k in range(1, spec.vocab_y + 1)]
    return src, tgt


# batching


@dataclass
class Batch:
    ids: list[str]
    features: torch.Tensor  # (B, T0, d_in), zero padded
    feature_lengths: torch.Tensor  # (B,)
    x: list[list[int]]
    y: list[list[int]]
    mask: torch.Tensor = field(init=False)  # (B, T0), True on real frames

    def __post_init__(self):
        T0 = self.features.shape[1]
        self.mask = torch.arange(T0)[None, :] < self.feature_lengths[:, None]

    def __len__(self) -> int:
        return len(self.ids)


def encoder_frames(num_input_frames: int) -> int:
    return math.ceil(num_input_frames / 2)


def ctc_feasible(sample: Sample) -> bool:
    T = encoder_frames(sample.num_frames)
    return is_feasible(T, sample.x) and is_feasible(T, sample.y)


def filter_feasible(samples: Sequence[Sample]) -> tuple[list[Sample], int]:
    kept = [s for s in samples if ctc_feasible(s)]
    return kept, len(samples) - len(kept)


def collate(samples: Sequence[Sample], dtype=torch.float32) -> Batch:
    T0 = max(s.num_frames for s in samples)
    d = samples[0].features.shape[1]
    feats = np.zeros((len(samples), T0, d), dtype=np.float32)
    for i, s in enumerate(samples):
        feats[i, : s.num_frames] = s.features
    return Batch(
        ids=[s.id for s in samples],
        features=torch.from_numpy(feats).to(dtype),
        feature_lengths=torch.tensor([s.num_frames for s in samples], dtype=torch.long),
        x=[list(s.x) for s in samples],
        y=[list(s.y) for s in samples],
    )


def build_batches(
    samples: Sequence[Sample], max_frames: int, dtype=torch.float32
) -> list[Batch]:
    """Length-sorted batches whose padded size ``B * T0_max`` stays within ``max_frames``.

    Samples whose targets cannot fit the encoder frame count are dropped.  A
    single sample longer than the budget still gets a batch of its own.
    """
    kept, _ = filter_feasible(samples)
    order = sorted(kept, key=lambda s: (s.num_frames, s.id))
    batches: list[list[Sample]] = []
    cur: list[Sample] = []
    for s in order:
        longest = max([s.num_frames] + [c.num_frames for c in cur])
        if cur and longest * (len(cur) + 1) > max_frames:
            batches.append(cur)
            cur = []
        cur.append(s)
    if cur:
        batches.append(cur)
    return [collate(b, dtype) for b in batches]


def iterate_epochs(
    batches: Sequence[Batch], rng: np.random.Generator
) -> Iterator[Batch]:
    """Endless stream of batches, reshuffled every epoch."""
    while True:
        for i in rng.permutation(len(batches)):
            yield batches[int(i)]
