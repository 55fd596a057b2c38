"""Tiny model and data fixtures shared by several test modules."""

import numpy as np
import torch

from bilctc.data import SyntheticTaskSpec, collate, generate
from bilctc.model import CTC, XCTC, ClmContext, ModelSpec, build_model

TASK = SyntheticTaskSpec(vocab_x=5, vocab_y=5, min_len=2, max_len=4, d_in=4, upsample=3, seed=3)

FULL = dict(
    encoder_layers=4,
    acoustic_layers=2,
    decoder_layers=2,
    d_model=8,
    heads=2,
    ffn=16,
    d_in=4,
    vocab_x=5,
    vocab_y=5,
    taps=[(1, CTC), (3, XCTC)],
    pae=[CTC, XCTC],
    clm_ratio=0.5,
    dropout=0.0,
)


def tiny_spec(**over):
    kw = dict(FULL)
    kw.update(over)
    return ModelSpec(**kw)


def tiny_batch(n=3, dtype=torch.float64, start=0):
    return collate(generate(TASK, n, start), dtype)


def tiny_model(spec=None, seed=0, dtype=torch.float64):
    return build_model(spec or tiny_spec(), seed=seed, dtype=dtype)


def clm_context(model, batch, ratio=None, seed=11):
    aligned = model.clm_alignments(batch.features, batch.feature_lengths, batch.y)
    r = model.spec.clm_ratio if ratio is None else ratio
    return ClmContext(aligned=aligned, rng=np.random.default_rng(seed), ratio=r)
