"""
core/seeding.py

Seed derivation. Every random draw in ridgelab comes from a generator built
by ``derive_rng(master_seed, tag, *index)``: the master seed is the
SeedSequence entropy, the stream tag (hashed) plus integer indices form the
spawn key, and the bit generator is counter-based Philox. Any stream can be
reproduced in isolation, independent of the order streams are created.

Stream tags in use:
    "truth"          ground-truth weights             (index: -)
    "plan"           subsampling plans                (index: draw)
    "data"           synthetic dataset                (index: cell, trial)
    "train-noise"    training readout noise           (index: cell, trial, readout)
    "test"           sampled test sets                (index: block)
    "blobs"          synthetic classification data    (index: split)
    "class-train"    classifier training noise        (index: readout)
    "class-eval"     classifier evaluation noise      (index: readout, block)
"""

from __future__ import annotations

import zlib

import numpy as np

from core.errors import ParameterError


_U64 = (1 << 64) - 1


def _tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def derive_seed_sequence(master_seed: int, tag: str, *index: int) -> np.random.SeedSequence:
    if master_seed < 0 or master_seed > _U64:
        raise ParameterError(f"master seed must be an unsigned 64-bit integer, got {master_seed}")
    if any(i < 0 for i in index):
        raise ParameterError(f"stream indices must be non-negative, got {index}")
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(_tag_id(tag), *(int(i) for i in index)))


def derive_rng(master_seed: int, tag: str, *index: int) -> np.random.Generator:
    """Generator for stream ``(tag, *index)`` under ``master_seed``."""
    return np.random.Generator(np.random.Philox(derive_seed_sequence(master_seed, tag, *index)))


def derive_seed(master_seed: int, tag: str, *index: int) -> int:
    """A derived 64-bit seed, for handing a stream to code that takes plain integer seeds."""
    state = derive_seed_sequence(master_seed, tag, *index).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32) | int(state[1])
