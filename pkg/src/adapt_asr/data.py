"""Loading manifests into tensors and batching them."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import UtteranceRecord, load_wav
from .features import SpecAugPolicy, Tokenizer, logmel, spec_augment


@dataclass
class Utterance:
    id: str
    text: str
    targets: list[int]
    condition: str
    is_real: bool
    wave: np.ndarray
    clean: Optional[np.ndarray] = None
    feats: Optional[np.ndarray] = None


def _load_one(rec: UtteranceRecord, tokenizer: Tokenizer, with_clean: bool, with_feats: bool) -> Utterance:
    wave = load_wav(rec.audio_path).astype(np.float32)
    clean = None
    if with_clean and not rec.is_real and rec.clean_path:
        clean = load_wav(rec.clean_path).astype(np.float32)
        if len(clean) != len(wave):
            raise ValueError(f"{rec.id}: clean reference length {len(clean)} != noisy length {len(wave)}")
    utt = Utterance(
        id=rec.id,
        text=rec.transcript,
        targets=tokenizer.tokenize(rec.transcript),
        condition=rec.condition,
        is_real=rec.is_real,
        wave=wave,
        clean=clean,
    )
    if with_feats:
        utt.feats = logmel(wave).data
    return utt


def load_utterances(
    records: Sequence[UtteranceRecord],
    tokenizer: Tokenizer,
    with_clean: bool = False,
    with_feats: bool = True,
    workers: int = 1,
) -> list[Utterance]:
    """Read audio (and log-mel features) for ``records``, preserving order."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda r: _load_one(r, tokenizer, with_clean, with_feats), records))
    return [_load_one(r, tokenizer, with_clean, with_feats) for r in records]


def make_batches(
    utts: Sequence[Utterance], batch_size: int, rng: Optional[np.random.Generator] = None
) -> list[list[Utterance]]:
    """Split into batches that never mix real and simulated utterances.

    Without ``rng`` the order is deterministic (by length within each kind).
    """
    batches = []
    for is_real in (False, True):
        group = [u for u in utts if u.is_real == is_real]
        if rng is None:
            group.sort(key=lambda u: (len(u.wave), u.id))
        else:
            group = [group[i] for i in rng.permutation(len(group))]
        batches += [group[i : i + batch_size] for i in range(0, len(group), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def collate_feats(
    batch: Sequence[Utterance],
    spec_aug: Optional[SpecAugPolicy] = None,
    rng: Optional[np.random.Generator] = None,
    dtype=torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([u.feats.shape[0] for u in batch])
    out = torch.zeros(len(batch), int(lengths.max()), batch[0].feats.shape[1], dtype=dtype)
    for i, u in enumerate(batch):
        f = u.feats
        if spec_aug is not None and not spec_aug.is_identity:
            f = spec_augment(f, spec_aug, rng)
        out[i, : f.shape[0]] = torch.from_numpy(np.asarray(f)).to(dtype)
    return out, lengths


def collate_waves(batch: Sequence[Utterance], dtype=torch.float32):
    lengths = torch.tensor([len(u.wave) for u in batch])
    n = int(lengths.max())
    noisy = torch.zeros(len(batch), n, dtype=dtype)
    clean = None
    if all(u.clean is not None for u in batch):
        clean = torch.zeros(len(batch), n, dtype=dtype)
    for i, u in enumerate(batch):
        noisy[i, : len(u.wave)] = torch.from_numpy(u.wave).to(dtype)
        if clean is not None:
            clean[i, : len(u.clean)] = torch.from_numpy(u.clean).to(dtype)
    return noisy, lengths, clean
