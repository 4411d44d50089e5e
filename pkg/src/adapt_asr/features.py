"""STFT magnitude, 80-dim log-mel filterbank, SpecAugment and the character tokenizer.

The tensor-level functions are differentiable so that enhancement front-ends
can be trained through the ASR loss.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np
import torch

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
FFT_SIZE = 512
NUM_MELS = 80
NUM_BINS = FFT_SIZE // 2 + 1
LOG_FLOOR = 1e-10
FRAME_SHIFT_MS = 1000.0 * HOP_LENGTH / SAMPLE_RATE

Array = Union[np.ndarray, torch.Tensor]


class FeatureError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    data: np.ndarray
    kind: Literal["logmel", "magnitude"]
    frame_shift_ms: float = FRAME_SHIFT_MS

    def __post_init__(self):
        if self.kind not in ("logmel", "magnitude"):
            raise FeatureError(f"unknown feature kind {self.kind!r}")
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise FeatureError(f"expected a T x F matrix with T >= 1, got shape {self.data.shape}")
        if self.kind == "logmel" and self.data.shape[1] != NUM_MELS:
            raise FeatureError(f"logmel features must have {NUM_MELS} bins, got {self.data.shape[1]}")
        if not np.all(np.isfinite(self.data)):
            raise FeatureError("feature matrix contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


def num_frames(num_samples, win: int = WIN_LENGTH, hop: int = HOP_LENGTH):
    """Frame count without padding; works elementwise on tensors."""
    return 1 + (num_samples - win) // hop


@functools.lru_cache(maxsize=None)
def _hann(win: int) -> np.ndarray:
    # periodic Hann, as used for STFT analysis
    n = np.arange(win)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def mel_filterbank(
    num_mels: int = NUM_MELS,
    fft_size: int = FFT_SIZE,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float = 8000.0,
) -> np.ndarray:
    """Triangular mel filters as a (fft_size//2 + 1, num_mels) matrix."""
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mels + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lo) / (center - lo)
    falling = (hi - bin_hz[None, :]) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    return fb.T.copy()


def stft_magnitude_tensor(wave: torch.Tensor) -> torch.Tensor:
    """(..., N) waveform -> (..., T, F) magnitude spectrogram."""
    if wave.shape[-1] < WIN_LENGTH:
        raise FeatureError(
            f"waveform of {wave.shape[-1]} samples is shorter than one {WIN_LENGTH}-sample window"
        )
    window = torch.as_tensor(_hann(WIN_LENGTH), dtype=wave.dtype, device=wave.device)
    frames = wave.unfold(-1, WIN_LENGTH, HOP_LENGTH) * window
    return torch.fft.rfft(frames, n=FFT_SIZE).abs()


def logmel_from_magnitude(mag: torch.Tensor) -> torch.Tensor:
    fb = torch.as_tensor(mel_filterbank(), dtype=mag.dtype, device=mag.device)
    mel_power = torch.matmul(mag.square(), fb)
    return torch.log(torch.clamp(mel_power, min=LOG_FLOOR))


def logmel_tensor(wave: torch.Tensor) -> torch.Tensor:
    return logmel_from_magnitude(stft_magnitude_tensor(wave))


def _as_wave_tensor(waveform: Array) -> torch.Tensor:
    if isinstance(waveform, torch.Tensor):
        t = waveform
    else:
        arr = np.asarray(waveform)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        t = torch.from_numpy(np.ascontiguousarray(arr))
    if t.ndim != 1 or t.numel() == 0:
        raise FeatureError("expected a nonempty 1-D waveform")
    return t


def stft_magnitude(waveform: Array) -> FeatureMatrix:
    with torch.no_grad():
        mag = stft_magnitude_tensor(_as_wave_tensor(waveform))
    return FeatureMatrix(mag.numpy(), kind="magnitude")


def logmel(waveform: Array) -> FeatureMatrix:
    with torch.no_grad():
        feats = logmel_tensor(_as_wave_tensor(waveform))
    return FeatureMatrix(feats.numpy(), kind="logmel")


# --------------------------------------------------------------------------- SpecAugment


@dataclass(frozen=True)
class SpecAugPolicy:
    num_freq_masks: int = 2
    max_freq_width: int = 10
    num_time_masks: int = 2
    max_time_width: int = 10
    seed: int = 0

    @classmethod
    def identity(cls) -> "SpecAugPolicy":
        return cls(0, 0, 0, 0)

    @property
    def is_identity(self) -> bool:
        return self.num_freq_masks == 0 and self.num_time_masks == 0


def spec_augment_mask(shape: tuple[int, int], policy: SpecAugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Boolean T x F mask of the cells to overwrite.

    Each band width is uniform on [0, max_width]; its start is uniform over the
    positions where the band fits.
    """
    T, F = shape
    if policy.max_freq_width > F or policy.max_time_width > T:
        raise FeatureError(
            f"mask widths ({policy.max_time_width}, {policy.max_freq_width}) exceed matrix {shape}"
        )
    mask = np.zeros(shape, dtype=bool)
    for _ in range(policy.num_freq_masks):
        w = int(rng.integers(0, policy.max_freq_width + 1))
        f0 = int(rng.integers(0, F - w + 1))
        mask[:, f0 : f0 + w] = True
    for _ in range(policy.num_time_masks):
        w = int(rng.integers(0, policy.max_time_width + 1))
        t0 = int(rng.integers(0, T - w + 1))
        mask[t0 : t0 + w, :] = True
    return mask


def spec_augment(features, policy: SpecAugPolicy, rng: np.random.Generator | None = None):
    """Replace masked time/frequency bands with the utterance mean.

    Accepts a FeatureMatrix, ndarray or tensor and returns the same type.
    """
    if isinstance(features, FeatureMatrix):
        return FeatureMatrix(spec_augment(features.data, policy, rng), features.kind, features.frame_shift_ms)
    if policy.is_identity:
        return features
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    mask = spec_augment_mask(tuple(features.shape), policy, rng)
    if isinstance(features, torch.Tensor):
        m = torch.from_numpy(mask).to(features.device)
        return torch.where(m, features.mean(), features)
    out = features.copy()
    out[mask] = features.mean()
    return out


# --------------------------------------------------------------------------- tokenizer

BLANK = "<blank>"
UNK = "<unk>"
SOS_EOS = "<sos/eos>"
SPACE = "<space>"


class TokenizerError(ValueError):
    pass


class Tokenizer:
    """Character tokenizer with reserved ids blank=0, unk=1 and sos/eos last."""

    def __init__(self, characters: Sequence[str]):
        chars = list(dict.fromkeys(characters))
        for c in chars:
            if len(c) != 1:
                raise TokenizerError(f"tokenizer symbols must be single characters, got {c!r}")
        self.symbols: tuple[str, ...] = (BLANK, UNK, *chars, SOS_EOS)
        self._char_to_id = {c: i + 2 for i, c in enumerate(chars)}

    @classmethod
    def from_texts(cls, texts) -> "Tokenizer":
        return cls(sorted({c for t in texts for c in t}))

    @property
    def blank_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def sos_eos_id(self) -> int:
        return len(self.symbols) - 1

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    @property
    def characters(self) -> list[str]:
        return list(self.symbols[2:-1])

    def tokenize(self, text: str) -> list[int]:
        return [self._char_to_id.get(c, self.unk_id) for c in text]

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.symbols):
                raise TokenizerError(f"token id {i} out of range [0, {len(self.symbols)})")
            if i == self.unk_id:
                out.append(UNK)
            elif i in (self.blank_id, self.sos_eos_id):
                continue
            else:
                out.append(self.symbols[i])
        return "".join(out)

    def save(self, path) -> None:
        """Write "symbol<TAB>id" lines, reserved symbols first."""
        reserved = [self.blank_id, self.unk_id, self.sos_eos_id]
        order = reserved + [i for i in range(len(self.symbols)) if i not in reserved]
        lines = [f"{SPACE if self.symbols[i] == ' ' else self.symbols[i]}\t{i}" for i in order]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                sym, idx = line.rsplit("\t", 1)
                rows.append((int(idx), " " if sym == SPACE else sym))
        rows.sort()
        symbols = [s for _, s in rows]
        if [i for i, _ in rows] != list(range(len(rows))) or symbols[:2] != [BLANK, UNK] or symbols[-1] != SOS_EOS:
            raise TokenizerError(f"{path}: malformed symbol table")
        return cls(symbols[2:-1])

    def __eq__(self, other):
        return isinstance(other, Tokenizer) and self.symbols == other.symbols

    def __repr__(self):
        return f"Tokenizer(vocab_size={self.vocab_size})"
