"""Synthetic toy corpus for desk-scale runs.

Each character is a short chord of one low and one high tone; words are
2-3 characters from a fixed lexicon. Pretraining audio is corrupted by
broadband noise (family A: white/pink/brown). Adaptation audio uses a
disjoint family B with structured noises named after the four target
conditions: engine rumble (bus), sirens and clicks (str), bursty band noise
(ped) and tone babble built from the character inventory itself (caf).
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import SAMPLE_RATE, DEFAULT_CONDITIONS, UtteranceRecord, mix_at_snr, write_manifest, write_wav
from .model import ModelConfig

LOW_TONES = (400.0, 600.0, 800.0, 1000.0)
HIGH_TONES = (1500.0, 2000.0, 2500.0)
CHARS = string.ascii_lowercase[: len(LOW_TONES) * len(HIGH_TONES)]
FAMILY_A = ("white", "pink", "brown")
FAMILY_B = DEFAULT_CONDITIONS

TOY_MODEL = ModelConfig(
    num_encoder_layers=4,
    num_decoder_layers=2,
    attn_dim=64,
    attn_heads=4,
    ff_units=256,
    conv_kernel=7,
    dropout=0.1,
)


@dataclass(frozen=True)
class ToySizes:
    pretrain_train: int = 600
    pretrain_dev: int = 60
    real_train: int = 40
    simu_train: int = 40
    dev: int = 15
    eval: int = 15
    snr_a: tuple[float, float] = (0.0, 20.0)
    snr_b: tuple[float, float] = (-2.0, 8.0)
    lexicon_size: int = 24


def char_tones(c: str) -> tuple[float, float]:
    i = CHARS.index(c)
    return LOW_TONES[i // len(HIGH_TONES)], HIGH_TONES[i % len(HIGH_TONES)]


def make_lexicon(size: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    words: set[str] = set()
    while len(words) < size:
        n = int(rng.integers(2, 4))
        words.add("".join(rng.choice(list(CHARS), n)))
    return sorted(words)


def _envelope(n: int, ramp: int = 48) -> np.ndarray:
    env = np.ones(n)
    r = min(ramp, n // 2)
    env[:r] = np.linspace(0, 1, r)
    env[n - r :] = np.linspace(1, 0, r)
    return env


def synth_utterance(words: list[str], rng: np.random.Generator) -> np.ndarray:
    """Render ``words`` as tone chords with speaker-like jitter."""
    sr = SAMPLE_RATE
    pitch = 1.0 + rng.uniform(-0.03, 0.03)
    amp = rng.uniform(0.1, 0.3)
    pieces = [np.zeros(int(sr * rng.uniform(0.08, 0.16)))]
    for w, word in enumerate(words):
        if w:
            pieces.append(np.zeros(int(sr * rng.uniform(0.1, 0.16))))
        for k, c in enumerate(word):
            if k:
                pieces.append(np.zeros(int(sr * rng.uniform(0.015, 0.03))))
            n = int(sr * rng.uniform(0.07, 0.11))
            t = np.arange(n) / sr
            lo, hi = char_tones(c)
            tone = np.sin(2 * np.pi * lo * pitch * t + rng.uniform(0, 2 * np.pi))
            tone += 0.7 * np.sin(2 * np.pi * hi * pitch * t + rng.uniform(0, 2 * np.pi))
            pieces.append(amp * tone * _envelope(n))
    pieces.append(np.zeros(int(sr * rng.uniform(0.08, 0.16))))
    return np.concatenate(pieces)


def _colored(n: int, exponent: float, rng) -> np.ndarray:
    """Noise with power spectrum ~ 1/f**exponent."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    f[0] = f[1]
    spec *= f ** (-exponent / 2)
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-12)


def _bandpass(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1 / SAMPLE_RATE)
    spec[(f < lo) | (f > hi)] = 0
    return np.fft.irfft(spec, len(x))


def noise_a(kind: str, n: int, rng) -> np.ndarray:
    exponent = {"white": 0.0, "pink": 1.0, "brown": 2.0}[kind]
    return _colored(n, exponent, rng)


def noise_b(kind: str, n: int, rng) -> np.ndarray:
    sr = SAMPLE_RATE
    t = np.arange(n) / sr
    if kind == "bus":
        f0 = rng.uniform(180, 260)
        wobble = 1 + 0.02 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t)
        phase = 2 * np.pi * f0 * np.cumsum(wobble) / sr
        x = sum(np.sin(h * phase + rng.uniform(0, 6.3)) / h**0.5 for h in range(1, 7))
        x = x + 2.0 * _colored(n, 2.0, rng)
    elif kind == "str":
        rate = rng.uniform(0.8, 2.0)
        f = 1200 + 500 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 6.3))
        x = np.sin(2 * np.pi * np.cumsum(f) / sr)
        clicks = np.zeros(n)
        idx = rng.integers(0, n, size=max(1, n // 1600))
        clicks[idx] = rng.choice([-4.0, 4.0], size=len(idx))
        x = x + clicks + 0.3 * _colored(n, 1.0, rng)
    elif kind == "ped":
        x = np.zeros(n)
        pos = 0
        while pos < n:
            length = int(sr * rng.uniform(0.05, 0.25))
            lo = rng.uniform(500, 2500)
            seg = _bandpass(rng.standard_normal(length + 64), lo, lo + rng.uniform(300, 900))[:length]
            x[pos : pos + length] += seg[: n - pos] * _envelope(len(seg[: n - pos]))
            pos += length + int(sr * rng.uniform(0.0, 0.15))
        x = x + 0.1 * _colored(n, 1.0, rng)
    elif kind == "caf":
        # babble: overlapping talkers speaking random character strings
        x = np.zeros(n)
        for _ in range(3):
            words = ["".join(rng.choice(list(CHARS), 3)) for _ in range(8)]
            talker = synth_utterance(words, rng)
            start = int(rng.integers(0, len(talker)))
            x += np.resize(np.roll(talker, -start), n)
        x = x + 0.1 * _colored(n, 1.0, rng)
    else:
        raise ValueError(f"unknown family-B noise {kind!r}")
    return x / (np.std(x) + 1e-12)


def _recolor(x: np.ndarray, rng) -> np.ndarray:
    """Random spectral tilt, standing in for channel differences of real recordings."""
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1 / SAMPLE_RATE) / (SAMPLE_RATE / 2)
    spec *= np.exp(rng.uniform(-1.0, 1.0) * (f - 0.5))
    y = np.fft.irfft(spec, len(x))
    return y / (np.std(y) + 1e-12)


def _fit_range(x: np.ndarray, *others: np.ndarray):
    peak = max(np.max(np.abs(a)) for a in (x, *others))
    s = min(1.0, 0.95 / peak) if peak > 0 else 1.0
    return (x * s, *(a * s for a in others))


class ToyCorpus:
    """Writes toy WAVs and manifests below ``root``."""

    def __init__(self, root, seed: int = 0, sizes: ToySizes = ToySizes()):
        self.root = Path(root)
        self.seed = seed
        self.sizes = sizes
        self.lexicon = make_lexicon(sizes.lexicon_size, seed)

    def _words(self, rng) -> list[str]:
        return list(rng.choice(self.lexicon, int(rng.integers(2, 4))))

    def _write(self, rel: str, x: np.ndarray) -> str:
        path = self.root / "wav" / rel
        write_wav(path, x)
        return str(path)

    def _simulated(self, uid, split, cond, noise, snr, rng, keep_clean: bool) -> UtteranceRecord:
        words = self._words(rng)
        clean = synth_utterance(words, rng)
        noisy, gain = mix_at_snr(clean, noise, snr, seed=int(rng.integers(2**31)))
        clean, noisy = _fit_range(clean, noisy)
        audio = self._write(f"{uid}.wav", noisy)
        clean_path = self._write(f"{uid}.clean.wav", clean) if keep_clean else None
        return UtteranceRecord(uid, audio, " ".join(words), cond, False, split, float(snr), clean_path)

    def _real(self, uid, split, cond, rng) -> UtteranceRecord:
        words = self._words(rng)
        clean = synth_utterance(words, rng)
        noise = _recolor(noise_b(cond, len(clean) * 2, rng), rng)
        noisy, _ = mix_at_snr(clean, noise, rng.uniform(*self.sizes.snr_b), seed=int(rng.integers(2**31)))
        (noisy,) = _fit_range(noisy)
        return UtteranceRecord(uid, self._write(f"{uid}.wav", noisy), " ".join(words), cond, True, split)

    def pretrain_records(self) -> list[UtteranceRecord]:
        rng = np.random.default_rng([self.seed, 1])
        recs = []
        for split, count in (("train", self.sizes.pretrain_train), ("dev", self.sizes.pretrain_dev)):
            for i in range(count):
                kind = FAMILY_A[i % len(FAMILY_A)]
                noise = noise_a(kind, SAMPLE_RATE * 4, rng)
                snr = float(rng.uniform(*self.sizes.snr_a))
                recs.append(self._simulated(f"pre-{split}-{i:05d}", split, kind, noise, snr, rng, False))
        return recs

    def adapt_records(self) -> list[UtteranceRecord]:
        """Family-B data: real and simulated training utterances, real dev/eval."""
        rng = np.random.default_rng([self.seed, 2])
        s = self.sizes
        recs = []
        for cond in FAMILY_B:
            for i in range(s.real_train):
                recs.append(self._real(f"{cond}-train-real-{i:04d}", "train", cond, rng))
            for i in range(s.simu_train):
                noise = noise_b(cond, SAMPLE_RATE * 4, rng)
                snr = float(rng.uniform(*s.snr_b))
                recs.append(self._simulated(f"{cond}-train-simu-{i:04d}", "train", cond, noise, snr, rng, True))
            for split, count in (("dev", s.dev), ("eval", s.eval)):
                for i in range(count):
                    recs.append(self._real(f"{cond}-{split}-real-{i:04d}", split, cond, rng))
        return recs

    def build(self) -> tuple[Path, Path]:
        """Generate both manifests; returns (pretrain manifest, adaptation manifest)."""
        pre, ada = self.root / "pretrain.jsonl", self.root / "adapt.jsonl"
        write_manifest(self.pretrain_records(), pre)
        write_manifest(self.adapt_records(), ada)
        return pre, ada


def build_toy_corpus(root, seed: int = 0, sizes: Optional[ToySizes] = None) -> tuple[Path, Path]:
    return ToyCorpus(root, seed, sizes or ToySizes()).build()
