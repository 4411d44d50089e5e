"""Manifests, WAV IO, SNR-controlled mixing and data-regime selection."""

from __future__ import annotations

import json
import math
import wave
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence, Union

import numpy as np

SAMPLE_RATE = 16000
SPLITS = ("train", "dev", "eval")
DEFAULT_CONDITIONS = ("bus", "str", "ped", "caf")

ALL = "ALL"
Count = Union[int, Literal["ALL"]]
OffsetPolicy = Literal["random", "fixed_zero"]


class CorpusError(ValueError):
    pass


class AudioFormatError(CorpusError):
    pass


class InsufficientRecordsError(CorpusError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    transcript: str
    condition: str
    is_real: bool
    split: str
    snr_db: Optional[float] = None
    # Clean reference for simulated mixtures; never set on real recordings.
    clean_path: Optional[str] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise CorpusError(f"{self.id}: unknown split {self.split!r}")
        if self.is_real and self.snr_db is not None:
            raise CorpusError(f"{self.id}: real recording must not carry snr_db")
        if not self.is_real and self.snr_db is None:
            raise CorpusError(f"{self.id}: simulated record requires snr_db")
        if self.snr_db is not None and not math.isfinite(self.snr_db):
            raise CorpusError(f"{self.id}: snr_db must be finite")
        if self.is_real and self.clean_path is not None:
            raise CorpusError(f"{self.id}: real recording cannot have a clean reference")

    def to_json(self) -> str:
        d = asdict(self)
        if d["clean_path"] is None:
            del d["clean_path"]
        return json.dumps(d, ensure_ascii=False)


@dataclass(frozen=True)
class MixJob:
    clean_path: str
    noise_path: str
    snr_db: float
    seed: int
    noise_offset_policy: OffsetPolicy = "random"

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise CorpusError("snr_db must be finite")

    def run(self) -> tuple[np.ndarray, float]:
        return mix_at_snr(
            load_wav(self.clean_path),
            load_wav(self.noise_path),
            self.snr_db,
            seed=self.seed,
            offset_policy=self.noise_offset_policy,
        )


@dataclass(frozen=True)
class DataRegime:
    real_count: Count = ALL
    simu_count: Count = ALL
    held_out_condition: Optional[str] = None
    multi_condition_quota: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("real_count", "simu_count"):
            v = getattr(self, name)
            if v != ALL and (not isinstance(v, int) or v < 0):
                raise CorpusError(f"{name} must be a nonnegative int or ALL, got {v!r}")
        if self.real_count == 0 and self.simu_count == 0:
            raise CorpusError("at least one of real_count, simu_count must be nonzero")
        if self.multi_condition_quota is not None and self.multi_condition_quota <= 0:
            raise CorpusError("multi_condition_quota must be positive")


# --------------------------------------------------------------------------- manifests


def _resolve(base: Path, p: Optional[str]) -> Optional[str]:
    if p is None or Path(p).is_absolute():
        return p
    return str(base / p)


def read_manifest(path, conditions: Optional[Sequence[str]] = None) -> list[UtteranceRecord]:
    """Read a JSONL manifest. Relative audio paths are taken relative to the manifest's directory."""
    records = []
    seen = set()
    base = Path(path).parent
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                for key in ("audio_path", "clean_path"):
                    if key in d:
                        d[key] = _resolve(base, d[key])
                rec = UtteranceRecord(**d)
            except (TypeError, json.JSONDecodeError) as e:
                raise CorpusError(f"{path}:{lineno}: malformed record ({e})") from e
            if rec.id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            if conditions is not None and rec.condition not in conditions:
                raise CorpusError(
                    f"{path}:{lineno}: condition {rec.condition!r} not in {list(conditions)}"
                )
            seen.add(rec.id)
            records.append(rec)
    return records


def write_manifest(records: Iterable[UtteranceRecord], path) -> None:
    records = list(records)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise CorpusError("duplicate ids in manifest")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.to_json() + "\n")


# --------------------------------------------------------------------------- audio IO


def load_wav(path) -> np.ndarray:
    """Read a 16 kHz mono 16-bit PCM WAV into float64 samples in [-1, 1).

    Anything else is rejected rather than converted.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = (
                w.getnchannels(),
                w.getsampwidth(),
                w.getframerate(),
                w.getnframes(),
            )
            raw = w.readframes(n)
    except wave.Error as e:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({e})") from e
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
    if channels != 1:
        raise AudioFormatError(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise AudioFormatError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples: np.ndarray) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------- mixing


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def tile_noise(noise: np.ndarray, min_length: int) -> np.ndarray:
    """Loop ``noise`` until it is at least ``min_length`` samples long."""
    reps = max(1, math.ceil(min_length / len(noise)))
    return np.tile(noise, reps)


def noise_segment(
    noise: np.ndarray, length: int, seed: int = 0, offset_policy: OffsetPolicy = "random"
) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if offset_policy not in ("random", "fixed_zero"):
        raise CorpusError(f"unknown offset policy {offset_policy!r}")
    if offset_policy == "fixed_zero":
        return tile_noise(noise, length)[:length]
    rng = np.random.default_rng(seed)
    if len(noise) >= length:
        offset = int(rng.integers(0, len(noise) - length + 1))
        return noise[offset : offset + length]
    # any circular start position of the loop is allowed
    offset = int(rng.integers(0, len(noise)))
    return tile_noise(noise, length + len(noise))[offset : offset + length]


def mix_at_snr(
    clean: np.ndarray,
    noise: np.ndarray,
    snr_db: float,
    seed: int = 0,
    offset_policy: OffsetPolicy = "random",
) -> tuple[np.ndarray, float]:
    """Add ``noise`` to ``clean`` scaled so that the mixture has the requested SNR.

    Returns the noisy waveform (same length as ``clean``) and the gain applied
    to the selected noise segment.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.size == 0 or noise.size == 0:
        raise CorpusError("clean and noise must be nonempty")
    if not math.isfinite(snr_db):
        raise CorpusError("snr_db must be finite")
    segment = noise_segment(noise, len(clean), seed=seed, offset_policy=offset_policy)
    p_clean, p_noise = _power(clean), _power(segment)
    if p_clean == 0.0:
        raise CorpusError("clean signal has zero power; gain undefined")
    if p_noise == 0.0:
        raise CorpusError("noise segment has zero power; gain undefined")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * segment, gain


def measure_snr(signal: np.ndarray, noise_component: np.ndarray) -> float:
    signal = np.asarray(signal, dtype=np.float64)
    noise_component = np.asarray(noise_component, dtype=np.float64)
    if signal.shape != noise_component.shape:
        raise CorpusError(f"length mismatch: {signal.shape} vs {noise_component.shape}")
    p_s, p_n = _power(signal), _power(noise_component)
    if p_s == 0.0 or p_n == 0.0:
        raise CorpusError("zero-power input; SNR undefined")
    return 10.0 * math.log10(p_s / p_n)


# --------------------------------------------------------------------------- regimes


def _take(pool: list[UtteranceRecord], count: Count, rng, what: str) -> list[UtteranceRecord]:
    if count == ALL:
        return list(pool)
    if count > len(pool):
        raise InsufficientRecordsError(
            f"requested {count} {what} records, available {len(pool)}"
        )
    idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in sorted(idx)]


def select_regime(
    records: Sequence[UtteranceRecord], regime: DataRegime, split: str = "train"
) -> list[UtteranceRecord]:
    """Pick the training subset described by ``regime``.

    Records are sorted by id before seeded sampling, so the result does not
    depend on manifest order. Output is sorted by id.
    """
    pool = sorted((r for r in records if r.split == split), key=lambda r: r.id)
    if regime.held_out_condition is not None:
        pool = [r for r in pool if r.condition == regime.held_out_condition]
    real = [r for r in pool if r.is_real]
    simu = [r for r in pool if not r.is_real]
    rng = np.random.default_rng(regime.seed)

    selected: list[UtteranceRecord] = []
    for kind, kind_pool, count in (("real", real, regime.real_count), ("simulated", simu, regime.simu_count)):
        if count == 0:
            continue
        quota = regime.multi_condition_quota
        if quota is None:
            suffix = f", condition={regime.held_out_condition}" if regime.held_out_condition else ""
            selected += _take(kind_pool, count, rng, kind + suffix)
            continue
        conditions = sorted({r.condition for r in kind_pool})
        if count != ALL and count != quota * len(conditions):
            raise CorpusError(
                f"{kind} count {count} inconsistent with quota {quota} x {len(conditions)} conditions"
            )
        for cond in conditions:
            cond_pool = [r for r in kind_pool if r.condition == cond]
            selected += _take(cond_pool, quota, rng, f"{kind}, condition={cond}")
    if not selected:
        raise InsufficientRecordsError(f"regime {regime} selected no records from split {split!r}")
    return sorted(selected, key=lambda r: r.id)


def split_records(records: Sequence[UtteranceRecord], split: str) -> list[UtteranceRecord]:
    return [r for r in records if r.split == split]


def conditions_of(records: Sequence[UtteranceRecord], declared: Sequence[str] = DEFAULT_CONDITIONS) -> list[str]:
    present = {r.condition for r in records}
    ordered = [c for c in declared if c in present]
    return ordered + sorted(present - set(ordered))
