import json
import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from adapt_asr.corpus import (
    ALL,
    AudioFormatError,
    CorpusError,
    DataRegime,
    InsufficientRecordsError,
    MixJob,
    UtteranceRecord,
    load_wav,
    measure_snr,
    mix_at_snr,
    noise_segment,
    read_manifest,
    select_regime,
    tile_noise,
    write_manifest,
)

from conftest import make_record


# ---------------------------------------------------------------- WAV IO


def test_one_second_wav_has_16000_samples(wav_factory):
    path = wav_factory("a.wav", np.zeros(16000))
    assert load_wav(path).shape == (16000,)


def test_silence_loads_as_zeros(wav_factory):
    x = load_wav(wav_factory("z.wav", np.zeros(800)))
    assert np.all(x == 0.0) and np.max(np.abs(x)) == 0.0


def test_square_wave_matches_independent_reader(tmp_path):
    pcm = np.where(np.arange(1600) % 40 < 20, 32767, -32767).astype(np.int16)
    path = tmp_path / "sq.wav"
    wavfile.write(path, 16000, pcm)
    ours = load_wav(path)
    rate, theirs = wavfile.read(path)
    assert rate == 16000
    np.testing.assert_array_equal(ours, theirs.astype(np.float64) / 32768.0)
    assert set(np.unique(ours)) == {32767 / 32768, -32767 / 32768}


def test_random_pcm_matches_independent_reader(tmp_path):
    pcm = np.random.default_rng(0).integers(-32768, 32768, size=5000).astype(np.int16)
    path = tmp_path / "r.wav"
    wavfile.write(path, 16000, pcm)
    np.testing.assert_array_equal(load_wav(path), pcm / 32768.0)


def test_write_then_read_is_exact_on_pcm_grid(wav_factory):
    x = np.random.default_rng(1).integers(-32768, 32768, size=3000) / 32768.0
    np.testing.assert_array_equal(load_wav(wav_factory("w.wav", x)), x)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "nope.wav")


@pytest.mark.parametrize(
    "rate,channels,width,reason",
    [(8000, 1, 2, "sample rate"), (16000, 2, 2, "channels"), (16000, 1, 1, "16-bit")],
)
def test_rejects_non_conforming_wav(tmp_path, rate, channels, width, reason):
    path = tmp_path / "bad.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(b"\x00" * (100 * channels * width))
    with pytest.raises(AudioFormatError, match=reason):
        load_wav(path)


def test_rejects_non_wav(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"not a wav file at all")
    with pytest.raises(AudioFormatError):
        load_wav(path)


# ---------------------------------------------------------------- records / manifests


def test_record_snr_presence_rules():
    with pytest.raises(CorpusError):
        UtteranceRecord("a", "a.wav", "t", "bus", True, "train", snr_db=3.0)
    with pytest.raises(CorpusError):
        UtteranceRecord("a", "a.wav", "t", "bus", False, "train")
    with pytest.raises(CorpusError):
        UtteranceRecord("a", "a.wav", "t", "bus", True, "train", clean_path="c.wav")
    with pytest.raises(CorpusError):
        UtteranceRecord("a", "a.wav", "t", "bus", False, "test", snr_db=1.0)
    with pytest.raises(CorpusError):
        UtteranceRecord("a", "a.wav", "t", "bus", False, "train", snr_db=math.inf)


def test_manifest_round_trip(tmp_path):
    recs = [make_record(i, is_real=i % 2 == 0, path=f"/abs/{i}.wav") for i in range(5)]
    write_manifest(recs, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl") == recs
    first = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert set(first) == {"id", "audio_path", "transcript", "condition", "is_real", "split", "snr_db"}


def test_manifest_relative_paths_resolve_against_manifest_dir(tmp_path):
    (tmp_path / "sub").mkdir()
    line = {"id": "a", "audio_path": "audio/a.wav", "transcript": "x", "condition": "bus", "is_real": True, "split": "dev", "snr_db": None}
    (tmp_path / "sub" / "m.jsonl").write_text(json.dumps(line) + "\n")
    (rec,) = read_manifest(tmp_path / "sub" / "m.jsonl")
    assert rec.audio_path == str(tmp_path / "sub" / "audio" / "a.wav")


def test_manifest_duplicate_ids_rejected(tmp_path):
    r = make_record(0)
    with pytest.raises(CorpusError):
        write_manifest([r, r], tmp_path / "m.jsonl")
    (tmp_path / "d.jsonl").write_text(r.to_json() + "\n" + r.to_json() + "\n")
    with pytest.raises(CorpusError, match="duplicate"):
        read_manifest(tmp_path / "d.jsonl")


def test_manifest_undeclared_condition_rejected(tmp_path):
    write_manifest([make_record(0, condition="zoo")], tmp_path / "m.jsonl")
    with pytest.raises(CorpusError, match="zoo"):
        read_manifest(tmp_path / "m.jsonl", conditions=("bus", "caf"))


# ---------------------------------------------------------------- mixing


def test_equal_power_zero_db_gain_is_one():
    clean = np.ones(100)
    noise = -np.ones(50)
    _, gain = mix_at_snr(clean, noise, 0.0)
    assert gain == pytest.approx(1.0, abs=1e-15)


def test_equal_power_twenty_db_gain_is_tenth():
    rng = np.random.default_rng(0)
    clean = rng.standard_normal(1000)
    noise = clean[::-1].copy()  # same power, no tiling needed
    _, gain = mix_at_snr(clean, noise, 20.0, offset_policy="fixed_zero")
    assert gain == pytest.approx(0.1, rel=1e-12)


def test_mix_round_trip_7_5_db():
    rng = np.random.default_rng(3)
    clean, noise = rng.standard_normal(4000), rng.standard_normal(1500)
    noisy, gain = mix_at_snr(clean, noise, 7.5, seed=11)
    assert len(noisy) == len(clean)
    assert abs(measure_snr(clean, noisy - clean) - 7.5) < 1e-6


@settings(max_examples=100, deadline=None)
@given(
    snr=st.floats(-10, 40),
    n_clean=st.integers(10, 3000),
    n_noise=st.integers(1, 3000),
    seed=st.integers(0, 2**32 - 1),
    policy=st.sampled_from(["random", "fixed_zero"]),
)
def test_mix_measure_round_trip_property(snr, n_clean, n_noise, seed, policy):
    rng = np.random.default_rng(seed)
    clean = rng.standard_normal(n_clean)
    noise = rng.standard_normal(n_noise) + 0.1
    noisy, gain = mix_at_snr(clean, noise, snr, seed=seed, offset_policy=policy)
    segment = noise_segment(noise, n_clean, seed=seed, offset_policy=policy)
    np.testing.assert_allclose(noisy, clean + gain * segment, rtol=0, atol=1e-12)
    assert abs(measure_snr(clean, gain * segment) - snr) < 1e-6


def test_mix_is_deterministic_and_seed_dependent():
    rng = np.random.default_rng(0)
    clean, noise = rng.standard_normal(500), rng.standard_normal(2000)
    a, _ = mix_at_snr(clean, noise, 5.0, seed=1)
    b, _ = mix_at_snr(clean, noise, 5.0, seed=1)
    c, _ = mix_at_snr(clean, noise, 5.0, seed=2)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_mixjob_runs_from_files(wav_factory):
    rng = np.random.default_rng(0)
    c = wav_factory("c.wav", 0.3 * rng.uniform(-1, 1, 4000))
    n = wav_factory("n.wav", 0.3 * rng.uniform(-1, 1, 700))
    job = MixJob(str(c), str(n), 5.0, seed=9)
    a, g = job.run()
    b, _ = job.run()
    np.testing.assert_array_equal(a, b)
    assert len(a) == 4000 and g > 0
    with pytest.raises(CorpusError):
        MixJob(str(c), str(n), math.nan, seed=0)


@given(k=st.integers(1, 6), n=st.integers(1, 50))
def test_tiling_is_k_concatenations(k, n):
    noise = np.arange(n, dtype=float)
    np.testing.assert_array_equal(tile_noise(noise, k * n)[: k * n], np.concatenate([noise] * k))
    np.testing.assert_array_equal(noise_segment(noise, k * n, offset_policy="fixed_zero"), np.concatenate([noise] * k))


def test_zero_power_is_a_domain_error():
    with pytest.raises(CorpusError):
        mix_at_snr(np.zeros(10), np.ones(10), 0.0)
    with pytest.raises(CorpusError):
        mix_at_snr(np.ones(10), np.zeros(10), 0.0)
    with pytest.raises(CorpusError):
        measure_snr(np.zeros(4), np.ones(4))


def test_measure_snr_definition():
    x = np.ones(10)
    assert measure_snr(x, -x) == 0.0
    assert measure_snr(10 * x, x) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(CorpusError):
        measure_snr(np.ones(3), np.ones(4))


# ---------------------------------------------------------------- regimes


def _pool():
    recs = []
    i = 0
    for cond in ("bus", "caf", "ped", "str"):
        for real in (True, False):
            for _ in range(30):
                recs.append(make_record(i, cond, real))
                i += 1
    recs.append(make_record(i, "bus", True, split="dev"))
    return recs


def test_regime_all_is_full_training_manifest():
    recs = _pool()
    out = select_regime(recs, DataRegime())
    assert out == sorted([r for r in recs if r.split == "train"], key=lambda r: r.id)


def test_regime_held_out_counts_and_determinism():
    recs = _pool()
    reg = DataRegime(real_count=25, simu_count=0, held_out_condition="bus", seed=4)
    a = select_regime(recs, reg)
    assert len(a) == 25
    assert all(r.condition == "bus" and r.is_real for r in a)
    assert a == select_regime(recs, reg)


def test_regime_quota_gives_exact_per_condition_counts():
    out = select_regime(_pool(), DataRegime(real_count=100 // 5, simu_count=0, multi_condition_quota=5))
    assert len(out) == 20
    for cond in ("bus", "caf", "ped", "str"):
        assert sum(r.condition == cond for r in out) == 5


def test_regime_quota_count_mismatch():
    with pytest.raises(CorpusError):
        select_regime(_pool(), DataRegime(real_count=21, simu_count=0, multi_condition_quota=5))


def test_regime_shortfall_lists_requested_and_available():
    with pytest.raises(InsufficientRecordsError, match=r"requested 31 .*available 30"):
        select_regime(_pool(), DataRegime(real_count=31, simu_count=0, held_out_condition="caf"))


def test_regime_invariants():
    with pytest.raises(CorpusError):
        DataRegime(real_count=0, simu_count=0)
    with pytest.raises(CorpusError):
        DataRegime(real_count=-1)
    assert DataRegime(real_count=ALL, simu_count=0).real_count == ALL


@settings(max_examples=25, deadline=None)
@given(perm_seed=st.integers(0, 10_000), seed=st.integers(0, 10_000))
def test_regime_independent_of_manifest_order(perm_seed, seed):
    recs = _pool()
    shuffled = [recs[i] for i in np.random.default_rng(perm_seed).permutation(len(recs))]
    reg = DataRegime(real_count=17, simu_count=9, seed=seed)
    assert select_regime(recs, reg) == select_regime(shuffled, reg)
