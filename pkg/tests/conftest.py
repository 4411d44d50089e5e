import dataclasses

import numpy as np
import pytest
import torch

from adapt_asr.corpus import UtteranceRecord, write_manifest, write_wav
from adapt_asr.model import ASRModel, ModelConfig
from adapt_asr.toy import ToyCorpus, ToySizes

torch.set_num_threads(1)

TINY = ModelConfig(
    num_encoder_layers=3,
    num_decoder_layers=2,
    attn_dim=32,
    attn_heads=4,
    ff_units=64,
    conv_kernel=5,
    vocab_size=12,
    dropout=0.0,
)
MINI = dataclasses.replace(TINY, num_encoder_layers=2, num_decoder_layers=1)


def tiny_model(seed=0, **overrides) -> ASRModel:
    torch.manual_seed(seed)
    model = ASRModel(dataclasses.replace(TINY, **overrides))
    model.eval()
    return model


def random_feats(batch, frames, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, frames, 80, generator=g, dtype=dtype)


def random_targets(batch, vocab, seed=0, max_len=6):
    rng = np.random.default_rng(seed)
    # ids 1..vocab-2: never blank (0) nor sos/eos (vocab-1)
    return [list(rng.integers(1, vocab - 1, size=int(rng.integers(1, max_len + 1)))) for _ in range(batch)]


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Small toy corpus for quick training-loop tests."""
    root = tmp_path_factory.mktemp("mini_toy")
    sizes = ToySizes(pretrain_train=24, pretrain_dev=6, real_train=4, simu_train=4, dev=2, eval=2)
    pre, ada = ToyCorpus(root, seed=5, sizes=sizes).build()
    return pre, ada


@pytest.fixture(scope="session")
def mini_backbone(mini_corpus):
    """(checkpoint, log) of a 3-epoch pretrain of MINI on the mini corpus."""
    from adapt_asr.corpus import read_manifest
    from adapt_asr.training import TrainLog, TrainPlan, pretrain

    plan = TrainPlan("pretrain", epochs=3, lr=2e-3, warmup_steps=5, batch_size=8, top_k=2)
    log = TrainLog()
    return pretrain(plan, read_manifest(mini_corpus[0]), MINI, log=log), log


@pytest.fixture
def wav_factory(tmp_path):
    def make(name, samples):
        path = tmp_path / name
        write_wav(path, samples)
        return path

    return make


def make_record(i, condition="bus", is_real=True, split="train", snr=None, path="x.wav", text="ab"):
    if not is_real and snr is None:
        snr = 5.0
    return UtteranceRecord(f"u{i:04d}", path, text, condition, is_real, split, snr)


def write_records(path, records):
    write_manifest(records, path)
    return path


def finite_difference_errors(loss_fn, params, n, seed=0, eps=1e-6, min_grad=1e-5):
    """Relative |analytic - central difference| for ``n`` sampled scalar parameters.

    ``params`` maps a group name to a list of float64 tensors; samples are
    spread round-robin over the groups. Entries whose analytic gradient is below
    ``min_grad`` are skipped because the relative error is meaningless there.
    Returns a list of (group, rel_error, analytic, numeric).
    """
    for group in params.values():
        for p in group:
            p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    candidates = {}
    for name, group in params.items():
        cands = []
        for p in group:
            idx = torch.nonzero(p.grad.abs() > min_grad)
            cands += [(p, tuple(int(v) for v in i)) for i in idx]
        if not cands:
            raise AssertionError(f"no usable gradients in group {name}")
        candidates[name] = cands
    names = list(params)
    out = []
    for k in range(n):
        name = names[k % len(names)]
        p, i = candidates[name][int(rng.integers(len(candidates[name])))]
        analytic = float(p.grad[i])
        with torch.no_grad():
            orig = float(p[i])
            p[i] = orig + eps
            up = float(loss_fn())
            p[i] = orig - eps
            down = float(loss_fn())
            p[i] = orig
        numeric = (up - down) / (2 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        out.append((name, rel, analytic, numeric))
    return out


def gradcheck_pipeline(seed=0):
    """float64 masknet -> log-mel -> adapted encoder -> decoder loss, dropout off.

    Adapter up-projections are randomized so every group carries gradient.
    Returns (loss_fn, params by group).
    """
    from adapt_asr.adapters import AdaptedASR, AdapterSpec
    from adapt_asr.enhancement import MaskNet, MaskNetConfig, joint_loss, SEBatch

    torch.manual_seed(seed)
    backbone = ASRModel(dataclasses.replace(TINY, num_encoder_layers=2, num_decoder_layers=1)).double().eval()
    frontend = MaskNet(MaskNetConfig(num_bilstm_layers=1, hidden=8)).double().eval()
    model = AdaptedASR(backbone, AdapterSpec((1, 2), emb_dim=4, in_out_dim=32), frontend).double().eval()
    with torch.no_grad():
        for a in model.adapters.values():
            a.up.weight.normal_(0, 0.1)
            a.up.bias.normal_(0, 0.1)
    g = torch.Generator().manual_seed(seed)
    noisy = 0.1 * torch.randn(2, 4000, generator=g, dtype=torch.float64)
    clean = 0.1 * torch.randn(2, 4000, generator=g, dtype=torch.float64)
    batch = SEBatch(noisy, torch.tensor([4000, 3500]), random_targets(2, TINY.vocab_size, seed, 4), False, clean)

    def loss_fn():
        return joint_loss(batch, model, frontend, se_weight=0.5, smoothing=0.1).total

    enc, dec = backbone.encoder, backbone.decoder
    params = {
        "adapter": list(model.adapters.parameters()),
        "encoder": list(enc.parameters()),
        "decoder": list(dec.parameters()),
        "masknet": list(frontend.parameters()),
    }
    return loss_fn, params


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, float, str]] = {}


def record_criterion(number: int, name: str, passed: bool, seconds: float, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[number] = (name, "PASS" if passed else "FAIL", seconds, detail)
    print(f"criterion {number:2d} {name}: {'PASS' if passed else 'FAIL'} ({seconds:.1f}s) {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, status, secs, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {name} ({secs:.1f}s) {detail}".rstrip())
