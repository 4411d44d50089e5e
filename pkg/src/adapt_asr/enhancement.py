"""Speech-enhancement front-ends and the real/simulated joint loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .features import (
    NUM_BINS,
    FeatureMatrix,
    logmel_from_magnitude,
    logmel_tensor,
    num_frames,
    stft_magnitude_tensor,
)
from .model import LossBreakdown, make_pad_mask


class EnhancementError(ValueError):
    pass


@dataclass(frozen=True)
class MaskNetConfig:
    num_bilstm_layers: int = 2
    hidden: int = 128
    num_bins: int = NUM_BINS


# Bi-LSTM size used at full scale
FULL_SCALE_MASKNET = MaskNetConfig(hidden=896)


@dataclass(frozen=True)
class WaveNetConfig:
    depth: int = 3
    hidden: int = 16
    growth: int = 2
    kernel: int = 8
    stride: int = 4
    lstm_layers: int = 1
    normalize: bool = True


def apply_mask(noisy: Tensor, mask: Tensor) -> Tensor:
    return mask * noisy


class MaskNet(nn.Module):
    """Bi-LSTM magnitude-mask estimator; mask = sigmoid(FC(BiLSTM(log1p|X|)))."""

    kind = "masknet"

    def __init__(self, cfg: MaskNetConfig = MaskNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(
            cfg.num_bins, cfg.hidden, num_layers=cfg.num_bilstm_layers, batch_first=True, bidirectional=True
        )
        self.fc = nn.Linear(2 * cfg.hidden, cfg.num_bins)

    def mask(self, mag: Tensor, frame_lengths: Optional[Tensor] = None) -> Tensor:
        squeeze = mag.ndim == 2
        if squeeze:
            mag = mag[None]
        x = torch.log1p(mag)
        if frame_lengths is None:
            h, _ = self.lstm(x)
        else:
            packed = pack_padded_sequence(x, frame_lengths.cpu(), batch_first=True, enforce_sorted=False)
            h, _ = self.lstm(packed)
            h, _ = pad_packed_sequence(h, batch_first=True, total_length=x.shape[1])
        m = torch.sigmoid(self.fc(h))
        return m[0] if squeeze else m

    def forward(self, mag: Tensor, frame_lengths: Optional[Tensor] = None) -> Tensor:
        return apply_mask(mag, self.mask(mag, frame_lengths))

    # ---- front-end protocol used by the joint loss and training loops
    def asr_features(self, wave: Tensor, lengths: Tensor):
        mag = stft_magnitude_tensor(wave)
        flen = num_frames(lengths)
        enhanced = self(mag, flen)
        valid = ~make_pad_mask(flen, mag.shape[1])[:, :, None].expand_as(mag)
        return logmel_from_magnitude(enhanced), flen, enhanced, valid

    def reference(self, clean: Tensor) -> Tensor:
        return stft_magnitude_tensor(clean)


def masknet_forward(noisy: FeatureMatrix, net: MaskNet) -> FeatureMatrix:
    if noisy.kind != "magnitude":
        raise EnhancementError(f"masknet expects magnitude features, got {noisy.kind!r}")
    param = next(net.parameters())
    with torch.no_grad():
        out = net(torch.as_tensor(noisy.data, dtype=param.dtype))
    return FeatureMatrix(out.numpy(), kind="magnitude", frame_shift_ms=noisy.frame_shift_ms)


class DemucsLite(nn.Module):
    """Small conv encoder/decoder with U-Net skips and a BLSTM bottleneck.

    Predicts a waveform correction that is added to the input; the last
    decoder layer starts at zero, so an untrained model is the identity.
    """

    kind = "demucs_lite"

    def __init__(self, cfg: WaveNetConfig = WaveNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.ModuleList()
        self.decoder = nn.ModuleList()
        chin, hidden = 1, cfg.hidden
        for i in range(cfg.depth):
            self.encoder.append(
                nn.Sequential(
                    nn.Conv1d(chin, hidden, cfg.kernel, cfg.stride),
                    nn.ReLU(),
                    nn.Conv1d(hidden, 2 * hidden, 1),
                    nn.GLU(dim=1),
                )
            )
            dec = [nn.Conv1d(hidden, 2 * hidden, 1), nn.GLU(dim=1), nn.ConvTranspose1d(hidden, chin, cfg.kernel, cfg.stride)]
            if i > 0:
                dec.append(nn.ReLU())
            self.decoder.insert(0, nn.Sequential(*dec))
            chin, hidden = hidden, int(cfg.growth * hidden)
        self.lstm = nn.LSTM(chin, chin, num_layers=cfg.lstm_layers, bidirectional=True, batch_first=True)
        self.lstm_out = nn.Linear(2 * chin, chin)
        last = self.decoder[-1][2]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def valid_length(self, length: int) -> int:
        k, s = self.cfg.kernel, self.cfg.stride
        for _ in range(self.cfg.depth):
            length = max(math.ceil((length - k) / s) + 1, 1)
        for _ in range(self.cfg.depth):
            length = (length - 1) * s + k
        return length

    def forward(self, noisy: Tensor, lengths: Optional[Tensor] = None) -> Tensor:
        squeeze = noisy.ndim == 1
        if squeeze:
            noisy = noisy[None]
        n = noisy.shape[-1]
        if lengths is None:
            lengths = torch.full((noisy.shape[0],), n, dtype=torch.long)
        x = noisy
        scale = torch.ones_like(x[:, :1])
        if self.cfg.normalize:
            valid = ~make_pad_mask(lengths, n)
            ms = (x.square() * valid).sum(-1, keepdim=True) / lengths[:, None].clamp(min=1)
            scale = 1e-3 + ms.sqrt()
            x = x / scale
        x = F.pad(x[:, None], (0, self.valid_length(n) - n))
        skips = []
        for enc in self.encoder:
            x = enc(x)
            skips.append(x)
        h, _ = self.lstm(x.transpose(1, 2))
        x = self.lstm_out(h).transpose(1, 2)
        for dec in self.decoder:
            skip = skips.pop()
            x = dec(x + skip[..., : x.shape[-1]])
        correction = x[:, 0, :n] * scale
        if not torch.all(torch.isfinite(correction)):
            raise EnhancementError("non-finite values in enhanced waveform")
        out = noisy + correction
        return out[0] if squeeze else out

    def asr_features(self, wave: Tensor, lengths: Tensor):
        enhanced = self(wave, lengths)
        valid = ~make_pad_mask(lengths, wave.shape[-1])
        return logmel_tensor(enhanced), num_frames(lengths), enhanced, valid

    def reference(self, clean: Tensor) -> Tensor:
        return clean


def demucs_lite_forward(noisy, net: DemucsLite) -> Tensor:
    param = next(net.parameters())
    with torch.no_grad():
        return net(torch.as_tensor(noisy, dtype=param.dtype))


FRONTENDS = {"masknet": MaskNet, "demucs_lite": DemucsLite}


def build_frontend(kind: str, **kwargs) -> nn.Module:
    if kind == "masknet":
        return MaskNet(MaskNetConfig(**kwargs))
    if kind == "demucs_lite":
        return DemucsLite(WaveNetConfig(**kwargs))
    raise EnhancementError(f"unknown front-end {kind!r}; choose from {sorted(FRONTENDS)}")


def compute_se_loss(enhanced: Tensor, clean: Tensor, kind: str = "l1", valid: Optional[Tensor] = None) -> Tensor:
    """Mean per-element L1 (or squared) distance over valid elements."""
    if enhanced.shape != clean.shape:
        raise EnhancementError(f"shape mismatch: {tuple(enhanced.shape)} vs {tuple(clean.shape)}")
    if kind not in ("l1", "l2"):
        raise EnhancementError(f"unknown SE loss {kind!r}")
    diff = enhanced - clean
    err = diff.abs() if kind == "l1" else diff.square()
    if valid is None:
        return err.mean()
    return (err * valid).sum() / valid.sum()


@dataclass
class SEBatch:
    noisy: Tensor  # (B, N) waveforms, zero padded
    lengths: Tensor
    targets: Sequence[Sequence[int]]
    is_real: bool
    clean: Optional[Tensor] = None
    ids: Sequence[str] = ()

    def __post_init__(self):
        if self.is_real and self.clean is not None:
            raise EnhancementError("real batches carry no clean reference")


def joint_loss(
    batch: SEBatch,
    model,
    frontend: nn.Module,
    se_weight: float = 1.0,
    smoothing: float = 0.1,
    se_kind: str = "l1",
) -> LossBreakdown:
    """ASR loss on enhanced features, plus weighted SE loss when clean speech exists.

    Real recordings have no clean reference, so only the ASR loss is used for them.
    """
    if se_weight < 0:
        raise EnhancementError("SE loss weight must be nonnegative")
    if not batch.is_real and batch.clean is None:
        raise EnhancementError("simulated batch is missing its clean reference")
    feats, flen, enhanced, valid = frontend.asr_features(batch.noisy, batch.lengths)
    trace = model.encode(feats, flen)
    asr = model.asr_loss(trace, batch.targets, smoothing)
    if batch.is_real:
        return LossBreakdown(asr_loss=asr)
    se = compute_se_loss(enhanced, frontend.reference(batch.clean), se_kind, valid)
    return LossBreakdown(asr_loss=asr, se_loss=se, se_weight=se_weight)
