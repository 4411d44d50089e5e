"""Conformer encoder / Transformer decoder ASR backbone.

The encoder exposes a hook after every layer: an optional mapping from
1-based layer index to a module ``f`` replaces the layer output ``e`` with
``f(e)`` before the next layer (or the decoder) sees it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Mapping, Optional, Sequence

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .features import NUM_MELS


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_encoder_layers: int = 6
    num_decoder_layers: int = 6
    attn_dim: int = 128
    attn_heads: int = 4
    ff_units: int = 512
    decoder_ff_units: Optional[int] = None
    subsample_rate: int = 4
    vocab_size: int = 32
    pos_encoding: Literal["relative", "absolute"] = "relative"
    conv_kernel: int = 15
    dropout: float = 0.1
    input_dim: int = NUM_MELS
    utterance_mvn: bool = True

    def __post_init__(self):
        if self.attn_dim % self.attn_heads:
            raise ModelError(f"attn_dim {self.attn_dim} not divisible by attn_heads {self.attn_heads}")
        if self.subsample_rate != 4:
            raise ModelError("only subsample_rate=4 (two stride-2 convolutions) is supported")
        if self.pos_encoding not in ("relative", "absolute"):
            raise ModelError(f"unknown pos_encoding {self.pos_encoding!r}")
        if self.conv_kernel % 2 == 0:
            raise ModelError("conv_kernel must be odd")
        if self.num_encoder_layers < 1 or self.num_decoder_layers < 1:
            raise ModelError("need at least one encoder and one decoder layer")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# full-scale preset kept for reference; desk-scale is the dataclass default
FULL_SCALE = dict(attn_dim=512, attn_heads=4, ff_units=2048, conv_kernel=31)


def subsampled_length(lengths):
    """Frames after the two (kernel 4, stride 2, padding 1) convolutions: floor(T/4)."""
    return (lengths // 2) // 2


def make_pad_mask(lengths: Tensor, max_len: int) -> Tensor:
    """True at padded positions, shape (B, max_len)."""
    return torch.arange(max_len, device=lengths.device)[None, :] >= lengths[:, None]


def utterance_mvn(feats: Tensor, lengths: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-utterance, per-bin mean/variance normalization over valid frames."""
    valid = (~make_pad_mask(lengths, feats.shape[1]))[:, :, None].to(feats.dtype)
    n = lengths[:, None, None].to(feats.dtype)
    mean = (feats * valid).sum(1, keepdim=True) / n
    var = ((feats - mean).square() * valid).sum(1, keepdim=True) / n
    return (feats - mean) / torch.sqrt(var + eps) * valid


@dataclass
class EncoderTrace:
    """Per-layer encoder outputs.

    ``hidden[l-1]`` is the raw output ``e`` of layer ``l``; ``output`` is what
    the decoder attends to (the last layer after its hook, if any).
    """

    hidden: list[Tensor]
    output: Tensor
    lengths: Tensor

    @property
    def num_layers(self) -> int:
        return len(self.hidden)


@dataclass
class LossBreakdown:
    asr_loss: Tensor
    se_loss: Optional[Tensor] = None
    se_weight: float = 0.0
    total: Tensor = field(init=False)

    def __post_init__(self):
        if self.se_loss is None:
            self.total = self.asr_loss
        else:
            self.total = self.asr_loss + self.se_weight * self.se_loss

    def as_log(self) -> dict:
        d = {"asr_loss": self.asr_loss.item(), "total": self.total.item()}
        if self.se_loss is not None:
            d["se_loss"] = self.se_loss.item()
        return d


# --------------------------------------------------------------------------- building blocks


class Conv2dSubsampling(nn.Module):
    def __init__(self, idim: int, odim: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv2d(1, odim, 4, 2, 1)
        self.conv2 = nn.Conv2d(odim, odim, 4, 2, 1)
        self.out = nn.Linear(odim * ((idim // 2) // 2), odim)

    def forward(self, x: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        if int(lengths.min()) < 4:
            raise ModelError(
                f"input of {int(lengths.min())} frames is too short for two stride-2 convolutions (need >= 4)"
            )
        x = x.masked_fill(make_pad_mask(lengths, x.shape[1])[:, :, None], 0.0)
        x = F.relu(self.conv1(x.unsqueeze(1)))
        l1 = lengths // 2
        # zero the padded tail so batch companions cannot leak into valid frames
        x = x.masked_fill(make_pad_mask(l1, x.shape[2])[:, None, :, None], 0.0)
        x = F.relu(self.conv2(x))
        b, c, t, f = x.shape
        x = self.out(x.transpose(1, 2).reshape(b, t, c * f))
        return x, l1 // 2


class PositionalEncoding(nn.Module):
    """Scales the input by sqrt(d) and returns (x, pos_emb).

    relative: pos_emb covers offsets T-1 ... -(T-1) and is consumed by the
    attention; absolute: sinusoids are added to x and pos_emb is None.
    """

    def __init__(self, d: int, dropout: float, kind: str = "relative"):
        super().__init__()
        self.d = d
        self.kind = kind
        self.dropout = nn.Dropout(dropout)

    def _sinusoid(self, positions: Tensor, dtype) -> Tensor:
        div = torch.exp(torch.arange(0, self.d, 2, dtype=torch.float64) * -(math.log(10000.0) / self.d))
        pe = torch.zeros(len(positions), self.d, dtype=torch.float64)
        pe[:, 0::2] = torch.sin(positions[:, None] * div)
        pe[:, 1::2] = torch.cos(positions[:, None] * div)
        return pe.to(dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, Optional[Tensor]]:
        t = x.shape[1]
        x = x * math.sqrt(self.d)
        if self.kind == "absolute":
            pe = self._sinusoid(torch.arange(t, dtype=torch.float64), x.dtype).to(x.device)
            return self.dropout(x + pe[None]), None
        rel = torch.arange(t - 1, -t, -1, dtype=torch.float64)
        pe = self._sinusoid(rel, x.dtype).to(x.device)[None]
        return self.dropout(x), self.dropout(pe)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float, relative: bool = False):
        super().__init__()
        self.h = heads
        self.dk = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)
        self.relative = relative
        if relative:
            self.pos = nn.Linear(d, d, bias=False)
            self.pos_bias_u = nn.Parameter(torch.empty(heads, self.dk))
            self.pos_bias_v = nn.Parameter(torch.empty(heads, self.dk))
            nn.init.xavier_uniform_(self.pos_bias_u)
            nn.init.xavier_uniform_(self.pos_bias_v)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.h, self.dk).transpose(1, 2)

    @staticmethod
    def rel_shift(x: Tensor) -> Tensor:
        """(B, H, T, 2T-1) scores over offsets T-1..-(T-1) -> (B, H, T, T) with [i, j] at offset i-j."""
        b, h, t, n = x.shape
        x = torch.cat([x.new_zeros(b, h, t, 1), x], dim=-1).view(b, h, n + 1, t)
        return x[:, :, 1:].reshape(b, h, t, n)[:, :, :, : n // 2 + 1]

    def forward(self, query, key, value, mask: Optional[Tensor], pos_emb: Optional[Tensor] = None):
        """``mask`` is True where attention is forbidden, broadcastable to (B, 1, Tq, Tk)."""
        q = self._split(self.q(query))
        k = self._split(self.k(key))
        v = self._split(self.v(value))
        if self.relative:
            p = self.pos(pos_emb).view(1, -1, self.h, self.dk).transpose(1, 2)
            ac = torch.matmul(q + self.pos_bias_u[None, :, None], k.transpose(-2, -1))
            bd = self.rel_shift(torch.matmul(q + self.pos_bias_v[None, :, None], p.transpose(-2, -1)))
            scores = (ac + bd) / math.sqrt(self.dk)
        else:
            scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.dk)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
            attn = torch.softmax(scores, dim=-1).masked_fill(mask, 0.0)
        else:
            attn = torch.softmax(scores, dim=-1)
        out = torch.matmul(self.dropout(attn), v)
        b, _, t, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(b, t, self.h * self.dk))


class FeedForward(nn.Module):
    def __init__(self, d: int, units: int, dropout: float, activation: nn.Module):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, units), activation, nn.Dropout(dropout), nn.Linear(units, d))

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, d: int, kernel: int):
        super().__init__()
        self.pointwise1 = nn.Conv1d(d, 2 * d, 1)
        self.depthwise = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)
        # LayerNorm instead of BatchNorm: no running statistics, batch independent
        self.norm = nn.LayerNorm(d)
        self.act = nn.SiLU()
        self.pointwise2 = nn.Conv1d(d, d, 1)

    def forward(self, x: Tensor, pad_mask: Tensor) -> Tensor:
        x = F.glu(self.pointwise1(x.transpose(1, 2)), dim=1)
        x = x.masked_fill(pad_mask[:, None, :], 0.0)
        x = self.depthwise(x)
        x = self.act(self.norm(x.transpose(1, 2))).transpose(1, 2)
        return self.pointwise2(x).transpose(1, 2)


class ConformerLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.attn_dim
        self.ff1 = FeedForward(d, cfg.ff_units, cfg.dropout, nn.SiLU())
        self.ff2 = FeedForward(d, cfg.ff_units, cfg.dropout, nn.SiLU())
        self.attn = MultiHeadAttention(d, cfg.attn_heads, cfg.dropout, relative=cfg.pos_encoding == "relative")
        self.conv = ConvModule(d, cfg.conv_kernel)
        self.norm_ff1 = nn.LayerNorm(d)
        self.norm_attn = nn.LayerNorm(d)
        self.norm_conv = nn.LayerNorm(d)
        self.norm_ff2 = nn.LayerNorm(d)
        self.norm_out = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask, pos_emb):
        x = x + 0.5 * self.dropout(self.ff1(self.norm_ff1(x)))
        h = self.norm_attn(x)
        x = x + self.dropout(self.attn(h, h, h, pad_mask[:, None, None, :], pos_emb))
        x = x + self.dropout(self.conv(self.norm_conv(x), pad_mask))
        x = x + 0.5 * self.dropout(self.ff2(self.norm_ff2(x)))
        return self.norm_out(x)


class ConformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = Conv2dSubsampling(cfg.input_dim, cfg.attn_dim, cfg.dropout)
        self.pos = PositionalEncoding(cfg.attn_dim, cfg.dropout, cfg.pos_encoding)
        self.layers = nn.ModuleList(ConformerLayer(cfg) for _ in range(cfg.num_encoder_layers))

    def forward(self, feats: Tensor, lengths: Tensor, hooks: Optional[Mapping[int, nn.Module]] = None) -> EncoderTrace:
        x, lengths = self.embed(feats, lengths)
        x, pos_emb = self.pos(x)
        pad_mask = make_pad_mask(lengths, x.shape[1])
        hidden = []
        for i, layer in enumerate(self.layers, start=1):
            x = layer(x, pad_mask, pos_emb)
            hidden.append(x)
            if hooks is not None and i in hooks:
                x = hooks[i](x)
        return EncoderTrace(hidden=hidden, output=x, lengths=lengths)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.attn_dim
        self.self_attn = MultiHeadAttention(d, cfg.attn_heads, cfg.dropout)
        self.src_attn = MultiHeadAttention(d, cfg.attn_heads, cfg.dropout)
        self.ff = FeedForward(d, cfg.decoder_ff_units or cfg.ff_units, cfg.dropout, nn.ReLU())
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, y, tgt_mask, memory, memory_mask):
        h = self.norm1(y)
        y = y + self.dropout(self.self_attn(h, h, h, tgt_mask))
        h = self.norm2(y)
        y = y + self.dropout(self.src_attn(h, memory, memory, memory_mask))
        return y + self.dropout(self.ff(self.norm3(y)))


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.attn_dim)
        self.pos = PositionalEncoding(cfg.attn_dim, cfg.dropout, "absolute")
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.num_decoder_layers))
        self.norm = nn.LayerNorm(cfg.attn_dim)
        self.out = nn.Linear(cfg.attn_dim, cfg.vocab_size)

    def forward(self, ys: Tensor, ys_lengths: Tensor, memory: Tensor, memory_lengths: Tensor) -> Tensor:
        u = ys.shape[1]
        causal = torch.triu(torch.ones(u, u, dtype=torch.bool, device=ys.device), diagonal=1)
        tgt_mask = causal[None, None] | make_pad_mask(ys_lengths, u)[:, None, None, :]
        memory_mask = make_pad_mask(memory_lengths, memory.shape[1])[:, None, None, :]
        y, _ = self.pos(self.embed(ys))
        for layer in self.layers:
            y = layer(y, tgt_mask, memory, memory_mask)
        return self.out(self.norm(y))


# --------------------------------------------------------------------------- losses


def label_smoothing_loss(logits: Tensor, targets: Tensor, mask: Tensor, smoothing: float) -> Tensor:
    """Per-utterance label-smoothed cross-entropy averaged over valid tokens.

    The target keeps 1 - smoothing; the rest is spread evenly over the other
    V - 1 classes. ``mask`` is True on valid target positions. Returns (B,).
    """
    v = logits.shape[-1]
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    if smoothing > 0:
        others = -(logp.sum(-1)) - nll
        loss = (1.0 - smoothing) * nll + smoothing / (v - 1) * others
    else:
        loss = nll
    loss = loss.masked_fill(~mask, 0.0)
    return loss.sum(-1) / mask.sum(-1)


class ASRModel(nn.Module):
    def __init__(self, cfg: ModelConfig, sos_eos_id: Optional[int] = None, blank_id: int = 0):
        super().__init__()
        self.cfg = cfg
        self.sos_eos_id = cfg.vocab_size - 1 if sos_eos_id is None else sos_eos_id
        self.blank_id = blank_id
        self.encoder = ConformerEncoder(cfg)
        self.decoder = TransformerDecoder(cfg)

    def encode(self, feats: Tensor, lengths: Optional[Tensor] = None, hooks=None) -> EncoderTrace:
        """``feats`` is (B, T, 80) or a single (T, 80) utterance."""
        if feats.ndim == 2:
            feats = feats[None]
        if feats.shape[-1] != self.cfg.input_dim:
            raise ModelError(f"expected {self.cfg.input_dim}-dim features, got {feats.shape[-1]}")
        if lengths is None:
            lengths = torch.full((feats.shape[0],), feats.shape[1], dtype=torch.long)
        if self.cfg.utterance_mvn:
            feats = utterance_mvn(feats, lengths)
        return self.encoder(feats, lengths, hooks)

    def _teacher_forcing(self, targets: Sequence[Sequence[int]], device):
        for t in targets:
            if len(t) == 0:
                raise ModelError("empty target sequence")
            if any(int(i) == self.blank_id for i in t):
                raise ModelError("target contains the reserved blank id")
        u = max(len(t) for t in targets) + 1
        b = len(targets)
        ys_in = torch.full((b, u), self.sos_eos_id, dtype=torch.long, device=device)
        ys_out = torch.full((b, u), -1, dtype=torch.long, device=device)
        for i, t in enumerate(targets):
            t = torch.as_tensor(list(t), dtype=torch.long)
            ys_in[i, 1 : len(t) + 1] = t
            ys_out[i, : len(t)] = t
            ys_out[i, len(t)] = self.sos_eos_id
        lengths = torch.tensor([len(t) + 1 for t in targets], device=device)
        return ys_in, ys_out, lengths

    def logits(self, trace: EncoderTrace, targets: Sequence[Sequence[int]]) -> tuple[Tensor, Tensor, Tensor]:
        ys_in, ys_out, ys_len = self._teacher_forcing(targets, trace.output.device)
        logits = self.decoder(ys_in, ys_len, trace.output, trace.lengths)
        return logits, ys_out, ys_out >= 0

    def asr_loss(
        self, trace: EncoderTrace, targets: Sequence[Sequence[int]], smoothing: float = 0.1, reduction: str = "mean"
    ) -> Tensor:
        """Teacher-forced label-smoothed CE; ``reduction='none'`` gives per-utterance values."""
        logits, ys_out, mask = self.logits(trace, targets)
        per_utt = label_smoothing_loss(logits, ys_out, mask, smoothing)
        if reduction == "none":
            return per_utt
        n = mask.sum(-1).to(per_utt.dtype)
        return (per_utt * n).sum() / n.sum()

    def compute_asr_loss(self, trace: EncoderTrace, targets, smoothing: float = 0.1) -> LossBreakdown:
        return LossBreakdown(asr_loss=self.asr_loss(trace, targets, smoothing))

    @torch.no_grad()
    def decode_greedy(self, trace: EncoderTrace, max_len: Optional[int] = None) -> list[list[int]]:
        """Autoregressive argmax from sos until eos, at most 2*T' tokens per utterance."""
        memory, mem_len = trace.output, trace.lengths
        b = memory.shape[0]
        limits = (2 * mem_len).tolist() if max_len is None else [max_len] * b
        ys = torch.full((b, 1), self.sos_eos_id, dtype=torch.long, device=memory.device)
        hyps: list[list[int]] = [[] for _ in range(b)]
        done = [lim <= 0 for lim in limits]
        for step in range(max(limits, default=0)):
            if all(done):
                break
            lens = torch.full((b,), ys.shape[1], dtype=torch.long, device=memory.device)
            logits = self.decoder(ys, lens, memory, mem_len)[:, -1]
            nxt = logits.argmax(-1)
            for i in range(b):
                if done[i]:
                    continue
                tok = int(nxt[i])
                if tok == self.sos_eos_id:
                    done[i] = True
                else:
                    hyps[i].append(tok)
                    if len(hyps[i]) >= limits[i]:
                        done[i] = True
            ys = torch.cat([ys, nxt[:, None]], dim=1)
        return hyps


def encoder_forward(model: ASRModel, feats: Tensor, lengths=None, adapters=None) -> EncoderTrace:
    return model.encode(feats, lengths, hooks=adapters)


def decode_greedy(model: ASRModel, trace: EncoderTrace) -> list[list[int]]:
    return model.decode_greedy(trace)


def compute_asr_loss(model: ASRModel, trace: EncoderTrace, targets, smoothing: float = 0.1) -> LossBreakdown:
    return model.compute_asr_loss(trace, targets, smoothing)
