"""Residual bottleneck adapters placed after encoder layers of a frozen backbone."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from torch import Tensor, nn

from .model import ASRModel, EncoderTrace, LossBreakdown

ACTIVATIONS = {
    "relu": nn.ReLU,
    "gelu": nn.GELU,
    "swish": nn.SiLU,
    "tanh": nn.Tanh,
}


class AdapterError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    positions: tuple[int, ...]
    emb_dim: int = 64
    in_out_dim: int = 512
    init: str = "lora_zero_up"
    activation: str = "relu"
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        if not self.positions:
            raise AdapterError("adapter positions must be nonempty")
        if len(set(self.positions)) != len(self.positions):
            raise AdapterError(f"duplicate adapter positions in {self.positions}")
        if self.emb_dim <= 0 or self.in_out_dim <= 0:
            raise AdapterError("adapter dimensions must be positive")
        if self.emb_dim >= self.in_out_dim:
            raise AdapterError(
                f"bottleneck dim {self.emb_dim} must be smaller than in/out dim {self.in_out_dim}"
            )
        if self.init != "lora_zero_up":
            raise AdapterError(f"unknown adapter init {self.init!r}")
        if self.activation not in ACTIVATIONS:
            raise AdapterError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")


def adapter_param_count(d: int, m: int) -> int:
    return 2 * d * m + m + d


class Adapter(nn.Module):
    """e' = e + up(act(down(e))), applied per frame."""

    def __init__(self, d: int, m: int, activation: str = "relu", init_std: float = 0.02):
        super().__init__()
        self.down = nn.Linear(d, m)
        self.act = ACTIVATIONS[activation]()
        self.up = nn.Linear(m, d)
        nn.init.normal_(self.down.weight, std=init_std)
        nn.init.zeros_(self.down.bias)
        # zero up-projection: the adapter starts as the identity map
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    @property
    def dim(self) -> int:
        return self.down.in_features

    def branch(self, e: Tensor) -> Tensor:
        return self.up(self.act(self.down(e)))

    def forward(self, e: Tensor) -> Tensor:
        return e + self.branch(e)


def adapter_forward(e: Tensor, adapter: Adapter) -> Tensor:
    if e.shape[-1] != adapter.dim:
        raise AdapterError(f"adapter expects last dim {adapter.dim}, got {e.shape[-1]}")
    return adapter(e)


class AdaptedASR(nn.Module):
    """Backbone plus per-layer adapters and an optional enhancement front-end.

    The backbone is stored unchanged; adapters are applied through the
    encoder's hook points.
    """

    def __init__(self, backbone: ASRModel, spec: Optional[AdapterSpec] = None, frontend: Optional[nn.Module] = None):
        super().__init__()
        self.backbone = backbone
        self.spec = spec
        self.adapters = nn.ModuleDict()
        self.frontend = frontend
        if spec is not None:
            self._insert(spec)

    def _insert(self, spec: AdapterSpec):
        n = self.backbone.cfg.num_encoder_layers
        bad = [p for p in spec.positions if not 1 <= p <= n]
        if bad:
            raise AdapterError(f"adapter positions {bad} outside encoder layers 1..{n}")
        d = self.backbone.cfg.attn_dim
        if spec.in_out_dim != d:
            raise AdapterError(f"adapter in/out dim {spec.in_out_dim} does not match encoder dim {d}")
        for p in sorted(spec.positions):
            self.adapters[str(p)] = Adapter(d, spec.emb_dim, spec.activation, spec.init_std)

    @property
    def hooks(self) -> dict[int, Adapter]:
        return {int(k): v for k, v in self.adapters.items()}

    def encode(self, feats: Tensor, lengths: Optional[Tensor] = None) -> EncoderTrace:
        return self.backbone.encode(feats, lengths, hooks=self.hooks or None)

    def decode_greedy(self, trace: EncoderTrace) -> list[list[int]]:
        return self.backbone.decode_greedy(trace)

    def asr_loss(self, trace, targets, smoothing: float = 0.1, reduction: str = "mean"):
        return self.backbone.asr_loss(trace, targets, smoothing, reduction)

    def compute_asr_loss(self, trace, targets, smoothing: float = 0.1) -> LossBreakdown:
        return LossBreakdown(asr_loss=self.asr_loss(trace, targets, smoothing))

    def train(self, mode: bool = True):
        super().train(mode)
        if getattr(self, "_frozen", False):
            # frozen backbone runs deterministically (no dropout) during adaptation
            self.backbone.eval()
        return self

    def backbone_parameters(self):
        return self.backbone.parameters()

    def adapter_parameters(self):
        return self.adapters.parameters()


def insert_adapters(model, spec: AdapterSpec, frontend: Optional[nn.Module] = None) -> AdaptedASR:
    backbone = model.backbone if isinstance(model, AdaptedASR) else model
    if isinstance(model, AdaptedASR) and frontend is None:
        frontend = model.frontend
    return AdaptedASR(backbone, spec, frontend)


def freeze_backbone(model: AdaptedASR) -> None:
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    model._frozen = True
    model.train(model.training)


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def count_trainable_params(model: nn.Module) -> int:
    return sum(p.numel() for p in trainable_parameters(model))
