"""Backbone pretraining, frozen-backbone adapter adaptation and SE joint adaptation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .adapters import AdaptedASR, AdapterSpec, freeze_backbone, trainable_parameters
from .checkpoint import Checkpoint, CheckpointError, average_checkpoints, select_topk_by_dev
from .corpus import DataRegime, UtteranceRecord, select_regime, split_records
from .data import Utterance, collate_feats, collate_waves, load_utterances, make_batches
from .enhancement import SEBatch, build_frontend, compute_se_loss, joint_loss
from .features import SpecAugPolicy, Tokenizer
from .model import ASRModel, LossBreakdown, ModelConfig

logger = logging.getLogger(__name__)

PHASES = ("pretrain", "adapt", "adapt_with_se")


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    phase: str
    epochs: int = 20
    seed: int = 0
    lr: float = 1e-3
    warmup_steps: int = 200
    batch_size: int = 16
    grad_clip: float = 5.0
    label_smoothing: float = 0.1
    regime: DataRegime = field(default_factory=DataRegime)
    spec_aug: SpecAugPolicy = field(default_factory=SpecAugPolicy)
    adapter_spec: Optional[AdapterSpec] = None
    frontend: Optional[str] = None
    se_weight: float = 1.0
    se_loss: str = "l1"
    top_k: int = 10
    max_steps: Optional[int] = None
    expected_config_hash: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if self.phase not in PHASES:
            raise TrainingError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.phase == "pretrain" and (self.adapter_spec is not None or self.frontend is not None):
            raise TrainingError("pretraining takes neither adapters nor a front-end")
        if self.phase == "adapt" and self.adapter_spec is None:
            raise TrainingError("phase 'adapt' requires an adapter spec")
        if self.phase == "adapt_with_se" and self.frontend is None:
            raise TrainingError("phase 'adapt_with_se' requires a front-end")
        if self.epochs < 0:
            raise TrainingError("epochs must be nonnegative")
        if self.se_weight < 0:
            raise TrainingError("se_weight must be nonnegative")


def warmup_inverse_sqrt(step: int, warmup: int) -> float:
    """LR multiplier: linear warmup to 1 at ``warmup``, then warmup**0.5 / step**0.5."""
    step = max(step, 1)
    warmup = max(warmup, 1)
    return min(step / warmup, math.sqrt(warmup / step))


class TrainLog:
    """Line-delimited training records, kept in memory and optionally on disk."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")

    def steps(self) -> list[dict]:
        return [r for r in self.records if "step" in r and "asr_loss" in r]


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


# --------------------------------------------------------------------------- model (de)serialisation


def backbone_metadata(cfg: ModelConfig, tokenizer: Tokenizer) -> dict:
    return {
        "config_hash": cfg.hash(),
        "model_config": cfg.to_dict(),
        "tokenizer": tokenizer.characters,
        "components": ["backbone"],
    }


def tokenizer_from(ckpt: Checkpoint) -> Tokenizer:
    return Tokenizer(ckpt.metadata["tokenizer"])


def load_backbone(ckpt: Checkpoint) -> tuple[ASRModel, Tokenizer]:
    if "model_config" not in ckpt.metadata:
        raise CheckpointError("checkpoint carries no model_config; not a backbone checkpoint")
    cfg = ModelConfig(**ckpt.metadata["model_config"])
    if cfg.hash() != ckpt.config_hash:
        raise CheckpointError(f"config hash mismatch: metadata says {ckpt.config_hash}, config hashes to {cfg.hash()}")
    tok = tokenizer_from(ckpt)
    model = ASRModel(cfg, sos_eos_id=tok.sos_eos_id, blank_id=tok.blank_id)
    ckpt.load_into(model)
    model.eval()
    return model, tok


def load_frontend(ckpt: Checkpoint, prefix: str = "") -> nn.Module:
    kind = ckpt.metadata["frontend"]
    fe = build_frontend(kind, **ckpt.metadata.get("frontend_config", {}))
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in ckpt.params.items() if k.startswith(prefix)}
    fe.load_state_dict(state)
    return fe


def load_adapted(backbone: Checkpoint, adapted: Checkpoint) -> AdaptedASR:
    """Rebuild the adapted model from a backbone checkpoint and an adaptation checkpoint."""
    if adapted.metadata.get("backbone_digest") not in (None, backbone.digest()):
        raise CheckpointError("adaptation checkpoint was trained on a different backbone")
    model, _ = load_backbone(backbone)
    spec = adapted.metadata.get("adapter_spec")
    spec = AdapterSpec(**spec) if spec else None
    frontend = load_frontend(adapted, "frontend.") if adapted.metadata.get("frontend") else None
    am = AdaptedASR(model, spec, frontend)
    am.load_state_dict(
        {k: torch.from_numpy(np.array(v)) for k, v in adapted.params.items()}, strict=False
    )
    freeze_backbone(am)
    am.eval()
    return am


# --------------------------------------------------------------------------- generic loop


def _fit(
    module: nn.Module,
    params: list[nn.Parameter],
    plan: TrainPlan,
    epoch_batches: Callable[[int], list],
    step_loss: Callable[[list], LossBreakdown],
    dev_loss: Callable[[], float],
    snapshot: Callable[[int, int, float], Checkpoint],
    log: TrainLog,
) -> tuple[list[Checkpoint], list[dict]]:
    opt = torch.optim.Adam(params, lr=plan.lr, betas=(0.9, 0.98), eps=1e-9)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: warmup_inverse_sqrt(s + 1, plan.warmup_steps))
    history = [{"epoch": 0, "step": 0, "dev_loss": dev_loss()}]
    log.write(kind="dev", **history[0])
    store: list[Checkpoint] = []
    step = 0
    for epoch in range(1, plan.epochs + 1):
        module.train()
        for batch in epoch_batches(epoch):
            lb = step_loss(batch)
            if not torch.isfinite(lb.total):
                raise TrainingDivergedError(
                    f"non-finite loss ({float(lb.total.detach())}) at step {step + 1}, epoch {epoch}"
                )
            opt.zero_grad()
            lb.total.backward()
            gnorm = torch.nn.utils.clip_grad_norm_(params, plan.grad_clip)
            if not torch.isfinite(gnorm):
                raise TrainingDivergedError(f"non-finite gradient norm at step {step + 1}, epoch {epoch}")
            lr = opt.param_groups[0]["lr"]
            opt.step()
            sched.step()
            step += 1
            rec = {"step": step, "epoch": epoch, "asr_loss": float(lb.asr_loss.detach()), "lr": lr, "is_real": batch[0].is_real}
            if lb.se_loss is not None:
                rec["se_loss"] = float(lb.se_loss.detach())
            log.write(**rec)
            if plan.max_steps is not None and step >= plan.max_steps:
                break
        dev = dev_loss()
        if not math.isfinite(dev):
            raise TrainingDivergedError(f"non-finite dev loss after epoch {epoch} (step {step})")
        history.append({"epoch": epoch, "step": step, "dev_loss": dev})
        log.write(kind="dev", epoch=epoch, step=step, dev_loss=dev)
        logger.info("epoch %d step %d dev_loss %.4f", epoch, step, dev)
        store.append(snapshot(step, epoch, dev))
        if plan.top_k:
            store = select_topk_by_dev(store, min(plan.top_k, len(store)))
        if plan.max_steps is not None and step >= plan.max_steps:
            break
    return store, history


def _asr_dev_loss(model, utts: Sequence[Utterance], plan: TrainPlan, frontend_path: bool) -> Callable[[], float]:
    batches = make_batches(utts, plan.batch_size)

    @torch.no_grad()
    def run() -> float:
        if not batches:
            return float("nan")
        was_training = model.training
        model.eval()
        total, tokens = 0.0, 0
        for batch in batches:
            targets = [u.targets for u in batch]
            if frontend_path:
                noisy, lengths, _ = collate_waves(batch)
                feats, flen, _, _ = model.frontend.asr_features(noisy, lengths)
                trace = model.encode(feats, flen)
            else:
                feats, lengths = collate_feats(batch)
                trace = model.encode(feats, lengths)
            per_utt = model.asr_loss(trace, targets, plan.label_smoothing, reduction="none")
            n = torch.tensor([len(t) + 1 for t in targets], dtype=per_utt.dtype)
            total += float((per_utt * n).sum())
            tokens += int(n.sum())
        model.train(was_training)
        return total / tokens

    return run


def _require(records: Sequence[UtteranceRecord], what: str):
    if not records:
        raise TrainingError(f"no {what} records in manifest")


# --------------------------------------------------------------------------- phases


def pretrain(
    plan: TrainPlan,
    records: Sequence[UtteranceRecord],
    model_config: ModelConfig = ModelConfig(),
    tokenizer: Optional[Tokenizer] = None,
    log: Optional[TrainLog] = None,
    out_dir=None,
) -> Checkpoint:
    """Train every backbone parameter; return the average of the top-k dev checkpoints."""
    if plan.phase != "pretrain":
        raise TrainingError(f"pretrain() needs a pretrain plan, got {plan.phase!r}")
    _require(records, "")
    train_recs = select_regime(records, plan.regime)
    dev_recs = split_records(records, "dev")
    _require(dev_recs, "dev")
    tokenizer = tokenizer or Tokenizer.from_texts(r.transcript for r in train_recs)
    cfg = dataclasses.replace(model_config, vocab_size=tokenizer.vocab_size)
    log = log or TrainLog(Path(out_dir) / "train_log.jsonl" if out_dir else None)

    seed_everything(plan.seed)
    model = ASRModel(cfg, sos_eos_id=tokenizer.sos_eos_id, blank_id=tokenizer.blank_id)
    train = load_utterances(train_recs, tokenizer, workers=plan.workers)
    dev = load_utterances(dev_recs, tokenizer, workers=plan.workers)
    rng = np.random.default_rng(plan.seed)
    meta = backbone_metadata(cfg, tokenizer) | {"phase": "pretrain", "seed": plan.seed}

    def step_loss(batch):
        feats, lengths = collate_feats(batch, plan.spec_aug, rng)
        trace = model.encode(feats, lengths)
        return model.compute_asr_loss(trace, [u.targets for u in batch], plan.label_smoothing)

    def snapshot(step, epoch, dev_metric):
        return Checkpoint.from_module(model, **meta, step=step, epoch=epoch, dev_metric=dev_metric)

    store, history = _fit(
        model,
        list(model.parameters()),
        plan,
        lambda epoch: make_batches(train, plan.batch_size, rng),
        step_loss,
        _asr_dev_loss(model, dev, plan, frontend_path=False),
        snapshot,
        log,
    )
    if not store:
        final = snapshot(0, 0, history[0]["dev_loss"])
    else:
        top = select_topk_by_dev(store, min(plan.top_k or 1, len(store)))
        final = average_checkpoints(top)
    final.metadata["history"] = history
    if out_dir:
        out = Path(out_dir)
        for c in store:
            c.save(out / f"epoch{int(c.metadata['epoch']):03d}.safetensors")
        final.save(out / "backbone.safetensors")
    return final


def pretrain_frontend(
    plan: TrainPlan,
    records: Sequence[UtteranceRecord],
    kind: str,
    frontend_config: Optional[dict] = None,
    log: Optional[TrainLog] = None,
) -> Checkpoint:
    """Train an enhancement front-end alone on simulated pairs with the SE loss."""
    frontend_config = frontend_config or {}
    train_recs = [r for r in records if r.split == "train" and not r.is_real and r.clean_path]
    _require(train_recs, "simulated training")
    tokenizer = Tokenizer([])
    seed_everything(plan.seed)
    fe = build_frontend(kind, **frontend_config)
    utts = load_utterances(train_recs, tokenizer, with_clean=True, with_feats=False, workers=plan.workers)
    rng = np.random.default_rng(plan.seed)
    opt = torch.optim.Adam(fe.parameters(), lr=plan.lr)
    log = log or TrainLog()
    step, last = 0, math.nan
    for epoch in range(1, plan.epochs + 1):
        losses = []
        for batch in make_batches(utts, plan.batch_size, rng):
            noisy, lengths, clean = collate_waves(batch)
            _, _, enhanced, valid = fe.asr_features(noisy, lengths)
            loss = compute_se_loss(enhanced, fe.reference(clean), plan.se_loss, valid)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite SE loss at step {step + 1}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(fe.parameters(), plan.grad_clip)
            opt.step()
            step += 1
            losses.append(float(loss.detach()))
            log.write(step=step, epoch=epoch, se_loss=losses[-1], lr=plan.lr)
        last = float(np.mean(losses))
    return Checkpoint.from_module(
        fe,
        frontend=kind,
        frontend_config=frontend_config,
        components=[f"frontend:{kind}"],
        step=step,
        epoch=plan.epochs,
        dev_metric=last if math.isfinite(last) else 0.0,
    )


def adapt(
    plan: TrainPlan,
    pretrained: Checkpoint,
    records: Sequence[UtteranceRecord],
    frontend_ckpt: Optional[Checkpoint] = None,
    log: Optional[TrainLog] = None,
    out_dir=None,
    return_model: bool = False,
):
    """Freeze the pretrained backbone and train adapters (and the front-end, if any).

    The returned checkpoint holds only the trainable components plus the
    digest of the frozen backbone they were trained against.
    """
    if plan.phase not in ("adapt", "adapt_with_se"):
        raise TrainingError(f"adapt() needs an adapt plan, got {plan.phase!r}")
    if plan.expected_config_hash and plan.expected_config_hash != pretrained.config_hash:
        raise CheckpointError(
            f"plan expects backbone config {plan.expected_config_hash}, checkpoint has {pretrained.config_hash}"
        )
    backbone, tokenizer = load_backbone(pretrained)
    frontend = None
    frontend_config = {}
    if plan.phase == "adapt_with_se":
        if frontend_ckpt is not None:
            if frontend_ckpt.metadata.get("frontend") != plan.frontend:
                raise CheckpointError(
                    f"front-end checkpoint is {frontend_ckpt.metadata.get('frontend')!r}, plan wants {plan.frontend!r}"
                )
            frontend = load_frontend(frontend_ckpt)
            frontend_config = frontend_ckpt.metadata.get("frontend_config", {})
        else:
            frontend = build_frontend(plan.frontend)

    seed_everything(plan.seed)
    model = AdaptedASR(backbone, plan.adapter_spec, frontend)
    freeze_backbone(model)
    params = trainable_parameters(model)

    train_recs = select_regime(records, plan.regime)
    dev_recs = split_records(records, "dev")
    if plan.regime.held_out_condition is not None:
        dev_recs = [r for r in dev_recs if r.condition == plan.regime.held_out_condition]
    _require(dev_recs, "dev")
    use_fe = frontend is not None
    train = load_utterances(train_recs, tokenizer, with_clean=use_fe, with_feats=not use_fe, workers=plan.workers)
    dev = load_utterances(dev_recs, tokenizer, with_feats=not use_fe, workers=plan.workers)
    rng = np.random.default_rng(plan.seed)
    log = log or TrainLog(Path(out_dir) / "train_log.jsonl" if out_dir else None)

    meta = {
        "config_hash": pretrained.config_hash,
        "backbone_digest": pretrained.digest(),
        "phase": plan.phase,
        "seed": plan.seed,
        "adapter_spec": dataclasses.asdict(plan.adapter_spec) if plan.adapter_spec else None,
        "components": (["adapters"] if plan.adapter_spec else []) + ([f"frontend:{plan.frontend}"] if use_fe else []),
    }
    if use_fe:
        meta |= {"frontend": plan.frontend, "frontend_config": frontend_config}

    def step_loss(batch):
        targets = [u.targets for u in batch]
        if use_fe:
            noisy, lengths, clean = collate_waves(batch)
            se_batch = SEBatch(noisy, lengths, targets, is_real=batch[0].is_real, clean=None if batch[0].is_real else clean)
            return joint_loss(se_batch, model, frontend, plan.se_weight, plan.label_smoothing, plan.se_loss)
        feats, lengths = collate_feats(batch, plan.spec_aug, rng)
        return model.compute_asr_loss(model.encode(feats, lengths), targets, plan.label_smoothing)

    def snapshot(step, epoch, dev_metric):
        params_ = {
            k: v.detach().cpu().numpy().copy()
            for k, v in model.state_dict().items()
            if k.startswith(("adapters.", "frontend."))
        }
        return Checkpoint(params_, meta | {"step": step, "epoch": epoch, "dev_metric": dev_metric})

    if not params:
        raise TrainingError("nothing to train: no adapters and no front-end")
    store, history = _fit(
        model,
        params,
        plan,
        lambda epoch: make_batches(train, plan.batch_size, rng),
        step_loss,
        _asr_dev_loss(model, dev, plan, frontend_path=use_fe),
        snapshot,
        log,
    )
    if store:
        top = select_topk_by_dev(store, min(plan.top_k or 1, len(store)))
        final = average_checkpoints(top) if len(top) > 1 else top[0]
    else:
        final = snapshot(0, 0, history[0]["dev_loss"])
    final.metadata["history"] = history
    if out_dir:
        final.save(Path(out_dir) / "adapted.safetensors")
    if return_model:
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in final.params.items()}, strict=False)
        model.eval()
        return final, model
    return final
