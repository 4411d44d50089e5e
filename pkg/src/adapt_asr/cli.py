"""Command-line entry point: ``adapt-asr <command> [options]``.

Every command reads one config file (flags override it) and writes into a
fresh run directory ``<root>/<config-hash>-<timestamp>-<command>``. The root is
``--out``, else ``$ADAPT_ASR_HOME``, else ``./runs``.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .checkpoint import Checkpoint
from .config import ConfigError, RunConfig
from .corpus import (
    CorpusError,
    MixJob,
    UtteranceRecord,
    load_wav,
    read_manifest,
    write_manifest,
    write_wav,
)
from .evaluation import (
    AXES,
    ReportRow,
    ReportTable,
    build_grid,
    evaluate,
    read_report_json,
    render_report,
    run_ablation,
    write_report,
)
from .features import Tokenizer
from .toy import TOY_MODEL, ToyCorpus
from .training import TrainLog, adapt, load_adapted, load_backbone, pretrain, pretrain_frontend

logger = logging.getLogger("adapt_asr")

EXIT_OK, EXIT_FAILED_ROWS, EXIT_USAGE = 0, 1, 2
HOME_ENV = "ADAPT_ASR_HOME"


class MissingPrerequisite(RuntimeError):
    def __init__(self, what: str, path):
        super().__init__(f"missing prerequisite: {what} not found at {Path(path).resolve()}")
        self.path = Path(path)


# --------------------------------------------------------------------------- helpers


def output_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(HOME_ENV, "runs"))


def new_run_dir(root: Path, cfg: RunConfig, command: str) -> Path:
    """Create a run directory that did not exist before; never reuse one."""
    stamp = dt.datetime.now().strftime("%Y%m%dT%H%M%S%f")
    base = f"{cfg.hash()}-{stamp}-{command}"
    root.mkdir(parents=True, exist_ok=True)
    for k in range(1000):
        path = root / (base if k == 0 else f"{base}.{k}")
        try:
            path.mkdir()
        except FileExistsError:
            continue
        cfg.dump(path / "config.yaml")
        return path
    raise RuntimeError(f"could not allocate a run directory under {root}")


def load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config, seed=args.seed)
    else:
        cfg = RunConfig.from_dict({}, seed=args.seed)
    return cfg


def require_file(path, what: str) -> Path:
    if path is None:
        raise MissingPrerequisite(what, "<unset>")
    p = Path(path)
    if not p.is_file():
        raise MissingPrerequisite(what, p)
    return p


def manifest_arg(arg: Optional[str], default: Optional[str], what: str) -> Path:
    return require_file(arg or default, what)


# --------------------------------------------------------------------------- commands


def _transcript_for(wav: Path) -> str:
    txt = wav.with_suffix(".txt")
    return txt.read_text(encoding="utf-8").strip() if txt.is_file() else ""


def cmd_mix(args, cfg: RunConfig) -> int:
    clean_dir, noise_dir = Path(args.clean_dir), Path(args.noise_dir)
    for d in (clean_dir, noise_dir):
        if not d.is_dir():
            raise MissingPrerequisite("audio directory", d)
    cleans = sorted(clean_dir.glob("*.wav"))
    noises = sorted(noise_dir.glob("*.wav"))
    if not cleans:
        raise CorpusError(f"no .wav files in {clean_dir}")
    if not noises:
        raise CorpusError(f"no .wav files in {noise_dir}")
    c = cfg.corpus
    lo, hi = c.snr_range
    if lo > hi:
        raise ConfigError(f"snr_range lower bound {lo} exceeds upper bound {hi}")
    out_manifest = Path(args.out_manifest)
    audio_dir = out_manifest.parent / (out_manifest.stem + "_audio")
    rng = np.random.default_rng(cfg.seed)
    records, seen = [], set()
    for clean_path in cleans:
        transcript = _transcript_for(clean_path)
        for k in range(c.mixes_per_clean):
            uid = f"{clean_path.stem}_mix{k}" if c.mixes_per_clean > 1 else clean_path.stem
            if uid in seen:
                raise CorpusError(f"output id collision: {uid!r}")
            seen.add(uid)
            noise_path = noises[int(rng.integers(len(noises)))]
            snr = float(lo) if lo == hi else float(rng.uniform(lo, hi))
            job = MixJob(str(clean_path), str(noise_path), snr, int(rng.integers(2**31)), c.noise_offset_policy)
            noisy, _ = job.run()
            clean = load_wav(clean_path)
            # rescale both signals together so the mixture never clips; SNR is unchanged
            peak = float(np.max(np.abs(noisy)))
            scale = min(1.0, 0.99 / peak) if peak > 0 else 1.0
            write_wav(audio_dir / f"{uid}.wav", noisy * scale)
            write_wav(audio_dir / f"{uid}.clean.wav", clean * scale)
            records.append(
                UtteranceRecord(
                    uid,
                    f"{audio_dir.name}/{uid}.wav",
                    transcript,
                    c.condition,
                    False,
                    c.split,
                    snr,
                    f"{audio_dir.name}/{uid}.clean.wav",
                )
            )
    write_manifest(records, out_manifest)
    print(f"wrote {len(records)} records to {out_manifest}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    manifest = manifest_arg(args.manifest, cfg.corpus.pretrain_manifest, "pretraining manifest")
    records = read_manifest(manifest)
    run = new_run_dir(output_root(args), cfg, "pretrain")
    tok = Tokenizer.from_texts(r.transcript for r in records if r.split == "train")
    tok.save(run / "tokens.txt")
    ckpt = pretrain(
        cfg.pretrain_plan(args.workers), records, cfg.model_config(tok.vocab_size), tok,
        TrainLog(run / "train_log.jsonl"), out_dir=run,
    )
    print(f"backbone: {run / 'backbone.safetensors'} (dev loss {ckpt.dev_metric:.4f})")
    return EXIT_OK


def _backbone(args) -> Checkpoint:
    return Checkpoint.load(require_file(args.backbone, "backbone checkpoint"))


def cmd_adapt(args, cfg: RunConfig) -> int:
    backbone = _backbone(args)
    manifest = manifest_arg(args.manifest, cfg.corpus.adapt_manifest, "adaptation manifest")
    records = read_manifest(manifest)
    run = new_run_dir(output_root(args), cfg, "adapt")
    plan = dataclasses.replace(cfg.adapt_plan(args.workers), expected_config_hash=backbone.config_hash)
    fe_ckpt = None
    if plan.frontend:
        if args.frontend_ckpt:
            fe_ckpt = Checkpoint.load(require_file(args.frontend_ckpt, "front-end checkpoint"))
        else:
            fe_plan = dataclasses.replace(plan, epochs=cfg.frontend.pretrain_epochs)
            fe_ckpt = pretrain_frontend(fe_plan, records, plan.frontend, cfg.frontend.config, TrainLog(run / "frontend_log.jsonl"))
            fe_ckpt.save(run / "frontend.safetensors")
    ckpt = adapt(plan, backbone, records, fe_ckpt, out_dir=run)
    print(f"adapted: {run / 'adapted.safetensors'} (dev loss {ckpt.dev_metric:.4f})")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    backbone = _backbone(args)
    manifest = manifest_arg(args.manifest, cfg.corpus.adapt_manifest, "evaluation manifest")
    records = read_manifest(manifest)
    if args.adapted:
        model = load_adapted(backbone, Checkpoint.load(require_file(args.adapted, "adaptation checkpoint")))
    else:
        model, _ = load_backbone(backbone)
    tok = Tokenizer(backbone.metadata["tokenizer"])
    splits = args.split or cfg.eval.splits
    report = None
    for split in splits:
        r = evaluate(model, records, split, tok, cfg.corpus.conditions, batch_size=cfg.eval.batch_size, workers=args.workers)
        report = r if report is None else report.merge(r)
    run = new_run_dir(output_root(args), cfg, "evaluate")
    label = "adapted" if args.adapted else "baseline"
    table = ReportTable("evaluate", report.conditions, list(splits), [ReportRow("-", label, {s: report.row(s) for s in splits})])
    write_report(table, run)
    (run / "hypotheses.json").write_text(json.dumps(report.hypotheses, indent=1, sort_keys=True))
    print(render_report(table)[1], end="")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    backbone = _backbone(args)
    manifest = manifest_arg(args.manifest, cfg.corpus.adapt_manifest, "adaptation manifest")
    records = read_manifest(manifest)
    axis = args.axis or cfg.eval.axis
    mc = backbone.metadata["model_config"]
    template = dataclasses.replace(
        cfg.adapt_plan(args.workers, with_frontend=False), expected_config_hash=backbone.config_hash
    )
    grid = build_grid(
        axis, template, mc["num_encoder_layers"], mc["attn_dim"], cfg.adapter.emb_dim,
        cfg.eval.real_per_condition, cfg.adapter.activation,
    )
    if args.resume:
        run = Path(args.resume)
        if not run.is_dir():
            raise MissingPrerequisite("run directory to resume", run)
    else:
        run = new_run_dir(output_root(args), cfg, f"ablate-{axis}")
    fe_plan = dataclasses.replace(template, epochs=cfg.frontend.pretrain_epochs)
    table = run_ablation(
        grid, backbone, records, cfg.corpus.conditions, cfg.eval.splits, frontend_plan=fe_plan, out_dir=run
    )
    ok = write_report(table, run)
    print(render_report(table)[1], end="")
    for row in table.rows:
        if row.failed:
            print(f"exp {row.exp_id} FAILED: {row.error.splitlines()[0]}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAILED_ROWS


def cmd_report(args, cfg: Optional[RunConfig]) -> int:
    src = require_file(Path(args.run) / "report.json", "report of a finished run")
    table = read_report_json(src)
    dsv, text, ok = render_report(table)
    if args.format == "csv":
        print(dsv, end="")
    else:
        print(text, end="")
    return EXIT_OK if ok else EXIT_FAILED_ROWS


def cmd_toy(args, cfg: RunConfig) -> int:
    root = Path(args.dir)
    pre, ada = ToyCorpus(root, cfg.seed).build()
    model = {k: v for k, v in TOY_MODEL.to_dict().items() if k not in ("vocab_size", "input_dim")}
    toy_cfg = {
        "seed": cfg.seed,
        "corpus": {"pretrain_manifest": str(pre.resolve()), "adapt_manifest": str(ada.resolve())},
        "model": model,
        "adapter": {"positions": list(range(1, TOY_MODEL.num_encoder_layers + 1)), "emb_dim": 16},
        "frontend": {"pretrain_epochs": 6},
        "train": {
            "epochs": 40, "lr": 2e-3, "warmup_steps": 100, "top_k": 3,
            "adapt_epochs": 20, "adapt_lr": 2e-3, "adapt_warmup_steps": 50,
        },
        "eval": {"real_per_condition": 40},
    }
    RunConfig.from_dict(toy_cfg)  # validate
    (root / "toy.yaml").write_text(yaml.safe_dump(toy_cfg, sort_keys=True))
    print(f"toy corpus in {root}; config {root / 'toy.yaml'}")
    return EXIT_OK


COMMANDS = {
    "mix": cmd_mix,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "toy": cmd_toy,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (YAML or JSON)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--workers", type=int, default=1, help="data-loading threads")
    common.add_argument("--out", help=f"output root (default ${HOME_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adapt-asr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mix", parents=[common], help="simulate noisy speech at random SNRs")
    s.add_argument("--clean-dir", required=True)
    s.add_argument("--noise-dir", required=True)
    s.add_argument("--out-manifest", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="train the backbone")
    s.add_argument("--manifest")

    s = sub.add_parser("adapt", parents=[common], help="train adapters (and front-end) on a frozen backbone")
    s.add_argument("--backbone", required=True)
    s.add_argument("--manifest")
    s.add_argument("--frontend-ckpt")

    s = sub.add_parser("evaluate", parents=[common], help="greedy-decode and score WER")
    s.add_argument("--backbone", required=True)
    s.add_argument("--adapted")
    s.add_argument("--manifest")
    s.add_argument("--split", action="append", choices=["train", "dev", "eval"])

    s = sub.add_parser("ablate", parents=[common], help="run one ablation grid")
    s.add_argument("--backbone", required=True)
    s.add_argument("--manifest")
    s.add_argument("--axis", choices=AXES)
    s.add_argument("--resume", help="existing ablation run directory; finished rows are skipped")

    s = sub.add_parser("report", parents=[common], help="render the report of a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--format", choices=["text", "csv"], default="text")

    s = sub.add_parser("toy", parents=[common], help="generate the synthetic toy corpus and config")
    s.add_argument("--dir", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        # report only re-renders an existing run and needs no config
        cfg = None if args.command == "report" and not args.config else load_config(args)
        return COMMANDS[args.command](args, cfg)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: missing prerequisite: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CorpusError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
