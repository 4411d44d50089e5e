"""WER scoring, table-shaped reports and the ablation-grid runner."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .adapters import AdapterSpec
from .checkpoint import Checkpoint
from .corpus import ALL, DEFAULT_CONDITIONS, DataRegime, UtteranceRecord, conditions_of, split_records
from .data import collate_feats, collate_waves, load_utterances, make_batches
from .features import Tokenizer
from .training import TrainPlan, adapt, pretrain_frontend

logger = logging.getLogger(__name__)

FAILED = "FAILED"


class EvaluationError(ValueError):
    pass


# --------------------------------------------------------------------------- WER


@dataclass
class ErrorCounts:
    sub: int = 0
    dele: int = 0
    ins: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.dele + self.ins

    @property
    def wer(self) -> float:
        if self.ref_words == 0:
            raise EvaluationError("WER undefined for zero reference words")
        return 100.0 * self.errors / self.ref_words

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            self.sub + other.sub, self.dele + other.dele, self.ins + other.ins, self.ref_words + other.ref_words
        )


def normalize_words(text: str) -> list[str]:
    return text.lower().split()


def align_words(ref: Sequence[str], hyp: Sequence[str]) -> ErrorCounts:
    """Minimum-edit alignment counts.

    Among alignments with the fewest edits, the one with the fewest
    substitutions (most hits) is reported, which fixes the S/D/I split.
    """
    n, m = len(ref), len(hyp)
    # cost[i][j] = (edits, substitutions) aligning ref[:i] with hyp[:j]
    prev = [(j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0)] + [(0, 0)] * m
        for j in range(1, m + 1):
            e, s = prev[j - 1]
            diag = (e, s) if ref[i - 1] == hyp[j - 1] else (e + 1, s + 1)
            up = (prev[j][0] + 1, prev[j][1])
            left = (cur[j - 1][0] + 1, cur[j - 1][1])
            cur[j] = min(diag, up, left)
        prev = cur
    edits, sub = prev[m]
    # edits = S + D + I and D - I = n - m
    dele = (edits - sub + n - m) // 2
    ins = edits - sub - dele
    return ErrorCounts(sub, dele, ins, n)


def wer(refs: Sequence[str], hyps: Sequence[str]) -> ErrorCounts:
    if len(refs) != len(hyps):
        raise EvaluationError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    total = ErrorCounts()
    for k, (r, h) in enumerate(zip(refs, hyps)):
        rw = normalize_words(r)
        if not rw:
            raise EvaluationError(f"reference {k} is empty")
        total = total + align_words(rw, normalize_words(h))
    return total


@dataclass
class WERReport:
    conditions: list[str]
    cells: dict[tuple[str, str], ErrorCounts] = field(default_factory=dict)
    hypotheses: dict[str, str] = field(default_factory=dict)

    @property
    def splits(self) -> list[str]:
        return list(dict.fromkeys(s for s, _ in self.cells))

    def counts(self, split: str, condition: Optional[str] = None) -> ErrorCounts:
        if condition is not None:
            return self.cells[(split, condition)]
        pooled = ErrorCounts()
        for (s, _), c in self.cells.items():
            if s == split:
                pooled = pooled + c
        return pooled

    def wer(self, split: str, condition: Optional[str] = None) -> Optional[float]:
        """Cell WER, or the pooled (micro-averaged) WER over the split when ``condition`` is None."""
        if condition is not None and (split, condition) not in self.cells:
            return None
        c = self.counts(split, condition)
        return c.wer if c.ref_words else None

    def row(self, split: str) -> dict[str, Optional[float]]:
        out = {c: self.wer(split, c) for c in self.conditions}
        out["avg"] = self.wer(split)
        return out

    def merge(self, other: "WERReport") -> "WERReport":
        conds = list(dict.fromkeys(self.conditions + other.conditions))
        return WERReport(conds, {**self.cells, **other.cells}, {**self.hypotheses, **other.hypotheses})


@torch.no_grad()
def transcribe(model, utts, tokenizer: Tokenizer, batch_size: int = 16) -> dict[str, str]:
    model.eval()
    frontend = getattr(model, "frontend", None)
    out = {}
    for batch in make_batches(utts, batch_size):
        if frontend is not None:
            noisy, lengths, _ = collate_waves(batch)
            feats, flen, _, _ = frontend.asr_features(noisy, lengths)
            trace = model.encode(feats, flen)
        else:
            feats, lengths = collate_feats(batch)
            trace = model.encode(feats, lengths)
        for u, ids in zip(batch, model.decode_greedy(trace)):
            out[u.id] = tokenizer.detokenize(ids)
    return out


def evaluate(
    model,
    records: Sequence[UtteranceRecord],
    split: str,
    tokenizer: Tokenizer,
    conditions: Sequence[str] = DEFAULT_CONDITIONS,
    only_condition: Optional[str] = None,
    batch_size: int = 16,
    workers: int = 1,
) -> WERReport:
    """Greedy-decode every utterance of ``split`` and score it per condition."""
    recs = split_records(records, split)
    if only_condition is not None:
        recs = [r for r in recs if r.condition == only_condition]
    if not recs:
        raise EvaluationError(f"no records for split {split!r}" + (f", condition {only_condition!r}" if only_condition else ""))
    has_fe = getattr(model, "frontend", None) is not None
    utts = load_utterances(recs, tokenizer, with_feats=not has_fe, workers=workers)
    hyps = transcribe(model, utts, tokenizer, batch_size)
    conds = conditions_of(recs, conditions)
    report = WERReport(list(dict.fromkeys([*conditions, *conds])), {}, hyps)
    for cond in conds:
        cr = [r for r in recs if r.condition == cond]
        report.cells[(split, cond)] = wer([r.transcript for r in cr], [hyps[r.id] for r in cr])
    return report


# --------------------------------------------------------------------------- grids

AXES = ("position", "emb_dim", "data_regime", "se_system")


@dataclass(frozen=True)
class GridPoint:
    exp_id: str
    label: str
    adapter_spec: Optional[AdapterSpec] = None
    regime: Optional[DataRegime] = None
    held_out: bool = False
    frontend: Optional[str] = None


@dataclass(frozen=True)
class AblationGrid:
    axis: str
    points: tuple[GridPoint, ...]
    template: TrainPlan

    def __post_init__(self):
        if self.axis not in AXES:
            raise EvaluationError(f"unknown axis {self.axis!r}; expected one of {AXES}")
        if not self.points:
            raise EvaluationError("grid has no points")
        ids = [p.exp_id for p in self.points]
        if len(set(ids)) != len(ids):
            raise EvaluationError("duplicate exp ids in grid")


def _layer_label(positions) -> str:
    ps = sorted(positions)
    if len(ps) > 1 and ps == list(range(ps[0], ps[-1] + 1)):
        return f"E{ps[0]}-E{ps[-1]}"
    return ",".join(f"E{p}" for p in ps)


def position_points(num_layers: int, d: int, m: int, activation: str = "relu") -> list[GridPoint]:
    """Single layers from deepest to shallowest, then growing prefixes E1..Ek."""
    sets = [(p,) for p in range(num_layers, 0, -1)] + [tuple(range(1, k + 1)) for k in range(2, num_layers + 1)]
    return [
        GridPoint(str(i), _layer_label(s), AdapterSpec(s, m, d, activation=activation))
        for i, s in enumerate(sets, start=1)
    ]


FULL_SCALE_EMB_DIMS = ((12, 16), (13, 32), (11, 64), (14, 96), (15, 128))
FULL_SCALE_ADAPTER_DIM = 512


def scaled_emb_dim(full_m: int, d: int) -> int:
    """Bottleneck size with the same m/d ratio as at full scale."""
    return max(1, round(full_m * d / FULL_SCALE_ADAPTER_DIM))


def emb_dim_points(num_layers: int, d: int, activation: str = "relu") -> list[GridPoint]:
    positions = tuple(range(1, num_layers + 1))
    points = []
    for exp, pm in FULL_SCALE_EMB_DIMS:
        m = scaled_emb_dim(pm, d)
        label = str(pm) if m == pm else f"{pm} (m={m})"
        points.append(GridPoint(str(exp), label, AdapterSpec(positions, m, d, activation=activation)))
    return points


def data_regime_points(spec: AdapterSpec, real_per_condition: int = 400, seed: int = 0) -> list[GridPoint]:
    """Training-set variants; counts scale with the real data available per condition.

    The full-scale set had 400 real utterances per condition.
    """

    def n(x):
        return max(1, round(x * real_per_condition / 400))

    rows = [
        ("11", False, ALL, ALL, None),
        ("16", False, ALL, 0, None),
        ("17", True, n(400), ALL, None),
        ("18", True, n(400), 0, None),
        ("19", True, 0, n(400), None),
        ("20", True, n(200), ALL, None),
        ("21", True, n(200), 0, None),
        ("22", True, 0, n(200), None),
        ("23", True, n(100), ALL, None),
        ("24", True, n(100), 0, None),
        ("25", True, 0, n(100), None),
        ("26", False, ALL, 0, n(100)),
    ]
    points = []
    for exp, held, real, simu, quota in rows:
        label = f"{'held' if held else 'all'} real={real}{'*' if quota else ''} simu={simu}"
        regime = DataRegime(real_count=real, simu_count=simu, multi_condition_quota=quota, seed=seed)
        points.append(GridPoint(exp, label, spec, regime=regime, held_out=held))
    return points


def se_system_points(spec: AdapterSpec) -> list[GridPoint]:
    return [
        GridPoint("27", "masknet", None, frontend="masknet"),
        GridPoint("28", "masknet+adapter", spec, frontend="masknet"),
        GridPoint("29", "demucs_lite", None, frontend="demucs_lite"),
        GridPoint("30", "demucs_lite+adapter", spec, frontend="demucs_lite"),
    ]


def build_grid(
    axis: str, template: TrainPlan, num_layers: int, d: int, m: int = 16, real_per_condition: int = 400,
    activation: str = "relu",
) -> AblationGrid:
    all_layers = AdapterSpec(tuple(range(1, num_layers + 1)), m, d, activation=activation)
    if axis == "position":
        points = position_points(num_layers, d, m, activation)
    elif axis == "emb_dim":
        points = emb_dim_points(num_layers, d, activation)
    elif axis == "data_regime":
        points = data_regime_points(all_layers, real_per_condition, template.seed)
    elif axis == "se_system":
        points = se_system_points(all_layers)
    else:
        raise EvaluationError(f"unknown axis {axis!r}; expected one of {AXES}")
    return AblationGrid(axis, tuple(points), template)


# --------------------------------------------------------------------------- runner


@dataclass
class ReportRow:
    exp_id: str
    axis_point: str
    wer: dict[str, dict[str, Optional[float]]] = field(default_factory=dict)
    status: str = "ok"
    error: str = ""
    trainable: Optional[list[str]] = None

    @property
    def failed(self) -> bool:
        return self.status != "ok"


@dataclass
class ReportTable:
    axis: str
    conditions: list[str]
    splits: list[str] = field(default_factory=lambda: ["dev", "eval"])
    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not any(r.failed for r in self.rows)


def _plan_for(point: GridPoint, template: TrainPlan, regime: Optional[DataRegime]) -> TrainPlan:
    phase = "adapt_with_se" if point.frontend else "adapt"
    return dataclasses.replace(
        template,
        phase=phase,
        adapter_spec=point.adapter_spec,
        frontend=point.frontend,
        regime=regime if regime is not None else template.regime,
    )


def run_point(
    point: GridPoint,
    template: TrainPlan,
    backbone: Checkpoint,
    records: Sequence[UtteranceRecord],
    conditions: Sequence[str],
    splits: Sequence[str] = ("dev", "eval"),
    frontends: Optional[dict[str, Checkpoint]] = None,
    run_dir: Optional[Path] = None,
) -> ReportRow:
    """Adapt and evaluate one grid point (one run per condition when held out)."""
    tokenizer = Tokenizer(backbone.metadata["tokenizer"])
    frontends = frontends or {}
    row = ReportRow(point.exp_id, point.label)
    reports = []
    base_regime = point.regime or template.regime
    sub_runs = [(c, dataclasses.replace(base_regime, held_out_condition=c)) for c in conditions] if point.held_out else [(None, base_regime)]
    for cond, regime in sub_runs:
        plan = _plan_for(point, template, regime)
        sub_dir = None
        if run_dir is not None:
            sub_dir = run_dir / (f"{cond}" if cond else ".")
        ckpt, model = adapt(
            plan, backbone, records, frontend_ckpt=frontends.get(point.frontend) if point.frontend else None,
            out_dir=sub_dir, return_model=True,
        )
        row.trainable = sorted({k.split(".")[0] for k, p in model.named_parameters() if p.requires_grad})
        for split in splits:
            reports.append(evaluate(model, records, split, tokenizer, conditions, only_condition=cond))
    merged = reports[0]
    for r in reports[1:]:
        merged = merged.merge(r)
    row.wer = {s: merged.row(s) for s in splits}
    return row


def run_ablation(
    grid: AblationGrid,
    backbone: Checkpoint,
    records: Sequence[UtteranceRecord],
    conditions: Sequence[str] = DEFAULT_CONDITIONS,
    splits: Sequence[str] = ("dev", "eval"),
    frontends: Optional[dict[str, Checkpoint]] = None,
    frontend_plan: Optional[TrainPlan] = None,
    out_dir=None,
) -> ReportTable:
    """Run every grid point sequentially; failures are recorded per row.

    With ``out_dir`` each finished row is stored as JSON and skipped on rerun.
    """
    out = Path(out_dir) if out_dir else None
    table = ReportTable(grid.axis, list(conditions), list(splits), metadata={"parallel": False, "seed": grid.template.seed})
    frontends = dict(frontends or {})
    for point in grid.points:
        row_file = out / "rows" / f"{point.exp_id}.json" if out else None
        if row_file is not None and row_file.is_file():
            table.rows.append(ReportRow(**json.loads(row_file.read_text())))
            continue
        try:
            if point.frontend and point.frontend not in frontends:
                frontends[point.frontend] = _frontend_for(point.frontend, records, frontend_plan or grid.template, out)
            row = run_point(
                point, grid.template, backbone, records, conditions, splits, frontends,
                run_dir=out / "runs" / f"exp{point.exp_id}" if out else None,
            )
        except Exception as e:  # noqa: BLE001 - one failing point must not abort the grid
            logger.exception("grid point %s failed", point.exp_id)
            row = ReportRow(point.exp_id, point.label, status="failed", error=f"{type(e).__name__}: {e}")
            row.error += "\n" + traceback.format_exc(limit=3)
        if row_file is not None and not row.failed:
            row_file.parent.mkdir(parents=True, exist_ok=True)
            row_file.write_text(json.dumps(dataclasses.asdict(row), indent=1))
        table.rows.append(row)
    return table


def _frontend_for(kind: str, records, plan: TrainPlan, out: Optional[Path]) -> Checkpoint:
    path = out / "frontends" / f"{kind}.safetensors" if out else None
    if path is not None and path.is_file():
        return Checkpoint.load(path)
    fe_plan = dataclasses.replace(plan, phase="adapt_with_se", frontend=kind)
    ckpt = pretrain_frontend(fe_plan, records, kind)
    if path is not None:
        ckpt.save(path)
    return ckpt


# --------------------------------------------------------------------------- rendering


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.1f}"


def render_report(table: ReportTable) -> tuple[str, str, bool]:
    """Return (DSV text, aligned text table, ok). ``ok`` is False if any row failed."""
    cols = list(table.conditions) + ["avg"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["exp_id", "axis_point", "split", *cols])
    for row in table.rows:
        for split in table.splits:
            if row.failed:
                w.writerow([row.exp_id, row.axis_point, split, *[FAILED] * len(cols)])
            else:
                vals = row.wer.get(split, {})
                w.writerow([row.exp_id, row.axis_point, split, *[_fmt(vals.get(c)) for c in cols]])
    dsv = buf.getvalue()

    label_w = max([len("System")] + [len(r.axis_point) for r in table.rows])
    cell_w = 6
    head1 = f"{'Exp.':>5} | {'System':<{label_w}} |"
    head2 = f"{'':>5} | {'':<{label_w}} |"
    for split in table.splits:
        title = {"dev": "Development", "eval": "Evaluation"}.get(split, split)
        head1 += f" {title:^{cell_w * len(cols)}} |"
        head2 += "".join(f"{c:>{cell_w}}" for c in cols) + " |"
    lines = [head1, head2, "-" * len(head2)]
    for row in table.rows:
        line = f"{row.exp_id:>5} | {row.axis_point:<{label_w}} |"
        for split in table.splits:
            if row.failed:
                line += f" {FAILED:^{cell_w * len(cols)}} |"
            else:
                vals = row.wer.get(split, {})
                line += "".join(f"{_fmt(vals.get(c)) or '-':>{cell_w}}" for c in cols) + " |"
        lines.append(line)
    return dsv, "\n".join(lines) + "\n", table.ok


def parse_report_dsv(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        parsed = dict(rec)
        for k, v in rec.items():
            if k in ("exp_id", "axis_point", "split"):
                continue
            parsed[k] = None if v in ("", FAILED) else float(v)
        rows.append(parsed)
    return rows


def write_report(table: ReportTable, out_dir) -> bool:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dsv, text, ok = render_report(table)
    (out / "report.csv").write_text(dsv)
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(
        json.dumps({"axis": table.axis, "conditions": table.conditions, "splits": table.splits,
                    "metadata": table.metadata, "rows": [dataclasses.asdict(r) for r in table.rows]}, indent=1)
    )
    return ok


def read_report_json(path) -> ReportTable:
    d = json.loads(Path(path).read_text())
    return ReportTable(d["axis"], d["conditions"], d["splits"], [ReportRow(**r) for r in d["rows"]], d.get("metadata", {}))
