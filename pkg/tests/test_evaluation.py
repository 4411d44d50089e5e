import dataclasses
import functools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adapt_asr import evaluation
from adapt_asr.adapters import AdaptedASR, AdapterSpec, freeze_backbone
from adapt_asr.corpus import DataRegime, read_manifest, select_regime
from adapt_asr.data import collate_feats, load_utterances
from adapt_asr.evaluation import (
    FAILED,
    AblationGrid,
    ErrorCounts,
    EvaluationError,
    GridPoint,
    ReportRow,
    ReportTable,
    WERReport,
    align_words,
    build_grid,
    evaluate,
    parse_report_dsv,
    read_report_json,
    render_report,
    run_ablation,
    run_point,
    wer,
    write_report,
)
from adapt_asr.model import ASRModel
from adapt_asr.training import TrainPlan, load_backbone

from conftest import MINI


@functools.lru_cache(maxsize=None)
def _oracle(ref, hyp):
    """All (S, D, I) triples reachable with the minimum number of edits, by exhaustive recursion."""
    if not ref:
        return 0 + len(hyp), frozenset({(0, 0, len(hyp))})
    if not hyp:
        return len(ref), frozenset({(0, len(ref), 0)})
    options = []
    cost, triples = _oracle(ref[1:], hyp[1:])
    hit = ref[0] == hyp[0]
    options.append((cost + (not hit), {(s + (not hit), d, i) for s, d, i in triples}))
    cost, triples = _oracle(ref[1:], hyp)
    options.append((cost + 1, {(s, d + 1, i) for s, d, i in triples}))
    cost, triples = _oracle(ref, hyp[1:])
    options.append((cost + 1, {(s, d, i + 1) for s, d, i in triples}))
    best = min(c for c, _ in options)
    return best, frozenset().union(*[t for c, t in options if c == best])


def oracle_counts(ref, hyp):
    cost, triples = _oracle(tuple(ref), tuple(hyp))
    return cost, triples


def test_identical_is_zero():
    assert wer(["a b c"], ["a b c"]).wer == 0.0


def test_one_sub_one_del_is_fifty_percent():
    c = wer(["a b c d"], ["a x c"])
    assert (c.sub, c.dele, c.ins, c.ref_words) == (1, 1, 0, 4)
    assert c.wer == 50.0


def test_insertions_can_exceed_hundred_percent():
    c = wer(["a"], ["b c d"])
    assert c.wer == 300.0 and c.ins == 2 and c.sub == 1


def test_case_and_whitespace_normalization():
    assert wer(["Hello  World"], ["hello world "]).wer == 0.0


def test_wer_errors():
    with pytest.raises(EvaluationError):
        wer(["a"], [])
    with pytest.raises(EvaluationError, match="empty"):
        wer(["  "], ["a"])


words = st.lists(st.sampled_from("abcd"), max_size=6)


@settings(max_examples=300, deadline=None)
@given(ref=words, hyp=words)
def test_alignment_matches_exhaustive_oracle(ref, hyp):
    c = align_words(ref, hyp)
    cost, triples = oracle_counts(ref, hyp)
    assert c.errors == cost
    assert (c.sub, c.dele, c.ins) in triples
    assert c.sub == min(s for s, _, _ in triples)
    assert c.ref_words == len(ref)


def test_micro_average_is_pooled_not_mean():
    rep = WERReport(["bus", "caf"])
    rep.cells[("dev", "bus")] = ErrorCounts(1, 0, 0, 2)  # 50 %
    rep.cells[("dev", "caf")] = ErrorCounts(0, 0, 0, 8)  # 0 %
    row = rep.row("dev")
    assert row["bus"] == 50.0 and row["caf"] == 0.0
    assert row["avg"] == 10.0
    assert rep.wer("eval", "bus") is None


@settings(max_examples=50, deadline=None)
@given(cells=st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5), st.integers(1, 20)), min_size=1, max_size=4))
def test_micro_average_property(cells):
    conds = [f"c{i}" for i in range(len(cells))]
    rep = WERReport(conds, {("dev", c): ErrorCounts(*v) for c, v in zip(conds, cells)})
    errs = sum(s + d + i for s, d, i, _ in cells)
    n = sum(v[3] for v in cells)
    assert rep.row("dev")["avg"] == pytest.approx(100.0 * errs / n)


# ---------------------------------------------------------------- grids


def test_grid_sizes():
    t = TrainPlan("adapt", adapter_spec=AdapterSpec((1,), 4, 32))
    pos = build_grid("position", t, 6, 128)
    assert [p.label for p in pos.points] == ["E6", "E5", "E4", "E3", "E2", "E1", "E1-E2", "E1-E3", "E1-E4", "E1-E5", "E1-E6"]
    assert [p.exp_id for p in pos.points] == [str(i) for i in range(1, 12)]
    emb = build_grid("emb_dim", t, 6, 512)
    assert [p.adapter_spec.emb_dim for p in emb.points] == [16, 32, 64, 96, 128]
    assert [p.exp_id for p in emb.points] == ["12", "13", "11", "14", "15"]
    se = build_grid("se_system", t, 6, 128)
    assert [p.label for p in se.points] == ["masknet", "masknet+adapter", "demucs_lite", "demucs_lite+adapter"]
    assert [p.adapter_spec is not None for p in se.points] == [False, True, False, True]
    assert len(build_grid("data_regime", t, 6, 128).points) == 12


def test_grid_validation():
    t = TrainPlan("adapt", adapter_spec=AdapterSpec((1,), 4, 32))
    with pytest.raises(EvaluationError):
        build_grid("width", t, 6, 128)
    with pytest.raises(EvaluationError):
        AblationGrid("position", (), t)
    with pytest.raises(EvaluationError, match="duplicate"):
        AblationGrid("position", (GridPoint("1", "a"), GridPoint("1", "b")), t)


# ---------------------------------------------------------------- rendering


def _table():
    rows = [
        ReportRow("1", "E6", {"dev": {"bus": 12.34, "caf": 5.0, "avg": 8.66}, "eval": {"bus": 20.0, "caf": 0.0, "avg": 10.05}}),
        ReportRow("2", "E5", {"dev": {"bus": 1.25, "caf": 99.95, "avg": 50.6}, "eval": {"bus": 3.0, "caf": 4.0, "avg": 3.5}}),
    ]
    return ReportTable("position", ["bus", "caf"], ["dev", "eval"], rows)


def test_render_parse_round_trip_to_one_decimal():
    table = _table()
    dsv, text, ok = render_report(table)
    assert ok
    parsed = parse_report_dsv(dsv)
    assert len(parsed) == 4
    for p in parsed:
        src = next(r for r in table.rows if r.exp_id == p["exp_id"]).wer[p["split"]]
        for c in ("bus", "caf", "avg"):
            assert p[c] == round(src[c], 1) or abs(p[c] - src[c]) <= 0.05 + 1e-9
    assert "Development" in text and "E6" in text


def test_empty_table_renders_header_only():
    dsv, _, ok = render_report(ReportTable("position", ["bus", "caf"]))
    assert dsv == "exp_id,axis_point,split,bus,caf,avg\n"
    assert ok


def test_failed_row_is_marked_and_not_ok(tmp_path):
    table = _table()
    table.rows.append(ReportRow("3", "E4", status="failed", error="boom"))
    dsv, text, ok = render_report(table)
    assert not ok
    assert FAILED in text
    failed = [p for p in parse_report_dsv(dsv) if p["exp_id"] == "3"]
    assert len(failed) == 2 and all(p["avg"] is None for p in failed)
    assert dsv.count(FAILED) == 2 * 3
    assert write_report(table, tmp_path) is False
    back = read_report_json(tmp_path / "report.json")
    assert [r.status for r in back.rows] == ["ok", "ok", "failed"]


# ---------------------------------------------------------------- scoring real models


def test_evaluate_deterministic_and_identity_at_init(mini_corpus, mini_backbone):
    recs = read_manifest(mini_corpus[1])
    backbone, tok = load_backbone(mini_backbone[0])
    base = evaluate(backbone, recs, "dev", tok)
    again = evaluate(backbone, recs, "dev", tok)
    assert base.cells == again.cells and base.hypotheses == again.hypotheses
    adapted = AdaptedASR(backbone, AdapterSpec((1, 2), 4, 32))
    freeze_backbone(adapted)
    at_init = evaluate(adapted, recs, "dev", tok)
    assert at_init.cells == base.cells and at_init.hypotheses == base.hypotheses
    assert set(base.conditions) >= {"bus", "caf", "ped", "str"}


def test_memorized_utterances_score_zero(mini_corpus, mini_backbone):
    """A model overfit on two utterances transcribes them perfectly."""
    recs = [r for r in read_manifest(mini_corpus[0]) if r.split == "train"][:2]
    _, tok = load_backbone(mini_backbone[0])
    torch.manual_seed(0)
    model = ASRModel(dataclasses.replace(MINI, vocab_size=tok.vocab_size), sos_eos_id=tok.sos_eos_id)
    utts = load_utterances(recs, tok)
    feats, lengths = collate_feats(utts)
    targets = [u.targets for u in utts]
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    model.train()
    for _ in range(200):
        opt.zero_grad()
        model.asr_loss(model.encode(feats, lengths), targets, smoothing=0.0).backward()
        opt.step()
    scored = [dataclasses.replace(r, split="eval") for r in recs]
    rep = evaluate(model, scored, "eval", tok, conditions=sorted({r.condition for r in recs}))
    assert rep.row("eval")["avg"] == 0.0


def test_held_out_protocol(mini_corpus, mini_backbone, monkeypatch):
    recs = read_manifest(mini_corpus[1])
    seen = []
    real_adapt, real_eval = evaluation.adapt, evaluation.evaluate

    def spy_adapt(plan, backbone, records, **kw):
        seen.append(("train", plan.regime.held_out_condition, {r.condition for r in select_regime(records, plan.regime)}))
        return real_adapt(plan, backbone, records, **kw)

    def spy_eval(model, records, split, tok, conditions, only_condition=None, **kw):
        rep = real_eval(model, records, split, tok, conditions, only_condition=only_condition, **kw)
        by_id = {r.id: r.condition for r in records}
        seen.append(("test", only_condition, {by_id[i] for i in rep.hypotheses}))
        return rep

    monkeypatch.setattr(evaluation, "adapt", spy_adapt)
    monkeypatch.setattr(evaluation, "evaluate", spy_eval)
    spec = AdapterSpec((1,), 4, 32)
    point = GridPoint("18", "held", spec, regime=DataRegime(real_count=2, simu_count=0), held_out=True)
    template = TrainPlan("adapt", epochs=1, batch_size=4, adapter_spec=spec, top_k=1)
    conds = ("bus", "caf", "ped", "str")
    row = run_point(point, template, mini_backbone[0], recs, conds)
    train = [s for s in seen if s[0] == "train"]
    test = [s for s in seen if s[0] == "test"]
    assert [c for _, c, _ in train] == list(conds)
    assert len(test) == 2 * len(conds)
    for _, cond, observed in train + test:
        assert observed == {cond}
    assert set(row.wer["dev"]) == {*conds, "avg"}


def test_grid_point_rerun_is_deterministic(mini_corpus, mini_backbone):
    recs = read_manifest(mini_corpus[1])
    spec = AdapterSpec((1, 2), 4, 32)
    template = TrainPlan("adapt", epochs=1, batch_size=4, adapter_spec=spec, top_k=1)
    point = GridPoint("11", "all", spec)
    a = run_point(point, template, mini_backbone[0], recs, ("bus", "caf", "ped", "str"), ("dev",))
    b = run_point(point, template, mini_backbone[0], recs, ("bus", "caf", "ped", "str"), ("dev",))
    assert a.wer == b.wer and a.trainable == ["adapters"]


def test_run_ablation_records_failures_and_resumes(mini_corpus, mini_backbone, tmp_path):
    recs = read_manifest(mini_corpus[1])
    spec = AdapterSpec((1,), 4, 32)
    template = TrainPlan("adapt", epochs=1, batch_size=4, adapter_spec=spec, top_k=1)
    points = (
        GridPoint("1", "E1", spec),
        GridPoint("2", "too many", spec, regime=DataRegime(real_count=10_000, simu_count=0)),
    )
    grid = AblationGrid("position", points, template)
    table = run_ablation(grid, mini_backbone[0], recs, splits=("dev",), out_dir=tmp_path)
    assert [r.status for r in table.rows] == ["ok", "failed"]
    assert "InsufficientRecords" in table.rows[1].error
    assert (tmp_path / "rows" / "1.json").is_file() and not (tmp_path / "rows" / "2.json").exists()
    again = run_ablation(grid, mini_backbone[0], recs, splits=("dev",), out_dir=tmp_path)
    assert again.rows[0].wer == table.rows[0].wer
