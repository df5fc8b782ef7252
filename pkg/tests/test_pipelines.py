"""End-to-end experiment runners: wiring, records, run dirs, resume."""

import json
import shutil

import pytest

from conftest import SMOKE, IdentityReranker, ScriptedChat, perfect_retriever
from lawrag.errors import LawragError, ResumeError
from lawrag.pipelines import (
    GENERATION_ERROR_FLAG,
    MANIFEST_NAME,
    MISSING_IMAGE_FLAG,
    PARTIAL_NAME,
    RECORDS_NAME,
    REWRITE_FALLBACK_FLAG,
    SUMMARY_NAME,
    TIMINGS_NAME,
    ExperimentRecord,
    PipelineBackends,
    load_manifest,
    load_records,
    resume,
    run_ir,
    run_qa,
    run_task,
    run_vir,
    run_vqa,
)
from lawrag.retrieval import QueryStrategy, build_query, read_run_file
from lawrag.strategies import Task, make_spec
from lawrag.trainset import split_question_ids


def test_wiring_validation(corpus, questions, hash_backend, scripted_chat):
    none = PipelineBackends()
    with pytest.raises(LawragError, match="chat backend"):
        run_qa(make_spec(Task.QA, "2", "s1"), corpus, questions, none)
    with pytest.raises(LawragError, match="embedding backend"):
        run_ir(make_spec(Task.IR, "2", "s1"), corpus, questions, none)
    with pytest.raises(LawragError, match="reranker"):
        run_ir(
            make_spec(Task.IR, "3", "s1"),
            corpus,
            questions,
            PipelineBackends(embedding=hash_backend),
        )
    with pytest.raises(LawragError, match="sign retrieval"):
        run_vir(
            make_spec(Task.VIR_SIGNS, "1", "s3"),
            corpus,
            questions,
            PipelineBackends(chat=scripted_chat),
        )
    # image-sending VQA variant on a model not marked vision-capable
    with pytest.raises(LawragError, match="vision"):
        run_vqa(
            make_spec(Task.VQA, "2", "s3", model_id="llama-3-70b"),
            corpus,
            questions,
            PipelineBackends(chat=scripted_chat),
        )
    with pytest.raises(LawragError, match="split"):
        run_ir(
            make_spec(Task.IR, "2", "s9"),
            corpus,
            questions,
            PipelineBackends(embedding=hash_backend),
        )


def test_task_dispatch_guard(corpus, questions, backends):
    with pytest.raises(LawragError, match="runner handles IR"):
        run_ir(make_spec(Task.QA, "2", "s1"), corpus, questions, backends)


def test_partition_follows_seeded_split(corpus, questions, backends):
    spec = make_spec(Task.IR, "2", "s1")
    result = run_ir(spec, corpus, questions, backends)
    assert len(result.records) == 6 and not result.skipped
    train_ids, test_ids = split_question_ids([r.question_id for r in result.records])
    for r in result.records:
        assert r.partition == ("train" if r.question_id in train_ids else "test")
    assert sum(r.partition == "train" for r in result.records) == 4

    s3 = run_ir(make_spec(Task.IR, "2", "s3"), corpus, questions, backends)
    assert all(r.partition == "test" for r in s3.records)


def test_ir_skips_questions_without_gold(corpus, questions, backends):
    result = run_ir(make_spec(Task.IR, "2", "s2"), corpus, questions, backends)
    assert result.records == []
    assert result.skipped == [("q007", "missing-gold"), ("q008", "missing-gold")]
    assert result.summary == [
        {"partition": "test", "count": 0, "excluded": 0, "skipped": 2}
    ]


def test_ir_records_carry_scores(corpus, questions, backends):
    result = run_ir(make_spec(Task.IR, "2", "s1"), corpus, questions, backends)
    for r in result.records:
        assert set(r.scores) == {"recall_at_10", "precision_at_10", "ndcg_at_10"}
        assert len(r.retrieved) == 10
        assert r.raw_output is None and r.parsed is None


def test_ir_rerank_row_keeps_k(corpus, questions, hash_backend):
    reranker = IdentityReranker()
    backends = PipelineBackends(embedding=hash_backend, reranker=reranker)
    result = run_ir(make_spec(Task.IR, "3", "s1"), corpus, questions, backends)
    assert reranker.calls == len(result.records) == 6
    plain = run_ir(
        make_spec(Task.IR, "2", "s1"),
        corpus,
        questions,
        PipelineBackends(embedding=hash_backend),
    )
    by_id = {r.question_id: r for r in plain.records}
    for r in result.records:
        assert len(r.retrieved) == 10
        # the identity reranker preserves the dense top-10
        assert [d for d, _ in r.retrieved] == [d for d, _ in by_id[r.question_id].retrieved]


def test_qa_answers_score_and_tendency(corpus, questions, backends, scripted_chat):
    spec = make_spec(Task.QA, "2", "s1")  # no-RAG row: chat only
    result = run_qa(spec, corpus, questions, backends)
    assert len(result.records) == 6
    for r in result.records:
        assert r.scores["em"] == 1.0
        assert r.scores["f1"] == 1.0
        assert r.scores["format_failure"] == 0.0
        assert r.scores["reasoning_steps"] == 2.0
        assert r.tendency == "exact"
        assert r.retrieved == ()
        assert r.prompt is None and r.prompt_digest is not None
    test_rows = [row for row in result.summary if row["partition"] == "test"]
    assert test_rows[0]["em"] == 1.0


def test_qa_generation_failures_are_flagged_not_fatal(corpus, questions):
    chat = ScriptedChat(questions)
    chat.fail_transport["q001"] = 99  # exhausts every retry
    chat.fail_transport["q002"] = 2   # recovers on the third attempt
    chat.refuse_ids.add("q003")
    result = run_qa(make_spec(Task.QA, "2", "s1"), corpus, questions, PipelineBackends(chat=chat))
    rec = {r.question_id: r for r in result.records}
    assert len(result.records) == 6  # nothing aborted the run

    failed = rec["q001"]
    assert any(f.startswith(GENERATION_ERROR_FLAG) for f in failed.flags)
    assert failed.raw_output == ""
    assert failed.scores["format_failure"] == 1.0
    assert failed.scores["em"] == 0.0
    assert failed.tendency is None
    assert chat.calls.count("q001") == 3  # bounded retries

    assert rec["q002"].scores["em"] == 1.0 and not rec["q002"].flags
    assert chat.calls.count("q002") == 3

    refused = rec["q003"]
    assert any(f.startswith(GENERATION_ERROR_FLAG) for f in refused.flags)
    assert chat.calls.count("q003") == 1  # refusals are not retried


def test_qa_parse_failures_scored_separately(corpus, questions):
    chat = ScriptedChat(questions)
    chat.no_marker_ids.add("q001")
    chat.none_answer_ids.add("q002")
    result = run_qa(make_spec(Task.QA, "2", "s1"), corpus, questions, PipelineBackends(chat=chat))
    rec = {r.question_id: r for r in result.records}
    no_marker, none_answer = rec["q001"], rec["q002"]
    for r in (no_marker, none_answer):
        assert r.scores["format_failure"] == 1.0
        assert r.scores["em"] == 0.0 and r.scores["f1"] == 0.0
        assert r.tendency is None
        assert not r.flags  # a parse failure is not a generation error
    assert no_marker.parsed["marker_found"] is False
    assert none_answer.parsed["marker_found"] is True
    assert "niciuna" in none_answer.parsed["raw_tail"]


def test_qa_retrieved_mode_attaches_ir_scores(corpus, questions, scripted_chat, hash_backend):
    backends = PipelineBackends(
        embedding=hash_backend,
        chat=scripted_chat,
        retriever=perfect_retriever(questions, corpus),
    )
    result = run_qa(make_spec(Task.QA, "1", "s1"), corpus, questions, backends)
    for r in result.records:
        assert r.scores["recall_at_10"] == 1.0
        assert len(r.retrieved) == 10
        assert r.query == build_query(
            next(q for q in questions if q.id == r.question_id), QueryStrategy.QA
        )


def test_qa_ideal_mode_prompts_with_gold_in_corpus_order(corpus, questions, backends):
    spec = make_spec(Task.QA, "3", "s1", store_prompts=True)
    result = run_qa(spec, corpus, questions, backends)
    order = {a.id: n for n, a in enumerate(corpus.articles)}
    by_id = {q.id: q for q in questions}
    for r in result.records:
        gold = sorted(by_id[r.question_id].legal_refs, key=order.__getitem__)
        positions = [r.prompt.index(f"[{d}]") for d in gold]
        assert positions == sorted(positions)
        assert r.retrieved == ()
    multi = next(r for r in result.records if r.question_id == "q004")
    assert "[REG-104]" in multi.prompt and "[ROAD-4]" in multi.prompt


def test_vir_rewrite_fallback_flags_record(corpus, questions, hash_backend):
    chat = ScriptedChat(questions)
    chat.no_rewrite_marker = True
    backends = PipelineBackends(embedding=hash_backend, chat=chat)
    spec = make_spec(Task.VIR_LAWS, "3", "s3")  # image rewrite strategy
    result = run_vir(spec, corpus, questions, backends, image_root=SMOKE)
    from conftest import scripted_caption

    by_id = {q.id: q for q in questions}
    for r in result.records:
        assert REWRITE_FALLBACK_FLAG in r.flags
        assert not r.excluded  # fallback records still count
        expected = build_query(
            by_id[r.question_id], QueryStrategy.CAPTION_QA, caption=scripted_caption()
        )
        assert r.query == expected


def test_vir_missing_image_flags_and_excludes(tmp_path, corpus, questions, hash_backend, scripted_chat):
    backends = PipelineBackends(embedding=hash_backend, chat=scripted_chat)
    spec = make_spec(Task.VIR_LAWS, "2", "s3")  # caption strategy needs the file
    result = run_vir(spec, corpus, questions, backends, image_root=tmp_path)
    assert len(result.records) == 4
    for r in result.records:
        assert r.flags == (MISSING_IMAGE_FLAG,)
        assert r.excluded and r.scores == {}
    assert result.summary == [
        {"partition": "test", "count": 0, "excluded": 4, "skipped": 0}
    ]
    # the QA strategy never touches the image, so the same root is fine
    plain = run_vir(make_spec(Task.VIR_LAWS, "1", "s3"), corpus, questions, backends, image_root=tmp_path)
    assert all(not r.flags for r in plain.records)


def test_vqa_excluded_records_stay_out_of_means(tmp_path, corpus, questions, backends):
    (tmp_path / "images").mkdir()
    for q in questions:
        if q.image_ref and q.id != "q009":
            shutil.copy(SMOKE / q.image_ref, tmp_path / q.image_ref)
    spec = make_spec(Task.VQA, "1", "s3")  # caption + no RAG
    result = run_vqa(spec, corpus, questions, backends, image_root=tmp_path)
    rec = {r.question_id: r for r in result.records}
    assert rec["q009"].flags == (MISSING_IMAGE_FLAG,)
    row = result.summary[0]
    assert row["count"] == 3 and row["excluded"] == 1 and row["skipped"] == 0
    assert row["em"] == 1.0  # the flagged record did not drag the mean down
    assert row["format_failure"] == 0.0


def test_vqa_ideal_on_sign_only_split(corpus, questions, scripted_chat):
    spec = make_spec(Task.VQA, "4", "s4", store_prompts=True)  # caption + ideal RAG
    result = run_vqa(
        spec, corpus, questions, PipelineBackends(chat=scripted_chat), image_root=SMOKE
    )
    rec = {r.question_id: r for r in result.records}
    assert set(rec) == {"q013", "q014"}
    for r in rec.values():
        assert r.scores["em"] == 1.0
        assert r.retrieved == () and r.retrieved_signs == ()
        assert "[REG-" not in r.prompt  # no laws exist for these questions
        assert "Aceasta este descrierea imaginii:" in r.prompt
    assert "[S-06]" in rec["q013"].prompt
    assert "[S-01]" in rec["q014"].prompt and "[S-07]" in rec["q014"].prompt


def test_run_dir_layout_and_run_file(tmp_path, corpus, questions, backends):
    out = tmp_path / "run"
    spec = make_spec(Task.IR, "2", "s1")
    result = run_ir(spec, corpus, questions, backends, out_dir=out)
    names = {p.name for p in out.iterdir()}
    assert names == {MANIFEST_NAME, RECORDS_NAME, "run.txt", SUMMARY_NAME, TIMINGS_NAME}
    assert PARTIAL_NAME not in names  # deleted after the final write

    manifest = load_manifest(out)
    assert manifest["format"] == 1
    assert manifest["spec"]["task"] == "IR"

    loaded = load_records(out)
    assert [r.question_id for r in loaded] == [r.question_id for r in result.records]

    runs = {r.question_id: r for r in read_run_file(out / "run.txt")}
    for record in result.records:
        ranked = runs[record.question_id].ranked
        assert [d for d, _ in ranked] == [d for d, _ in record.retrieved]
        for (_, got), (_, want) in zip(ranked, record.retrieved):
            assert got == pytest.approx(want, abs=1e-6)
        assert runs[record.question_id].strategy is QueryStrategy.QA

    timings = [json.loads(l) for l in (out / TIMINGS_NAME).read_text().splitlines()]
    assert {t["question_id"] for t in timings} == {r.question_id for r in result.records}


def test_fresh_runs_are_byte_identical(tmp_path, corpus, questions, hash_backend):
    outs = []
    for name in ("a", "b"):
        backends = PipelineBackends(embedding=hash_backend, chat=ScriptedChat(questions))
        run_qa(make_spec(Task.QA, "1", "s1"), corpus, questions, backends, out_dir=tmp_path / name)
        outs.append(tmp_path / name)
    for fname in (RECORDS_NAME, SUMMARY_NAME, MANIFEST_NAME, "run.txt"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes(), fname


def test_resume_rejects_bad_inputs(tmp_path, corpus, questions, backends):
    with pytest.raises(ResumeError, match="no manifest"):
        resume(tmp_path / "empty", corpus, questions, backends)
    out = tmp_path / "run"
    run_ir(make_spec(Task.IR, "2", "s1"), corpus, questions, backends, out_dir=out)
    with pytest.raises(ResumeError, match="does not match"):
        resume(out, corpus, questions, backends, spec=make_spec(Task.IR, "1", "s1"))
    # reusing a run dir for a different experiment is refused outright
    with pytest.raises(ResumeError, match="different experiment"):
        run_ir(make_spec(Task.IR, "1", "s1"), corpus, questions, backends, out_dir=out)


def test_resume_completed_run_touches_no_backend(tmp_path, corpus, questions, hash_backend):
    out = tmp_path / "run"
    chat = ScriptedChat(questions)
    backends = PipelineBackends(embedding=hash_backend, chat=chat)
    first = run_qa(make_spec(Task.QA, "2", "s1"), corpus, questions, backends, out_dir=out)
    calls = len(chat.calls)
    again = resume(out, corpus, questions, backends)
    assert len(chat.calls) == calls
    assert [r.to_dict() for r in again.records] == [r.to_dict() for r in first.records]
    assert again.summary == first.summary


def test_resume_completed_run_reconstructs_skips(tmp_path, corpus, questions, backends):
    out = tmp_path / "run"
    first = run_ir(make_spec(Task.IR, "2", "s2"), corpus, questions, backends, out_dir=out)
    again = resume(out, corpus, questions, backends)
    assert again.records == []
    assert again.skipped == first.skipped == [("q007", "missing-gold"), ("q008", "missing-gold")]


def test_resume_partial_continues_without_reasking(tmp_path, corpus, questions, hash_backend):
    reference = tmp_path / "ref"
    run_qa(
        make_spec(Task.QA, "2", "s1"),
        corpus,
        questions,
        PipelineBackends(embedding=hash_backend, chat=ScriptedChat(questions)),
        out_dir=reference,
    )
    ref_records = (reference / RECORDS_NAME).read_text(encoding="utf-8")
    lines = ref_records.splitlines()

    interrupted = tmp_path / "interrupted"
    interrupted.mkdir()
    shutil.copy(reference / MANIFEST_NAME, interrupted / MANIFEST_NAME)
    # two answered questions, one of them written twice by an unlucky flush
    (interrupted / PARTIAL_NAME).write_text(
        "\n".join([lines[0], lines[1], lines[1]]) + "\n", encoding="utf-8"
    )

    chat = ScriptedChat(questions)
    result = resume(interrupted, corpus, questions, PipelineBackends(embedding=hash_backend, chat=chat))
    done = {json.loads(lines[0])["question_id"], json.loads(lines[1])["question_id"]}
    assert done.isdisjoint(set(chat.calls))  # preloaded answers are never re-sent
    assert len(chat.calls) == 4
    assert len(result.records) == 6
    assert (interrupted / RECORDS_NAME).read_text(encoding="utf-8") == ref_records
    assert not (interrupted / PARTIAL_NAME).exists()


def test_record_round_trip():
    record = ExperimentRecord(
        question_id="q1",
        task="QA",
        strategy_row="1",
        split="s1",
        partition="test",
        category="cat",
        secondary_category=None,
        query="textul",
        retrieved=(("d1", 0.5), ("d2", 0.25)),
        prompt_digest="abc",
        raw_output="Raspuns corect: A",
        parsed={"letters": ["A"], "marker_found": True, "raw_tail": " A"},
        tendency="exact",
        scores={"em": 1.0},
        flags=("rewrite-fallback",),
        timing=1.23,
    )
    back = ExperimentRecord.from_dict(json.loads(json.dumps(record.to_dict())))
    assert back.timing is None  # volatile, never serialized
    assert back.prompt is None
    record.timing = None
    assert back == record

    record.prompt = "promptul complet"
    assert ExperimentRecord.from_dict(record.to_dict()).prompt == "promptul complet"


def test_load_manifest_missing(tmp_path):
    with pytest.raises(ResumeError):
        load_manifest(tmp_path)


def test_run_task_dispatches_every_task(corpus, questions, backends):
    result = run_task(make_spec(Task.IR, "1", "s1"), corpus, questions, backends)
    assert result.records[0].task == "IR"
