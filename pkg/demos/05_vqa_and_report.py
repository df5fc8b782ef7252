"""Image questions end to end, then tables and figures over the runs.

Runs the image-question pipeline with ideal grounding (gold articles and
gold sign descriptions in the prompt) and the sign-retrieval task over the
caption+question query, both against the bundled images. The report module
then renders the summary table, a category breakdown, the selection
tendency table, and the figure set with their CSV sidecars.
"""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from _offline import DATA_DIR, GoldAnswerChat
from lawrag.backends import HashEmbeddingBackend
from lawrag.data import load_corpus, load_qa
from lawrag.pipelines import PipelineBackends, run_task
from lawrag.report import category_breakdown, emit_plots, summary_table, tendency_table
from lawrag.strategies import Task, make_spec


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default=DATA_DIR, help="corpus directory")
    parser.add_argument("--out", help="output directory (default: a temp dir)")
    args = parser.parse_args()

    corpus = load_corpus(args.data_dir)
    questions = load_qa(f"{args.data_dir}/questions.jsonl", corpus=corpus)
    backends = PipelineBackends(
        embedding=HashEmbeddingBackend(), chat=GoldAnswerChat(questions)
    )
    parent = Path(args.out) if args.out else Path(tempfile.mkdtemp())

    vqa_dir = parent / "vqa-ideal-s4"
    vqa_spec = make_spec(Task.VQA, "4", "s4", store_prompts=True)
    vqa = run_task(vqa_spec, corpus, questions, backends, out_dir=vqa_dir, image_root=args.data_dir)
    print(f"image QA with ideal grounding: {len(vqa.records)} records -> {vqa_dir.name}/")
    print("first prompt (gold articles and signs injected):")
    prompt = vqa.records[0].prompt
    print("  " + "\n  ".join(prompt.splitlines()[:12]) + "\n  ...")

    vir_dir = parent / "vir-signs-s3"
    vir_spec = make_spec(Task.VIR_SIGNS, "2*", "s3")
    vir = run_task(vir_spec, corpus, questions, backends, out_dir=vir_dir, image_root=args.data_dir)
    print(f"\nsign retrieval over caption+question: {len(vir.records)} records -> {vir_dir.name}/")

    print("\n== summary (all partitions) ==")
    print(summary_table([vqa_dir], partition=None).render())

    print("\n== sign-retrieval recall by viewpoint ==")
    print(category_breakdown(vir_dir, by="secondary_category", partition=None).render())

    print("\n== selection tendency ==")
    print(tendency_table([vqa_dir], partition=None).render())

    figures = emit_plots([vqa_dir, vir_dir], parent / "figures", corpus=corpus, partition=None)
    print("\nfigures written:")
    for path in figures:
        print(f"  {path.relative_to(parent)}")


if __name__ == "__main__":
    main()
