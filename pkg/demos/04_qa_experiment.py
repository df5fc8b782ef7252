"""Run the question-answering pipeline in its three grounding modes.

Executes the same split under no grounding, retrieved documents, and ideal
(gold) documents, writing each run to its own directory. The chat double
always answers with the gold letters, so the answer metrics pin at 1.0 and
the run directories, prompts, and retrieval scores carry the story.
Finishes by resuming a completed run: nothing is recomputed and the
records are read back byte-identical.
"""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from _offline import DATA_DIR, GoldAnswerChat
from lawrag.backends import HashEmbeddingBackend
from lawrag.data import load_corpus, load_qa
from lawrag.pipelines import PipelineBackends, resume, run_qa
from lawrag.report import summary_table
from lawrag.strategies import Task, make_spec

ROWS = ("2", "1", "3")  # no grounding, retrieved, ideal


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default=DATA_DIR, help="corpus directory")
    parser.add_argument("--split", default="s1")
    parser.add_argument("--out", help="parent directory for runs (default: a temp dir)")
    args = parser.parse_args()

    corpus = load_corpus(args.data_dir)
    questions = load_qa(f"{args.data_dir}/questions.jsonl", corpus=corpus)
    backends = PipelineBackends(
        embedding=HashEmbeddingBackend(), chat=GoldAnswerChat(questions)
    )
    parent = Path(args.out) if args.out else Path(tempfile.mkdtemp())

    run_dirs = []
    for row in ROWS:
        spec = make_spec(Task.QA, row, args.split, store_prompts=True)
        out_dir = parent / f"qa-row{row}-{args.split}"
        result = run_qa(spec, corpus, questions, backends, out_dir=out_dir)
        run_dirs.append(out_dir)
        print(
            f"row {row}: {len(result.records)} records, "
            f"{len(result.skipped)} skipped -> {out_dir.name}/"
        )

    print("\n== summary over the test partition ==")
    print(summary_table(run_dirs).render())

    resumed = resume(run_dirs[0], corpus, questions, backends)
    print(f"\nresume of a finished run touches no backend: {len(resumed.records)} records read back")
    listing = sorted(p.name for p in run_dirs[0].iterdir())
    print(f"run directory contents: {', '.join(listing)}")


if __name__ == "__main__":
    main()
