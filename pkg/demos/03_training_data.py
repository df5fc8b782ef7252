"""Build retriever training data: mine, augment, filter, export.

Walks the full training-data path: hard-negative mining against the dense
index, a train/eval split that keeps questions whole, synthetic pair
generation from sampled article sets (with the near-duplicate filter), and
finally the frozen bundle an external trainer picks up.
"""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from _offline import DATA_DIR, SyntheticPairChat
from lawrag.backends import HashEmbeddingBackend
from lawrag.data import doc_embedding_text, load_corpus, load_qa
from lawrag.errors import TrainingDelegatedError
from lawrag.pipelines import build_article_index
from lawrag.trainset import (
    TrainConfig,
    augmented_to_samples,
    dedup_filter,
    export_training_bundle,
    finetune_retriever,
    generate_augmented,
    mine_hard_negatives,
    split_train_eval,
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default=DATA_DIR, help="corpus directory")
    parser.add_argument("--out", help="bundle directory (default: a temp dir)")
    parser.add_argument("--sets", type=int, default=8, help="article sets to augment from")
    args = parser.parse_args()

    corpus = load_corpus(args.data_dir)
    questions = load_qa(f"{args.data_dir}/questions.jsonl", corpus=corpus)
    mineable = [q for q in questions if q.legal_refs]
    backend = HashEmbeddingBackend()
    index = build_article_index(corpus, backend)

    print("== hard-negative mining ==")
    samples = mine_hard_negatives(mineable, index, backend)
    print(f"{len(samples)} samples from {len(mineable)} questions (one per gold ref)")
    first = samples[0]
    print(f"  {first.question_id}: positive {first.positive_id}")
    print(f"  negatives: {', '.join(first.negative_ids)}")

    train, evaluation = split_train_eval(samples)
    print(f"\nsplit: {len(train)} train / {len(evaluation)} eval samples, questions kept whole")

    print(f"\n== synthetic pairs from {args.sets} article sets ==")
    pairs = generate_augmented(
        corpus, SyntheticPairChat(pairs_per_set=5), "pair-generator", n_sets=args.sets
    )
    kept = dedup_filter(pairs, backend)
    rejected = [p for p in pairs if not p.kept]
    print(f"generated {len(pairs)} pairs, kept {len(kept)}, rejected {len(rejected)}")
    extra = augmented_to_samples(kept, index, backend)
    print(f"converted to {len(extra)} additional training samples")

    out = Path(args.out) if args.out else Path(tempfile.mkdtemp()) / "bundle"
    doc_texts = {a.id: doc_embedding_text(a) for a in corpus.active_articles()}
    manifest = export_training_bundle(samples + extra, TrainConfig(), doc_texts, out)
    print(f"\n== bundle frozen at {out} ==")
    for name in sorted(p.name for p in out.iterdir()):
        print(f"  {name}")
    provenance = manifest["provenance"]
    print(f"  {provenance['n_samples']} samples over {provenance['n_questions']} questions")
    print(f"  samples digest: {provenance['samples_digest'][:16]}...")

    # actual training happens outside this package; the boundary is explicit
    try:
        finetune_retriever(out, trainer=None)
    except TrainingDelegatedError as exc:
        print(f"\nhand-off point: {exc}")


if __name__ == "__main__":
    main()
