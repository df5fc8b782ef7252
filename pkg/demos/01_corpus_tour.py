"""Load the bundled dataset and walk through what a corpus contains.

Shows the validated corpus (articles, traffic signs), the question file
with its split layout, per-source counts, and the token-length histogram
that drives the embedding budget choice.
"""

from __future__ import annotations

import argparse

from _offline import DATA_DIR
from lawrag.data import corpus_stats, doc_embedding_text, load_corpus, load_qa


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default=DATA_DIR, help="corpus directory")
    args = parser.parse_args()

    corpus = load_corpus(args.data_dir)
    questions = load_qa(f"{args.data_dir}/questions.jsonl", corpus=corpus)

    print("== corpus ==")
    print(f"articles: {len(corpus.articles)} total, {len(corpus.active_articles())} active")
    print(f"signs:    {len(corpus.signs)}")
    stats = corpus_stats(corpus)
    for source, count in sorted(stats.source_counts.items()):
        print(f"  source {source}: {count} articles")

    print("\n== questions ==")
    by_split: dict[str, int] = {}
    for q in questions:
        by_split[q.split] = by_split.get(q.split, 0) + 1
    for split in sorted(by_split):
        print(f"  {split}: {by_split[split]} questions")
    sample = questions[0]
    print(f"\nfirst question ({sample.id}, category {sample.category!r}):")
    print(f"  {sample.question}")
    for letter in sorted(sample.options):
        marker = "*" if letter in sample.correct else " "
        print(f"  {marker} {letter}) {sample.options[letter]}")
    print(f"  grounded in: {', '.join(sample.legal_refs) or '(sign-only)'}")

    print("\n== token lengths (all articles, abrogated included) ==")
    for lo, hi, count in stats.histogram:
        bar = "#" * count
        print(f"  {lo:4d}-{hi:<4d} {bar} {count}")

    article = corpus.active_articles()[0]
    print(f"\nembedding text of {article.id} (budget-truncated body):")
    print("  " + doc_embedding_text(article).replace("\n", "\n  "))


if __name__ == "__main__":
    main()
