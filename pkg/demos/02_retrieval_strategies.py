"""Compare query strategies on the dense retriever, then rerank.

Indexes the active articles with the offline hash embedder, retrieves for
every law-annotated question under two query strategies (question alone
vs. question plus answer choices), and reports the usual ranking metrics.
A token-overlap reranker then reorders a wider candidate list to show the
retrieve-wide / keep-narrow pattern.
"""

from __future__ import annotations

import argparse

from _offline import DATA_DIR, TokenOverlapReranker
from lawrag.backends import HashEmbeddingBackend
from lawrag.data import doc_embedding_text, load_corpus, load_qa
from lawrag.metrics import ndcg_at_k, recall_at_k
from lawrag.pipelines import build_article_index
from lawrag.retrieval import QueryStrategy, build_query, rerank, search


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default=DATA_DIR, help="corpus directory")
    parser.add_argument("--k", type=int, default=10)
    args = parser.parse_args()

    corpus = load_corpus(args.data_dir)
    questions = [
        q for q in load_qa(f"{args.data_dir}/questions.jsonl", corpus=corpus) if q.legal_refs
    ]
    backend = HashEmbeddingBackend()
    index = build_article_index(corpus, backend)
    print(f"indexed {len(index)} active articles as {index.backend_id!r}")
    print(f"index digest: {index.digest()[:16]}...")

    print(f"\n== strategy comparison over {len(questions)} questions ==")
    for strategy in (QueryStrategy.Q, QueryStrategy.QA):
        recalls, ndcgs = [], []
        for item in questions:
            query = build_query(item, strategy)
            run = search(index, query, backend, k=args.k, question_id=item.id)
            recalls.append(recall_at_k(run.doc_ids, item.legal_refs, args.k))
            ndcgs.append(ndcg_at_k(run.doc_ids, item.legal_refs, args.k))
        mean = lambda xs: sum(xs) / len(xs)
        print(
            f"  {strategy.value:<4} recall@{args.k} {mean(recalls):.3f}   "
            f"ndcg@{args.k} {mean(ndcgs):.3f}"
        )

    item = questions[0]
    query = build_query(item, QueryStrategy.QA)
    wide = search(index, query, backend, k=40, question_id=item.id)
    texts = {a.id: doc_embedding_text(a) for a in corpus.active_articles()}
    narrowed = rerank(wide, query, TokenOverlapReranker(), texts, keep=args.k)
    print(f"\n== rerank for {item.id} (gold: {', '.join(item.legal_refs)}) ==")
    print(f"  dense top-5: {', '.join(wide.doc_ids[:5])}")
    print(f"  reranked to: {', '.join(narrowed.doc_ids[:5])}")
    print(f"  kept {len(narrowed.ranked)} of {len(wide.ranked)} candidates")


if __name__ == "__main__":
    main()
