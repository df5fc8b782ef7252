"""Retrieval-augmented multiple-choice QA experiments over a driving-law corpus.

The package splits into data (corpus and question loading/validation),
retrieval (dense index, query strategies, reranking), llm (prompt
templates, answer parsing, caching), trainset (mining, augmentation,
training bundles), metrics (IR and QA scoring), strategies (experiment
registries), pipelines (runners with resume), and report (tables and
figures).
"""

from .data import (
    ARTICLE_SOURCES,
    SPLITS,
    Corpus,
    LegalArticle,
    QAItem,
    TrafficSign,
    corpus_stats,
    doc_embedding_text,
    format_options,
    load_corpus,
    load_qa,
    save_corpus,
    save_qa,
    sign_embedding_text,
)
from .errors import (
    BundleError,
    GenerationRefusedError,
    IndexBuildError,
    LawragError,
    MiningError,
    QueryBuildError,
    RenderError,
    ReportError,
    RerankError,
    ResumeError,
    RewriteError,
    SearchError,
    TrainingDelegatedError,
    TransportError,
    ValidationError,
)
from .llm import (
    ANSWER_MARKER,
    REWRITE_MARKER,
    TEMPLATES,
    CaptionCache,
    ChatBackend,
    ChatRequest,
    Message,
    ParsedAnswer,
    PromptTemplate,
    ResponseCache,
    complete,
    count_reasoning_steps,
    format_documents,
    generate_caption,
    parse_answer_letters,
    parse_rewrite,
    render_prompt,
    rewrite_query,
    user_request,
)
from .metrics import (
    aggregate,
    exact_match,
    ndcg_at_k,
    precision_at_k,
    prf1,
    recall_at_k,
    selection_tendency,
)
from .pipelines import (
    ExperimentRecord,
    PipelineBackends,
    RunResult,
    build_article_index,
    build_sign_index,
    load_records,
    resume,
    run_ir,
    run_qa,
    run_task,
    run_vir,
    run_vqa,
)
from .report import (
    LoadedRun,
    Table,
    category_breakdown,
    emit_plots,
    load_run,
    summary_table,
    tendency_table,
)
from .retrieval import (
    CachedEmbeddingBackend,
    EmbeddingBackend,
    QueryStrategy,
    RerankerBackend,
    RetrievalRun,
    VectorIndex,
    build_index,
    build_query,
    load_index,
    read_run_file,
    rerank,
    save_index,
    search,
    write_run_file,
)
from .strategies import (
    ExperimentSpec,
    ModelConfig,
    RetrievalConfig,
    Task,
    make_spec,
    model_config_for,
    registry_for,
    spec_digest,
    spec_from_dict,
    spec_to_dict,
)
from .trainset import (
    AugmentedPair,
    TrainConfig,
    TrainerBackend,
    TrainingSample,
    augmented_to_samples,
    dedup_filter,
    export_training_bundle,
    finetune_retriever,
    generate_augmented,
    mine_hard_negatives,
    split_question_ids,
    split_train_eval,
)

__version__ = "0.1.0"
