"""Desk-scale contrastive text-embedding pipeline.

Pre-train a small bi-encoder with InfoNCE over weakly supervised text
pairs, clean the pairs with heuristic and consistency-based filters,
fine-tune with listwise distillation over hard negatives, and evaluate
the embeddings on retrieval, STS, clustering, and classification.
"""

from .datapipe import (
    FilterConfig,
    FilterReport,
    SyntheticCorpus,
    SyntheticSpec,
    TextPair,
    consistency_filter,
    decontaminate,
    gen_synthetic,
    heuristic_filter,
    ingest,
    run_filter_pipeline,
    weighted_sample,
)
from .encoder import (
    EncoderParams,
    TokenizerConfig,
    encode,
    encode_batch,
    encode_texts,
    init_params,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)
from .errors import (
    ConfigurationError,
    DataStarvationError,
    DegenerateEmbeddingError,
    DimensionError,
    E5Error,
    EmptyInputError,
    ParseError,
    UndefinedCorrelationError,
    ValidationError,
)
from .evaluate import (
    Corpus,
    EvalReport,
    PromptTemplate,
    RankedList,
    build_index,
    kmeans,
    linear_probe,
    load_index,
    retrieval_report,
    save_index,
    search_topk,
    sts_score,
    v_measure,
    zero_shot_classify,
)
from .finetune import FinetuneConfig, FinetuneExample, combined_loss, finetune, kd_loss
from .metrics import mrr_at_k, ndcg_at_k, recall_at_k, spearman
from .pretrain import (
    MomentumQueue,
    PreBatchBank,
    PretrainConfig,
    assemble_candidates,
    infonce_loss,
    momentum_update,
    pretrain,
    score_matrix,
)
from .tensor import AdamWState, LrSchedule, adamw_step, lr_at, matmul, softmax_rows

__version__ = "0.1.0"
