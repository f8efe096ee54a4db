"""Portable fixed-length representations of irregular clinical time series.

The pipeline serializes each observation window to canonical text, summarizes
it with a frozen language model (mock or remote), embeds the summary, and
fits small task heads on the frozen vectors. Grid-imputation baselines share
the same cohort, splits, training loop, and metrics, so every comparison is
apples to apples. See the ``cli`` module (installed as ``r2v``) for the stage
commands and ``pipeline`` for the artifact contracts.
"""

from .core import (
    Demographics,
    EmbeddingVector,
    FeatureSchema,
    FeatureSpec,
    GridTensor,
    MetricTable,
    Summary,
    TaskLabels,
    WindowRecord,
    validate_window,
)
from .textize import (
    ParseError,
    count_tokens,
    parse_canonical,
    serialize_canonical,
    serialize_template,
    tokenize,
)
from .summarize import (
    BackendError,
    MockSummarizer,
    RemoteSummarizer,
    mock_summarize,
    render_prompt,
    summarize_windows,
)
from .embed import EmbedConfig, MockEmbedder, RemoteEmbedder, embed_text, embed_texts
from .gridder import IMPUTE_MODES, NormStats, apply_norm, fit_norm_stats, impute, to_grid
from .cohort import (
    CohortSpec,
    SiteSpec,
    Splits,
    default_cohort_spec,
    generate_synthetic_cohort,
    split_cohort,
    windows_with_labels,
)
from .learn import (
    Head,
    TrainCfg,
    adamw_step,
    fewshot_finetune,
    fewshot_lr,
    init_head,
    lr_lambda,
    predict,
    train,
)
from .evalkit import (
    auprc,
    auroc,
    count_wins,
    mae,
    masked_mse,
    micro_prf,
    privacy_probe,
    rank_methods,
    task_aligned_delta,
)
from .fixtures import FIXTURE_TABLES, load_fixture_table
from .pipeline import RunPaths, ValidationError, run_protocol, run_stage

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "CohortSpec",
    "Demographics",
    "EmbedConfig",
    "EmbeddingVector",
    "FIXTURE_TABLES",
    "FeatureSchema",
    "FeatureSpec",
    "GridTensor",
    "Head",
    "IMPUTE_MODES",
    "MetricTable",
    "MockEmbedder",
    "MockSummarizer",
    "NormStats",
    "ParseError",
    "RemoteEmbedder",
    "RemoteSummarizer",
    "RunPaths",
    "SiteSpec",
    "Splits",
    "Summary",
    "TaskLabels",
    "TrainCfg",
    "ValidationError",
    "WindowRecord",
    "adamw_step",
    "apply_norm",
    "auprc",
    "auroc",
    "count_tokens",
    "count_wins",
    "default_cohort_spec",
    "embed_text",
    "embed_texts",
    "fewshot_finetune",
    "fewshot_lr",
    "fit_norm_stats",
    "generate_synthetic_cohort",
    "impute",
    "init_head",
    "load_fixture_table",
    "lr_lambda",
    "mae",
    "masked_mse",
    "micro_prf",
    "mock_summarize",
    "parse_canonical",
    "predict",
    "privacy_probe",
    "rank_methods",
    "render_prompt",
    "run_protocol",
    "run_stage",
    "serialize_canonical",
    "serialize_template",
    "split_cohort",
    "summarize_windows",
    "task_aligned_delta",
    "to_grid",
    "tokenize",
    "train",
    "validate_window",
    "windows_with_labels",
]
