"""In-context example retrieval: BM25 candidates, LM-likelihood ranking,
reward-model distillation into a dense retriever, and task-typed evaluation.
"""

__version__ = "0.1.0"

from .pipeline import (  # noqa: F401
    ConfigError,
    PipelineConfig,
    PipelineResult,
    StageError,
    load_config,
    run_pipeline,
)
