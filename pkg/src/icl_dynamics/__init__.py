"""Backend-agnostic toolkit for in-context learning dynamics.

Assembles few-shot prompts, extracts the model's label prediction at every
context size from a single teacher-forced pass, applies label-manipulation
protocols (randomization, flipping/rotation, arbitrary names, changepoint
schedules, instruction prompts, answer-in-context), and computes the
probabilistic metrics, guessing baseline, and significance statistics.
"""

from .backends import (
    Backend,
    BayesianMappingLM,
    EchoLM,
    ReferenceTokenizer,
    RemoteBackend,
    RemoteConfig,
    bayes_predict,
    marker_feature,
)
from .extract import (
    DynamicsCurve,
    PositionDistributions,
    classic_query_predict,
    extract_curve,
    gather_label_distributions,
)
from .metrics import (
    MetricCurves,
    SignificanceCell,
    bootstrap_ci,
    calibrate,
    cell_from_summary,
    guessing_baseline,
    moving_average,
    score_curve,
    significance,
)
from .runner import (
    ExperimentConfig,
    RunRecord,
    compute_max_context,
    emit_plot_data,
    run_experiment,
    summarize,
)
from .tokenalign import (
    LabelPositionIndex,
    LabelTokenMap,
    continuation_confidence,
    index_label_positions,
    resolve_label_tokens,
)
from .transforms import TransformSpec, apply, inject_repetitions, schedule_counts
from .verbalize import (
    TEMPLATES,
    AssembledInput,
    TaskDataset,
    TemplateSpec,
    assemble,
    build_prompt,
    load_dataset,
    render_example,
    save_dataset,
)

__version__ = "0.1.0"
