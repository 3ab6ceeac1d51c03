"""Experiment orchestration: sampling, execution, persistence, summaries.

A run is one sampled in-context dataset under one transform: sample an
example order without replacement, apply the transform, assemble, tokenize,
index the label positions, make exactly one logprobs call, extract the
curve, and score it. Repetitions differ only in their seeded RNG streams, so
a fixed master seed reproduces every artifact byte for byte on a pure
backend. Scenarios (transforms) share the order streams, which is what makes
paired significance tests meaningful.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as met
from . import transforms as tr
from .backends import BayesianMappingLM, EchoLM, ReferenceTokenizer, RemoteBackend, RemoteConfig
from .backends.reference import _TOKEN_PIECES, marker_feature
from .errors import (
    BackendError,
    DegenerateDistributionError,
    ExperimentError,
    MisalignmentError,
    SummaryError,
    TaskInfeasibleError,
    TokenAlignmentError,
)
from .extract import (
    DynamicsCurve,
    classic_query_predict,
    extract_curve,
    gather_label_distributions,
)
from .metrics import CurveScores, MetricCurves, SignificanceCell
from .tokenalign import index_label_positions, resolve_label_tokens
from .transforms import TransformSpec
from .verbalize import TEMPLATES, TaskDataset, TemplateSpec, assemble, build_prompt, load_dataset

RUN_ABORT_ERRORS = (MisalignmentError, DegenerateDistributionError, TokenAlignmentError, BackendError)

CONTENT_FREE_INPUT = "N/A"


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass
class BootstrapSettings:
    level: float = 0.99
    resamples: int = 10_000
    seed: int = 0


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce an experiment."""

    task: str
    backend: dict
    transforms: list[TransformSpec]
    repetitions: int
    master_seed: int
    max_context_size: int | str = "auto"
    template: str | TemplateSpec = "single"
    token_limit: int | None = None
    smoothing_window: int = 5
    changepoint_smoothing_window: int = 3
    bootstrap: BootstrapSettings = field(default_factory=BootstrapSettings)
    output_dir: str = "runs/experiment"
    workers: int = 1
    max_context_samples: int = 4
    calibrate: str = "none"
    abort_budget: float = 0.01

    def __post_init__(self):
        if self.repetitions < 1:
            raise ExperimentError("repetitions must be >= 1")
        if not self.transforms:
            raise ExperimentError("at least one transform is required")
        if self.calibrate not in ("none", "content_free_last"):
            raise ExperimentError(f"unknown calibrate mode {self.calibrate!r}")
        labels = [spec.label for spec in self.transforms]
        if len(set(labels)) != len(labels):
            raise ExperimentError(f"transform labels collide: {labels}")

    @property
    def template_spec(self) -> TemplateSpec:
        if isinstance(self.template, TemplateSpec):
            return self.template
        if self.template in TEMPLATES:
            return TEMPLATES[self.template]
        raise ExperimentError(f"unknown template {self.template!r}")

    def to_dict(self) -> dict:
        template = self.template if isinstance(self.template, str) else {
            "query_template": self.template.query_template,
            "label_cue": self.template.label_cue,
            "separator": self.template.separator,
        }
        return {
            "task": self.task,
            "backend": self.backend,
            "transforms": [t.to_dict() for t in self.transforms],
            "repetitions": self.repetitions,
            "master_seed": self.master_seed,
            "max_context_size": self.max_context_size,
            "template": template,
            "token_limit": self.token_limit,
            "smoothing_window": self.smoothing_window,
            "changepoint_smoothing_window": self.changepoint_smoothing_window,
            "bootstrap": {
                "level": self.bootstrap.level,
                "resamples": self.bootstrap.resamples,
                "seed": self.bootstrap.seed,
            },
            "workers": self.workers,
            "max_context_samples": self.max_context_samples,
            "calibrate": self.calibrate,
            "abort_budget": self.abort_budget,
        }

    @classmethod
    def from_dict(cls, data: dict, output_dir: str | None = None) -> "ExperimentConfig":
        data = dict(data)
        data["transforms"] = [TransformSpec.from_dict(t) for t in data["transforms"]]
        if isinstance(data.get("template"), dict):
            data["template"] = TemplateSpec(**data["template"])
        if isinstance(data.get("bootstrap"), dict):
            data["bootstrap"] = BootstrapSettings(**data["bootstrap"])
        if output_dir is not None:
            data["output_dir"] = output_dir
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path, output_dir: str | None = None) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        out = output_dir or data.pop("output_dir", None) or "runs/" + Path(path).stem
        data.pop("output_dir", None)
        return cls.from_dict(data, output_dir=out)

    def hash(self) -> str:
        # identity of the experiment, not of its execution: worker count and
        # output location do not affect any produced number
        data = self.to_dict()
        data.pop("workers", None)
        canon = json.dumps(data, sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def collect_words(dataset: TaskDataset, template: TemplateSpec, extra: Sequence[str] = ()) -> list[str]:
    """Word vocabulary covering a dataset + template, for reference tokenizers."""
    words: set[str] = set()

    def scan(text: str):
        for piece in _TOKEN_PIECES.findall(text):
            if piece[0].isalnum():
                words.add(piece)

    for inputs, _ in dataset.examples:
        for text in inputs:
            scan(text)
    for name in dataset.class_names:
        scan(name)
    scan(template.example_template.format(text="", text1="", text2="", label="")
         if template.num_inputs == 2 else
         template.example_template.format(text="", label=""))
    for text in extra:
        scan(text)
    return sorted(words)


def content_words(dataset: TaskDataset) -> list[str]:
    words: set[str] = set()
    for inputs, _ in dataset.examples:
        for text in inputs:
            for piece in _TOKEN_PIECES.findall(text):
                if piece[0].isalnum():
                    words.add(piece)
    return sorted(words)


def transform_vocabulary(
    specs: Sequence[TransformSpec], class_names: Sequence[str]
) -> tuple[list[tuple[str, ...]], list[str]]:
    """(replacement label alphabets, extra words) the transforms introduce.

    Replacement names become label alphabets the reference backends must
    recognize; instruction-prompt text contributes plain vocabulary words.
    """
    aliases: list[tuple[str, ...]] = []
    extra: list[str] = []

    def visit(spec: TransformSpec):
        if spec.kind == "replace":
            names = tuple(spec.replacement_names)
            if names not in aliases:
                aliases.append(names)
            extra.extend(names)
        elif spec.kind == "prompt":
            extra.append(build_prompt(spec.prompt_id, class_names))
        if spec.inner is not None:
            visit(spec.inner)

    for spec in specs:
        visit(spec)
    return aliases, extra


def build_backend(
    spec: dict,
    dataset: TaskDataset,
    template: TemplateSpec,
    transforms: Sequence[TransformSpec] = (),
):
    """Construct the backend named by an experiment config."""
    kind = spec.get("kind")
    if kind == "remote":
        cfg = RemoteConfig.from_env(
            base_url=spec.get("base_url"),
            timeout=spec.get("timeout", 60.0),
            max_retries=spec.get("max_retries", 3),
            max_in_flight=spec.get("max_in_flight", 4),
            token_limit=spec.get("token_limit"),
        )
        return RemoteBackend(cfg)
    aliases, transform_words = transform_vocabulary(transforms, dataset.class_names)
    extra = list(spec.get("extra_words", [])) + transform_words + [CONTENT_FREE_INPUT]
    tokenizer = ReferenceTokenizer(
        collect_words(dataset, template, extra=extra),
        mode=spec.get("tokenizer_mode", "merge"),
    )
    words = content_words(dataset)
    limit = spec.get("token_limit", 4096)
    if kind == "echo":
        probs = spec.get("emit_probs", list(dataset.class_frequencies))
        return EchoLM(
            tokenizer, template, dataset.class_names, probs, words,
            token_limit=limit, alias_class_names=aliases,
        )
    if kind == "bayesian":
        markers = spec.get("markers")
        if not markers:
            raise ExperimentError("bayesian backend config needs per-class 'markers'")
        return BayesianMappingLM(
            tokenizer,
            template,
            dataset.class_names,
            marker_feature(markers),
            prior_identity=spec.get("prior_identity", 0.5),
            noise=spec.get("noise", 0.1),
            content_words=words,
            token_limit=limit,
            alias_class_names=aliases,
        )
    raise ExperimentError(f"unknown backend kind {kind!r}")


def compute_max_context(
    dataset: TaskDataset,
    template: TemplateSpec,
    tokenizer,
    limit: int,
    sample_count: int = 4,
    seed: int = 0,
    prompt: str | None = None,
) -> int:
    """Smallest number of examples whose assembled prompt exceeds the limit.

    Sampled over ``sample_count`` random orderings (the minimum across
    samples, i.e. the most conservative ordering found). A task whose single
    longest sampled example already overflows is infeasible.
    """
    if sample_count < 1:
        raise ExperimentError("sample_count must be >= 1")
    best: int | None = None
    for s in range(sample_count):
        order = _rng(seed, s).permutation(len(dataset))
        labels = [dataset.examples[i][1] for i in order]
        for n in range(1, len(order) + 1):
            cap = best if best is not None else len(order)
            if n > cap:
                break
            text = assemble(dataset, order[:n], labels[:n], template, prompt=prompt).text
            count = len(tokenizer.tokenize(text))
            if count > limit:
                if n == 1:
                    raise TaskInfeasibleError(
                        f"a single example already needs {count} > {limit} tokens"
                    )
                best = n if best is None else min(best, n)
                break
    if best is None:
        raise ExperimentError(
            f"the whole dataset ({len(dataset)} examples) fits within {limit} tokens; "
            "max context size is not limit-bound, pass it explicitly"
        )
    return best


@dataclass
class RunRecord:
    """Persisted unit: one sampled context under one transform."""

    run_id: str
    config_hash: str
    transform: dict
    seed: list[int]
    example_order: list[int]
    displayed_labels: list[int]
    class_names: list[str]
    probs: list[list[float]]
    floored_positions: list[int]
    joint_loglik: float
    sampled_length: int
    context_size: int | None = None
    insert_positions: list[int] | None = None
    calibrated_probs: list[float] | None = None

    def to_json(self) -> str:
        data = {k: v for k, v in self.__dict__.items() if v is not None}
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


@dataclass
class TransformOutcome:
    spec: TransformSpec
    records: list[RunRecord]
    scores: list[CurveScores]
    curves: MetricCurves
    aborted: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dataset: TaskDataset
    max_context_size: int
    outcomes: dict[str, TransformOutcome]
    output_dir: Path


def _effective_class_names(spec: TransformSpec, dataset: TaskDataset) -> tuple[str, ...]:
    if spec.kind == "replace":
        return tuple(spec.replacement_names)
    if spec.kind in ("prompt", "answer_in_context"):
        return _effective_class_names(spec.inner_spec, dataset)
    return dataset.class_names


def _single_pass_run(
    rep: int,
    spec: TransformSpec,
    t_idx: int,
    dataset: TaskDataset,
    template: TemplateSpec,
    backend,
    label_map,
    config: ExperimentConfig,
    k: int,
) -> RunRecord:
    order = [int(i) for i in _rng(config.master_seed, rep).permutation(len(dataset))[:k]]
    rng_t = _rng(config.master_seed, 1_000_003 + t_idx, rep)
    result = tr.apply(spec, dataset, order, rng_t)
    assembled = assemble(
        dataset, order, result.displayed_labels, template,
        prompt=result.prompt_text, class_names=result.class_names,
    )
    tokens = backend.tokenize(assembled.text)
    index = index_label_positions(tokens, assembled, backend, label_map, result.displayed_labels)
    dists = gather_label_distributions(backend, tokens, index, label_map)
    curve = extract_curve(dists, index, label_map, result.displayed_labels)

    calibrated = None
    if config.calibrate == "content_free_last":
        prior = classic_query_predict(assembled, _content_free_inputs(template), backend, template, label_map)
        calibrated = met.calibrate(curve.probs[-1], prior).tolist()

    return RunRecord(
        run_id=f"{spec.label}-{rep:05d}",
        config_hash=config.hash(),
        transform=spec.to_dict(),
        seed=[config.master_seed, rep],
        example_order=order,
        displayed_labels=list(result.displayed_labels),
        class_names=list(result.class_names),
        probs=[[float(v) for v in row] for row in curve.probs],
        floored_positions=list(curve.floored_positions),
        joint_loglik=curve.joint_loglik,
        sampled_length=len(order),
        calibrated_probs=calibrated,
    )


def _content_free_inputs(template: TemplateSpec):
    return (CONTENT_FREE_INPUT,) * template.num_inputs


def _answer_in_context_run(
    rep: int,
    spec: TransformSpec,
    t_idx: int,
    dataset: TaskDataset,
    template: TemplateSpec,
    backend,
    label_map,
    config: ExperimentConfig,
    k: int,
) -> RunRecord:
    draw = [int(i) for i in _rng(config.master_seed, rep).permutation(len(dataset))[: k + 1]]
    context_order, query_index = draw[:k], draw[k]
    rng_t = _rng(config.master_seed, 1_000_003 + t_idx, rep)
    inner = tr.apply(spec.inner_spec, dataset, draw, rng_t)
    query_label = inner.displayed_labels[k]
    augmented, inserted = tr.inject_repetitions(context_order, query_index, spec.repetitions, rng_t)
    labels_by_index = dict(zip(draw, inner.displayed_labels))
    displayed = [labels_by_index[i] for i in augmented]
    assembled = assemble(
        dataset, augmented, displayed, template,
        prompt=inner.prompt_text, class_names=inner.class_names, allow_repeats=True,
    )
    probs = classic_query_predict(
        assembled, dataset.examples[query_index][0], backend, template, label_map
    )
    return RunRecord(
        run_id=f"{spec.label}-{rep:05d}",
        config_hash=config.hash(),
        transform=spec.to_dict(),
        seed=[config.master_seed, rep],
        example_order=list(augmented),
        displayed_labels=[int(query_label)],
        class_names=list(inner.class_names),
        probs=[[float(v) for v in probs]],
        floored_positions=[],
        joint_loglik=float(np.log(probs[query_label])),
        sampled_length=len(augmented),
        context_size=len(augmented),
        insert_positions=list(inserted),
    )


def scores_from_record(record: RunRecord) -> CurveScores:
    probs = np.asarray(record.probs, dtype=float)
    curve = DynamicsCurve(
        probs=probs,
        raw_probs=probs,
        displayed_labels=tuple(record.displayed_labels),
        floored_positions=tuple(record.floored_positions),
        joint_loglik=record.joint_loglik,
    )
    return met.score_curve(curve)


def run_experiment(
    config: ExperimentConfig,
    dataset: TaskDataset | None = None,
    backend=None,
) -> ExperimentResult:
    """Execute every transform x repetition and persist all artifacts."""
    if dataset is None:
        dataset = load_dataset(config.task)
    template = config.template_spec
    if backend is None:
        backend = build_backend(config.backend, dataset, template, transforms=config.transforms)

    limit = config.token_limit or backend.token_limit
    if config.max_context_size == "auto":
        k = compute_max_context(
            dataset, template, backend, limit,
            sample_count=config.max_context_samples, seed=config.master_seed,
        )
    else:
        k = int(config.max_context_size)
    if k < 1 or k + 1 > len(dataset):
        raise ExperimentError(f"max context size {k} infeasible for {len(dataset)} examples")

    out_dir = Path(config.output_dir)
    (out_dir / "records").mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics").mkdir(parents=True, exist_ok=True)

    outcomes: dict[str, TransformOutcome] = {}
    for t_idx, spec in enumerate(config.transforms):
        label_map = resolve_label_tokens(backend, template, _effective_class_names(spec, dataset))
        runner = _answer_in_context_run if spec.kind == "answer_in_context" else _single_pass_run

        def one(rep: int):
            try:
                return runner(rep, spec, t_idx, dataset, template, backend, label_map, config, k)
            except RUN_ABORT_ERRORS as exc:
                return (rep, exc)

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                results = list(pool.map(one, range(config.repetitions)))
        else:
            results = [one(rep) for rep in range(config.repetitions)]

        records = [r for r in results if isinstance(r, RunRecord)]
        failures = [r for r in results if not isinstance(r, RunRecord)]
        if len(failures) > config.abort_budget * config.repetitions:
            raise ExperimentError(
                f"{spec.label}: {len(failures)}/{config.repetitions} runs aborted "
                f"(budget {config.abort_budget:.0%}); first: {failures[0][1]}"
            )

        with (out_dir / "records" / f"{spec.label}.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")

        scores = [scores_from_record(r) for r in records]
        curves = met.aggregate_scores(scores)
        _write_metrics_csv(out_dir / "metrics" / f"{spec.label}.csv", curves)
        outcomes[spec.label] = TransformOutcome(
            spec=spec, records=records, scores=scores, curves=curves, aborted=len(failures)
        )

    _write_experiment_meta(out_dir, config, dataset, k)
    _write_summary_csv(out_dir / "summary.csv", config, dataset, outcomes)
    return ExperimentResult(
        config=config, dataset=dataset, max_context_size=k, outcomes=outcomes, output_dir=out_dir
    )


def _write_experiment_meta(out_dir: Path, config: ExperimentConfig, dataset: TaskDataset, k: int):
    meta = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "max_context_size": k,
        "task_name": dataset.name,
        "class_names": list(dataset.class_names),
        "class_frequencies": list(dataset.class_frequencies),
    }
    (out_dir / "experiment.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _write_metrics_csv(path: Path, curves: MetricCurves):
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["context_size", "n_runs", "accuracy_mean", "accuracy_se",
             "loglik_mean", "loglik_se", "entropy_mean", "entropy_se"]
        )
        for m in range(len(curves)):
            writer.writerow(
                [m, curves.num_runs,
                 repr(float(curves.accuracy_mean[m])), repr(float(curves.accuracy_se[m])),
                 repr(float(curves.loglik_mean[m])), repr(float(curves.loglik_se[m])),
                 repr(float(curves.entropy_mean[m])), repr(float(curves.entropy_se[m]))]
            )


def _write_summary_csv(path: Path, config: ExperimentConfig, dataset: TaskDataset, outcomes):
    base_acc, base_ll, base_ent = met.guessing_baseline(dataset.class_frequencies)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["transform", "n_runs", "curve_points",
             "accuracy_mean", "accuracy_se", "loglik_mean", "loglik_se",
             "entropy_mean", "entropy_se", "loglik_ci_low", "loglik_ci_high",
             "baseline_accuracy", "baseline_loglik", "baseline_entropy"]
        )
        for label in sorted(outcomes):
            o = outcomes[label]
            final_ll = [float(s.loglik[-1]) for s in o.scores]
            if len(final_ll) >= 2:
                lo, hi = met.bootstrap_ci(
                    final_ll, level=config.bootstrap.level,
                    resamples=config.bootstrap.resamples, seed=config.bootstrap.seed,
                )
            else:
                lo = hi = final_ll[0]
            c = o.curves
            writer.writerow(
                [label, c.num_runs, len(c),
                 repr(float(c.accuracy_mean[-1])), repr(float(c.accuracy_se[-1])),
                 repr(float(c.loglik_mean[-1])), repr(float(c.loglik_se[-1])),
                 repr(float(c.entropy_mean[-1])), repr(float(c.entropy_se[-1])),
                 repr(float(lo)), repr(float(hi)),
                 repr(float(base_acc)), repr(float(base_ll)), repr(float(base_ent))]
            )


def load_records(out_dir: str | Path, label: str) -> list[RunRecord]:
    path = Path(out_dir) / "records" / f"{label}.jsonl"
    if not path.exists():
        raise SummaryError(f"no records for transform {label!r} under {out_dir}")
    return [RunRecord.from_json(line) for line in path.read_text(encoding="utf-8").splitlines() if line]


def load_experiment_meta(out_dir: str | Path) -> dict:
    path = Path(out_dir) / "experiment.json"
    if not path.exists():
        raise SummaryError(f"{out_dir} does not look like an experiment directory")
    return json.loads(path.read_text(encoding="utf-8"))


METRIC_COLUMNS = {"accuracy": "correct", "loglik": "loglik", "entropy": "entropy"}


def summarize(
    out_dir: str | Path,
    metric: str = "loglik",
    paired: bool = True,
    default_label: str = "default",
) -> list[tuple[str, SignificanceCell]]:
    """Significance cells (default − variant at maximum context size).

    The sign convention makes positive accuracy/log-likelihood differences
    mean the variant performs worse; graying is decided only from the
    default condition against the guessing baseline.
    """
    if metric not in METRIC_COLUMNS:
        raise SummaryError(f"unknown metric {metric!r}; expected one of {sorted(METRIC_COLUMNS)}")
    meta = load_experiment_meta(out_dir)
    labels = [TransformSpec.from_dict(t).label for t in meta["config"]["transforms"]]
    if default_label not in labels:
        raise SummaryError(f"experiment has no {default_label!r} transform to compare against")
    base_acc, base_ll, _ = met.guessing_baseline(meta["class_frequencies"])

    def finals(label: str) -> dict[str, list[float]]:
        recs = load_records(out_dir, label)
        out = {"correct": [], "loglik": [], "entropy": []}
        for rec in recs:
            s = scores_from_record(rec)
            out["correct"].append(float(s.correct[-1]))
            out["loglik"].append(float(s.loglik[-1]))
            out["entropy"].append(float(s.entropy[-1]))
        return out

    lengths = {label: len(load_records(out_dir, label)[0].probs) for label in labels}
    if len(set(lengths.values())) != 1:
        raise SummaryError(f"transforms evaluated at different maximum context sizes: {lengths}")

    default = finals(default_label)
    cells: list[tuple[str, SignificanceCell]] = []
    for label in labels:
        if label == default_label:
            continue
        variant = finals(label)
        cell = met.significance(
            default[METRIC_COLUMNS[metric]],
            variant[METRIC_COLUMNS[metric]],
            default["correct"],
            default["loglik"],
            base_acc,
            base_ll,
            paired=paired,
        )
        cells.append((label, cell))
    return cells


def render_summary_table(cells: list[tuple[str, SignificanceCell]], metric: str) -> str:
    width = max([len("transform")] + [len(label) for label, _ in cells])
    lines = [f"{'transform':<{width}}  delta_{metric:<10} significant  vs_baseline"]
    for label, cell in cells:
        mark = "bold" if cell.bold else "-"
        gray = "gray" if cell.gray else "ok"
        lines.append(f"{label:<{width}}  {cell.mean_diff:+.4f} ± {cell.se_diff:.4f}  {mark:<11} {gray}")
    return "\n".join(lines)


def write_summary_cells(out_dir: str | Path, metric: str, cells) -> Path:
    path = Path(out_dir) / f"significance_{metric}.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["transform", "mean_diff", "se_diff", "bold", "gray"])
        for label, cell in cells:
            writer.writerow([label, repr(cell.mean_diff), repr(cell.se_diff),
                             int(cell.bold), int(cell.gray)])
    return path


def emit_plot_data(out_dir: str | Path, window: int | None = None) -> list[Path]:
    """CSV per (transform, metric): raw mean, smoothed mean, CI, baseline.

    Changepoint transforms default to the narrower smoothing window; the
    guessing baseline is a constant column so plots can draw it directly.
    """
    out_dir = Path(out_dir)
    meta = load_experiment_meta(out_dir)
    config = ExperimentConfig.from_dict(meta["config"], output_dir=str(out_dir))
    base = dict(zip(("accuracy", "loglik", "entropy"), met.guessing_baseline(meta["class_frequencies"])))
    plots_dir = out_dir / "plotdata"
    plots_dir.mkdir(exist_ok=True)

    written: list[Path] = []
    for spec in config.transforms:
        records = load_records(out_dir, spec.label)
        scores = [scores_from_record(r) for r in records]
        per_metric = {
            "accuracy": np.stack([s.correct.astype(float) for s in scores]),
            "loglik": np.stack([s.loglik for s in scores]),
            "entropy": np.stack([s.entropy for s in scores]),
        }
        if window is not None:
            w = window
        elif spec.kind == "changepoint":
            w = config.changepoint_smoothing_window
        else:
            w = config.smoothing_window
        for metric, matrix in per_metric.items():
            mean = matrix.mean(axis=0)
            smoothed = met.moving_average(mean, w)
            path = plots_dir / f"{spec.label}__{metric}.csv"
            with path.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["context_size", "mean", "smoothed", "ci_low", "ci_high", "baseline"])
                for m in range(matrix.shape[1]):
                    if matrix.shape[0] >= 2:
                        lo, hi = met.bootstrap_ci(
                            matrix[:, m], level=config.bootstrap.level,
                            resamples=config.bootstrap.resamples, seed=config.bootstrap.seed,
                        )
                    else:
                        lo = hi = float(matrix[0, m])
                    writer.writerow(
                        [m, repr(float(mean[m])), repr(float(smoothed[m])),
                         repr(float(lo)), repr(float(hi)), repr(float(base[metric]))]
                    )
            written.append(path)
    return written


def replay_record(
    record: RunRecord,
    config: ExperimentConfig,
    dataset: TaskDataset,
    backend,
) -> float:
    """Re-execute a persisted run; returns the max abs probability deviation."""
    spec = TransformSpec.from_dict(record.transform)
    t_idx = [s.label for s in config.transforms].index(spec.label)
    template = config.template_spec
    label_map = resolve_label_tokens(backend, template, _effective_class_names(spec, dataset))
    runner = _answer_in_context_run if spec.kind == "answer_in_context" else _single_pass_run
    fresh = runner(
        record.seed[1], spec, t_idx, dataset, template, backend, label_map, config,
        record.sampled_length if spec.kind != "answer_in_context" else len(record.example_order) - spec.repetitions,
    )
    if fresh.example_order != record.example_order:
        raise ExperimentError("replay drew a different example order; config/seed mismatch")
    return float(np.abs(np.asarray(fresh.probs) - np.asarray(record.probs)).max())
