"""Evaluation engine: micro-averaged precision/recall/F1, rank-statistic
ROC-AUC with tie handling, subset accuracy, label prevalence, and seeded
end-to-end evaluation runs.

All metrics pool (message, label) pairs, weighting every prediction
equally; macro and weighted averaging are deliberately out of scope.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .inference import PREDICTION_THRESHOLD
from .model import EmergencyMessage
from .prompting import DEFAULT_TEMPLATES, PromptTask, render_binary, render_multiclass
from .textprep import prepare
from .triage import AllBackendsFailed, ParseMode, TriageConfig, _infer_chain, parse_model_output

F1_TOLERANCE = 0.01


class EmptyInputError(ValueError):
    pass


class DegenerateInputError(ValueError):
    """ROC-AUC is undefined when every pooled pair is positive or negative."""


@dataclass(frozen=True)
class LabeledPrediction:
    """Gold and predicted label sets for one message, plus optional scores."""

    message_id: str
    gold: frozenset[str]
    predicted: frozenset[str]
    scores: Optional[dict[str, float]] = None

    def __post_init__(self):
        if self.scores is not None:
            implied = frozenset(k for k, v in self.scores.items() if v >= PREDICTION_THRESHOLD)
            if implied != self.predicted:
                raise ValueError(
                    f"predicted set {sorted(self.predicted)} disagrees with scores>="
                    f"{PREDICTION_THRESHOLD}: {sorted(implied)}"
                )

    @classmethod
    def from_scores(cls, message_id: str, gold: Iterable[str], scores: dict[str, float]) -> "LabeledPrediction":
        return cls(
            message_id=message_id,
            gold=frozenset(gold),
            predicted=frozenset(k for k, v in scores.items() if v >= PREDICTION_THRESHOLD),
            scores=dict(scores),
        )


def micro_prf(predictions: Sequence[LabeledPrediction]) -> tuple[float, float, float]:
    """Pooled precision, recall, F1 over all (message, label) pairs.

    Zero denominators yield 0 by convention.
    """
    if not predictions:
        raise EmptyInputError("no predictions")
    tp = fp = fn = 0
    for pred in predictions:
        tp += len(pred.gold & pred.predicted)
        fp += len(pred.predicted - pred.gold)
        fn += len(pred.gold - pred.predicted)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def micro_roc_auc(predictions: Sequence[LabeledPrediction], labels: Sequence[str]) -> float:
    """Rank-statistic AUC over pooled binary pairs: (concordant + ties/2)/(P*N).

    Every prediction must score every label in the universe.
    """
    if not predictions:
        raise EmptyInputError("no predictions")
    pairs: list[tuple[float, bool]] = []
    for pred in predictions:
        if pred.scores is None:
            raise ValueError(f"prediction {pred.message_id} has no scores")
        for label in labels:
            if label not in pred.scores:
                raise ValueError(f"prediction {pred.message_id} missing score for {label!r}")
            pairs.append((pred.scores[label], label in pred.gold))
    n_pos = sum(1 for _, positive in pairs if positive)
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError(f"positives={n_pos} negatives={n_neg}")

    # Average ranks over score ties, then the Mann-Whitney identity.
    pairs.sort(key=lambda p: p[0])
    rank_sum_pos = 0.0
    i = 0
    while i < len(pairs):
        j = i
        while j < len(pairs) and pairs[j][0] == pairs[i][0]:
            j += 1
        mean_rank = (i + 1 + j) / 2.0  # ranks are 1-based; block spans i+1 .. j
        rank_sum_pos += mean_rank * sum(1 for k in range(i, j) if pairs[k][1])
        i = j
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def subset_accuracy(predictions: Sequence[LabeledPrediction]) -> float:
    """Fraction of messages whose predicted set equals the gold set exactly."""
    if not predictions:
        raise EmptyInputError("no predictions")
    exact = sum(1 for pred in predictions if pred.gold == pred.predicted)
    return exact / len(predictions)


@dataclass(frozen=True)
class MetricsRow:
    model: str
    precision: float
    recall: float
    f1: float
    roc_auc: float
    accuracy: float


# Published benchmark figures the consistency check runs against.
REPORTED_MODEL_METRICS: tuple[MetricsRow, ...] = (
    MetricsRow("LLAMA2-7B-chat", 0.79, 0.75, 0.77, 0.87, 0.48),
    MetricsRow("LLAMA2-13B-chat", 0.78, 0.78, 0.78, 0.88, 0.50),
    MetricsRow("LLAMA2-70B-chat", 0.82, 0.88, 0.85, 0.93, 0.69),
    MetricsRow("Mistral-7B-instruct", 0.80, 0.69, 0.74, 0.84, 0.41),
    MetricsRow("Mixtral-8x7B-instruct", 0.68, 0.72, 0.70, 0.84, 0.35),
)


def table1_consistency_check(rows: Sequence[MetricsRow]) -> list[tuple[MetricsRow, float]]:
    """Recompute F1 from each row's P and R; return |recomputed - reported|."""
    out = []
    for row in rows:
        recomputed = (
            2 * row.precision * row.recall / (row.precision + row.recall)
            if row.precision + row.recall
            else 0.0
        )
        out.append((row, abs(recomputed - row.f1)))
    return out


def inconsistent_rows(
    rows: Sequence[MetricsRow], tolerance: float = F1_TOLERANCE
) -> list[tuple[MetricsRow, float]]:
    return [(row, dev) for row, dev in table1_consistency_check(rows) if dev > tolerance]


def distribution_report(
    gold_sets: Sequence[Iterable[str]], labels: Sequence[str]
) -> list[tuple[str, float]]:
    """Per-label prevalence percentage, sorted descending (label breaks ties).

    Multi-label, so percentages need not sum to 100.
    """
    if not gold_sets:
        raise EmptyInputError("no labeled messages")
    sets = [set(g) for g in gold_sets]
    out = [
        (label, 100.0 * sum(1 for g in sets if label in g) / len(sets))
        for label in labels
    ]
    out.sort(key=lambda pair: (-pair[1], pair[0]))
    return out


@dataclass(frozen=True)
class EvalItem:
    message: EmergencyMessage
    gold: frozenset[str]


@dataclass(frozen=True)
class EvalDataset:
    """Items plus the label universe and task kind ('binary'|'multilabel')."""

    items: tuple[EvalItem, ...]
    labels: tuple[str, ...]
    task: str = "multilabel"

    def __post_init__(self):
        if self.task not in ("binary", "multilabel"):
            raise ValueError(f"unknown task: {self.task}")


BINARY_LABEL = "relevant"


@dataclass(frozen=True)
class EvaluationReport:
    backend_id: str
    precision: float
    recall: float
    f1: float
    roc_auc: float
    accuracy: float
    n_samples: int
    seed: int
    template_hash: str
    prevalence: dict[str, float]
    failures: int = 0
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be > 0")

    def to_dict(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "precision": round(self.precision, 6),
            "recall": round(self.recall, 6),
            "f1": round(self.f1, 6),
            "roc_auc": round(self.roc_auc, 6),
            "accuracy": round(self.accuracy, 6),
            "n_samples": self.n_samples,
            "seed": self.seed,
            "template_hash": self.template_hash,
            "prevalence": {k: round(v, 4) for k, v in sorted(self.prevalence.items())},
            "failures": self.failures,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        header = f"{'Backend':<24} {'Prec.':>7} {'Recall':>7} {'F1':>7} {'ROC-AUC':>8} {'Acc.':>7}"
        row = (
            f"{self.backend_id:<24} {self.precision:>7.4f} {self.recall:>7.4f} "
            f"{self.f1:>7.4f} {self.roc_auc:>8.4f} {self.accuracy:>7.4f}"
        )
        lines = [header, "-" * len(header), row, f"n={self.n_samples} seed={self.seed} failures={self.failures}"]
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


def _template_hash(task: str) -> str:
    parts = [DEFAULT_TEMPLATES[PromptTask.BINARY_RELEVANCE].fingerprint]
    if task == "multilabel":
        parts.append(DEFAULT_TEMPLATES[PromptTask.MULTICLASS].fingerprint)
    return hashlib.sha256("\x1f".join(parts).encode("ascii")).hexdigest()


def _classify_binary(item: EvalItem, cfg: TriageConfig) -> Optional[LabeledPrediction]:
    prep = prepare(item.message.raw_text, cfg.min_tokens, cfg.detector)
    text = prep.text if not prep.dropped else item.message.raw_text
    try:
        response = _infer_chain(render_binary(text, locale_tag=item.message.locale_tag), cfg)
    except AllBackendsFailed:
        return None
    parsed = parse_model_output(response.text, cfg.taxonomy)
    cfg.registry.record_parse(response.backend_id, parsed.mode is ParseMode.FAILED)
    if parsed.mode is ParseMode.FAILED:
        return None
    if response.label_scores:
        score = max(response.label_scores.values())
    elif parsed.labels:
        score = max(parsed.labels.values())
    else:
        score = 1.0 if parsed.relevant else 0.0
    return LabeledPrediction.from_scores(item.message.id, item.gold, {BINARY_LABEL: score})


def _classify_multilabel(item: EvalItem, cfg: TriageConfig, labels: Sequence[str]) -> Optional[LabeledPrediction]:
    prep = prepare(item.message.raw_text, cfg.min_tokens, cfg.detector)
    text = prep.text if not prep.dropped else item.message.raw_text
    try:
        stage1 = _infer_chain(render_binary(text, locale_tag=item.message.locale_tag), cfg)
    except AllBackendsFailed:
        return None
    parsed1 = parse_model_output(stage1.text, cfg.taxonomy)
    cfg.registry.record_parse(stage1.backend_id, parsed1.mode is ParseMode.FAILED)
    if parsed1.mode is ParseMode.FAILED:
        return None
    if not parsed1.relevant:
        scores = {label: 0.0 for label in labels}
        return LabeledPrediction.from_scores(item.message.id, item.gold, scores)
    try:
        stage2 = _infer_chain(
            render_multiclass(text, cfg.taxonomy, cfg.k_shot, cfg.exemplars, item.message.locale_tag), cfg
        )
    except AllBackendsFailed:
        return None
    parsed2 = parse_model_output(stage2.text, cfg.taxonomy)
    cfg.registry.record_parse(stage2.backend_id, parsed2.mode is ParseMode.FAILED)
    if parsed2.mode is ParseMode.FAILED:
        return None
    base = stage2.label_scores if stage2.label_scores else parsed2.labels
    scores = {label: float(base.get(label, 0.0)) for label in labels}
    return LabeledPrediction.from_scores(item.message.id, item.gold, scores)


def run_evaluation(
    dataset: EvalDataset,
    cfg: TriageConfig,
    sample_n: int,
    seed: int,
) -> EvaluationReport:
    """Classify a seeded sample of the dataset and report pooled metrics.

    The sample is a seeded shuffle prefix, so equal (dataset, seed,
    sample_n) always yields byte-identical reports. Items whose inference
    failed outright are excluded from the metrics and counted instead.
    """
    if not dataset.items:
        raise EmptyInputError("dataset is empty")
    indices = list(range(len(dataset.items)))
    random.Random(seed).shuffle(indices)
    chosen = [dataset.items[i] for i in indices[: max(1, sample_n)]]

    labels = (BINARY_LABEL,) if dataset.task == "binary" else dataset.labels
    predictions: list[LabeledPrediction] = []
    failures = 0
    for item in chosen:
        if dataset.task == "binary":
            prediction = _classify_binary(item, cfg)
        else:
            prediction = _classify_multilabel(item, cfg, labels)
        if prediction is None:
            failures += 1
        else:
            predictions.append(prediction)

    notes = ["accuracy is exact-match (subset) accuracy over label sets"]
    if failures:
        notes.append(f"{failures} items failed inference and were excluded from metrics")
    if not predictions:
        raise EmptyInputError("every sampled item failed inference")

    precision, recall, f1 = micro_prf(predictions)
    accuracy = subset_accuracy(predictions)
    try:
        roc_auc = micro_roc_auc(predictions, labels)
    except DegenerateInputError:
        roc_auc = 0.5
        notes.append("ROC-AUC undefined on this sample (single-class pairs); reported as 0.5")

    prevalence = dict(distribution_report([p.gold for p in predictions], labels))
    return EvaluationReport(
        backend_id=",".join(cfg.backend_chain),
        precision=precision,
        recall=recall,
        f1=f1,
        roc_auc=roc_auc,
        accuracy=accuracy,
        n_samples=len(predictions),
        seed=seed,
        template_hash=_template_hash(dataset.task),
        prevalence=prevalence,
        failures=failures,
        notes=tuple(notes),
    )
