"""Desk-scale experiment harness: synthetic task suites, the correlation
between MPA and transferred accuracy, and the lemma verification sweeps.

Tasks are generated from a shared Gaussian-mixture input sample whose
mixture component is the source label. Each target task agrees with a
fixed function of the source label on a tunable fraction alpha of the
examples and is uniformly random on the rest, so alpha sweeps from
unrelated (0) to perfectly aligned (1) tasks.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace, asdict

import numpy as np
from scipy.special import betainc

from . import labelstats
from .labelstats import PairedLabelDataset
from .tinynet import Network, empirical_risk_01, mlp_template, split
from .transfer import (
    DEFAULT_GAMMA_GRID,
    TrainConfig,
    TransferOutcome,
    head_template_like,
    run_transfer,
    train_source,
    train_target_head,
)

__all__ = [
    "DegenerateDataError",
    "SyntheticTaskSuite",
    "TaskResult",
    "CorrelationResult",
    "TransferInstance",
    "LemmaRow",
    "LemmaVerdict",
    "pearson_r",
    "p_value",
    "default_architecture",
    "run_correlation_experiment",
    "verify_lemma1",
    "verify_lemma2",
]

DEFAULT_ALPHAS = tuple(a for a in (0.0, 0.25, 0.5, 0.75, 1.0) for _ in range(4))


class DegenerateDataError(ValueError):
    """Zero variance where a correlation needs spread."""


def pearson_r(x, y) -> float:
    """Sample Pearson correlation of two equal-length sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or len(x) != len(y):
        raise ValueError("need two equal-length 1-D sequences")
    if len(x) < 3:
        raise ValueError("need at least 3 pairs")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise DegenerateDataError("zero variance in a correlation argument")
    return float((xc @ yc) / np.sqrt(vx * vy))

def p_value(r: float, n_pairs: int) -> float:
    """Two-tailed significance of a sample correlation.

    Uses t = r * sqrt((n-2)/(1-r^2)) with n-2 degrees of freedom; the tail
    mass is evaluated through the regularized incomplete beta function,
    p = I_{df/(df+t^2)}(df/2, 1/2). By convention |r| = 1 gives 0.
    """
    if n_pairs < 3:
        raise ValueError("need at least 3 pairs")
    if not -1.0 <= r <= 1.0:
        raise ValueError("correlation outside [-1, 1]")
    if abs(r) == 1.0:
        return 0.0
    df = n_pairs - 2
    t_squared = r * r * df / (1.0 - r * r)
    return float(betainc(df / 2.0, 0.5, df / (df + t_squared)))


def _mixture_means(num_classes: int, dim: int, separation: float,
                   rng: np.random.Generator) -> np.ndarray:
    directions = rng.normal(size=(num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return separation * directions


def _task_seed(base_seed: int, task_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, task_index]).generate_state(1)[0])


@dataclass(frozen=True)
class SyntheticTaskSuite:
    """Shared Gaussian-mixture inputs plus a family of aligned target tasks.

    The source label of an example is its mixture component. Target task j
    uses alignment ``alphas[j]``: each label equals the source label modulo
    the target class count with that probability and is uniform otherwise.
    """

    input_dim: int = 16
    n_train: int = 2000
    n_heldout: int = 2000
    num_source_classes: int = 4
    num_target_classes: int = 2
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    class_separation: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("alignment values must lie in [0, 1]")
        if min(self.n_train, self.n_heldout) < 1:
            raise ValueError("sample sizes must be positive")

    @property
    def num_tasks(self) -> int:
        return len(self.alphas)

    def sample_inputs(self):
        """(train inputs, train source labels, heldout inputs, heldout source labels)."""
        rng = np.random.default_rng(self.seed)
        means = _mixture_means(self.num_source_classes, self.input_dim,
                               self.class_separation, rng)
        total = self.n_train + self.n_heldout
        components = rng.integers(self.num_source_classes, size=total)
        inputs = means[components] + rng.normal(size=(total, self.input_dim))
        return (inputs[: self.n_train], components[: self.n_train],
                inputs[self.n_train:], components[self.n_train:])

    def target_labels(self, task_index: int, source_labels) -> np.ndarray:
        """Labels of one target task for the given source labels.

        Alignment 1 is exactly the source label modulo the target class
        count; alignment 0 ignores the source labels entirely.
        """
        alpha = self.alphas[task_index]
        source_labels = np.asarray(source_labels, dtype=np.int64)
        rng = np.random.default_rng(_task_seed(self.seed, task_index))
        aligned = rng.random(len(source_labels)) < alpha
        noise = rng.integers(self.num_target_classes, size=len(source_labels))
        return np.where(aligned, source_labels % self.num_target_classes, noise)

    def to_dict(self) -> dict:
        return asdict(self) | {"alphas": list(self.alphas)}

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticTaskSuite":
        doc = dict(doc)
        if "alphas" in doc:
            doc["alphas"] = tuple(doc["alphas"])
        return cls(**doc)


def default_architecture(input_dim: int, num_classes: int) -> Network:
    """Desk-scale dense architecture with a two-layer head.

    The head needs a hidden layer: composing the majority predictor with a
    multi-class source head produces decision regions (unions of argmax
    cells) that a purely linear target head cannot match, which would make
    the feasibility check fail for reasons unrelated to the data.
    """
    return mlp_template(input_dim, (32, 16, 16), num_classes, split_index=2)


@dataclass(frozen=True)
class TaskResult:
    index: int
    alpha: float
    mpa: float
    accuracy: float


@dataclass(frozen=True)
class CorrelationResult:
    """Per-task (MPA, transferred accuracy) pairs and their correlation."""

    tasks: tuple[TaskResult, ...]
    pearson: float
    p_value: float
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "tasks": [asdict(t) for t in self.tasks],
            "pearson": self.pearson,
            "p_value": self.p_value,
            "metadata": self.metadata,
        }


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MPA_THREADS", "1")))
    except ValueError:
        return 1


def run_correlation_experiment(suite: SyntheticTaskSuite,
                               cfg: TrainConfig) -> CorrelationResult:
    """Train one source model, transfer to every task, correlate MPA with accuracy.

    The MPA of each task is computed on the training pairs (true source
    label, task label); accuracy is measured on the held-out split. Tasks
    are independent and may run on several worker threads (MPA_THREADS);
    results are aggregated in task order either way.
    """
    if suite.num_tasks < 10:
        raise ValueError("suite must define at least 10 target tasks")
    x_train, s_train, x_held, s_held = suite.sample_inputs()
    arch = default_architecture(suite.input_dim, suite.num_source_classes)
    source_net, _ = train_source(x_train, s_train, arch, cfg)
    extractor, source_head = split(source_net)

    def run_task(index: int) -> TaskResult:
        t_train = suite.target_labels(index, s_train)
        t_held = suite.target_labels(index, s_held)
        pairs = PairedLabelDataset(
            s_train, t_train,
            num_source_classes=suite.num_source_classes,
            num_target_classes=suite.num_target_classes,
        )
        mpa = labelstats.compute_mpa(pairs)
        template = head_template_like(source_head, suite.num_target_classes)
        task_cfg = replace(cfg, seed=_task_seed(cfg.seed, index))
        target_net, _ = train_target_head(
            extractor, x_train, t_train, template, task_cfg
        )
        accuracy = 1.0 - empirical_risk_01(target_net, x_held, t_held)
        return TaskResult(index, float(suite.alphas[index]), mpa, accuracy)

    workers = _max_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tasks = list(pool.map(run_task, range(suite.num_tasks)))
    else:
        tasks = [run_task(i) for i in range(suite.num_tasks)]

    mpas = [t.mpa for t in tasks]
    accuracies = [t.accuracy for t in tasks]
    try:
        r = pearson_r(mpas, accuracies)
    except DegenerateDataError as exc:
        raise DegenerateDataError(
            "suite design error: tasks produced zero variance in MPA or accuracy"
        ) from exc
    return CorrelationResult(
        tasks=tuple(tasks),
        pearson=r,
        p_value=p_value(r, len(tasks)),
        metadata={
            "suite": suite.to_dict(),
            "train_config": asdict(cfg),
            "mpa_computed_on": "train_pairs",
        },
    )


@dataclass(frozen=True)
class TransferInstance:
    """One seeded synthetic transfer problem for the lemma verifiers.

    ``seed`` drives the data draw; the training seed lives in ``train``.
    With ``alpha`` unset, the alignment is drawn uniformly from the
    instance's own generator.
    """

    seed: int = 0
    input_dim: int = 16
    n: int = 2000
    n_target: int = 2000
    num_source_classes: int = 4
    num_target_classes: int = 2
    alpha: float | None = None
    class_separation: float = 3.0
    hidden_widths: tuple[int, ...] = (32, 16, 16)
    split_index: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMA_GRID

    def architecture(self) -> Network:
        return mlp_template(self.input_dim, self.hidden_widths,
                            self.num_source_classes, self.split_index)


@dataclass(frozen=True)
class LemmaRow:
    gamma: float
    lhs: float
    rhs: float
    lhs_count: int
    rhs_count: int
    admissible: bool  # gamma within (0, gamma_bar]
    holds: bool


@dataclass(frozen=True)
class LemmaVerdict:
    """Outcome of checking one lemma instance across the margin grid.

    ``status`` is "holds" when no admissible grid point violates the
    inequality, "violated" otherwise, and "vacuous" when the feasibility
    assumption fails so the lemma claims nothing.
    """

    setting: str
    status: str
    gamma_bar: float
    mpa: float
    source_risk: float
    rows: tuple[LemmaRow, ...]
    outcome: TransferOutcome | None = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "status": self.status,
            "gamma_bar": self.gamma_bar,
            "mpa": self.mpa,
            "source_risk": self.source_risk,
            "rows": [asdict(row) for row in self.rows],
        }


def _instance_data(instance: TransferInstance, size_attr: str,
                   rng: np.random.Generator, means: np.ndarray):
    n = getattr(instance, size_attr)
    components = rng.integers(instance.num_source_classes, size=n)
    inputs = means[components] + rng.normal(size=(n, instance.input_dim))
    return inputs, components


def _instance_target_labels(instance: TransferInstance, components,
                            rng: np.random.Generator, alpha: float) -> np.ndarray:
    aligned = rng.random(len(components)) < alpha
    noise = rng.integers(instance.num_target_classes, size=len(components))
    return np.where(aligned, components % instance.num_target_classes, noise)


def _verdict_from_outcome(outcome: TransferOutcome, rhs_count: int) -> LemmaVerdict:
    n = outcome.n_target
    rows = []
    violated = False
    for gamma, lhs_count in zip(outcome.gamma_grid, outcome.target_margin_miss_counts):
        admissible = outcome.assumption.feasible and gamma <= outcome.assumption.gamma_bar
        holds = lhs_count <= rhs_count
        if admissible and not holds:
            violated = True
        rows.append(LemmaRow(
            gamma=gamma,
            lhs=lhs_count / n,
            rhs=rhs_count / n,
            lhs_count=lhs_count,
            rhs_count=rhs_count,
            admissible=admissible,
            holds=holds,
        ))
    if not outcome.assumption.feasible:
        status = "vacuous"
    elif violated:
        status = "violated"
    else:
        status = "holds"
    return LemmaVerdict(
        setting=outcome.setting,
        status=status,
        gamma_bar=outcome.assumption.gamma_bar,
        mpa=outcome.mpa,
        source_risk=outcome.source_risk,
        rows=tuple(rows),
        outcome=outcome,
    )


def verify_lemma1(instance: TransferInstance) -> LemmaVerdict:
    """Shared-inputs check: margin risk <= source risk + 1 - MPA.

    Both sides are compared as integer miss counts over the common
    denominator, so the comparison is exact. A violation at an admissible
    grid point indicates an implementation bug, never a data artifact.
    """
    rng = np.random.default_rng(instance.seed)
    means = _mixture_means(instance.num_source_classes, instance.input_dim,
                           instance.class_separation, rng)
    inputs, components = _instance_data(instance, "n", rng, means)
    alpha = instance.alpha if instance.alpha is not None else float(rng.uniform())
    targets = _instance_target_labels(instance, components, rng, alpha)
    arch = instance.architecture()
    outcome = run_transfer(
        inputs, components, inputs, targets, arch, instance.train,
        gamma_grid=instance.gamma_grid, setting="shared_inputs",
        num_target_classes=instance.num_target_classes,
    )
    rhs_count = outcome.source_miss_count + (outcome.n_target - outcome.mpa_match_count)
    return _verdict_from_outcome(outcome, rhs_count)


def verify_lemma2(instance: TransferInstance) -> LemmaVerdict:
    """Different-inputs check: margin risk <= 1 - MPA of the dummy pairing.

    Source and target inputs are disjoint draws from the same mixture; the
    dummy source labels come from the trained source model's predictions
    on the target inputs.
    """
    rng = np.random.default_rng(instance.seed)
    means = _mixture_means(instance.num_source_classes, instance.input_dim,
                           instance.class_separation, rng)
    source_inputs, source_components = _instance_data(instance, "n", rng, means)
    target_inputs, target_components = _instance_data(instance, "n_target", rng, means)
    alpha = instance.alpha if instance.alpha is not None else float(rng.uniform())
    targets = _instance_target_labels(instance, target_components, rng, alpha)
    arch = instance.architecture()
    outcome = run_transfer(
        source_inputs, source_components, target_inputs, targets, arch,
        instance.train, gamma_grid=instance.gamma_grid,
        setting="different_inputs",
        num_target_classes=instance.num_target_classes,
    )
    rhs_count = outcome.n_target - outcome.mpa_match_count
    return _verdict_from_outcome(outcome, rhs_count)
