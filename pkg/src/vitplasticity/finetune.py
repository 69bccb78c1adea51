"""Selective finetuning: train one component group (plus the head) with SGD.

Also holds the small statistics used to compare finetuning runs: memory
accounting, relative gain over linear probing and the Wilcoxon signed-rank
test.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .transformer import (
    ALL,
    CLS_TOKEN,
    EMBEDDING,
    HEAD,
    KINDS,
    POSITIONS,
    ParameterStore,
    ViTConfig,
    backward,
    cross_entropy,
    forward_batch,
    group_of,
    init_tensor,
)

LOG_SCHEMA = "vitplasticity.trainlog/1"
GROUPS = tuple(k.value for k in KINDS) + (ALL, HEAD)
SCHEDULES = ("cosine", "constant")
HEAD_PARAMS = ("head.weight", "head.bias")
EXACT_MAX_N = 12
MIN_WILCOXON_N = 5


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class DegenerateSampleError(ValueError):
    """Raised when a statistical test has too little usable data."""


@dataclass(frozen=True)
class FinetuneConfig:
    group: str = "MHA"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    steps: int = 300
    batch_size: int = 32
    clip_norm: float = 1.0
    schedule: str = "cosine"
    seed: int = 0
    eval_every: int = 25
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "group", str(self.group).upper())
        if self.group not in GROUPS:
            raise ValueError(f"unknown group {self.group!r}; choose from {GROUPS}")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps must be >= 0, batch_size and eval_every >= 1")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "FinetuneConfig":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def group_parameter_names(names: Sequence[str], group: str) -> list[str]:
    """Parameters updated when finetuning ``group`` (the head is always included)."""
    group = str(group).upper()
    if group not in GROUPS:
        raise ValueError(f"unknown group {group!r}")
    if group == ALL:
        return list(names)
    return [n for n in names if group_of(n) in (group, HEAD)]


def select_trainable(params: ParameterStore, group: str) -> ParameterStore:
    """Flag exactly the parameters of ``group`` plus the head as trainable."""
    params.set_trainable(group_parameter_names(params.names(), group))
    return params


def body_trainable_count(params: ParameterStore) -> int:
    return sum(params[n].size for n in params.trainable_names() if group_of(n) not in (HEAD, EMBEDDING, POSITIONS, CLS_TOKEN))


# --------------------------------------------------------------------------
# optimiser


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def sgd_step(
    params: ParameterStore,
    grads: Mapping[str, np.ndarray],
    state: SgdState,
    lr: float,
    clip_norm: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> tuple[ParameterStore, SgdState, float]:
    """One clipped momentum-SGD update of the trainable entries, in place.

    Returns the parameters, the state and the global gradient norm measured
    before clipping.
    """
    names = [n for n in params.trainable_names() if n in grads]
    bad = [n for n in names if not np.all(np.isfinite(grads[n]))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad}")
    norm = global_norm({n: grads[n] for n in names})
    scale = clip_norm / norm if norm > clip_norm else 1.0
    for n in names:
        g = grads[n] * scale
        if weight_decay:
            g = g + weight_decay * params[n]
        v = state.velocity.get(n)
        v = g.copy() if v is None else momentum * v + g
        state.velocity[n] = v
        params[n] = params[n] - lr * v
    return params, state, norm


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def learning_rate(cfg: FinetuneConfig, step: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    return cosine_lr(step, cfg.steps, cfg.lr)


# --------------------------------------------------------------------------
# training loop


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    grad_norm: float


@dataclass
class EvalRecord:
    step: int
    val_loss: float
    val_accuracy: float


@dataclass
class TrainLog:
    """Per-step and per-evaluation history of one run. Accuracies are percentages."""

    config: dict
    model: dict
    num_trainable: int
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    best_eval: int = 0
    test_loss: float = math.nan
    test_accuracy: float = math.nan
    metadata: dict = field(default_factory=dict)

    @property
    def group(self) -> str:
        return self.config["group"]

    @property
    def best_val_accuracy(self) -> float:
        return self.evals[self.best_eval].val_accuracy

    def grad_norms(self) -> np.ndarray:
        return np.array([s.grad_norm for s in self.steps])

    def to_dict(self) -> dict:
        return {
            "schema": LOG_SCHEMA,
            "config": self.config,
            "model": self.model,
            "num_trainable": self.num_trainable,
            "steps": [asdict(s) for s in self.steps],
            "evals": [asdict(e) for e in self.evals],
            "best_eval": self.best_eval,
            "best_val_accuracy": self.best_val_accuracy,
            "test_loss": self.test_loss,
            "test_accuracy": self.test_accuracy,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainLog":
        if data.get("schema") != LOG_SCHEMA:
            raise ValueError(f"unsupported log schema {data.get('schema')!r}")
        return cls(
            config=dict(data["config"]),
            model=dict(data["model"]),
            num_trainable=int(data["num_trainable"]),
            steps=[StepRecord(**s) for s in data["steps"]],
            evals=[EvalRecord(**e) for e in data["evals"]],
            best_eval=int(data["best_eval"]),
            test_loss=float(data["test_loss"]),
            test_accuracy=float(data["test_accuracy"]),
            metadata=dict(data.get("metadata", {})),
        )


def evaluate(cfg: ViTConfig, params, split: Split, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (percent) over a split."""
    if len(split) == 0:
        raise ValueError("empty split")
    total_loss = 0.0
    correct = 0
    for start in range(0, len(split), batch_size):
        imgs = split.images[start : start + batch_size]
        labels = split.labels[start : start + batch_size]
        logits = forward_batch(cfg, params, imgs)
        loss, _ = cross_entropy(logits, labels)
        total_loss += loss * len(labels)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    return total_loss / len(split), 100.0 * correct / len(split)


def fresh_head(cfg: ViTConfig, params: ParameterStore, seed: int) -> None:
    """Re-draw the classification head deterministically from ``seed``."""
    from dataclasses import replace

    head_cfg = replace(cfg, seed=seed)
    for name in HEAD_PARAMS:
        params[name] = init_tensor(head_cfg, name, params[name].shape)


def _batches(n: int, batch_size: int, seed: int):
    """Endless fixed-size mini-batches; each epoch reshuffled, partial batch dropped."""
    if n < batch_size:
        raise ValueError(f"training split ({n}) smaller than one batch ({batch_size})")
    for epoch in itertools.count():
        order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start : start + batch_size]


def run_finetune(
    cfg: ViTConfig,
    params: ParameterStore,
    train: Split,
    val: Split,
    test: Split,
    ft: FinetuneConfig,
    reinit_head: bool = True,
    callback: Callable[[StepRecord], None] | None = None,
) -> tuple[TrainLog, ParameterStore]:
    """Finetune ``ft.group`` and return the log and the best-validation parameters.

    ``params`` is left untouched. Validation runs before the first step, every
    ``eval_every`` steps and after the last step; the reported test accuracy
    belongs to the evaluation with the highest validation accuracy (earliest on
    ties).
    """
    for name, split_ in (("train", train), ("val", val), ("test", test)):
        if len(split_) == 0:
            raise ValueError(f"empty {name} split")
    work = params.copy()
    if reinit_head:
        fresh_head(cfg, work, ft.seed)
    select_trainable(work, ft.group)
    trainable = work.trainable_names()
    log = TrainLog(ft.to_dict(), cfg.to_dict(), work.num_trainable())
    state = SgdState()

    def snapshot() -> dict[str, np.ndarray]:
        return {n: work[n].copy() for n in trainable}

    def do_eval(step: int) -> None:
        vl, va = evaluate(cfg, work, val)
        if not math.isfinite(vl):
            raise NonFiniteError(f"validation loss became {vl} at step {step}")
        log.evals.append(EvalRecord(step, vl, va))
        if va > log.evals[log.best_eval].val_accuracy:
            log.best_eval = len(log.evals) - 1
            best[0] = snapshot()

    best = [snapshot()]
    do_eval(0)
    batches = _batches(len(train), ft.batch_size, ft.seed)
    for step in range(ft.steps):
        idx = next(batches)
        loss, grads, _ = backward(cfg, work, train.images[idx], train.labels[idx])
        if not math.isfinite(loss):
            raise NonFiniteError(f"training loss became {loss} at step {step}")
        lr = learning_rate(ft, step)
        _, state, norm = sgd_step(work, grads, state, lr, ft.clip_norm, ft.momentum, ft.weight_decay)
        rec = StepRecord(step, lr, loss, norm)
        log.steps.append(rec)
        if callback is not None:
            callback(rec)
        done = step + 1
        if done % ft.eval_every == 0 or done == ft.steps:
            do_eval(done)

    final = work.copy()
    for n, v in best[0].items():
        final[n] = v
    log.test_loss, log.test_accuracy = evaluate(cfg, final, test)
    return log, final


def make_splits(images: np.ndarray, labels: np.ndarray, test_images: np.ndarray, test_labels: np.ndarray, val_fraction: float, seed: int) -> tuple[Split, Split, Split]:
    """Deterministic train/val split of the training pool plus the test split."""
    from .data_io import split as split_indices

    tr, va = split_indices(len(labels), val_fraction, seed)
    return Split(images[tr], labels[tr]), Split(images[va], labels[va]), Split(test_images, test_labels)


# --------------------------------------------------------------------------
# accounting and statistics


@dataclass(frozen=True)
class MemoryEstimate:
    params: int
    bytes_per_scalar: int
    grad_bytes: int
    optimizer_bytes: int
    total_bytes: int

    @property
    def total_mib(self) -> float:
        return self.total_bytes / 2**20

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_mib"] = self.total_mib
        return d


def estimate_memory(params_count: int, bytes_per_scalar: int = 4, optimizer: str = "sgd_momentum") -> MemoryEstimate:
    """Gradient plus optimiser-state memory for training ``params_count`` scalars."""
    if params_count < 0 or bytes_per_scalar < 1:
        raise ValueError("params_count must be >= 0 and bytes_per_scalar >= 1")
    if optimizer != "sgd_momentum":
        raise ValueError(f"unsupported optimizer {optimizer!r}")
    grad = params_count * bytes_per_scalar
    opt = params_count * bytes_per_scalar
    return MemoryEstimate(params_count, bytes_per_scalar, grad, opt, grad + opt)


def relative_gain(finetune_acc: float, probe_acc: float) -> float:
    """Percentage improvement of a finetuning accuracy over the probing accuracy."""
    if not probe_acc > 0:
        raise ValueError("probe accuracy must be positive")
    return 100.0 * (finetune_acc - probe_acc) / probe_acc


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    significant: bool
    n: int
    method: str


def _exact_upper_tail(doubled_ranks: np.ndarray) -> np.ndarray:
    """counts[s] = number of sign patterns whose doubled positive-rank sum is s."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(paired_diffs: Sequence[float], alpha: float = 0.05) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are discarded; tied magnitudes get average ranks. The
    statistic is the positive rank sum W⁺. With at most 12 nonzero
    differences the p-value comes from the exact null distribution, beyond
    that from the tie-corrected normal approximation.
    """
    d = np.asarray(paired_diffs, dtype=np.float64).ravel()
    if not np.all(np.isfinite(d)):
        raise ValueError("differences must be finite")
    d = d[d != 0]
    if len(d) == 0:
        raise DegenerateSampleError("all differences are zero")
    n = len(d)
    if n < MIN_WILCOXON_N:
        raise DegenerateSampleError(f"need at least {MIN_WILCOXON_N} nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_upper_tail(doubled)
        w2 = int(round(2 * w_plus))
        total = float(2**n)
        lower = counts[: w2 + 1].sum() / total
        upper = counts[w2:].sum() / total
        p = min(1.0, 2.0 * min(lower, upper))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        z = (w_plus - mean) / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
        method = "normal"
    p = float(p)
    return WilcoxonResult(w_plus, p, bool(p < alpha), n, method)
