"""AdamW, teacher-student synthetic tasks, and a deterministic training loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import serialize
from .autodiff import ContractError, Tensor, backward, cross_entropy, mse_loss, no_grad
from .budget import count_model
from .decoder import MixerDecoder, StackConfig
from .encoder import Encoder, EncoderConfig

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@dataclass
class TrainConfig:
    steps: int = 1000
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    lr_drop_steps: list[int] = field(default_factory=list)
    lr_drop_factor: float = 0.1
    grad_clip: float | None = None
    eval_every: int = 250

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.lr_drop_steps = list(self.lr_drop_steps)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if not 0 < self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must be in (0, 1]")
        if self.steps < 0 or self.batch < 1 or self.eval_every < 1:
            raise ValueError("steps >= 0, batch >= 1 and eval_every >= 1 required")

    def lr_at(self, step: int) -> float:
        drops = sum(1 for s in self.lr_drop_steps if step >= s)
        return self.lr * self.lr_drop_factor**drops


# -- optimizer --------------------------------------------------------------
def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place AdamW update of ``param`` (t counts from 1)."""
    b1, b2 = betas
    param *= 1.0 - lr * weight_decay
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """AdamW over named tensors.

    Parameter data is moved into one flat buffer and each tensor's ``data``
    becomes a view of it, so a step is a handful of vectorized operations
    regardless of how many tensors the model has.
    """

    def __init__(self, params: Iterable[tuple[str, Tensor]], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        sizes = [p.size for _, p in self.params]
        self._offsets = np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)]).astype(np.int64)
        self.flat = np.empty(int(self._offsets[-1]))
        for (_, p), lo, hi in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            self.flat[lo:hi] = p.data.reshape(-1)
            p.data = self.flat[lo:hi].reshape(p.shape)
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self._grad = np.zeros_like(self.flat)
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in self.params if p.grad is not None))

    def _gather(self) -> np.ndarray:
        g = self._grad
        for (name, p), lo, hi in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            if p.grad is None:
                g[lo:hi] = 0.0
            else:
                g[lo:hi] = p.grad.reshape(-1)
        if not np.all(np.isfinite(g)):
            for name, p in self.params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NonFiniteGradientError(name)
        return g

    def step(self, lr: float | None = None, clip: float | None = None) -> None:
        g = self._gather()
        if clip is not None:
            norm = math.sqrt(float(g @ g))
            if norm > clip:
                g *= clip / norm
        self.t += 1
        lr = self.lr if lr is None else lr
        adamw_step(self.flat, g, self.m, self.v, self.t, lr, self.betas, self.eps, self.weight_decay)


# -- tasks ------------------------------------------------------------------
# Stream tags keep teacher, training batches and eval set independent of each
# other and of students seeded with the bare task seed.
_TEACHER, _STREAM, _EVAL = 0x7EAC, 0x57EA, 0xE7A1


@dataclass
class Batch:
    inputs: tuple[np.ndarray, ...]
    target: np.ndarray


TINY_STACK = StackConfig(
    n_layers=6, d_q=32, channels=8, points_in=8, points_out=16, groups=2,
    rank_adaptive=2, rank_static=8, weight_mode="lors",
)
TINY_ENCODER = EncoderConfig(depth=6, model_dim=32, heads=4, ffn_dim=128, patch_count=8, class_count=10)


class RegressionStackTask:
    """Targets are the output queries of a frozen, randomly initialized dense decoder.

    ``teacher_gain`` scales the teacher's output projections. At gain 1 each
    teacher layer moves the query by roughly its own magnitude and the target
    becomes a rough function of the input that tiny students fit slowly; 0.3
    keeps the stack's refinement steps moderate.
    """

    kind = "regression_stack"

    def __init__(self, seed: int, stack: StackConfig = TINY_STACK, eval_size: int = 256, teacher_gain: float = 0.3):
        if teacher_gain <= 0:
            raise ValueError("teacher_gain must be positive")
        self.seed = seed
        self.teacher_gain = teacher_gain
        self.config = stack.replace(weight_mode="dense", lors_mode="full")
        self.teacher = MixerDecoder(self.config, seed=np.random.default_rng([seed, _TEACHER]))
        for w in self.teacher.out.W:
            w.data *= teacher_gain
        self.eval_size = eval_size
        self.cache_limit = 20000
        self._targets: dict[tuple[int, int], np.ndarray] = {}
        self._eval = self._sample(np.random.default_rng([seed, _EVAL]), eval_size)

    def _inputs(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        q = rng.standard_normal((size, c.d_q))
        return q, rng.standard_normal((size, c.groups, c.points_in, c.channels))

    def _sample(self, rng: np.random.Generator, size: int) -> Batch:
        q, f = self._inputs(rng, size)
        with no_grad():
            return Batch((q, f), self.teacher(Tensor(q), Tensor(f)).data)

    def batch(self, step: int, size: int) -> Batch:
        # Inputs are cheap to redraw; teacher outputs are cached so paired
        # students trained on one task instance pay for the teacher once.
        rng = np.random.default_rng([self.seed, _STREAM, step])
        key = (step, size)
        target = self._targets.get(key)
        if target is None:
            batch = self._sample(rng, size)
            if len(self._targets) < self.cache_limit:
                self._targets[key] = batch.target
            return batch
        return Batch(self._inputs(rng, size), target)

    def eval_batch(self) -> Batch:
        return self._eval

    def predict(self, model, batch: Batch) -> Tensor:
        return model(Tensor(batch.inputs[0]), Tensor(batch.inputs[1]))

    def loss(self, model, batch: Batch) -> Tensor:
        return mse_loss(self.predict(model, batch), batch.target)

    def evaluate(self, model) -> dict[str, float]:
        with no_grad():
            return {"eval_loss": self.loss(model, self._eval).item()}

    def student(self, seed: int, **changes) -> MixerDecoder:
        c = self.config.replace(**{"weight_mode": "lors", **changes})
        return MixerDecoder(c, seed=seed)


class PatchClassifyTask:
    """Random patches labelled by the argmax of a frozen random dense encoder."""

    kind = "patch_classify"

    def __init__(self, seed: int, encoder: EncoderConfig = TINY_ENCODER, eval_size: int = 512):
        self.seed = seed
        self.config = encoder.replace(weight_mode="dense", plan=None)
        self.teacher = Encoder(self.config, seed=np.random.default_rng([seed, _TEACHER]))
        self.eval_size = eval_size
        self._eval = self._sample(np.random.default_rng([seed, _EVAL]), eval_size)

    def _sample(self, rng: np.random.Generator, size: int) -> Batch:
        c = self.config
        x = rng.standard_normal((size, c.patch_count, c.model_dim))
        with no_grad():
            return Batch((x,), np.argmax(self.teacher(Tensor(x)).data, axis=1))

    def batch(self, step: int, size: int) -> Batch:
        return self._sample(np.random.default_rng([self.seed, _STREAM, step]), size)

    def eval_batch(self) -> Batch:
        return self._eval

    def predict(self, model, batch: Batch) -> Tensor:
        return model(Tensor(batch.inputs[0]))

    def loss(self, model, batch: Batch) -> Tensor:
        return cross_entropy(self.predict(model, batch), batch.target)

    def evaluate(self, model) -> dict[str, float]:
        with no_grad():
            logits = self.predict(model, self._eval)
        acc = float(np.mean(np.argmax(logits.data, axis=1) == self._eval.target))
        return {"eval_loss": cross_entropy(logits, self._eval.target).item(), "accuracy": acc}

    def student(self, seed: int, **changes) -> Encoder:
        return Encoder(self.config.replace(**changes), seed=seed)


TASKS = {"regression_stack": RegressionStackTask, "patch_classify": PatchClassifyTask}


def make_task(kind: str, seed: int, config=None, **kwargs):
    if kind not in TASKS:
        raise ValueError(f"unknown task kind {kind!r}; choose from {sorted(TASKS)}")
    if kind != "regression_stack":
        kwargs.pop("teacher_gain", None)
    return TASKS[kind](seed, config, **kwargs) if config is not None else TASKS[kind](seed, **kwargs)


# -- runs -------------------------------------------------------------------
def covered_weights(model) -> int:
    """Scalars in the weights LORS can replace (decoder mixers/projection, encoder stack)."""
    if isinstance(model, Encoder):
        return model.stack_weight_count()
    return count_model(model).weights


@dataclass
class RunRecord:
    task: str
    task_seed: int
    seed: int
    label: str = ""
    config_hash: str = ""
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    param_counts: dict = field(default_factory=dict)
    wall_time: float = 0.0
    aborted: str | None = None

    def final(self, metric: str) -> float:
        for row in reversed(self.evals):
            if metric in row:
                return row[metric]
        raise KeyError(f"no {metric!r} recorded")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(**d)

    def stem(self) -> str:
        return f"{self.task}-{self.label or 'run'}-{self.config_hash[:10]}-s{self.seed}"

    def write(self, out_dir: str | os.PathLike, model=None) -> dict[str, Path]:
        """Write ``<stem>.json``, ``<stem>.csv`` (step,loss,lr) and, with a model, ``<stem>.lors``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"{self.stem()}.json", "csv": out / f"{self.stem()}.csv"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, allow_nan=False), encoding="utf-8")
        with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr"])
            for row in zip(self.steps, self.losses, self.lrs):
                w.writerow([row[0], repr(row[1]), repr(row[2])])
        if model is not None:
            paths["params"] = out / f"{self.stem()}.lors"
            serialize.save_model(paths["params"], model)
        return paths


def config_hash(*parts) -> str:
    blob = json.dumps([_jsonable(p) for p in parts], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def train(model, task, config: TrainConfig, label: str = "") -> RunRecord:
    """Train ``model`` in place on ``task``; the task itself is never modified."""
    counts = count_model(model)
    record = RunRecord(
        task=task.kind,
        task_seed=task.seed,
        seed=config.seed,
        label=label,
        config_hash=config_hash(model.config, config, task.kind, task.seed),
        param_counts={"total": counts.total, "covered": covered_weights(model), "by_role": counts.by_role},
    )
    opt = AdamW(model.named_parameters(), config.lr, config.betas, config.eps, config.weight_decay)
    start = time.perf_counter()
    for step in range(config.steps):
        lr = config.lr_at(step)
        opt.zero_grad()
        loss = task.loss(model, task.batch(step, config.batch))
        value = loss.item()
        if not math.isfinite(value):
            record.aborted = f"non-finite loss at step {step}"
            break
        backward(loss)
        try:
            opt.step(lr, config.grad_clip)
        except NonFiniteGradientError as exc:
            record.aborted = f"step {step}: {exc}"
            break
        record.steps.append(step)
        record.losses.append(value)
        record.lrs.append(lr)
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            record.evals.append({"step": step + 1, **task.evaluate(model)})
    opt.zero_grad()
    record.wall_time = time.perf_counter() - start
    if record.aborted:
        log.warning("%s aborted: %s", label or task.kind, record.aborted)
    return record


@dataclass
class ComparisonReport:
    metric: str
    baseline: float
    candidate: float
    gap: float
    param_ratio: float
    tolerance: float
    parity: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        return (
            f"{self.metric}: baseline={self.baseline:.6g} candidate={self.candidate:.6g} "
            f"gap={self.gap:+.4f} (tol {self.tolerance}) param_ratio={self.param_ratio:.4f} "
            f"parity={'yes' if self.parity else 'no'}"
        )


def compare_runs(a: RunRecord, b: RunRecord, tolerance: float | None = None) -> ComparisonReport:
    """Compare candidate ``b`` against baseline ``a``.

    Regression: gap is the relative excess loss (b - a) / a, default tolerance 0.2.
    Classification: gap is the accuracy shortfall a - b in percentage points,
    default tolerance 5. A candidate that does better than the baseline has a
    negative gap and is at parity.
    """
    if a.task != b.task or a.task_seed != b.task_seed:
        raise ContractError(f"runs are from different tasks: {a.task}/{a.task_seed} vs {b.task}/{b.task_seed}")
    if a.task == "patch_classify":
        metric, tol = "accuracy", 5.0 if tolerance is None else tolerance
        x, y = a.final(metric), b.final(metric)
        gap = 100.0 * (x - y)
    else:
        metric, tol = "eval_loss", 0.2 if tolerance is None else tolerance
        x, y = a.final(metric), b.final(metric)
        gap = (y - x) / x if x else (0.0 if y == x else math.inf)
    ratio = b.param_counts["covered"] / a.param_counts["covered"]
    return ComparisonReport(metric, x, y, gap, ratio, tol, gap <= tol)
