"""Training loop for SMC and the comparator methods.

All methods share one skeleton: sample a mini-batch, augment it as channel
A, trace a forward pass, build the method's loss, backpropagate and take an
SGD step.  SMC additionally evaluates the *next* mini-batch on channels
B, C, ... at the current weights without a trace and stores the softened
outputs; the following step loads them as distillation targets for the
same samples seen through channel A.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import (
    Dataset,
    EpochSampler,
    MiniBatch,
    NoiseSpec,
    Step,
    augment,
    channel_ids,
    inject_label_noise,
    make_batch,
    parse_recipe,
)
from .losses import (
    IndexMisalignmentError,
    LossBreakdown,
    SoftLabelSet,
    ce_loss,
    kl_loss,
    lambda_schedule,
    one_hot,
    smoothed_targets,
    soft_labels,
    soft_target_ce,
    student_labels,
    total_loss,
)
from .models import Model, ModelSpec, build, evaluate_top1, save_checkpoint
from .tensor import GradientTape, ParameterSet, Tensor, add, backward, log_softmax, scale, sgd_step, tsum, mul

log = logging.getLogger(__name__)

METHODS = ("vanilla", "lsr", "dlb", "sam", "smc")
LOG_COLUMNS = ("epoch", "step", "lambda", "loss_total", "loss_ce", "loss_kl_sum", "train_top1", "val_top1", "seconds")
THREADS_ENV = "SMC_NUM_THREADS"


@dataclass
class TrainConfig:
    method: str = "vanilla"
    k: int = 2
    tau: float = 1.0
    alpha: float = 0.9
    lsr_eps: float = 0.1
    sam_rho: float = 0.05
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: tuple[str, ...] = ("pad4_crop", "hflip")
    cutout_size: int = 16
    noise_eta: float = 0.0
    noise_seed: int = 0
    arch: str = "small_cnn"
    hidden: tuple[int, ...] = ()
    dtype: str = "float64"
    eval_batch_size: int = 500
    parallel_channels: bool = False
    log_wall_clock: bool = False

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        self.augment = tuple(self.augment)
        self.hidden = tuple(self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "smc" and self.k < 2:
            raise ValueError(f"smc needs at least 2 channels, got k={self.k}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0 <= self.lsr_eps < 1:
            raise ValueError(f"lsr_eps must lie in [0, 1), got {self.lsr_eps}")
        if self.sam_rho < 0:
            raise ValueError(f"sam_rho must be nonnegative, got {self.sam_rho}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("need lr > 0, momentum in [0, 1), weight_decay >= 0")
        if not 0 <= self.noise_eta <= 1:
            raise ValueError(f"noise_eta must lie in [0, 1], got {self.noise_eta}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        parse_recipe(self.augment, self.cutout_size)

    @property
    def channels(self) -> list[str]:
        return channel_ids(self.k if self.method == "smc" else 1)

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= int(m * self.epochs) for m in self.lr_milestones)
        return self.lr * self.lr_gamma**drops


@dataclass
class TrainState:
    config: TrainConfig
    model: Model
    params: ParameterSet
    train: Dataset
    total_steps: int
    step: int = 0
    lr: float = 0.0
    buffer: dict[str, SoftLabelSet] = field(default_factory=dict)
    prev_batch: MiniBatch | None = None
    prev_labels: SoftLabelSet | None = None

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)


@dataclass
class StepResult:
    breakdown: LossBreakdown
    correct: int
    n: int
    ce_rows: int = 0
    teacher_indices: list[np.ndarray] = field(default_factory=list)
    student_indices: np.ndarray | None = None
    seconds: float = 0.0


def new_state(config: TrainConfig, train: Dataset, model: Model | None = None) -> TrainState:
    """Fresh state with parameters drawn from ``config.seed``."""
    if model is None:
        spec = ModelSpec(config.arch, train.image_shape, train.num_classes, config.hidden)
        model = build(spec, config.seed, np.dtype(config.dtype))
    steps = math.ceil(len(train) / config.batch_size) * config.epochs
    return TrainState(config, model, model.params.copy(), train, max(steps, 1), lr=config.lr_at(0))


def _view(state: TrainState, batch: MiniBatch, channel: str, step: int):
    cfg = state.config
    return augment(batch, channel, step, cfg.seed, cfg.augment, state.train, cfg.cutout_size, state.dtype)


def _update(state: TrainState, tape: GradientTape, loss: Tensor, leaves: dict[str, Tensor]) -> None:
    grads = dict(zip(leaves, backward(tape, loss, leaves.values())))
    cfg = state.config
    sgd_step(state.params, grads, state.lr, cfg.momentum, cfg.weight_decay)


def _correct(logits: Tensor, labels: np.ndarray) -> int:
    return int(np.sum(np.argmax(logits.data, axis=1) == labels))


def _schedule(state: TrainState) -> float:
    # s counts mini-batches trained including the current one, so the final
    # step of the run sees lambda = alpha.
    return lambda_schedule(state.config.alpha, min(state.step + 1, state.total_steps), state.total_steps)


def vanilla_step(state: TrainState, batch: MiniBatch) -> StepResult:
    """Hard-label cross-entropy on channel A."""
    view = _view(state, batch, "A", state.step)
    leaves = state.params.leaves()
    with GradientTape() as tape:
        logits = state.model.forward(leaves, view.images)
        ce = ce_loss(batch.labels, log_softmax(logits))
        total, bd = total_loss(ce)
    _update(state, tape, total, leaves)
    state.step += 1
    return StepResult(bd, _correct(logits, batch.labels), len(batch), ce_rows=len(batch))


def lsr_step(state: TrainState, batch: MiniBatch, eps: float | None = None) -> StepResult:
    """Cross-entropy against (1 - eps) * onehot + eps / K."""
    eps = state.config.lsr_eps if eps is None else eps
    view = _view(state, batch, "A", state.step)
    leaves = state.params.leaves()
    with GradientTape() as tape:
        logits = state.model.forward(leaves, view.images)
        targets = smoothed_targets(batch.labels, logits.shape[-1], eps, state.dtype)
        ce = soft_target_ce(targets, log_softmax(logits))
        total, bd = total_loss(ce)
    _update(state, tape, total, leaves)
    state.step += 1
    return StepResult(bd, _correct(logits, batch.labels), len(batch), ce_rows=len(batch))


def sam_update(
    params: ParameterSet,
    loss_and_grads: Callable[[Mapping[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    rho: float,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> float:
    """One sharpness-aware update.

    The gradient is taken at ``w + rho * g / ||g||`` (global l2 norm) and
    applied at ``w``.  A zero gradient or ``rho == 0`` falls back to plain SGD.
    Returns the loss at ``w``.
    """
    if rho < 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    loss, grads = loss_and_grads(params.values)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if rho > 0 and norm > 0:
        perturbed = {k: w + (rho / norm) * grads[k] for k, w in params.values.items()}
        _, grads = loss_and_grads(perturbed)
    sgd_step(params, grads, lr, momentum, weight_decay)
    return loss


def sam_step(state: TrainState, batch: MiniBatch, rho: float | None = None) -> StepResult:
    rho = state.config.sam_rho if rho is None else rho
    view = _view(state, batch, "A", state.step)
    first: dict = {}

    def loss_and_grads(values):
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
        with GradientTape() as tape:
            logits = state.model.forward(leaves, view.images)
            ce = ce_loss(batch.labels, log_softmax(logits))
            total, bd = total_loss(ce)
        first.setdefault("bd", bd)
        first.setdefault("correct", _correct(logits, batch.labels))
        return bd.total, dict(zip(leaves, backward(tape, total, leaves.values())))

    cfg = state.config
    sam_update(state.params, loss_and_grads, rho, state.lr, cfg.momentum, cfg.weight_decay)
    state.step += 1
    return StepResult(first["bd"], first["correct"], len(batch), ce_rows=len(batch))


def dlb_step(state: TrainState, prev_batch: MiniBatch | None, batch: MiniBatch) -> StepResult:
    """Self-distillation from the last mini-batch.

    Cross-entropy runs over [x_{t-1}, x_t]; the KL term compares the soft
    labels stored for x_{t-1} at the previous step with the current outputs
    on x_{t-1}.  The current outputs on x_t are stored for the next step.
    """
    cfg = state.config
    t = state.step
    lam = _schedule(state)
    teacher = state.prev_labels if prev_batch is not None else None
    view = _view(state, batch, "A", t)
    leaves = state.params.leaves()
    with GradientTape() as tape:
        logits = state.model.forward(leaves, view.images)
        logp = log_softmax(logits)
        if teacher is None:
            ce = ce_loss(batch.labels, logp)
            total, bd = total_loss(ce)
            rows = len(batch)
        else:
            # the model has no cross-sample layers, so a forward over the
            # concatenation equals two forwards over its halves
            prev_view = _view(state, prev_batch, "B", t)
            prev_logits = state.model.forward(leaves, prev_view.images)
            prev_logp = log_softmax(prev_logits)
            rows = len(prev_batch) + len(batch)
            K = logits.shape[-1]
            ce = scale(
                add(
                    tsum(mul(prev_logp, one_hot(prev_batch.labels, K, state.dtype))),
                    tsum(mul(logp, one_hot(batch.labels, K, state.dtype))),
                ),
                -1.0 / rows,
            )
            student = student_labels(prev_logits, cfg.tau, prev_batch.indices, t, "A")
            total, bd = total_loss(ce, [kl_loss(teacher, student)], lam)
    stored = soft_labels(logits.data, cfg.tau, batch.indices, t, "A")
    _update(state, tape, total, leaves)
    state.prev_batch, state.prev_labels = batch, stored
    state.step += 1
    teachers = [teacher.indices] if teacher is not None else []
    return StepResult(bd, _correct(logits, batch.labels), len(batch), ce_rows=rows, teacher_indices=teachers,
                      student_indices=prev_batch.indices if teacher is not None else None)


def _channel_labels(state: TrainState, lookahead: MiniBatch, channel: str, step: int) -> SoftLabelSet:
    view = _view(state, lookahead, channel, step)
    logits = state.model.forward(state.params.values, view.images)
    return soft_labels(logits.data, state.config.tau, view.indices, step, channel)


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "0")) or (os.cpu_count() or 1))
    except ValueError:
        return 1


def smc_train_step(state: TrainState, batch: MiniBatch, lookahead: MiniBatch | None) -> StepResult:
    """One SMC step over ``k`` channels.

    Channel A is traced on ``batch``; channels B, C, ... evaluate
    ``lookahead`` at the current weights and are stored for the next step.
    The loss is CE at temperature 1 plus, once targets exist, the KL terms
    against the labels stored at the previous step.
    """
    cfg = state.config
    t = state.step
    lam = _schedule(state)
    others = cfg.channels[1:]

    view = _view(state, batch, "A", t)
    leaves = state.params.leaves()
    with GradientTape() as tape:
        logits = state.model.forward(leaves, view.images)
        p1 = student_labels(logits, 1.0, view.indices, t, "A")
        p_tau = p1 if cfg.tau == 1 else student_labels(logits, cfg.tau, view.indices, t, "A")
        ce = ce_loss(batch.labels, p1)
        kls, teachers = [], []
        for c in others:
            teacher = state.buffer.get(c)
            if teacher is None:
                if t > 0:
                    raise IndexMisalignmentError(f"no stored soft labels for channel {c} at step {t}")
                continue
            if teacher.step != t - 1:
                raise IndexMisalignmentError(f"channel {c} labels come from step {teacher.step}, expected {t - 1}")
            kls.append(kl_loss(teacher, p_tau))
            teachers.append(teacher.indices)
        total, bd = total_loss(ce, kls, lam)

    buffer: dict[str, SoftLabelSet] = {}
    if lookahead is not None:
        if cfg.parallel_channels and len(others) > 1:
            with ThreadPoolExecutor(min(len(others), _worker_count())) as pool:
                labels = pool.map(lambda c: _channel_labels(state, lookahead, c, t), others)
                buffer = dict(zip(others, labels))
        else:
            buffer = {c: _channel_labels(state, lookahead, c, t) for c in others}

    _update(state, tape, total, leaves)
    state.buffer = buffer
    state.step += 1
    return StepResult(bd, _correct(logits, batch.labels), len(batch), ce_rows=len(batch),
                      teacher_indices=teachers, student_indices=view.indices)


def run_step(state: TrainState, step: Step) -> StepResult:
    """Dispatch one sampler step to the configured method."""
    cfg = state.config
    batch = make_batch(state.train, step.indices)
    if cfg.method == "smc":
        look = make_batch(state.train, step.lookahead) if step.lookahead is not None else None
        return smc_train_step(state, batch, look)
    if cfg.method == "dlb":
        return dlb_step(state, state.prev_batch, batch)
    if cfg.method == "lsr":
        return lsr_step(state, batch)
    if cfg.method == "sam":
        return sam_step(state, batch)
    return vanilla_step(state, batch)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    lam: float
    loss_total: float
    loss_ce: float
    loss_kl_sum: float
    train_top1: float
    val_top1: float
    seconds: float

    def row(self, wall_clock: bool) -> list[str]:
        vals = [self.lam, self.loss_total, self.loss_ce, self.loss_kl_sum, self.train_top1, self.val_top1]
        cells = [str(self.epoch), str(self.step)] + ["" if math.isnan(v) else repr(float(v)) for v in vals]
        cells.append(f"{self.seconds:.3f}" if wall_clock else "")
        return cells


@dataclass
class RunResult:
    config: TrainConfig
    records: list[MetricsRecord]
    steps: list[StepResult]
    best_val: float
    best_epoch: int
    final_val: float
    best_params: ParameterSet
    final_params: ParameterSet
    noise_mask: np.ndarray | None = None

    @property
    def gap(self) -> float:
        """Best minus final validation accuracy."""
        return self.best_val - self.final_val


def run_experiment(
    config: TrainConfig,
    train: Dataset,
    val: Dataset,
    out_dir=None,
    on_step: Callable[[Step, StepResult], None] | None = None,
    header: Mapping | None = None,
) -> RunResult:
    """Train for ``config.epochs`` epochs, evaluating on ``val`` after each.

    With ``out_dir`` the run log (``run_log.csv``) and the best and final
    checkpoints are written there.
    """
    mask = None
    if config.noise_eta > 0:
        train, mask = inject_label_noise(train, NoiseSpec(config.noise_eta, config.noise_seed))
    state = new_state(config, train)
    sampler = EpochSampler(len(train), config.batch_size, config.seed, config.epochs)
    state.total_steps = max(sampler.total_steps, 1)

    def val_acc():
        return evaluate_top1(state.model, val, state.params, config.eval_batch_size)

    nan = float("nan")
    init_val = val_acc()
    records = [MetricsRecord(0, 0, nan, nan, nan, nan, nan, init_val, 0.0)]
    best_val, best_epoch, best_params = init_val, 0, state.params.copy()
    steps: list[StepResult] = []
    start = time.perf_counter()

    for epoch in range(config.epochs):
        state.lr = config.lr_at(epoch)
        n = correct = 0
        sums = np.zeros(3)
        for st in sampler.epoch_steps(epoch):
            t0 = time.perf_counter()
            res = run_step(state, st)
            res.seconds = time.perf_counter() - t0
            steps.append(res)
            if on_step is not None:
                on_step(st, res)
            bd = res.breakdown
            sums += res.n * np.array([bd.total, bd.ce, bd.kl_sum])
            n += res.n
            correct += res.correct
        acc = val_acc()
        lam = steps[-1].breakdown.lam if steps else nan
        records.append(MetricsRecord(epoch + 1, state.step, lam, *(sums / n), correct / n, acc, time.perf_counter() - start))
        log.info("epoch %d/%d val_top1=%.4f loss=%.4f", epoch + 1, config.epochs, acc, sums[0] / n)
        if acc > best_val or best_epoch == 0:
            best_val, best_epoch, best_params = acc, epoch + 1, state.params.copy()

    result = RunResult(config, records, steps, best_val, best_epoch, records[-1].val_top1,
                       best_params, state.params.copy(), mask)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_run_log(out / "run_log.csv", result, header)
        save_checkpoint(out / "best.ckpt", result.best_params)
        save_checkpoint(out / "final.ckpt", result.final_params)
    return result


def config_hash(cfg: Mapping) -> str:
    """Hash of a config with its seed and output location removed."""
    import hashlib

    stripped = {k: v for k, v in cfg.items() if k not in ("seed", "output_dir")}
    blob = json.dumps(stripped, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_run_log(path, result: RunResult, header: Mapping | None = None) -> None:
    """CSV run log; the config is echoed into leading ``#`` lines."""
    cfg = dict(header) if header is not None else _plain(asdict(result.config))
    with open(path, "w", newline="") as fh:
        fh.write("# smckit run log\n")
        fh.write(f"# config: {json.dumps(cfg, sort_keys=True)}\n")
        fh.write(f"# config_hash: {config_hash(cfg)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for rec in result.records:
            w.writerow(rec.row(result.config.log_wall_clock))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
