"""
Training Loop
Runs epochs over the time-consistent batch plan: forward through each batch,
backpropagate every ``bptt_window`` batches and step the optimizer, then
validate and keep the best epoch.
"""
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, List, NamedTuple, Optional

import numpy as np
from tqdm import tqdm

from interlace import evalkit
from interlace.errors import ConfigError, EvaluationError, NonFiniteError
from interlace.model import (
    PREV_ITEM_VIEWS,
    EmbeddingBank,
    ModelDims,
    ModelParams,
    StepCache,
    StepLosses,
    apply_batch,
    backward_step,
    forward_step,
    read_bank,
)
from interlace.tbatch import BatchPlan, build_tbatches, plan_stats

logger = logging.getLogger(__name__)

TASKS = ('interaction', 'statechange')

# Rows per worker below which a batch is not worth splitting
_MIN_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    """
    Training hyperparameters.

    Attributes:
        epochs: Passes over the training range
        learning_rate: Adam step size (0 freezes the parameters)
        weight_decay: Decoupled weight decay
        bptt_window: Consecutive batches per backprop segment
        seed: Parameter initialisation seed
        lambda_u, lambda_i, lambda_s: Loss scales
        squared_loss: Squared distances instead of norms
        prev_item_view: 'snapshot' or 'current'
        task: 'interaction' or 'statechange'
        workers: Thread pool size for splitting large batches
    """
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    bptt_window: int = 64
    seed: int = 0
    lambda_u: float = 1.0
    lambda_i: float = 1.0
    lambda_s: float = 1.0
    squared_loss: bool = False
    prev_item_view: str = 'snapshot'
    task: str = 'interaction'
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.bptt_window < 1:
            raise ConfigError(f"bptt_window must be >= 1, got {self.bptt_window}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.prev_item_view not in PREV_ITEM_VIEWS:
            raise ConfigError(f"prev_item_view must be one of {PREV_ITEM_VIEWS}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def from_settings(cls, settings):
        """Build from a settings mapping keyed by upper-case config names."""
        return cls(
            epochs=int(settings.get('EPOCHS', 50)),
            learning_rate=float(settings.get('LEARNING_RATE', 1e-3)),
            weight_decay=float(settings.get('WEIGHT_DECAY', 1e-5)),
            bptt_window=int(settings.get('BPTT_WINDOW', 64)),
            seed=int(settings.get('SEED', 0)),
            lambda_u=float(settings.get('LAMBDA_U', 1.0)),
            lambda_i=float(settings.get('LAMBDA_I', 1.0)),
            lambda_s=float(settings.get('LAMBDA_S', 1.0)),
            squared_loss=bool(settings.get('SQUARED_LOSS', False)),
            prev_item_view=settings.get('PREV_ITEM_VIEW', 'snapshot'),
            task=settings.get('TASK', 'interaction'),
            workers=int(settings.get('THREADS', 1)),
        )

    @property
    def with_state(self):
        return self.task == 'statechange'

    def model_options(self):
        return {
            'lambda_u': self.lambda_u,
            'lambda_i': self.lambda_i,
            'lambda_s': self.lambda_s,
            'squared_loss': self.squared_loss,
            'prev_item_view': self.prev_item_view,
        }


@dataclass(frozen=True)
class EpochReport:
    """One epoch's summed training losses, validation metric and wall time."""
    epoch: int
    loss_total: float
    loss_pred: float
    loss_drift_u: float
    loss_drift_i: float
    loss_state: float
    val_metric: float = float('nan')
    seconds: float = 0.0


@dataclass
class TrainResult:
    """
    Attributes:
        params: Parameters of the best validation epoch
        bank: Bank at the end of the training range for that epoch
        reports: Every epoch's report
        best_epoch: 1-based best epoch
        best_metric: Its validation metric
    """
    params: ModelParams
    bank: EmbeddingBank
    reports: List[EpochReport] = field(default_factory=list)
    best_epoch: int = 1
    best_metric: float = float('nan')


# ==================================================================
# OPTIMIZER
# ==================================================================
class Adam:
    """
    Adam with decoupled weight decay; moment buffers persist across steps.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """
        Update ``params`` (name -> array) in place.

        Raises:
            NonFiniteError: if any gradient has NaN/Inf (nothing is updated)
        """
        for name, grad in grads.items():
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"non-finite gradient for {name}")

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for name, param in params.items():
            grad = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)

            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * grad
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (grad * grad)

            if self.weight_decay:
                param *= 1.0 - self.lr * self.weight_decay
            param -= step_size * self.m[name] / (np.sqrt(self.v[name] / bc2) + self.epsilon)


def optimizer_step(params: ModelParams, grads, optimizer: Adam):
    """Apply one optimizer step to every parameter tensor."""
    optimizer.step(params.tensors(), grads)


# ==================================================================
# SEGMENT FORWARD / BACKWARD
# ==================================================================
def _check_losses(losses: StepLosses, rows, epoch, batch):
    total = losses.total
    if not np.all(np.isfinite(total)):
        bad = int(np.flatnonzero(~np.isfinite(total))[0])
        raise NonFiniteError(
            'non-finite training loss', epoch=epoch, batch=batch, seq_index=int(rows[bad])
        )


def backward_segment(params: ModelParams, caches, user_seen, item_seen, with_state):
    """
    Gradients of the summed loss of one segment.

    Bank adjoints run backwards over the cached batches: a write hands the
    row's adjoint to the new embedding and clears it, a read adds to it.
    What is left at the segment entry flows into the initial vectors for
    rows that were never written earlier in the epoch and is dropped for
    the rest.

    Args:
        params: ModelParams used in the forward pass
        caches: StepCache per batch, in forward order
        user_seen, item_seen: Version > 0 masks taken at segment entry
        with_state: Whether the state term was included

    Returns:
        Parameter-name -> gradient
    """
    dims = params.dims
    grads = params.zero_grads()
    g_user = np.zeros((dims.num_users, dims.n))
    g_item = np.zeros((dims.d_i, dims.m))
    g_prev = np.zeros((dims.num_users, dims.m))
    snapshot = params.prev_item_view == 'snapshot'

    for cache in reversed(caches):
        users, items = cache.users, cache.items

        g_u_new = g_user[users]
        g_user[users] = 0.0
        g_i_new = g_item[items] + g_prev[users]
        g_item[items] = 0.0
        g_prev[users] = 0.0

        g_u_prev, g_i_prev, g_k_dyn = backward_step(
            params, cache, g_u_new, g_i_new, grads, with_state=with_state
        )
        g_user[users] += g_u_prev
        g_item[items] += g_i_prev
        if snapshot:
            g_prev[users] += g_k_dyn
        else:
            np.add.at(g_item, cache.prev_items, g_k_dyn)

    grads['init_user'] += g_user[~user_seen].sum(axis=0)
    grads['init_item'] += g_item[~item_seen].sum(axis=0)
    if snapshot:
        grads['init_item'] += g_prev[~user_seen].sum(axis=0)
    return grads


def loss_and_gradients(params: ModelParams, arrays, plan: BatchPlan, with_state=False):
    """
    Total loss over ``plan`` from a fresh bank and its exact gradient,
    treating the whole plan as one segment.

    Returns:
        (loss, parameter-name -> gradient)
    """
    bank = EmbeddingBank.fresh(params)
    caches = []
    total = 0.0
    for batch in plan.batches:
        losses, cache = apply_batch(params, bank, arrays, batch, with_state)
        total += float(np.sum(losses.total))
        caches.append(cache)
    dims = params.dims
    grads = backward_segment(
        params, caches,
        np.zeros(dims.num_users, dtype=bool), np.zeros(dims.d_i, dtype=bool),
        with_state,
    )
    return total, grads


def apply_chunked(params: ModelParams, bank: EmbeddingBank, arrays, rows, with_state=False,
                  pool: Optional[ThreadPoolExecutor] = None, workers=1):
    """
    apply_batch with the rows of a large batch split across ``pool``.

    Every chunk reads the pre-batch bank; the writes happen once the whole
    batch is done. Chunks are contiguous, so the merged losses and cache
    keep the batch's row order. Batches under ``workers`` * 64 rows, or any
    batch when ``pool`` is None, run inline.

    Returns:
        (StepLosses, StepCache)
    """
    rows = np.asarray(rows, dtype=np.int64)
    if pool is None or len(rows) < workers * _MIN_CHUNK:
        return apply_batch(params, bank, arrays, rows, with_state)

    users = arrays.users[rows]
    items = arrays.items[rows]
    prev_items = arrays.prev_items[rows]
    u_prev, i_prev, k_dyn = read_bank(params, bank, users, items, prev_items)
    chunks = np.array_split(np.arange(len(rows)), workers)
    futures = [
        pool.submit(
            forward_step, params, u_prev[c], i_prev[c], k_dyn[c],
            users[c], items[c], prev_items[c],
            arrays.delta_u[rows[c]], arrays.delta_i[rows[c]],
            arrays.features[rows[c]], arrays.labels[rows[c]], with_state,
        )
        for c in chunks
    ]
    results = [future.result() for future in futures]

    bank.write(
        users, items,
        np.concatenate([r[0] for r in results]),
        np.concatenate([r[1] for r in results]),
        arrays.timestamps[rows],
    )
    losses = StepLosses(*(np.concatenate(parts) for parts in zip(*(r[2] for r in results))))
    cache = StepCache(**{
        f.name: np.concatenate([getattr(r[3], f.name) for r in results])
        for f in fields(StepCache)
    })
    return losses, cache


def run_epoch(params: ModelParams, bank: EmbeddingBank, arrays, plan: BatchPlan,
              cfg: TrainConfig, optimizer: Optional[Adam] = None, epoch=1):
    """
    One training epoch.

    The bank is reset to the initial vectors first; batches run strictly in
    plan order and the optimizer steps after every ``bptt_window`` batches.
    With ``cfg.workers`` > 1 large batches are split across a thread pool.

    Args:
        params: ModelParams (updated in place)
        bank: EmbeddingBank (reset, then advanced through the plan)
        arrays: InteractionArrays
        plan: Batch plan over the training range
        cfg: TrainConfig
        optimizer: Adam carrying moments across epochs (fresh when None)
        epoch: 1-based epoch number for diagnostics

    Returns:
        EpochReport

    Raises:
        NonFiniteError: on a non-finite loss or gradient
    """
    if optimizer is None:
        optimizer = Adam(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    start = time.perf_counter()
    bank.reset(params)
    components = np.zeros((4, len(arrays)))
    batches = plan.batches
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    try:
        for seg_start in range(0, len(batches), cfg.bptt_window):
            segment = batches[seg_start:seg_start + cfg.bptt_window]
            # Unwritten rows must hold the initial vectors the gradient is taken for
            bank.refresh_unseen(params)
            user_seen = bank.user_version > 0
            item_seen = bank.item_version > 0

            caches = []
            for offset, batch in enumerate(segment):
                losses, cache = apply_chunked(
                    params, bank, arrays, batch, cfg.with_state, pool, cfg.workers
                )
                _check_losses(losses, batch, epoch, seg_start + offset + 1)
                components[:, batch] = np.vstack(losses)
                caches.append(cache)

            grads = backward_segment(params, caches, user_seen, item_seen, cfg.with_state)
            optimizer_step(params, grads, optimizer)
            logger.debug(
                f"Epoch {epoch}: optimizer step {optimizer.t} after batch "
                f"{seg_start + len(segment)}/{len(batches)}"
            )
    finally:
        if pool is not None:
            pool.shutdown()

    # Sum in seq order so the totals do not depend on the plan
    rows = np.sort([j for batch in batches for j in batch]).astype(np.int64)
    pred, drift_u, drift_i, state = components[:, rows].sum(axis=1)
    return EpochReport(
        epoch=epoch,
        loss_total=float(pred + drift_u + drift_i + state),
        loss_pred=float(pred),
        loss_drift_u=float(drift_u),
        loss_drift_i=float(drift_i),
        loss_state=float(state),
        seconds=time.perf_counter() - start,
    )


class EpochTrace(NamedTuple):
    """Per-row forward results of forward_epoch, indexed by seq index."""
    losses: StepLosses
    drift_u_dist: np.ndarray
    drift_i_dist: np.ndarray
    bank: EmbeddingBank


def forward_epoch(params: ModelParams, arrays, plan: BatchPlan, workers=1,
                  with_state=False, bank: Optional[EmbeddingBank] = None):
    """
    Forward pass over a plan without gradients.

    Batches larger than ``workers`` * 64 rows are split across a thread
    pool; every chunk reads the pre-batch bank and the writes happen once
    the whole batch is done.

    Args:
        params: ModelParams (read only)
        arrays: InteractionArrays
        plan: BatchPlan (t-Batch or naive)
        workers: Thread pool size
        with_state: Include the state-change term
        bank: Starting bank (fresh when None); advanced in place

    Returns:
        EpochTrace
    """
    bank = EmbeddingBank.fresh(params) if bank is None else bank
    size = len(arrays)
    components = np.zeros((4, size))
    drift_u = np.zeros(size)
    drift_i = np.zeros(size)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    try:
        for batch in plan.batches:
            rows = np.asarray(batch, dtype=np.int64)
            losses, cache = apply_chunked(params, bank, arrays, rows, with_state, pool, workers)
            components[:, rows] = np.vstack(losses)
            drift_u[rows] = cache.drift_u_dist
            drift_i[rows] = cache.drift_i_dist
    finally:
        if pool is not None:
            pool.shutdown()

    return EpochTrace(StepLosses(*components), drift_u, drift_i, bank)


# ==================================================================
# TRAINING
# ==================================================================
def _improves(metric, best):
    if math.isnan(metric):
        return False
    return math.isnan(best) or metric > best


def select_best(metrics: Iterable[float]) -> int:
    """1-based index of the first maximum, ignoring NaN (1 when all are NaN)."""
    best_epoch, best = 1, float('nan')
    for epoch, metric in enumerate(metrics, start=1):
        if _improves(metric, best):
            best_epoch, best = epoch, metric
    return best_epoch


def validation_metric(params: ModelParams, bank: EmbeddingBank, arrays, index_range, task):
    """MRR (interaction task) or AUC (state task) on ``index_range``; NaN if undefined."""
    frozen = bank.copy()
    try:
        if task == 'statechange':
            return evalkit.eval_state_change(params, frozen, arrays, index_range).auc
        return evalkit.eval_interaction(params, frozen, arrays, index_range).mrr
    except EvaluationError as exc:
        logger.warning(f"Validation metric undefined: {exc}")
        return float('nan')


def _progress_enabled(progress):
    return bool(progress) and sys.stderr.isatty()


def train(params: ModelParams, arrays, split, cfg: TrainConfig,
          listeners: Iterable[Callable[[EpochReport], None]] = (), progress=False) -> TrainResult:
    """
    Train for ``cfg.epochs`` epochs and keep the best validation epoch.

    Args:
        params: Initial ModelParams (trained in place)
        arrays: InteractionArrays for the whole stream
        split: Split with train / valid / test ranges
        cfg: TrainConfig
        listeners: Callables receiving each EpochReport
        progress: Show a progress bar (only on a terminal)

    Returns:
        TrainResult with copies of the best epoch's parameters and bank
    """
    plan = build_tbatches(arrays, split.train)
    stats = plan_stats(plan)
    logger.info(
        f"Training on {stats['num_interactions']} interactions in "
        f"{stats['num_batches']} batches (parallelism {stats['parallelism']:.2f})"
    )

    optimizer = Adam(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    bank = EmbeddingBank.fresh(params)
    result = None
    reports = []

    epochs = tqdm(
        range(1, cfg.epochs + 1), desc='train', unit='epoch',
        disable=not _progress_enabled(progress),
    )
    for epoch in epochs:
        report = run_epoch(params, bank, arrays, plan, cfg, optimizer, epoch)
        metric = validation_metric(params, bank, arrays, split.valid, cfg.task)
        report = replace(report, val_metric=metric)
        reports.append(report)
        for listener in listeners:
            listener(report)

        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: loss {report.loss_total:.6f} "
            f"val {metric:.6f} ({report.seconds:.2f}s)"
        )
        if result is None or _improves(metric, result.best_metric):
            result = TrainResult(
                params=params.copy(), bank=bank.copy(),
                best_epoch=epoch, best_metric=metric,
            )

    result.reports = reports
    logger.info(f"Best epoch {result.best_epoch} with validation metric {result.best_metric:.6f}")
    return result


def run_experiment(dataset, cfg: TrainConfig, split_cfg, embed_dim=128,
                   normalize_deltas=True, horizon=None, listeners=(), progress=False):
    """
    Prepare arrays, train from scratch and evaluate the best epoch on test.

    Args:
        dataset: Parsed Dataset
        cfg: TrainConfig
        split_cfg: SplitConfig
        embed_dim: n = m
        normalize_deltas: Scale deltas by the training mean
        horizon: Early-warning horizon for the state task (None skips it)
        listeners: Epoch listeners passed to train()
        progress: Progress bar flag

    Returns:
        (TrainResult, EvalReport, InteractionArrays, Split)
    """
    from interlace.ingest import prepare_arrays

    arrays, split = prepare_arrays(dataset, split_cfg, normalize=normalize_deltas)
    dims = ModelDims(
        num_users=dataset.num_users, num_items=dataset.num_items,
        feature_dim=dataset.feature_dim, n=embed_dim, m=embed_dim,
    )
    params = ModelParams.initialize(dims, seed=cfg.seed, **cfg.model_options())
    result = train(params, arrays, split, cfg, listeners=listeners, progress=progress)
    report = evalkit.evaluate_test(
        result.params, result.bank, arrays, split, cfg.task, horizon=horizon
    )
    return result, report, arrays, split
