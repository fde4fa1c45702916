"""
Evaluation Harness
Interaction ranking metrics, state-change AUC, the early-warning ratio,
calibration baselines and parameter sweeps.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from interlace.errors import EvaluationError
from interlace.model import (
    EmbeddingBank,
    ModelParams,
    apply_batch,
    forward_step,
    rank_of,
    read_bank,
)
from interlace.numcore import sigmoid
from interlace.tbatch import build_tbatches, naive_plan

logger = logging.getLogger(__name__)

RECALL_KS = (10,)
METRIC_COLUMNS = ('task', 'split', 'mrr', 'recall10', 'auc', 'n')


class EarlyWarningPoint(NamedTuple):
    offset: int
    mean_ratio: float
    ci_low: float
    ci_high: float


@dataclass
class EvalReport:
    """
    Metrics of one evaluated range.

    Attributes:
        task: 'interaction' or 'statechange'
        split: Range name ('valid' or 'test')
        mrr: Mean reciprocal rank (interaction task)
        recall_at_k: k -> fraction of ranks <= k
        auc: Area under the ROC curve (state task)
        n_evaluated: Interactions evaluated
        ranks: Per-interaction pessimistic ranks
        scores: Per-interaction state-change probabilities
        early_warning: EarlyWarningPoint series, largest offset first
    """
    task: str
    split: str = 'test'
    mrr: float = float('nan')
    recall_at_k: Dict[int, float] = field(default_factory=dict)
    auc: float = float('nan')
    n_evaluated: int = 0
    ranks: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    early_warning: List[EarlyWarningPoint] = field(default_factory=list)

    def as_row(self):
        """One ``metrics.csv`` row."""
        return {
            'task': self.task,
            'split': self.split,
            'mrr': self.mrr,
            'recall10': self.recall_at_k.get(10, float('nan')),
            'auc': self.auc,
            'n': self.n_evaluated,
        }


# ==================================================================
# METRICS
# ==================================================================
def ranks_to_metrics(ranks, ks: Sequence[int] = RECALL_KS):
    """
    Args:
        ranks: 1-based ranks
        ks: Recall cut-offs

    Returns:
        (mrr, {k: recall@k})
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise EvaluationError('no ranks to summarise')
    mrr = float(np.mean(1.0 / ranks))
    return mrr, {k: float(np.mean(ranks <= k)) for k in ks}


def auc(scores, labels):
    """
    Area under the ROC curve from the Mann-Whitney statistic; tied scores
    get their average rank, so each tied pair counts 1/2.

    Raises:
        EvaluationError: if labels lack a positive or a negative
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(
            f"AUC needs both classes, got {n_pos} positive and {n_neg} negative labels"
        )
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pessimistic_rank(scores, truth):
    """Rank of ``truth`` when higher scores are better and ties go against it."""
    return int(np.count_nonzero(scores >= scores[truth]))


# ==================================================================
# BANK ADVANCEMENT
# ==================================================================
def advance(params: ModelParams, bank: EmbeddingBank, arrays, index_range, with_state=False):
    """
    Advance the bank through ``index_range`` with frozen parameters.

    The snapshot previous-item view is plan independent, so it advances in
    t-Batch order; the current view is advanced one interaction at a time.

    Returns:
        state-change probability per interaction of the range
    """
    if params.prev_item_view == 'snapshot':
        plan = build_tbatches(arrays, index_range)
    else:
        plan = naive_plan(arrays, index_range)
    start = index_range.start
    scores = np.zeros(len(index_range))
    for batch in plan.batches:
        _, cache = apply_batch(params, bank, arrays, batch, with_state)
        scores[np.asarray(batch) - start] = sigmoid(cache.logits)
    return scores


def eval_interaction(params: ModelParams, bank: EmbeddingBank, arrays, index_range,
                     ks: Sequence[int] = RECALL_KS, split='test') -> EvalReport:
    """
    Rank every interaction's ground-truth item among all real items.

    Each interaction is projected to its timestamp, predicted and ranked
    against the item embeddings as they stand just before it, then applied
    to the bank.

    Args:
        params: Frozen ModelParams
        bank: Bank advanced to the start of the range (advanced in place)
        arrays: InteractionArrays
        index_range: Range to evaluate
        ks: Recall cut-offs
        split: Range name for the report

    Returns:
        EvalReport with mrr, recall_at_k and ranks

    Raises:
        EvaluationError: on an empty range
    """
    if len(index_range) == 0:
        raise EvaluationError('interaction evaluation range is empty')

    ranks = np.empty(len(index_range), dtype=np.int64)
    for pos, j in enumerate(index_range):
        rows = np.array([j])
        users = arrays.users[rows]
        items = arrays.items[rows]
        prev_items = arrays.prev_items[rows]
        u_prev, i_prev, k_dyn = read_bank(params, bank, users, items, prev_items)
        u_new, i_new, _, cache = forward_step(
            params, u_prev, i_prev, k_dyn, users, items, prev_items,
            arrays.delta_u[rows], arrays.delta_i[rows], arrays.features[rows],
            arrays.labels[rows], with_state=False,
        )
        ranks[pos] = rank_of(cache.pred[0], bank, params, int(items[0]))
        bank.write(users, items, u_new, i_new, arrays.timestamps[rows])

    mrr, recall = ranks_to_metrics(ranks, ks)
    logger.debug(f"Interaction eval on {len(ranks)} interactions: MRR {mrr:.4f}")
    return EvalReport(
        task='interaction', split=split, mrr=mrr, recall_at_k=recall,
        n_evaluated=len(ranks), ranks=ranks,
    )


def eval_state_change(params: ModelParams, bank: EmbeddingBank, arrays, index_range,
                      split='test') -> EvalReport:
    """
    Score each interaction's updated user embedding with the state head and
    compute the AUC against the state labels.

    Raises:
        EvaluationError: when the range has no positive or no negative label
    """
    if len(index_range) == 0:
        raise EvaluationError('state-change evaluation range is empty')
    scores = advance(params, bank, arrays, index_range, with_state=True)
    labels = arrays.labels[index_range.start:index_range.stop]
    return EvalReport(
        task='statechange', split=split, auc=auc(scores, labels),
        n_evaluated=len(scores), scores=scores,
    )


def _sample_var(values):
    return float(np.var(values, ddof=1)) if len(values) > 1 else 0.0


def early_warning_curve(scores, arrays, index_range, horizon=5) -> List[EarlyWarningPoint]:
    """
    How much higher dropping users score ahead of their final interaction.

    For each offset o from ``horizon`` down to 0, the scores of dropping
    users o interactions before their labelled final interaction are
    averaged and divided by the mean score of every non-dropping user's
    interaction in the range. The 95 % interval uses the delta method on
    the ratio of two independent means.

    Args:
        scores: State-change probabilities aligned with ``index_range``
        arrays: InteractionArrays
        index_range: Range the scores belong to
        horizon: Largest offset (>= 1)

    Returns:
        EarlyWarningPoint list; offsets without dropper samples carry NaN

    Raises:
        EvaluationError: without dropping or non-dropping users in range
    """
    if horizon < 1:
        raise EvaluationError(f"horizon must be >= 1, got {horizon}")
    scores = np.asarray(scores, dtype=np.float64)
    users = arrays.users[index_range.start:index_range.stop]
    labels = arrays.labels[index_range.start:index_range.stop]

    droppers = np.unique(users[labels == 1])
    if droppers.size == 0:
        raise EvaluationError('no dropping users in range')
    baseline = scores[~np.isin(users, droppers)]
    if baseline.size == 0:
        raise EvaluationError('no non-dropping users in range')
    mean_b = float(baseline.mean())
    if mean_b == 0.0:
        raise EvaluationError('non-dropping users all score 0')
    rel_var_b = _sample_var(baseline) / (baseline.size * mean_b ** 2)

    by_offset = {offset: [] for offset in range(horizon + 1)}
    for user in droppers:
        positions = np.flatnonzero(users == user)
        final = positions[labels[positions] == 1][-1]
        history = positions[positions <= final]
        for offset in range(min(horizon + 1, len(history))):
            by_offset[offset].append(scores[history[-1 - offset]])

    z = float(norm.ppf(0.975))
    points = []
    for offset in range(horizon, -1, -1):
        values = np.asarray(by_offset[offset])
        if values.size == 0:
            points.append(EarlyWarningPoint(offset, math.nan, math.nan, math.nan))
            continue
        mean_a = float(values.mean())
        ratio = mean_a / mean_b
        rel_var_a = _sample_var(values) / (values.size * mean_a ** 2) if mean_a else 0.0
        half = z * math.sqrt(ratio ** 2 * (rel_var_a + rel_var_b))
        points.append(EarlyWarningPoint(offset, ratio, ratio - half, ratio + half))
    return points


# ==================================================================
# BASELINES
# ==================================================================
def repeat_baseline(arrays, index_range):
    """Ranks when the user's previous item is predicted first and the rest tie."""
    ranks = np.empty(len(index_range), dtype=np.int64)
    scores = np.zeros(arrays.num_items)
    for pos, j in enumerate(index_range):
        scores[:] = 0.0
        prev = arrays.prev_items[j]
        if prev < arrays.num_items:
            scores[prev] = 1.0
        ranks[pos] = pessimistic_rank(scores, arrays.items[j])
    return ranks


def popularity_baseline(arrays, index_range):
    """Ranks by interaction count so far (the whole stream before each interaction)."""
    counts = np.bincount(
        arrays.items[:index_range.start], minlength=arrays.num_items
    ).astype(np.float64)
    ranks = np.empty(len(index_range), dtype=np.int64)
    for pos, j in enumerate(index_range):
        item = arrays.items[j]
        ranks[pos] = pessimistic_rank(counts, item)
        counts[item] += 1.0
    return ranks


BASELINES = {
    'baseline_repeat': repeat_baseline,
    'baseline_popularity': popularity_baseline,
}


def baseline_reports(arrays, index_range, split='test') -> List[EvalReport]:
    """One EvalReport per baseline ranker; ``task`` names the baseline."""
    reports = []
    for task, ranker in BASELINES.items():
        ranks = ranker(arrays, index_range)
        mrr, recall = ranks_to_metrics(ranks)
        reports.append(EvalReport(
            task=task, split=split, mrr=mrr, recall_at_k=recall,
            n_evaluated=len(ranks), ranks=ranks,
        ))
    return reports


# ==================================================================
# TEST EVALUATION AND SWEEPS
# ==================================================================
def evaluate_test(params: ModelParams, bank: EmbeddingBank, arrays, split, task,
                  horizon: Optional[int] = None) -> EvalReport:
    """
    Advance a copy of the end-of-training bank through validation, then
    evaluate the test range.

    Args:
        params: Frozen ModelParams
        bank: Bank at the end of the training range (not modified)
        arrays: InteractionArrays
        split: Split
        task: 'interaction' or 'statechange'
        horizon: Early-warning horizon for the state task, or None

    Returns:
        EvalReport for the test range
    """
    bank = bank.copy()
    advance(params, bank, arrays, split.valid)
    if task == 'statechange':
        report = eval_state_change(params, bank, arrays, split.test)
        if horizon:
            report.early_warning = early_warning_curve(
                report.scores, arrays, split.test, horizon
            )
        return report
    return eval_interaction(params, bank, arrays, split.test)


def sweep_settings(train_fracs=None, embed_dims=None):
    """
    Settings list for sweep().

    Returns:
        [{'train_frac': x}, ...] or [{'embed_dim': d}, ...]
    """
    if train_fracs:
        return [{'train_frac': float(x)} for x in train_fracs]
    return [{'embed_dim': int(d)} for d in embed_dims or ()]


def sweep(dataset, cfg, split_cfg, settings, embed_dim=128, normalize_deltas=True) -> pd.DataFrame:
    """
    One full train + test evaluation per setting.

    A ``train_frac`` setting uses the protocol layout for ``cfg.task``
    (next 10 % validation and test for interactions, 20 % for state
    changes); an ``embed_dim`` setting keeps ``split_cfg``.

    Args:
        dataset: Parsed Dataset
        cfg: TrainConfig
        split_cfg: SplitConfig for embed_dim settings
        settings: Output of sweep_settings()
        embed_dim: Embedding size for train_frac settings
        normalize_deltas: Scale deltas by the training mean

    Returns:
        DataFrame with setting, value, best_epoch and the metrics columns
    """
    from interlace.ingest import experiment_split
    from interlace.trainer import run_experiment

    rows = []
    for setting in settings:
        (name, value), = setting.items()
        if name == 'train_frac':
            run_split, run_dim = experiment_split(value, cfg.task), embed_dim
        else:
            run_split, run_dim = split_cfg, int(value)
        logger.info(f"Sweep run {name}={value}")
        result, report, _, _ = run_experiment(
            dataset, cfg, run_split, embed_dim=run_dim, normalize_deltas=normalize_deltas
        )
        row = {'setting': name, 'value': value, 'best_epoch': result.best_epoch}
        row.update(report.as_row())
        rows.append(row)

    if not rows:
        logger.warning('Sweep ran no settings')
    return pd.DataFrame(
        rows, columns=['setting', 'value', 'best_epoch', *METRIC_COLUMNS]
    )
