"""
Coupled Embedding Model
Parameters, embedding bank and the update / project / predict operations
with their losses, in per-interaction and per-batch form, plus the text
checkpoint format.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from interlace.errors import CheckpointError, ConfigError, EntityError, ShapeError
from interlace.numcore import (
    LinearLayer,
    RnnCell,
    check_finite,
    l2_dist,
    l2_dist_backward,
    linear_forward,
    rnn_backward,
    rnn_forward,
    sigmoid,
)

logger = logging.getLogger(__name__)

PREV_ITEM_VIEWS = ('snapshot', 'current')

PARAM_NAMES = (
    'rnn_u.W_state', 'rnn_u.W_input', 'rnn_u.b',
    'rnn_i.W_state', 'rnn_i.W_input', 'rnn_i.b',
    'proj_w',
    'theta.W', 'theta.b',
    'state_head.W', 'state_head.b',
    'init_user', 'init_item',
)


@dataclass(frozen=True)
class ModelDims:
    """
    Model dimensions.

    Attributes:
        num_users: Users (static user dimension d_u)
        num_items: Real items; the static item dimension d_i adds the
            padding item
        feature_dim: Interaction feature length F
        n: Dynamic user dimension
        m: Dynamic item dimension
    """
    num_users: int
    num_items: int
    feature_dim: int = 0
    n: int = 128
    m: int = 128

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ConfigError(f"embedding dimensions must be >= 1, got n={self.n}, m={self.m}")
        if self.num_users < 0 or self.num_items < 0 or self.feature_dim < 0:
            raise ConfigError('entity and feature counts must be non-negative')

    @property
    def d_u(self):
        return self.num_users

    @property
    def d_i(self):
        return self.num_items + 1

    @property
    def sentinel_item(self):
        return self.num_items

    @property
    def theta_in(self):
        return self.n + self.d_u + self.m + self.d_i

    @property
    def theta_out(self):
        return self.m + self.d_i


@dataclass
class ModelParams:
    """
    Every trainable tensor plus the loss scales.

    Attributes:
        dims: ModelDims
        rnn_u: User update cell, input [i(t-), f, delta_u]
        rnn_i: Item update cell, input [u(t-), f, delta_i]
        proj_w: Bias-free map delta -> time-context vector
        theta: Item-embedding predictor over
            [u_hat, onehot(u), k_dyn, onehot(k)] -> [static (d_i), dynamic (m)]
        state_head: (1 x n) state-change logit
        init_user, init_item: Shared initial dynamic embeddings
        lambda_u, lambda_i, lambda_s: Loss scales
        squared_loss: Use squared distances instead of norms
        prev_item_view: 'snapshot' or 'current' (see read_bank)
    """
    dims: ModelDims
    rnn_u: RnnCell
    rnn_i: RnnCell
    proj_w: np.ndarray
    theta: LinearLayer
    state_head: LinearLayer
    init_user: np.ndarray
    init_item: np.ndarray
    lambda_u: float = 1.0
    lambda_i: float = 1.0
    lambda_s: float = 1.0
    squared_loss: bool = False
    prev_item_view: str = 'snapshot'

    def __post_init__(self):
        if self.prev_item_view not in PREV_ITEM_VIEWS:
            raise ConfigError(f"prev_item_view must be one of {PREV_ITEM_VIEWS}")

    @classmethod
    def initialize(cls, dims: ModelDims, seed=0, sigma=0.1, **options):
        """
        Fresh parameters.

        Gaussian(0, sigma) for the cells, the projection vector and the
        state head; fan-in scaled uniform for theta; zero initial embeddings.

        Args:
            dims: ModelDims
            seed: Seed or numpy Generator
            sigma: Gaussian standard deviation
            **options: lambda_u, lambda_i, lambda_s, squared_loss, prev_item_view
        """
        rng = np.random.default_rng(seed)
        n, m, f = dims.n, dims.m, dims.feature_dim
        return cls(
            dims=dims,
            rnn_u=RnnCell.gaussian(n, m + f + 1, rng, sigma),
            rnn_i=RnnCell.gaussian(m, n + f + 1, rng, sigma),
            proj_w=rng.normal(0.0, sigma, size=n),
            theta=LinearLayer.xavier(dims.theta_out, dims.theta_in, rng),
            state_head=LinearLayer.gaussian(1, n, rng, sigma),
            init_user=np.zeros(n),
            init_item=np.zeros(m),
            **options,
        )

    def tensors(self):
        """Parameter name -> array (live references, in PARAM_NAMES order)."""
        return {
            'rnn_u.W_state': self.rnn_u.W_state,
            'rnn_u.W_input': self.rnn_u.W_input,
            'rnn_u.b': self.rnn_u.b,
            'rnn_i.W_state': self.rnn_i.W_state,
            'rnn_i.W_input': self.rnn_i.W_input,
            'rnn_i.b': self.rnn_i.b,
            'proj_w': self.proj_w,
            'theta.W': self.theta.W,
            'theta.b': self.theta.b,
            'state_head.W': self.state_head.W,
            'state_head.b': self.state_head.b,
            'init_user': self.init_user,
            'init_item': self.init_item,
        }

    def zero_grads(self):
        return {name: np.zeros_like(array) for name, array in self.tensors().items()}

    def copy(self):
        return replace(
            self,
            rnn_u=RnnCell(self.rnn_u.W_state.copy(), self.rnn_u.W_input.copy(), self.rnn_u.b.copy()),
            rnn_i=RnnCell(self.rnn_i.W_state.copy(), self.rnn_i.W_input.copy(), self.rnn_i.b.copy()),
            proj_w=self.proj_w.copy(),
            theta=LinearLayer(self.theta.W.copy(), self.theta.b.copy()),
            state_head=LinearLayer(self.state_head.W.copy(), self.state_head.b.copy()),
            init_user=self.init_user.copy(),
            init_item=self.init_item.copy(),
        )


def param_tensors(params: ModelParams):
    return params.tensors()


@dataclass
class EmbeddingBank:
    """
    Dynamic embeddings of every entity.

    Static embeddings are implicit one-hot vectors addressed by id.

    Attributes:
        dyn_user: (num_users, n)
        dyn_item: (num_items + 1, m); the last row is the padding item
        prev_item_dyn: (num_users, m) item embedding right after each
            user's latest interaction
        last_user_time, last_item_time: Time of the latest update (NaN
            before the first)
        user_version, item_version: Interaction counts so far
    """
    dyn_user: np.ndarray
    dyn_item: np.ndarray
    prev_item_dyn: np.ndarray
    last_user_time: np.ndarray = field(default=None)
    last_item_time: np.ndarray = field(default=None)
    user_version: np.ndarray = field(default=None)
    item_version: np.ndarray = field(default=None)

    @classmethod
    def fresh(cls, params: ModelParams):
        """Every row set to the shared initial vectors."""
        dims = params.dims
        return cls(
            dyn_user=np.tile(params.init_user, (dims.num_users, 1)),
            dyn_item=np.tile(params.init_item, (dims.d_i, 1)),
            prev_item_dyn=np.tile(params.init_item, (dims.num_users, 1)),
            last_user_time=np.full(dims.num_users, np.nan),
            last_item_time=np.full(dims.d_i, np.nan),
            user_version=np.zeros(dims.num_users, dtype=np.int64),
            item_version=np.zeros(dims.d_i, dtype=np.int64),
        )

    def reset(self, params: ModelParams):
        """Return every row to the (current) initial vectors, in place."""
        self.dyn_user[...] = params.init_user
        self.dyn_item[...] = params.init_item
        self.prev_item_dyn[...] = params.init_item
        self.last_user_time[...] = np.nan
        self.last_item_time[...] = np.nan
        self.user_version[...] = 0
        self.item_version[...] = 0

    def refresh_unseen(self, params: ModelParams):
        """Re-seed rows that have not been written yet with the current initial vectors."""
        users = self.user_version == 0
        items = self.item_version == 0
        self.dyn_user[users] = params.init_user
        self.prev_item_dyn[users] = params.init_item
        self.dyn_item[items] = params.init_item

    def copy(self):
        return EmbeddingBank(
            dyn_user=self.dyn_user.copy(),
            dyn_item=self.dyn_item.copy(),
            prev_item_dyn=self.prev_item_dyn.copy(),
            last_user_time=self.last_user_time.copy(),
            last_item_time=self.last_item_time.copy(),
            user_version=self.user_version.copy(),
            item_version=self.item_version.copy(),
        )

    def write(self, users, items, u_new, i_new, timestamps=None):
        """Store post-interaction embeddings; users and items must be distinct."""
        self.dyn_user[users] = u_new
        self.dyn_item[items] = i_new
        self.prev_item_dyn[users] = i_new
        self.user_version[users] += 1
        self.item_version[items] += 1
        if timestamps is not None:
            self.last_user_time[users] = timestamps
            self.last_item_time[items] = timestamps


def read_bank(params: ModelParams, bank: EmbeddingBank, users, items, prev_items):
    """
    Bank reads for a set of interactions.

    The previous-item view fed to theta is either the snapshot taken right
    after the user's last interaction ('snapshot') or that item's live row
    ('current'). Only 'snapshot' gives the same reads under every valid
    batch plan; 'current' sees whatever the item's row holds when the batch
    runs, so its results depend on the plan.

    Returns:
        (u_prev, i_prev, k_dyn)
    """
    u_prev = bank.dyn_user[users]
    i_prev = bank.dyn_item[items]
    if params.prev_item_view == 'snapshot':
        k_dyn = bank.prev_item_dyn[users]
    else:
        k_dyn = bank.dyn_item[prev_items]
    return u_prev, i_prev, k_dyn


# ==================================================================
# PER-INTERACTION OPERATIONS
# ==================================================================
def _rnn_input(other, features, delta):
    delta = np.asarray(delta, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if other.ndim == 1:
        return np.concatenate([other, features.reshape(-1), delta.reshape(1)])
    features = features.reshape(len(other), features.size // max(len(other), 1))
    return np.concatenate([other, features, delta.reshape(-1, 1)], axis=1)


def update_user(params: ModelParams, u_prev, i_prev, delta_u, f):
    """u(t) = RNN_U(u(t-), [i(t-), f, delta_u])."""
    return rnn_forward(params.rnn_u, u_prev, _rnn_input(i_prev, f, delta_u))


def update_item(params: ModelParams, i_prev, u_prev, delta_i, f):
    """i(t) = RNN_I(i(t-), [u(t-), f, delta_i])."""
    return rnn_forward(params.rnn_i, i_prev, _rnn_input(u_prev, f, delta_i))


def project_user(params: ModelParams, u, delta):
    """
    Projected embedding (1 + w) * u with w = proj_w * delta.

    Identity at delta = 0 because the context map has no bias.
    """
    delta = np.asarray(delta, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u.ndim > 1:
        delta = delta.reshape(-1, 1)
    return (1.0 + params.proj_w * delta) * u


def _check_ids(ids, limit, what):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= limit):
        raise EntityError(f"{what} id out of range [0, {limit})")


def predict_item(params: ModelParams, u_hat, user_id, prev_item_dyn, prev_item_id):
    """
    Predicted item embedding [static (d_i), dynamic (m)].

    theta acts on [u_hat, onehot(user), prev_item_dyn, onehot(prev_item)];
    the one-hot blocks are realised by selecting theta's columns.

    Raises:
        EntityError: if an id is out of range (the padding item is allowed)
    """
    dims = params.dims
    _check_ids(user_id, dims.d_u, 'user')
    _check_ids(prev_item_id, dims.d_i, 'item')
    n, d_u, m = dims.n, dims.d_u, dims.m
    W = params.theta.W
    user_col = W[:, n + np.asarray(user_id)].T
    item_col = W[:, n + d_u + m + np.asarray(prev_item_id)].T
    pred = (
        np.asarray(u_hat) @ W[:, :n].T
        + user_col
        + np.asarray(prev_item_dyn) @ W[:, n + d_u:n + d_u + m].T
        + item_col
        + params.theta.b
    )
    return check_finite('predict_item', pred)


def item_target(dims: ModelDims, item_id, item_dyn):
    """[onehot(item), item_dyn] for one item or a batch of items."""
    item_id = np.asarray(item_id)
    item_dyn = np.asarray(item_dyn, dtype=np.float64)
    static = np.zeros(item_id.shape + (dims.d_i,))
    if item_id.ndim == 0:
        static[item_id] = 1.0
    else:
        static[np.arange(len(item_id)), item_id] = 1.0
    return np.concatenate([static, item_dyn], axis=-1)


def item_distances(pred, bank: EmbeddingBank, dims: ModelDims):
    """
    Distance from one predicted embedding to every real item's
    [onehot(j), j_dyn] (padding item excluded).
    """
    d_i = dims.d_i
    static = pred[:d_i]
    dynamic = pred[d_i:]
    count = dims.num_items
    # ||s - e_j||^2 = ||s||^2 - 2 s_j + 1
    static_sq = static @ static - 2.0 * static[:count] + 1.0
    diff = bank.dyn_item[:count] - dynamic
    dynamic_sq = np.einsum('ij,ij->i', diff, diff)
    return np.sqrt(np.maximum(static_sq + dynamic_sq, 0.0))


def nearest_item(pred, bank: EmbeddingBank, params: ModelParams, true_item=None):
    """
    All real items ranked by ascending distance to the prediction.

    Ties are ordered by id, except that ``true_item`` is placed last among
    the items it ties with.

    Returns:
        int array of item ids, best first
    """
    dist = item_distances(pred, bank, params.dims)
    ids = np.arange(len(dist))
    is_truth = ids == true_item if true_item is not None else np.zeros(len(dist), bool)
    return np.lexsort((ids, is_truth, dist))


def rank_of(pred, bank: EmbeddingBank, params: ModelParams, true_item):
    """1-based pessimistic rank of ``true_item`` (equal to nearest_item's position)."""
    dist = item_distances(pred, bank, params.dims)
    target = dist[true_item]
    return int(np.count_nonzero(dist <= target))


def _distance(params, a, b):
    d = l2_dist(a, b)
    return d * d if params.squared_loss else d


def interaction_loss(params: ModelParams, pred, true_item_id, u_after, u_before, j_after, j_before):
    """
    ||pred - [onehot(j), j(t-)]|| + lambda_u ||u(t) - u(t-)|| + lambda_i ||j(t) - j(t-)||.

    Norms, or squared norms when ``params.squared_loss``.
    """
    target = item_target(params.dims, true_item_id, j_before)
    return float(
        _distance(params, pred, target)
        + params.lambda_u * _distance(params, u_after, u_before)
        + params.lambda_i * _distance(params, j_after, j_before)
    )


def state_change_loss(params: ModelParams, u_after, label):
    """Binary cross-entropy of sigmoid(state_head(u_after)) against ``label``."""
    z = linear_forward(params.state_head, np.asarray(u_after))[..., 0]
    loss = np.logaddexp(0.0, z) - label * z
    return float(loss) if np.ndim(loss) == 0 else loss


def state_score(params: ModelParams, u_after):
    """Probability of a state change given the post-interaction embedding."""
    return sigmoid(linear_forward(params.state_head, np.asarray(u_after))[..., 0])


# ==================================================================
# BATCHED STEP (forward and backward)
# ==================================================================
class StepLosses(NamedTuple):
    """Per-row loss components; drift and state terms already scaled."""
    prediction: np.ndarray
    drift_u: np.ndarray
    drift_i: np.ndarray
    state: np.ndarray

    @property
    def total(self):
        return self.prediction + self.drift_u + self.drift_i + self.state


@dataclass
class StepCache:
    users: np.ndarray
    items: np.ndarray
    prev_items: np.ndarray
    delta_u: np.ndarray
    labels: np.ndarray
    u_prev: np.ndarray
    i_prev: np.ndarray
    k_dyn: np.ndarray
    u_hat: np.ndarray
    pred: np.ndarray
    target: np.ndarray
    pred_dist: np.ndarray
    inp_u: np.ndarray
    inp_i: np.ndarray
    u_new: np.ndarray
    i_new: np.ndarray
    drift_u_dist: np.ndarray
    drift_i_dist: np.ndarray
    logits: np.ndarray


def forward_step(params: ModelParams, u_prev, i_prev, k_dyn, users, items, prev_items,
                 delta_u, delta_i, features, labels, with_state=True):
    """
    Project, predict, score and update a set of independent interactions.

    Rows must have distinct users and distinct items.

    Args:
        params: ModelParams
        u_prev, i_prev, k_dyn: Bank reads (see read_bank), one row each
        users, items, prev_items: Id columns
        delta_u, delta_i: Scaled elapsed times
        features: (B, F)
        labels: (B,) state labels
        with_state: Include the state-change term

    Returns:
        (u_new, i_new, StepLosses, StepCache)
    """
    dims = params.dims
    b = len(users)
    if u_prev.shape != (b, dims.n) or i_prev.shape != (b, dims.m) or k_dyn.shape != (b, dims.m):
        raise ShapeError('forward_step: bank reads do not match the batch')

    u_hat = project_user(params, u_prev, delta_u)
    pred = predict_item(params, u_hat, users, k_dyn, prev_items)
    target = item_target(dims, items, i_prev)
    pred_dist = l2_dist(pred, target)

    inp_u = _rnn_input(i_prev, features, delta_u)
    inp_i = _rnn_input(u_prev, features, delta_i)
    u_new = rnn_forward(params.rnn_u, u_prev, inp_u)
    i_new = rnn_forward(params.rnn_i, i_prev, inp_i)
    drift_u_dist = l2_dist(u_new, u_prev)
    drift_i_dist = l2_dist(i_new, i_prev)

    if params.squared_loss:
        prediction = pred_dist ** 2
        drift_u = params.lambda_u * drift_u_dist ** 2
        drift_i = params.lambda_i * drift_i_dist ** 2
    else:
        prediction = pred_dist
        drift_u = params.lambda_u * drift_u_dist
        drift_i = params.lambda_i * drift_i_dist

    logits = linear_forward(params.state_head, u_new)[:, 0]
    if with_state and params.lambda_s:
        state = params.lambda_s * (np.logaddexp(0.0, logits) - labels * logits)
    else:
        state = np.zeros(b)

    cache = StepCache(
        users=users, items=items, prev_items=prev_items, delta_u=np.asarray(delta_u),
        labels=np.asarray(labels), u_prev=u_prev, i_prev=i_prev, k_dyn=k_dyn,
        u_hat=u_hat, pred=pred, target=target, pred_dist=pred_dist,
        inp_u=inp_u, inp_i=inp_i, u_new=u_new, i_new=i_new,
        drift_u_dist=drift_u_dist, drift_i_dist=drift_i_dist, logits=logits,
    )
    losses = StepLosses(prediction, drift_u, drift_i, state)
    return u_new, i_new, losses, cache


def _distance_grad(params, a, b, dist):
    """d(dist or dist^2)/da per row."""
    if params.squared_loss:
        return 2.0 * (a - b)
    return l2_dist_backward(a, b, dist)


def backward_step(params: ModelParams, cache: StepCache, grad_u_new, grad_i_new, grads,
                  with_state=True):
    """
    Backpropagate the summed step loss plus upstream embedding gradients.

    Args:
        params: ModelParams used in forward_step
        cache: StepCache from forward_step
        grad_u_new, grad_i_new: Upstream dL/du(t), dL/di(t) (B rows)
        grads: Parameter-name -> gradient accumulator (updated in place)
        with_state: Must match forward_step

    Returns:
        (grad_u_prev, grad_i_prev, grad_k_dyn)
    """
    dims = params.dims
    n, d_u, m, d_i = dims.n, dims.d_u, dims.m, dims.d_i
    c = cache

    g_u_new = np.array(grad_u_new, dtype=np.float64, copy=True)
    g_i_new = np.array(grad_i_new, dtype=np.float64, copy=True)

    # Prediction term
    g_pred = _distance_grad(params, c.pred, c.target, c.pred_dist)
    g_i_prev = -g_pred[:, d_i:]

    W = params.theta.W
    gW = grads['theta.W']
    gW[:, :n] += g_pred.T @ c.u_hat
    gW[:, n + d_u:n + d_u + m] += g_pred.T @ c.k_dyn
    gW_T = gW.T
    np.add.at(gW_T, n + c.users, g_pred)
    np.add.at(gW_T, n + d_u + m + c.prev_items, g_pred)
    grads['theta.b'] += g_pred.sum(axis=0)
    g_u_hat = g_pred @ W[:, :n]
    g_k_dyn = g_pred @ W[:, n + d_u:n + d_u + m]

    # Projection
    scale = 1.0 + params.proj_w * c.delta_u.reshape(-1, 1)
    g_u_prev = g_u_hat * scale
    grads['proj_w'] += np.sum(g_u_hat * c.u_prev * c.delta_u.reshape(-1, 1), axis=0)

    # Drift terms
    g_drift_u = params.lambda_u * _distance_grad(params, c.u_new, c.u_prev, c.drift_u_dist)
    g_u_new += g_drift_u
    g_u_prev -= g_drift_u
    g_drift_i = params.lambda_i * _distance_grad(params, c.i_new, c.i_prev, c.drift_i_dist)
    g_i_new += g_drift_i
    g_i_prev -= g_drift_i

    # State-change head
    if with_state and params.lambda_s:
        g_logit = params.lambda_s * (sigmoid(c.logits) - c.labels)
        g_logit = g_logit.reshape(-1, 1)
        grads['state_head.W'] += g_logit.T @ c.u_new
        grads['state_head.b'] += g_logit.sum(axis=0)
        g_u_new += g_logit @ params.state_head.W

    # Update cells
    ru = rnn_backward(params.rnn_u, c.u_prev, c.inp_u, g_u_new, c.u_new)
    grads['rnn_u.W_state'] += ru.W_state
    grads['rnn_u.W_input'] += ru.W_input
    grads['rnn_u.b'] += ru.b
    g_u_prev += ru.state
    g_i_prev += ru.input[:, :m]

    ri = rnn_backward(params.rnn_i, c.i_prev, c.inp_i, g_i_new, c.i_new)
    grads['rnn_i.W_state'] += ri.W_state
    grads['rnn_i.W_input'] += ri.W_input
    grads['rnn_i.b'] += ri.b
    g_i_prev += ri.state
    g_u_prev += ri.input[:, :n]

    return g_u_prev, g_i_prev, g_k_dyn


def apply_batch(params: ModelParams, bank: EmbeddingBank, arrays, rows, with_state=True):
    """
    Read the bank, run forward_step on ``rows`` and write the results back.

    Args:
        params: ModelParams
        bank: EmbeddingBank (updated in place)
        arrays: InteractionArrays
        rows: Seq indices of one batch (distinct users and items)
        with_state: Include the state-change term

    Returns:
        (StepLosses, StepCache)
    """
    rows = np.asarray(rows, dtype=np.int64)
    users = arrays.users[rows]
    items = arrays.items[rows]
    prev_items = arrays.prev_items[rows]
    u_prev, i_prev, k_dyn = read_bank(params, bank, users, items, prev_items)
    u_new, i_new, losses, cache = forward_step(
        params, u_prev, i_prev, k_dyn, users, items, prev_items,
        arrays.delta_u[rows], arrays.delta_i[rows], arrays.features[rows],
        arrays.labels[rows], with_state=with_state,
    )
    bank.write(users, items, u_new, i_new, arrays.timestamps[rows])
    return losses, cache


# ==================================================================
# CHECKPOINTS
# ==================================================================
CHECKPOINT_FILE = 'checkpoint.txt'
_CHECKPOINT_MAGIC = '# interlace checkpoint v1'


def _write_array(handle, name, array):
    array = np.atleast_2d(np.asarray(array, dtype=np.float64))
    handle.write(f"[{name} {array.shape[0]} {array.shape[1]}]\n")
    for row in array:
        handle.write(' '.join('%.17g' % value for value in row) + '\n')


def save_checkpoint(directory, params: ModelParams, bank: Optional[EmbeddingBank] = None,
                    delta_scale=1.0, extra=None):
    """
    Write parameters (and optionally the bank) as a text checkpoint.

    Layout: a magic line, ``key=value`` header lines, then blocks
    ``[name rows cols]`` followed by rows of 17-significant-digit floats.

    Args:
        directory: Target directory (created if missing)
        params: ModelParams
        bank: EmbeddingBank to store alongside, or None
        delta_scale: Divisor applied to raw deltas
        extra: Additional header entries

    Returns:
        Path of the written file
    """
    os.makedirs(directory, exist_ok=True)
    dims = params.dims
    header = {
        'num_users': dims.num_users,
        'num_items': dims.num_items,
        'feature_dim': dims.feature_dim,
        'n': dims.n,
        'm': dims.m,
        'lambda_u': '%.17g' % params.lambda_u,
        'lambda_i': '%.17g' % params.lambda_i,
        'lambda_s': '%.17g' % params.lambda_s,
        'squared_loss': int(params.squared_loss),
        'prev_item_view': params.prev_item_view,
        'delta_scale': '%.17g' % delta_scale,
    }
    header.update(extra or {})

    path = os.path.join(directory, CHECKPOINT_FILE)
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(_CHECKPOINT_MAGIC + '\n')
        for key, value in header.items():
            handle.write(f"{key}={value}\n")
        for name, array in param_tensors(params).items():
            _write_array(handle, name, array)
        if bank is not None:
            _write_array(handle, 'bank.dyn_user', bank.dyn_user)
            _write_array(handle, 'bank.dyn_item', bank.dyn_item)
            _write_array(handle, 'bank.prev_item_dyn', bank.prev_item_dyn)
            _write_array(handle, 'bank.user_version', bank.user_version)
            _write_array(handle, 'bank.item_version', bank.item_version)
    logger.info(f"Checkpoint written to {path}")
    return path


def _read_blocks(path):
    header, arrays = {}, {}
    with open(path, 'r', encoding='utf-8') as handle:
        lines = handle.read().split('\n')
    if not lines or lines[0] != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an interlace checkpoint")

    pos = 1
    while pos < len(lines):
        line = lines[pos]
        pos += 1
        if not line:
            continue
        if line.startswith('['):
            try:
                name, rows, cols = line.strip('[]').split()
                rows, cols = int(rows), int(cols)
            except ValueError:
                raise CheckpointError(f"corrupt block header {line!r}") from None
            try:
                block = np.array(
                    [[float(v) for v in lines[pos + r].split()] for r in range(rows)],
                    dtype=np.float64,
                ).reshape(rows, cols)
            except (IndexError, ValueError) as exc:
                raise CheckpointError(f"corrupt array block {name}: {exc}") from None
            arrays[name] = block
            pos += rows
        else:
            key, _, value = line.partition('=')
            header[key] = value
    return header, arrays


def load_checkpoint(directory):
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (ModelParams, EmbeddingBank or None, header dict)

    Raises:
        CheckpointError: when the file is missing or inconsistent
    """
    path = os.path.join(directory, CHECKPOINT_FILE)
    if not os.path.exists(path):
        raise CheckpointError(f"no checkpoint at {path}")
    header, arrays = _read_blocks(path)

    try:
        dims = ModelDims(
            num_users=int(header['num_users']),
            num_items=int(header['num_items']),
            feature_dim=int(header['feature_dim']),
            n=int(header['n']),
            m=int(header['m']),
        )
        params = ModelParams.initialize(
            dims,
            lambda_u=float(header['lambda_u']),
            lambda_i=float(header['lambda_i']),
            lambda_s=float(header['lambda_s']),
            squared_loss=header['squared_loss'] == '1',
            prev_item_view=header['prev_item_view'],
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint header lacks {exc}") from None
    except (ValueError, ConfigError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None

    for name, target in param_tensors(params).items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks array {name}")
        block = arrays[name]
        if block.size != target.size:
            raise CheckpointError(f"{name}: expected {target.shape}, got {block.shape}")
        target[...] = block.reshape(target.shape)

    bank = None
    if 'bank.dyn_user' in arrays:
        bank = EmbeddingBank.fresh(params)
        bank.dyn_user[...] = arrays['bank.dyn_user']
        bank.dyn_item[...] = arrays['bank.dyn_item']
        bank.prev_item_dyn[...] = arrays['bank.prev_item_dyn']
        bank.user_version[...] = arrays['bank.user_version'].reshape(-1)
        bank.item_version[...] = arrays['bank.item_version'].reshape(-1)
    return params, bank, header
