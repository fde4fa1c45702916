"""
Synthetic Interaction Streams
Seeded generators for the repetitive, drift and dropout presets.
"""
import logging

import numpy as np

from interlace.errors import ConfigError
from interlace.ingest import Dataset

logger = logging.getLogger(__name__)

PRESETS = ('repetitive', 'drift', 'dropout')

# Dropping users' feature shift covers the warning window plus the final one
DROPOUT_WARNING = 5
DROPOUT_SHIFT = 3.0
DROPOUT_FEATURES = 4
# Fraction of the timeline holding a dropping user's final burst
DROPOUT_BURST = 0.05


def _check_counts(users, items, events):
    if users < 1 or items < 2:
        raise ConfigError(f"need at least 1 user and 2 items, got {users} users, {items} items")
    if events < 1:
        raise ConfigError(f"events must be >= 1, got {events}")


def _timestamps(rng, count):
    """Strictly increasing timestamps with exponential gaps of mean 1 s."""
    return np.cumsum(rng.exponential(1.0, size=count) + 1e-3)


def _as_dataset(records, feature_dim):
    return Dataset.from_records(
        [(f"u{user}", f"i{item}", t, label, features) for user, item, t, label, features in records],
        feature_dim=feature_dim,
    )


def repetitive(users=20, items=10, events=2000, seed=0) -> Dataset:
    """
    Each user alternates between a personal pair of items.

    User u owns the pair (2u mod I, 2u+1 mod I), so the next item is a
    function of (user, previous item). The first 2U events walk every user
    through both items of its pair; the rest pick users at random.

    Raises:
        ConfigError: if the pairs cannot cover every item or events < 2U
    """
    _check_counts(users, items, events)
    if 2 * users < items:
        raise ConfigError(f"{users} users cannot cover {items} items with item pairs")
    if events < 2 * users:
        raise ConfigError(f"need at least {2 * users} events for {users} users")

    rng = np.random.default_rng(seed)
    pairs = [((2 * u) % items, (2 * u + 1) % items) for u in range(users)]
    order = list(range(users)) * 2 + rng.integers(0, users, size=events - 2 * users).tolist()
    times = _timestamps(rng, events)

    step = [0] * users
    records = []
    for k, user in enumerate(order):
        item = pairs[user][step[user] % 2]
        step[user] += 1
        records.append((user, item, times[k], 0, ()))
    return _as_dataset(records, 0)


def drift(users=100, items=50, events=5000, seed=0, clusters=None, switch_prob=0.02) -> Dataset:
    """
    Users draw items from their current cluster and occasionally move on
    to the next cluster.

    Args:
        clusters: Number of item clusters (default: items // 5, at least 2)
        switch_prob: Per-event probability of moving to the next cluster

    Raises:
        ConfigError: if events < max(users, items)
    """
    _check_counts(users, items, events)
    if events < max(users, items):
        raise ConfigError(
            f"need at least {max(users, items)} events for {users} users and {items} items"
        )
    rng = np.random.default_rng(seed)
    clusters = clusters or max(2, items // 5)
    members = np.array_split(np.arange(items), clusters)
    current = rng.integers(0, clusters, size=users)
    times = _timestamps(rng, events)

    # Every user and item appears once before the random phase
    records = [(k % users, k % items, times[k], 0, ()) for k in range(max(users, items))]
    for k in range(len(records), events):
        user = int(rng.integers(0, users))
        if rng.random() < switch_prob:
            current[user] = (current[user] + 1) % clusters
        item = int(rng.choice(members[current[user]]))
        records.append((user, item, times[k], 0, ()))
    return _as_dataset(records, 0)


def dropout(users=1000, items=100, events=20000, seed=0, drop_rate=0.05,
            feature_dim=DROPOUT_FEATURES) -> Dataset:
    """
    Users with planted state changes.

    About ``drop_rate`` of the users stop at a random time in the last
    70 % of the timeline. Their final interaction carries state_label 1 and
    their features shift by a constant on that interaction and the
    DROPOUT_WARNING before it. Everyone else stays active throughout.

    Raises:
        ConfigError: if fewer events than two per user, or than items, are requested
    """
    _check_counts(users, items, events)
    if events < 2 * users:
        raise ConfigError(f"need at least {2 * users} events for {users} users")
    if events < items:
        raise ConfigError(f"need at least {items} events for {items} items")
    rng = np.random.default_rng(seed)

    horizon = float(events)
    droppers = rng.random(users) < drop_rate
    per_user = np.full(users, events // users)
    per_user[: events - per_user.sum()] += 1
    favourite = rng.integers(0, items, size=users)

    records = []
    for user in range(users):
        count = int(per_user[user])
        if droppers[user]:
            # Final interactions come in a short burst right before the drop
            end = rng.uniform(0.3, 1.0) * horizon
            burst = min(DROPOUT_WARNING + 1, count)
            times = np.concatenate([
                np.sort(rng.uniform(0.0, end - DROPOUT_BURST * horizon, size=count - burst)),
                np.sort(rng.uniform(end - DROPOUT_BURST * horizon, end, size=burst)),
            ])
        else:
            times = np.sort(rng.uniform(0.0, horizon, size=count))
        features = rng.normal(0.0, 1.0, size=(count, feature_dim))
        labels = np.zeros(count, dtype=np.int64)
        if droppers[user]:
            features[-(DROPOUT_WARNING + 1):] += DROPOUT_SHIFT
            labels[-1] = 1
        # Half the interactions go to a favourite item, the rest anywhere
        chosen = np.where(
            rng.random(count) < 0.5, favourite[user], rng.integers(0, items, size=count)
        )
        for k in range(count):
            records.append((user, int(chosen[k]), times[k], int(labels[k]), tuple(features[k])))

    # Each item owns one distinct event so every item appears
    for item, slot in enumerate(rng.choice(len(records), size=items, replace=False)):
        user, _, t, label, feats = records[slot]
        records[slot] = (user, item, t, label, feats)

    logger.debug(f"Dropout preset: {int(droppers.sum())} of {users} users drop")
    return _as_dataset(records, feature_dim)


def generate(preset, users, items, events, seed=0) -> Dataset:
    """Dispatch to a preset generator by name."""
    if preset == 'repetitive':
        return repetitive(users, items, events, seed)
    if preset == 'drift':
        return drift(users, items, events, seed)
    if preset == 'dropout':
        return dropout(users, items, events, seed)
    raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
