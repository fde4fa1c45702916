"""
Interaction Stream Ingestion
Parses, validates, orders and splits timestamped user-item interaction
streams, and derives the elapsed-time annotations the model consumes.
"""
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from interlace.errors import ConfigError, IngestError, SplitError

logger = logging.getLogger(__name__)

HEADER = ('user_id', 'item_id', 'timestamp', 'state_label')
CANONICAL_HEADER = 'user_id,item_id,timestamp,state_label,comma_separated_list_of_features'

# floor(frac * n) guard against 0.29 * 100 == 28.999999999999996
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class Interaction:
    """
    One user-item event.

    Attributes:
        seq_index: 0-based position in time order
        user_id: Dense user id
        item_id: Dense item id
        timestamp: Seconds
        features: Fixed-length feature tuple (may be empty)
        state_label: 1 when this is the user's final interaction before a
            state change, 0 otherwise, None when unlabelled
    """
    seq_index: int
    user_id: int
    item_id: int
    timestamp: float
    features: Tuple[float, ...] = ()
    state_label: Optional[int] = None


@dataclass
class Dataset:
    """
    Time-ordered interactions with contiguous dense ids.

    Attributes:
        interactions: Interactions sorted by (timestamp, original order)
        num_users: Number of distinct users
        num_items: Number of distinct items (the padding item is extra)
        feature_dim: Length of every feature vector
        user_ids: Dense user id -> external id
        item_ids: Dense item id -> external id
    """
    interactions: List[Interaction]
    num_users: int
    num_items: int
    feature_dim: int
    user_ids: List[str] = field(default_factory=list)
    item_ids: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.interactions)

    @property
    def sentinel_item(self):
        """Dense id of the padding item used before a user's first interaction."""
        return self.num_items

    @property
    def user_index(self):
        return {external: dense for dense, external in enumerate(self.user_ids)}

    @property
    def item_index(self):
        return {external: dense for dense, external in enumerate(self.item_ids)}

    @property
    def has_labels(self):
        return any(inter.state_label is not None for inter in self.interactions)

    @classmethod
    def from_records(cls, records, feature_dim=None):
        """
        Build a dataset from raw (user, item, timestamp, label, features) records.

        Records are stably sorted by timestamp, so equal timestamps keep
        their given order. Dense ids follow first appearance in that order.

        Args:
            records: Iterable of (user, item, timestamp, label, features)
            feature_dim: Expected feature length; inferred from the first
                record when None

        Returns:
            Dataset
        """
        records = list(records)
        order = sorted(range(len(records)), key=lambda k: records[k][2])

        if feature_dim is None:
            feature_dim = len(records[0][4]) if records else 0

        user_dense, item_dense = {}, {}
        interactions = []
        for seq, k in enumerate(order):
            user, item, timestamp, label, features = records[k]
            features = tuple(float(x) for x in features)
            if len(features) != feature_dim:
                raise IngestError(
                    f"expected {feature_dim} features, got {len(features)}"
                )
            u = user_dense.setdefault(str(user), len(user_dense))
            i = item_dense.setdefault(str(item), len(item_dense))
            interactions.append(Interaction(
                seq_index=seq,
                user_id=u,
                item_id=i,
                timestamp=float(timestamp),
                features=features,
                state_label=None if label is None else int(label),
            ))

        return cls(
            interactions=interactions,
            num_users=len(user_dense),
            num_items=len(item_dense),
            feature_dim=feature_dim,
            user_ids=list(user_dense),
            item_ids=list(item_dense),
        )


@dataclass(frozen=True)
class DeltaAnnotation:
    """
    Elapsed-time context of one interaction.

    Attributes:
        delta_u: Seconds since the user's previous interaction (0 for first)
        delta_i: Seconds since the item's previous interaction (0 for first)
        prev_item_of_user: Item of the user's previous interaction, or the
            padding item for the first
    """
    delta_u: float
    delta_i: float
    prev_item_of_user: int


@dataclass(frozen=True)
class SplitConfig:
    """Chronological split fractions."""
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1

    def __post_init__(self):
        for name in ('train_frac', 'valid_frac', 'test_frac'):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise SplitError(f"{name} must be in (0, 1], got {value}")
        total = self.train_frac + self.valid_frac + self.test_frac
        if total > 1.0 + _FLOOR_EPS:
            raise SplitError(f"split fractions sum to {total:.6g} > 1")


@dataclass(frozen=True)
class Split:
    """Contiguous, disjoint, ordered index ranges."""
    train: range
    valid: range
    test: range


@dataclass
class InteractionArrays:
    """
    Columnar numpy view of a dataset, with deltas already scaled.

    Attributes:
        users, items, prev_items: int64 id columns
        delta_u, delta_i: Scaled elapsed times
        features: (N, F) float64
        labels: int64 state labels (unlabelled rows are 0)
        timestamps: float64 seconds
        num_users, num_items, feature_dim: Dataset counts
        scale: Divisor applied to the raw deltas
    """
    users: np.ndarray
    items: np.ndarray
    prev_items: np.ndarray
    delta_u: np.ndarray
    delta_i: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_items: int
    feature_dim: int
    scale: float = 1.0

    def __len__(self):
        return len(self.users)


# ==================================================================
# PARSING
# ==================================================================
def _parse_float(text, what, line_number):
    try:
        value = float(text)
    except ValueError:
        raise IngestError(f"{what} is not a number: {text!r}", line_number) from None
    if not math.isfinite(value):
        raise IngestError(f"{what} is not finite: {text!r}", line_number)
    return value


def parse_csv(stream) -> Dataset:
    """
    Parse an interaction CSV.

    The first line is the header
    ``user_id,item_id,timestamp,state_label,comma_separated_list_of_features``;
    every following row carries at least those four fields, then the
    feature values.

    Args:
        stream: CSV text or a text file object

    Returns:
        Dataset with dense ids and stable time-sorted interactions

    Raises:
        IngestError: on a malformed row (with its line number), an
            inconsistent feature count, a negative timestamp or a
            non-binary state label
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream, newline='')
    reader = csv.reader(stream)

    try:
        header = next(reader)
    except StopIteration:
        raise IngestError('empty file: missing header', 1) from None
    fields = tuple(name.strip() for name in header[:4])
    if fields != HEADER:
        raise IngestError(
            f"header must start with {','.join(HEADER)}, got {','.join(header[:4])!r}",
            reader.line_num,
        )

    records = []
    feature_dim = None
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < 4:
            raise IngestError(f"expected at least 4 fields, got {len(row)}", line)

        user, item = row[0].strip(), row[1].strip()
        if not user or not item:
            raise IngestError('empty user or item id', line)

        timestamp = _parse_float(row[2], 'timestamp', line)
        if timestamp < 0:
            raise IngestError(f"negative timestamp {timestamp}", line)

        label_text = row[3].strip()
        if label_text not in ('0', '1'):
            raise IngestError(f"state_label must be 0 or 1, got {label_text!r}", line)

        features = tuple(_parse_float(cell, 'feature', line) for cell in row[4:])
        if feature_dim is None:
            feature_dim = len(features)
        elif len(features) != feature_dim:
            raise IngestError(
                f"expected {feature_dim} features, got {len(features)}", line
            )

        records.append((user, item, timestamp, int(label_text), features))

    dataset = Dataset.from_records(records, feature_dim=feature_dim or 0)
    logger.debug(
        f"Parsed {len(dataset)} interactions: {dataset.num_users} users, "
        f"{dataset.num_items} items, {dataset.feature_dim} features"
    )
    return dataset


def load_csv(path) -> Dataset:
    """Read and parse an interaction CSV file (UTF-8)."""
    with open(path, 'r', encoding='utf-8', newline='') as handle:
        return parse_csv(handle)


def serialize_csv(dataset: Dataset) -> str:
    """
    Canonical writer: LF line endings, external ids, ``%.17g`` floats.

    Args:
        dataset: Dataset to write

    Returns:
        CSV text in seq order
    """
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    out.write(CANONICAL_HEADER + '\n')
    for inter in dataset.interactions:
        writer.writerow(
            [
                dataset.user_ids[inter.user_id],
                dataset.item_ids[inter.item_id],
                '%.17g' % inter.timestamp,
                inter.state_label or 0,
            ]
            + ['%.17g' % x for x in inter.features]
        )
    return out.getvalue()


# ==================================================================
# ANNOTATION
# ==================================================================
def annotate_deltas(dataset: Dataset) -> List[DeltaAnnotation]:
    """
    Elapsed-time annotations, aligned with ``dataset.interactions``.

    One pass over the stream; first occurrences get delta 0 and the
    padding item as previous item.
    """
    last_user_time = {}
    last_item_time = {}
    prev_item = {}
    sentinel = dataset.sentinel_item

    annotations = []
    for inter in dataset.interactions:
        u, i, t = inter.user_id, inter.item_id, inter.timestamp
        annotations.append(DeltaAnnotation(
            delta_u=t - last_user_time[u] if u in last_user_time else 0.0,
            delta_i=t - last_item_time[i] if i in last_item_time else 0.0,
            prev_item_of_user=prev_item.get(u, sentinel),
        ))
        last_user_time[u] = t
        last_item_time[i] = t
        prev_item[u] = i
    return annotations


def delta_scale(annotations: Sequence[DeltaAnnotation], train_range: range) -> float:
    """
    Mean of the nonzero user deltas inside the training range.

    Returns 1.0 when the training range has no nonzero delta.
    """
    values = [
        annotations[j].delta_u for j in train_range if annotations[j].delta_u > 0
    ]
    if not values:
        return 1.0
    return float(np.mean(values))


def normalize_deltas(deltas, scale: float) -> np.ndarray:
    """
    Divide every delta by ``scale``; zeros stay zero.

    Raises:
        ConfigError: if scale is not positive
    """
    if not scale > 0:
        raise ConfigError(f"delta scale must be positive, got {scale}")
    return np.asarray(deltas, dtype=np.float64) / scale


# ==================================================================
# SPLITTING
# ==================================================================
def chronological_split(dataset, cfg: SplitConfig) -> Split:
    """
    Split a stream by time into train, validation and test prefixes.

    Sizes are floor(frac * |S|); any remainder stays unassigned at the tail.

    Args:
        dataset: Dataset (or anything with a length)
        cfg: Split fractions

    Returns:
        Split of contiguous ranges

    Raises:
        SplitError: if any range would be empty
    """
    n = len(dataset)
    sizes = [
        int(math.floor(frac * n + _FLOOR_EPS))
        for frac in (cfg.train_frac, cfg.valid_frac, cfg.test_frac)
    ]
    for name, size in zip(('training', 'validation', 'test'), sizes):
        if size == 0:
            raise SplitError(f"{name} range is empty for {n} interactions")

    train_end = sizes[0]
    valid_end = train_end + sizes[1]
    test_end = valid_end + sizes[2]
    return Split(
        train=range(0, train_end),
        valid=range(train_end, valid_end),
        test=range(valid_end, test_end),
    )


def experiment_split(train_frac: float, task: str = 'interaction') -> SplitConfig:
    """
    Protocol layouts: interaction prediction validates and tests on the
    next 10 % each, state change prediction on the next 20 % each.
    """
    span = 0.2 if task == 'statechange' else 0.1
    return SplitConfig(train_frac=train_frac, valid_frac=span, test_frac=span)


# ==================================================================
# COLUMNAR VIEW AND SUMMARY
# ==================================================================
def build_arrays(dataset: Dataset, annotations=None, scale: float = 1.0) -> InteractionArrays:
    """
    Columnar arrays for the trainer and the evaluation harness.

    Args:
        dataset: Parsed dataset
        annotations: Output of annotate_deltas (computed when None)
        scale: Delta divisor (see normalize_deltas)

    Returns:
        InteractionArrays
    """
    if annotations is None:
        annotations = annotate_deltas(dataset)
    inters = dataset.interactions
    n = len(inters)

    features = np.zeros((n, dataset.feature_dim), dtype=np.float64)
    if dataset.feature_dim:
        features[:] = [inter.features for inter in inters]

    return InteractionArrays(
        users=np.fromiter((x.user_id for x in inters), dtype=np.int64, count=n),
        items=np.fromiter((x.item_id for x in inters), dtype=np.int64, count=n),
        prev_items=np.fromiter(
            (a.prev_item_of_user for a in annotations), dtype=np.int64, count=n
        ),
        delta_u=normalize_deltas([a.delta_u for a in annotations], scale),
        delta_i=normalize_deltas([a.delta_i for a in annotations], scale),
        features=features,
        labels=np.fromiter((x.state_label or 0 for x in inters), dtype=np.int64, count=n),
        timestamps=np.fromiter((x.timestamp for x in inters), dtype=np.float64, count=n),
        num_users=dataset.num_users,
        num_items=dataset.num_items,
        feature_dim=dataset.feature_dim,
        scale=float(scale),
    )


def prepare_arrays(dataset: Dataset, cfg: SplitConfig, normalize=True):
    """
    Split the stream and build its arrays, scaling deltas by the training
    mean when ``normalize`` is set.

    Returns:
        (InteractionArrays, Split)
    """
    split = chronological_split(dataset, cfg)
    annotations = annotate_deltas(dataset)
    scale = delta_scale(annotations, split.train) if normalize else 1.0
    logger.info(
        f"Split {len(dataset)} interactions into {len(split.train)}/"
        f"{len(split.valid)}/{len(split.test)}; delta scale {scale:.6g}"
    )
    return build_arrays(dataset, annotations, scale), split


def describe_dataset(dataset: Dataset) -> dict:
    """
    Summary counts, including how repetitive users are.

    Returns:
        dict with num_interactions, num_users, num_items, feature_dim,
        positive_labels, label_rate, repeat_rate, time_span
    """
    n = len(dataset)
    annotations = annotate_deltas(dataset)
    repeats = sum(
        1 for inter, ann in zip(dataset.interactions, annotations)
        if ann.prev_item_of_user == inter.item_id
    )
    positives = sum(1 for inter in dataset.interactions if inter.state_label == 1)
    span = (
        dataset.interactions[-1].timestamp - dataset.interactions[0].timestamp
        if n else 0.0
    )
    return {
        'num_interactions': n,
        'num_users': dataset.num_users,
        'num_items': dataset.num_items,
        'feature_dim': dataset.feature_dim,
        'positive_labels': positives,
        'label_rate': positives / n if n else 0.0,
        'repeat_rate': repeats / n if n else 0.0,
        'time_span': span,
    }
