"""
Pytest configuration and fixtures for interlace tests.
"""
import numpy as np
import pytest

from interlace import create_runtime
from interlace.ingest import Dataset, build_arrays, parse_csv
from interlace.model import ModelDims, ModelParams
from interlace.numcore import set_debug_checks

# Example network: three users, four items, nine interactions at t1..t9
EXAMPLE_CSV = (
    "user_id,item_id,timestamp,state_label,comma_separated_list_of_features\n"
    "u1,i1,1,0\n"
    "u2,i1,2,0\n"
    "u3,i2,3,0\n"
    "u1,i2,4,0\n"
    "u2,i2,5,0\n"
    "u3,i3,6,0\n"
    "u2,i3,7,0\n"
    "u3,i4,8,0\n"
    "u2,i4,9,0\n"
)


def make_stream(seed, length, num_users, num_items, feature_dim=0, label_rate=0.0):
    """Random time-sorted Dataset; every user and item id appears at least once."""
    rng = np.random.default_rng(seed)
    users = rng.integers(0, num_users, size=length)
    items = rng.integers(0, num_items, size=length)
    head = min(length, max(num_users, num_items))
    users[:head] = np.arange(head) % num_users
    items[:head] = np.arange(head) % num_items
    times = np.cumsum(rng.exponential(1.0, size=length))
    features = rng.normal(size=(length, feature_dim))
    labels = (rng.random(length) < label_rate).astype(int)
    return Dataset.from_records(
        [
            (int(users[k]), int(items[k]), float(times[k]), int(labels[k]), tuple(features[k]))
            for k in range(length)
        ],
        feature_dim=feature_dim,
    )


@pytest.fixture(autouse=True)
def debug_checks_off():
    """Keep the global non-finite assertion switch off between tests."""
    set_debug_checks(False)
    yield
    set_debug_checks(False)


@pytest.fixture
def runtime():
    """Runtime built from the testing configuration."""
    return create_runtime('testing')


@pytest.fixture
def example_csv():
    return EXAMPLE_CSV


@pytest.fixture
def example_dataset():
    """The nine-interaction example network."""
    return parse_csv(EXAMPLE_CSV)


@pytest.fixture
def stream_factory():
    return make_stream


@pytest.fixture
def small_stream():
    """60 interactions, 4 users, 5 items, 2 features, some state labels."""
    return make_stream(seed=11, length=60, num_users=4, num_items=5, feature_dim=2, label_rate=0.2)


@pytest.fixture
def small_arrays(small_stream):
    return build_arrays(small_stream)


@pytest.fixture
def small_params(small_stream):
    """Embedding size 4 parameters for small_stream."""
    dims = ModelDims(
        num_users=small_stream.num_users,
        num_items=small_stream.num_items,
        feature_dim=small_stream.feature_dim,
        n=4,
        m=4,
    )
    return ModelParams.initialize(dims, seed=3)


@pytest.fixture
def csv_file(tmp_path, example_csv):
    path = tmp_path / 'example.csv'
    path.write_text(example_csv, encoding='utf-8')
    return path
