"""
conftest.py — Shared pytest fixtures for the minihes tests.
"""

import numpy as np
import pytest

from minihes.data import HdiDataset, parse_ratings, split_dataset, synthetic_low_rank, write_ratings
from minihes.verification import random_instance


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_data():
    """3 users, 4 items, 7 ratings; user 'c' and item 'z' have a single rating each."""
    return parse_ratings(
        "a,w,5.0\n"
        "a,x,3.0\n"
        "b,w,4.0\n"
        "b,y,1.0\n"
        "a,y,2.0\n"
        "c,x,2.5\n"
        "b,z,4.5\n"
    )


@pytest.fixture
def problem(rng):
    """Random (state, data) pair small enough for the dense oracles."""
    return random_instance(rng, 4, 5, 3, density=0.5)


@pytest.fixture
def synthetic():
    """Rank-3 synthetic ratings, 50 users x 40 items, 30% observed, noise 0.01."""
    return synthetic_low_rank(50, 40, rank=3, density=0.3, noise=0.01, seed=7)


@pytest.fixture
def synthetic_splits(synthetic):
    return split_dataset(synthetic, (0.6, 0.2, 0.2), seed=11)


@pytest.fixture
def ratings_file(tmp_path):
    data = synthetic_low_rank(20, 15, rank=3, density=0.4, noise=0.01, seed=3)
    path = tmp_path / "ratings.tsv"
    write_ratings(data, path)
    return path


@pytest.fixture
def make_dataset():
    """Factory: HdiDataset from (user, item, rating) index triples."""

    def build(triples, num_users, num_items):
        if not triples:
            return HdiDataset([], [], [], num_users, num_items)
        users, items, ratings = zip(*triples)
        return HdiDataset(list(users), list(items), list(ratings), num_users, num_items)

    return build
