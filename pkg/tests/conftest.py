import numpy as np
import pandas as pd
import pytest

from pipeline.MetaData import DATASET_COLUMNS, Estimate, MetaDataset, Study


def make_dataset(rows):
    """Build a MetaDataset from (study_id, variate_id, estimate, std_err) tuples."""
    return MetaDataset.from_frame(pd.DataFrame(rows, columns=DATASET_COLUMNS))


def random_dataset(rng, m, p, density=0.7):
    """Random dataset in which every study and every variate has an estimate."""
    variates = [f"v{k:02d}" for k in range(1, p + 1)]
    while True:
        mask = rng.random((m, p)) < density
        if mask.any(axis=1).all() and mask.any(axis=0).all():
            break
    studies = []
    for i in range(m):
        estimates = tuple(
            Estimate(variates[k], float(rng.normal(0.2, 0.3)), float(rng.uniform(0.05, 0.3)))
            for k in range(p) if mask[i, k]
        )
        studies.append(Study(f"s{i + 1:02d}", estimates))
    return MetaDataset(tuple(studies))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))


@pytest.fixture
def dense_dataset():
    """Four studies reporting all three variates."""
    rows = []
    values = {"a": 0.10, "b": 0.30, "c": -0.20}
    for i, shift in enumerate([0.00, 0.05, -0.04, 0.02]):
        for v, mu in values.items():
            rows.append((f"s{i + 1}", v, mu + shift, 0.1 + 0.01 * i))
    return make_dataset(rows)


@pytest.fixture
def knee_dataset():
    """Seven studies, 23 variates and 38 estimates, every variate reported at least once."""
    variates = [f"v{k:02d}" for k in range(1, 24)]
    cells = {(k % 7, k) for k in range(23)}
    k = 0
    while len(cells) < 38:
        cell = ((3 * k + 1) % 7, (5 * k + 2) % 23)
        cells.add(cell)
        k += 1
    rng = np.random.Generator(np.random.Philox(7))
    rows = [
        (f"s{i + 1}", variates[v], float(rng.normal(0.15, 0.2)), float(rng.uniform(0.04, 0.15)))
        for i, v in sorted(cells)
    ]
    return make_dataset(rows)
