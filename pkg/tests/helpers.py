"""Shared data builders for the test modules."""

import numpy as np

from bayhem.gp import LevelData
from bayhem.multilevel import MultiLevelData


def grid_design_levels(rng, sizes, p, per_axis):
    """
    Disjoint random subsets of a regular grid, one per level.

    Grid spacing keeps covariance matrices well conditioned for lengthscales
    up to about 1.5 grid steps.
    """
    axes = [np.linspace(0.0, 1.0, per_axis)] * p
    grid = np.column_stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")])
    picks = rng.choice(len(grid), size=sum(sizes), replace=False)
    designs = []
    start = 0
    for n in sizes:
        designs.append(grid[picks[start:start + n]])
        start += n
    return designs


def make_levels(designs, functions):
    return MultiLevelData(tuple(
        LevelData(X, fn(X), level_index=i + 1) for i, (X, fn) in enumerate(zip(designs, functions))
    ))


def smooth_l1(X):
    X = np.atleast_2d(X)
    return np.sin(2 * np.pi * X[:, 0]) + 0.5 * X.sum(axis=1)


def smooth_l2(X):
    X = np.atleast_2d(X)
    return smooth_l1(X) + 0.3 * np.cos(3 * X[:, 0])
