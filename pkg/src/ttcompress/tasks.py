"""Synthetic desk-scale tasks.

* ``planted_regression``: targets come from a low-TT-rank weight plus noise.
* ``gaussian_mixture``: four well-separated Gaussian blobs, 2000 points.
* ``click_data``: binary clicks on 1000 item ids whose true embedding table
  has low TTM rank; ids follow a Zipf-like popularity law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tt import init_tt, init_ttm, tt_reconstruct, ttm_to_matrix

__all__ = ["Dataset", "click_data", "gaussian_mixture", "planted_regression"]


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    kind: str
    oracle: dict | None = None

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Shuffled mini-batches covering the training split once."""
        n = len(self.y_train)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            yield self.x_train[sel], self.y_train[sel]


def _split(x, y, n_test):
    return x[n_test:], y[n_test:], x[:n_test], y[:n_test]


def planted_regression(seed=0, in_modes=(4, 4), out_modes=(4, 4), rank=2,
                       n_train=2000, n_test=500, noise=0.3, decay=1.0) -> Dataset:
    """Regression ``y = x W + noise`` with ``W`` a TT of the given rank.

    Channel ``k`` of every bond is scaled by ``decay**k``, so ``decay < 1``
    gives channels of graded importance.  ``oracle["mse"]`` is the test MSE
    of the generating weight.
    """
    rng = np.random.default_rng(seed)
    modes = tuple(in_modes) + tuple(out_modes)
    n_in, n_out = math.prod(in_modes), math.prod(out_modes)
    t = init_tt(modes, rank, seed=rng)
    t.diags = [decay ** np.arange(g.size, dtype=float) for g in t.diags]
    w = tt_reconstruct(t).reshape(n_in, n_out)
    w *= 1.0 / math.sqrt(np.mean(w * w) * n_in)
    n = n_train + n_test
    x = rng.standard_normal((n, n_in))
    y = x @ w + noise * rng.standard_normal((n, n_out))
    xtr, ytr, xte, yte = _split(x, y, n_test)
    mse = float(np.mean((xte @ w - yte) ** 2))
    return Dataset(xtr, ytr, xte, yte, "regression", {"weight": w, "mse": mse})


def gaussian_mixture(seed=0, n=2000, dim=16, classes=4, separation=3.0, test_frac=0.25) -> Dataset:
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.integers(0, classes, n)
    x = means[labels] + rng.standard_normal((n, dim))
    return Dataset(*_split(x, labels, int(n * test_frac)), "classification")


def click_data(seed=0, row_modes=(10, 10, 10), col_modes=(2, 2, 4), rank=2,
               n=20000, n_test=5000, zipf=1.1, scale=2.0) -> Dataset:
    """Clicks ``Bernoulli(sigmoid(T[id] . u + b))`` with a low-TTM-rank ``T``."""
    rng = np.random.default_rng(seed)
    table = ttm_to_matrix(init_ttm(row_modes, col_modes, rank, seed=rng))
    table /= table.std()
    vocab, width = table.shape
    u = rng.standard_normal(width)
    u *= scale / np.linalg.norm(u)
    logits = table @ u - 0.5
    pop = 1.0 / np.arange(1, vocab + 1) ** zipf
    perm = rng.permutation(vocab)
    ids = perm[rng.choice(vocab, size=n, p=pop / pop.sum())]
    clicks = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits[ids]))).astype(float)
    return Dataset(*_split(ids, clicks, n_test), "clicks", {"logits": logits})
