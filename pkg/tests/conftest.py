"""Shared test fixtures and small-instance builders."""

from __future__ import annotations

import numpy as np

from fedunroll.datagen import DataShard
from fedunroll.math_core import design_matrix
from fedunroll.unrolled_net import LearnableParams, init_params


def make_shards(M=3, k=4, n=20, n_test=8, seed=0, noise=0.1):
    """Random polynomial shards built directly (no benchmark coupling)."""
    rng = np.random.default_rng(seed)
    shards = []
    for i in range(M):
        coeffs = rng.uniform(-1.0, 1.0, k)
        X = design_matrix(rng.uniform(-1.0, 1.0, n), k - 1)
        Y = X @ coeffs
        if noise:
            Y = Y + rng.normal(0.0, noise, n)
        Xt = design_matrix(rng.uniform(-1.0, 1.0, n_test), k - 1)
        shards.append(
            DataShard(
                client_id=i + 1,
                X_train=X,
                Y_train=Y,
                X_test=Xt,
                Y_test=Xt @ coeffs,
                gt_coeffs=coeffs,
            )
        )
    return shards


def random_params(M, k, L, rng, tied=False) -> LearnableParams:
    """Parameters jittered away from defaults but clear of the
    rectifier/clamp kinks, so finite differences stay valid."""
    params = init_params(M, k, L, tied=tied)
    params.lam_raw += rng.uniform(-0.6, 0.8, params.lam_raw.shape)
    params.rho_raw += rng.uniform(-0.5, 0.9, params.rho_raw.shape)
    params.p += rng.uniform(-0.02, 0.06, params.p.shape)
    params.gam_raw += rng.uniform(-0.5, 0.9, params.gam_raw.shape)
    return params
