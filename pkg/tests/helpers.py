"""Small builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from hain.data_io import Dataset
from hain.model import HainConfig, HainParams, forward, init_params
from hain.numerics import Rng


def tiny_config(d: int = 7, n_classes: int = 3, group_size: int = 3, seed: int = 0, **kw) -> HainConfig:
    kw.setdefault("k_embed", 4)
    kw.setdefault("d_k", 3)
    kw.setdefault("hidden", 5)
    kw.setdefault("d_embed", 4)
    return HainConfig(d=d, n_classes=n_classes, group_size=group_size, seed=seed, **kw)


def random_params(cfg: HainConfig, seed: int = 0, bias_scale: float = 0.3,
                  weight_scale: float = 1.0) -> HainParams:
    """Glorot init, rescaled, with nonzero biases so every path is exercised."""
    p = init_params(cfg, Rng(seed))
    rng = np.random.default_rng(seed + 1000)
    arrays = {}
    for name, arr in p.items():
        if name.startswith("b_"):
            arrays[name] = rng.normal(0.0, bias_scale, size=arr.shape)
        else:
            arrays[name] = arr * weight_scale
    return HainParams(arrays)


def blob_dataset(n_per: int, centers: np.ndarray, std: float, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    X = np.concatenate([c + std * rng.standard_normal((n_per, centers.shape[1])) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return Dataset(X, y, [f"f{i}" for i in range(centers.shape[1])],
                   [f"blob{c}" for c in range(len(centers))])


SHIFT = 50.0


def shifted_identity(d=4, seed=0):
    """Model whose embedding is ``x + SHIFT`` exactly (for |x| < SHIFT)."""
    cfg = tiny_config(d=d, group_size=2, d_embed=d, n_classes=3)
    p = {k: v.copy() for k, v in random_params(cfg, seed).items()}
    p["feat_emb"][:] = 0.0
    alpha = forward(cfg, HainParams(p), np.zeros(d)).trace.alpha_combined
    p["W_e"] = np.diag(1.0 / (d * alpha))
    p["b_e"] = np.full(d, SHIFT)
    return cfg, HainParams(p)
