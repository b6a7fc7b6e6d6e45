"""Local explanations: gradient-weighted attention, Shapley values, raw gradients."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import CapacityError, ContractError
from .model import HainConfig, HainParams, forward, logit_input_gradient
from .numerics import Rng

MAX_EXACT_FEATURES = 15

METHODS = ("grad_attention", "shapley_exact", "shapley_sampled", "gradient")


@dataclass
class Explanation:
    method: str
    scores: np.ndarray
    normalized: bool
    target_class: int
    input_id: str | int | None = None
    baseline_policy: str | None = None
    seed: int | None = None
    stderr: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "target_class": int(self.target_class),
            "scores": [float(s) for s in self.scores],
            "normalized": bool(self.normalized),
            "baseline_policy": self.baseline_policy,
            "seed": self.seed,
        }
        if self.input_id is not None:
            out["input_id"] = self.input_id
        if self.stderr is not None:
            out["stderr"] = [float(s) for s in self.stderr]
        if self.meta:
            out["meta"] = self.meta
        return out


def gradient_weighted_scores(alpha, grad) -> tuple[np.ndarray, bool]:
    """``I = alpha * |g|`` scaled to unit L2 norm; a zero vector stays zero."""
    imp = nx.as_array(alpha) * np.abs(nx.as_array(grad))
    norm = np.linalg.norm(imp)
    if norm == 0.0:
        return imp, False
    return imp / norm, True


def grad_attention_explain(cfg: HainConfig, params: HainParams, x, target: int,
                           input_id=None) -> Explanation:
    """Attention weights times absolute logit gradients, L2-normalized."""
    _check_target(cfg, target)
    out, g = logit_input_gradient(cfg, params, x, target)
    scores, normalized = gradient_weighted_scores(out.trace.alpha_combined, g)
    return Explanation("grad_attention", scores, normalized, target, input_id,
                       meta={"gradient_of": "logit"})


def gradient_explain(cfg: HainConfig, params: HainParams, x, target: int,
                     input_id=None) -> Explanation:
    """Signed d logit[target] / d x, unnormalized."""
    _check_target(cfg, target)
    _, g = logit_input_gradient(cfg, params, x, target)
    return Explanation("gradient", g, False, target, input_id, meta={"gradient_of": "logit"})


def _check_target(cfg: HainConfig, target: int) -> None:
    if not 0 <= target < cfg.n_classes:
        raise ContractError(f"target class {target} out of range for {cfg.n_classes} classes")


# ---------------------------------------------------------------------------
# cooperative games
# ---------------------------------------------------------------------------

class CharacteristicFn:
    """Class-``target`` probability with features outside S set to ``baseline``.

    Called with a boolean membership mask of length ``d``. ``batch`` evaluates
    many coalitions in one forward pass.
    """

    def __init__(self, cfg: HainConfig, params: HainParams, x, baseline, target: int,
                 baseline_policy: str = "training_mean"):
        _check_target(cfg, target)
        self.cfg, self.params, self.target = cfg, params, target
        self.baseline_policy = baseline_policy
        self.x = nx.as_array(x)
        self.baseline = nx.as_array(baseline)
        self.d = self.x.size
        self.calls = 0

    def inputs(self, masks: np.ndarray) -> np.ndarray:
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        return np.where(masks, self.x, self.baseline)

    def batch(self, masks) -> np.ndarray:
        X = self.inputs(masks)
        self.calls += X.shape[0]
        return forward(self.cfg, self.params, X).probabilities[:, self.target]

    def __call__(self, mask) -> float:
        return float(self.batch(mask)[0])


def _mask_rows(d: int) -> np.ndarray:
    """Row ``s`` is the membership vector of bitmask ``s``."""
    codes = np.arange(1 << d)
    return ((codes[:, None] >> np.arange(d)) & 1).astype(bool)


def _game_table(v: Callable, d: int, batched: bool) -> np.ndarray:
    masks = _mask_rows(d)
    if batched and hasattr(v, "batch"):
        return np.asarray(v.batch(masks), dtype=np.float64)
    return np.array([v(m) for m in masks], dtype=np.float64)


def shapley_exact(v: Callable, d: int, batched: bool = False) -> Explanation:
    """Exact Shapley values by enumerating all ``2**d`` coalitions.

    ``v`` maps a boolean membership mask to a real. Each coalition is
    evaluated once (one model call each unless ``batched``).
    """
    if d > MAX_EXACT_FEATURES:
        raise CapacityError(f"exact Shapley limited to d <= {MAX_EXACT_FEATURES} "
                            f"(got {d}); use shapley_sampled")
    if d < 1:
        raise ContractError("need at least one player")
    table = _game_table(v, d, batched)
    sizes = np.array([bin(s).count("1") for s in range(1 << d)])
    # |S|! (d - |S| - 1)! / d! for coalitions S not containing the player
    weights = np.array([math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d)
                        for k in range(d)])
    codes = np.arange(1 << d)
    phi = np.zeros(d)
    for i in range(d):
        bit = 1 << i
        without = codes[(codes & bit) == 0]
        phi[i] = np.sum(weights[sizes[without]] * (table[without | bit] - table[without]))
    return Explanation("shapley_exact", phi, False, getattr(v, "target", -1),
                       baseline_policy=getattr(v, "baseline_policy", None),
                       meta={"v_empty": float(table[0]), "v_full": float(table[-1])})


def shapley_sampled(v: Callable, d: int, n_perms: int, rng: Rng) -> Explanation:
    """Mean marginal contribution over uniformly random permutations.

    If ``n_perms >= d!`` every permutation is used once instead, which
    reproduces the exact values. ``stderr`` holds per-feature standard errors.
    """
    if n_perms < 1:
        raise ContractError("n_perms must be >= 1")
    cache: dict[int, float] = {}

    def value(code: int) -> float:
        if code not in cache:
            mask = (code >> np.arange(d)) & 1
            cache[code] = float(v(mask.astype(bool)))
        return cache[code]

    exhaustive = n_perms >= math.factorial(d)
    if exhaustive:
        perms = [np.array(p) for p in itertools.permutations(range(d))]
    else:
        perms = [rng.permutation(d) for _ in range(n_perms)]
    contrib = np.zeros((len(perms), d))
    for r, perm in enumerate(perms):
        code = 0
        prev = value(0)
        for i in perm:
            code |= 1 << int(i)
            cur = value(code)
            contrib[r, i] = cur - prev
            prev = cur
    phi = contrib.mean(axis=0)
    if exhaustive or len(perms) < 2:
        stderr = np.zeros(d)
    else:
        stderr = contrib.std(axis=0, ddof=1) / math.sqrt(len(perms))
    return Explanation("shapley_sampled", phi, False, getattr(v, "target", -1),
                       baseline_policy=getattr(v, "baseline_policy", None), seed=rng.seed,
                       stderr=stderr, meta={"permutations": len(perms), "exhaustive": exhaustive})


def model_shapley(cfg: HainConfig, params: HainParams, x, target: int, baseline,
                  method: str = "exact", n_perms: int = 2000, rng: Rng | None = None,
                  input_id=None) -> Explanation:
    """Shapley attribution of the class-``target`` probability for one input."""
    v = CharacteristicFn(cfg, params, x, baseline, target)
    if method == "exact":
        exp = shapley_exact(v, cfg.d)
    elif method == "sampled":
        exp = shapley_sampled(v, cfg.d, n_perms, rng if rng is not None else Rng(0))
    else:
        raise ContractError(f"unknown Shapley method {method!r}")
    exp.target_class = target
    exp.input_id = input_id
    exp.meta["model_calls"] = v.calls
    return exp
