"""Mini-batch training with attention-driven feature selection.

Each epoch:

1. mean hierarchical attention ``alpha`` over the training rows;
2. ``alpha_hard = gumbel_softmax(alpha, T_epoch)`` and a temporary selection
   ``{i : alpha_hard[i] > tau}``;
3. SGD over shuffled mini-batches on the full objective;
4. ``tau <- percentile(alpha, (1 - rho) * 100)`` (nearest rank).

:func:`ps_train` runs the same loop through a simulated parameter server:
logical workers own data shards and push gradients computed on snapshots
that may be up to ``max_staleness`` versions old.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .data_io import Dataset
from .errors import ContractError, TrainingError
from .model import ForwardOutput, HainConfig, HainParams, AttentionTrace, build_graph, init_params, param_tensors
from .numerics import Rng
from .objective import LossBreakdown, LossWeights, loss_terms

log = logging.getLogger(__name__)

INITIAL_TAU = 0.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    lr_decay: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    target_sparsity: float = 0.01
    temperature_start: float = 1.0
    temperature_end: float = 0.1
    temperature_decay: float | None = None
    seed: int = 0
    workers: int = 1
    max_staleness: int = 0
    beta: float = 1.0
    eval_chunk: int = 256

    def __post_init__(self):
        if not 0 < self.target_sparsity < 1:
            raise ContractError("target_sparsity must lie in (0, 1)")
        if self.temperature_start <= 0 or self.temperature_end <= 0:
            raise ContractError("temperatures must be positive")
        if self.temperature_decay is not None and self.temperature_decay <= 0:
            raise ContractError("temperature_decay must be positive")
        if self.workers < 1 or self.max_staleness < 0:
            raise ContractError("need workers >= 1 and max_staleness >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("need epochs >= 0 and batch_size >= 1")

    def temperature(self, epoch: int) -> float:
        """Geometric schedule from start to end; ``epoch`` counts from 1."""
        decay = self.temperature_decay
        if decay is None:
            steps = max(self.epochs - 1, 1)
            decay = (self.temperature_end / self.temperature_start) ** (1.0 / steps)
        t = self.temperature_start * decay ** (epoch - 1)
        lo, hi = sorted((self.temperature_start, self.temperature_end))
        return float(min(max(t, lo), hi))

    def learning_rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class SelectionState:
    tau: float
    alpha_snapshot: np.ndarray
    selected: list[int]

    def to_dict(self) -> dict:
        return {"tau": float(self.tau).hex(), "alpha": [float(a).hex() for a in self.alpha_snapshot],
                "selected": list(map(int, self.selected))}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionState":
        return cls(float.fromhex(d["tau"]), np.array([float.fromhex(a) for a in d["alpha"]]),
                   list(d["selected"]))


LOG_KEYS = ("epoch", "loss_pred", "loss_attn", "loss_sparse", "loss_consist", "loss_total",
            "val_loss_total", "val_accuracy", "tau", "n_selected", "temperature")


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    val: LossBreakdown | None
    val_accuracy: float | None
    tau: float
    n_selected: int
    temperature: float

    def to_json(self) -> str:
        values = (self.epoch, self.train.pred, self.train.attn, self.train.sparse,
                  self.train.consist, self.train.total,
                  None if self.val is None else self.val.total, self.val_accuracy,
                  self.tau, self.n_selected, self.temperature)
        return json.dumps(dict(zip(LOG_KEYS, values)))


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ContractError("epoch records must be consecutive")
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def series(self, key: str) -> np.ndarray:
        return np.array([json.loads(r.to_json())[key] for r in self.records], dtype=float)


@dataclass
class TrainResult:
    params: HainParams
    log: TrainLog
    selection: SelectionState
    trajectory: list[HainParams] = field(default_factory=list)


# ---------------------------------------------------------------------------
# selection primitives
# ---------------------------------------------------------------------------

def gumbel_softmax(alpha, temperature: float, rng: Rng | None = None, noise=None) -> np.ndarray:
    """``softmax((ln alpha + g) / T)``; ``noise`` overrides the Gumbel draw."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    alpha = nx.as_array(alpha)
    g = nx.gumbel_sample(rng, alpha.size) if noise is None else nx.as_array(noise)
    logits = (np.log(np.maximum(alpha, 1e-300)) + g) / temperature
    return nx.softmax_array(logits)


def percentile_threshold(alpha, rho: float) -> float:
    """Nearest-rank ``(1 - rho) * 100`` percentile of ``alpha``."""
    a = np.sort(nx.as_array(alpha).ravel())
    if a.size == 0:
        raise ContractError("percentile of an empty vector")
    if not 0 < rho < 1:
        raise ContractError("rho must lie in (0, 1)")
    # the epsilon keeps e.g. 0.9 * 10 from rounding up to rank 10
    rank = math.ceil((1.0 - rho) * a.size - 1e-9)
    return float(a[min(max(rank - 1, 0), a.size - 1)])


def select_features(alpha, tau: float) -> list[int]:
    return np.flatnonzero(nx.as_array(alpha) > tau).tolist()


# ---------------------------------------------------------------------------
# memory-efficient attention
# ---------------------------------------------------------------------------

def masked_attention(scores, mask) -> np.ndarray:
    """Row softmax over permitted entries; forbidden entries become exactly 0."""
    scores = np.atleast_2d(nx.as_array(scores))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ContractError(f"mask shape {mask.shape} != scores shape {scores.shape}")
    if not mask.any(axis=1).all():
        raise ContractError("masked_attention: fully masked row")
    return nx.softmax_array(scores, axis=1, mask=mask)


def chunked_forward(cfg: HainConfig, params: HainParams, X, chunk_size: int,
                    stats: dict | None = None, global_mask=None) -> ForwardOutput:
    """Forward ``X`` in row chunks of ``chunk_size``; results are concatenated.

    ``stats`` (if given) receives ``peak_elements``: the largest number of
    float64 entries held by one chunk's graph.
    """
    if chunk_size < 1:
        raise ContractError("chunk_size must be >= 1")
    X = np.atleast_2d(nx.as_array(X))
    outs = []
    peak = 0
    for start in range(0, X.shape[0], chunk_size):
        with nx.track_allocations() as meter:
            g = build_graph(cfg, param_tensors(params), nx.constant(X[start:start + chunk_size]),
                            global_mask)
            outs.append(g.output())
        peak = max(peak, meter.elements)
        del g
    if stats is not None:
        stats["peak_elements"] = peak
        stats["chunks"] = len(outs)
    return _concat_outputs(outs)


def _concat_outputs(outs: list[ForwardOutput]) -> ForwardOutput:
    cat = lambda xs: np.concatenate(xs, axis=0)  # noqa: E731
    trace = AttentionTrace(**{f: cat([getattr(o.trace, f) for o in outs])
                              for f in AttentionTrace.__dataclass_fields__})
    return ForwardOutput(logits=cat([o.logits for o in outs]),
                         probabilities=cat([o.probabilities for o in outs]),
                         trace=trace, embedded=cat([o.embedded for o in outs]))


# ---------------------------------------------------------------------------
# gradients and updates shared by both trainers
# ---------------------------------------------------------------------------

def loss_and_grads(cfg: HainConfig, params: HainParams, X, y, w: LossWeights,
                   beta: float = 1.0) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Objective breakdown and gradient of ``pred + beta * reg`` for a batch."""
    p = param_tensors(params, requires_grad=True)
    g = build_graph(cfg, p, nx.constant(X))
    terms = loss_terms(g, y, w, beta)
    nx.backward(terms.total)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in p.items()}
    return terms.breakdown(), grads


def sgd_step(params: HainParams, grads: dict[str, np.ndarray], lr: float) -> HainParams:
    return HainParams({k: v - lr * grads[k] for k, v in params.items()})


def evaluate(cfg: HainConfig, params: HainParams, ds: Dataset, w: LossWeights,
             chunk: int = 256) -> tuple[LossBreakdown, float, np.ndarray]:
    """Mean loss breakdown, accuracy and mean alpha_combined over ``ds``."""
    sums = np.zeros(4)
    correct = 0
    alpha_sum = np.zeros(cfg.d)
    for start in range(0, ds.n, chunk):
        Xb, yb = ds.X[start:start + chunk], ds.y[start:start + chunk]
        g = build_graph(cfg, param_tensors(params), nx.constant(Xb))
        b = loss_terms(g, yb, w).breakdown()
        sums += len(yb) * np.array([b.pred, b.attn, b.sparse, b.consist])
        correct += int(np.sum(np.argmax(g["logits"].value, axis=1) == yb))
        alpha_sum += g["alpha_combined"].value.sum(axis=0)
    pred, attn, sparse, consist = sums / ds.n
    total = pred + w.lambda1 * attn + w.lambda2 * sparse + w.lambda3 * consist
    return LossBreakdown(pred, attn, sparse, consist, total), correct / ds.n, alpha_sum / ds.n


def mean_attention(cfg: HainConfig, params: HainParams, X, chunk: int = 256) -> np.ndarray:
    total = np.zeros(cfg.d)
    for start in range(0, X.shape[0], chunk):
        g = build_graph(cfg, param_tensors(params), nx.constant(X[start:start + chunk]))
        total += g["alpha_combined"].value.sum(axis=0)
    return total / X.shape[0]


class _EpochLoop:
    """Per-epoch selection bookkeeping and logging common to both trainers."""

    def __init__(self, dataset: Dataset, cfg: HainConfig, tc: TrainConfig, val: Dataset | None):
        if dataset.n == 0:
            raise ContractError("empty training dataset")
        if dataset.d != cfg.d:
            raise ContractError(f"dataset has {dataset.d} features, model expects {cfg.d}")
        self.ds, self.cfg, self.tc, self.val = dataset, cfg, tc, val
        self.rng = Rng(tc.seed)
        self.tau = INITIAL_TAU
        self.log = TrainLog()
        self.alpha = np.full(cfg.d, 1.0 / cfg.d)

    def begin(self, epoch: int, params: HainParams) -> float:
        self.temperature = self.tc.temperature(epoch)
        self.alpha = mean_attention(self.cfg, params, self.ds.X, self.tc.eval_chunk)
        hard = gumbel_softmax(self.alpha, self.temperature, self.rng.stream("gumbel", epoch))
        self.temp_selected = select_features(hard, self.tau)
        self.sums = np.zeros(4)
        self.seen = 0
        return self.tc.learning_rate_at(epoch)

    def shuffled(self, epoch: int) -> np.ndarray:
        return self.rng.stream("shuffle", epoch).permutation(self.ds.n)

    def batches(self, order: np.ndarray):
        bs = self.tc.batch_size
        return [order[i:i + bs] for i in range(0, order.size, bs)]

    def record_batch(self, epoch: int, b: LossBreakdown, size: int) -> None:
        vals = np.array([b.pred, b.attn, b.sparse, b.consist])
        if not (np.all(np.isfinite(vals)) and math.isfinite(b.total)):
            raise TrainingError("non-finite loss", epoch)
        self.sums += size * vals
        self.seen += size

    def end(self, epoch: int, params: HainParams) -> None:
        for name, arr in params.items():
            if not np.all(np.isfinite(arr)):
                raise TrainingError(f"non-finite parameter {name}", epoch)
        self.tau = percentile_threshold(self.alpha, self.tc.target_sparsity)
        w = self.tc.weights
        pred, attn, sparse, consist = self.sums / max(self.seen, 1)
        train = LossBreakdown(pred, attn, sparse, consist,
                              pred + w.lambda1 * attn + w.lambda2 * sparse + w.lambda3 * consist)
        val = acc = None
        if self.val is not None and self.val.n:
            val, acc, _ = evaluate(self.cfg, params, self.val, w, self.tc.eval_chunk)
        self.log.append(EpochRecord(epoch, train, val, acc, self.tau,
                                    len(self.temp_selected), self.temperature))
        log.info("epoch %d loss %.4f val_acc %s tau %.3g", epoch, train.total, acc, self.tau)

    def final_selection(self, params: HainParams) -> SelectionState:
        alpha = mean_attention(self.cfg, params, self.ds.X, self.tc.eval_chunk)
        tau = percentile_threshold(alpha, self.tc.target_sparsity)
        return SelectionState(tau, alpha, select_features(alpha, tau))


def train(dataset: Dataset, cfg: HainConfig, tc: TrainConfig, val: Dataset | None = None,
          params: HainParams | None = None, keep_trajectory: bool = False,
          on_step: Callable[[HainParams], None] | None = None) -> TrainResult:
    """Synchronous mini-batch SGD with per-epoch feature selection.

    ``on_step`` (if given) sees the parameters after every update.
    """
    loop = _EpochLoop(dataset, cfg, tc, val)
    params = params.copy() if params is not None else init_params(cfg, Rng(cfg.seed))
    trajectory = [params] if keep_trajectory else []
    for epoch in range(1, tc.epochs + 1):
        lr = loop.begin(epoch, params)
        for idx in loop.batches(loop.shuffled(epoch)):
            b, grads = loss_and_grads(cfg, params, dataset.X[idx], dataset.y[idx],
                                      tc.weights, tc.beta)
            loop.record_batch(epoch, b, idx.size)
            params = sgd_step(params, grads, lr)
            if keep_trajectory:
                trajectory.append(params)
            if on_step is not None:
                on_step(params)
        loop.end(epoch, params)
    return TrainResult(params, loop.log, loop.final_selection(params), trajectory)


def ps_train(dataset: Dataset, cfg: HainConfig, tc: TrainConfig, val: Dataset | None = None,
             params: HainParams | None = None, keep_trajectory: bool = False,
             on_step: Callable[[HainParams], None] | None = None) -> TrainResult:
    """Single-process simulation of asynchronous parameter-server SGD.

    Each epoch the shuffled rows are dealt round-robin into ``workers``
    shards; each worker cuts its shard into mini-batches. The server visits
    workers round-robin; the visited worker pushes a gradient computed on a
    parameter snapshot ``s`` versions old, where ``s`` is drawn from the
    seeded stream in ``[0, min(max_staleness, version)]``. The server then
    applies ``w <- w - lr * (grad_local + beta * grad_reg)``.
    """
    loop = _EpochLoop(dataset, cfg, tc, val)
    params = params.copy() if params is not None else init_params(cfg, Rng(cfg.seed))
    W, s_max = tc.workers, tc.max_staleness
    history: deque[HainParams] = deque([params], maxlen=s_max + 1)
    trajectory = [params] if keep_trajectory else []
    for epoch in range(1, tc.epochs + 1):
        lr = loop.begin(epoch, params)
        order = loop.shuffled(epoch)
        queues = [deque(loop.batches(order[w::W])) for w in range(W)]
        stale_rng = loop.rng.stream("staleness", epoch)
        while any(queues):
            for q in queues:
                if not q:
                    continue
                idx = q.popleft()
                staleness = int(stale_rng.integers(0, min(s_max, len(history) - 1) + 1)) if s_max else 0
                snapshot = history[-1 - staleness]
                b, grads = loss_and_grads(cfg, snapshot, dataset.X[idx], dataset.y[idx],
                                          tc.weights, tc.beta)
                loop.record_batch(epoch, b, idx.size)
                params = sgd_step(params, grads, lr)
                history.append(params)
                if keep_trajectory:
                    trajectory.append(params)
                if on_step is not None:
                    on_step(params)
        loop.end(epoch, params)
    return TrainResult(params, loop.log, loop.final_selection(params), trajectory)


def accuracy(cfg: HainConfig, params: HainParams, ds: Dataset, chunk: int = 256) -> float:
    out = chunked_forward(cfg, params, ds.X, chunk)
    return float(np.mean(np.argmax(out.logits, axis=1) == ds.y))
