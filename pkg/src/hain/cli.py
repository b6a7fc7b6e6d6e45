"""Command-line interface: ``hain {synth,train,explain,select,prototypes,evaluate,replay}``.

Every command writes its artifacts into ``--out DIR`` together with a
``manifest.json`` that records the fully resolved configuration, seeds and
input digests. ``hain replay DIR/manifest.json --out OTHER`` re-runs the
command from the manifest alone.

Option values resolve as: command-line flag, then ``--config FILE`` (a JSON
object keyed by option name, e.g. ``{"epochs": 5, "lambda3": 0.1}``), then
``HAIN_SEED`` (for ``seed`` only), then built-in defaults.

Exit codes: 0 success, 1 runtime error (printed as one JSON object on
stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import (CharacteristicFn, grad_attention_explain, gradient_explain,
                          shapley_exact, shapley_sampled, MAX_EXACT_FEATURES)
from .data_io import (Checkpoint, Dataset, SyntheticSpec, file_digest, fit_standardization,
                      generate_synthetic, load_checkpoint, load_csv, save_checkpoint,
                      split_indices, standardize, write_csv)
from .errors import CapacityError, ContractError, HainError, MetricError
from .metrics import (SCHEMA_VERSION, classification_metrics, comprehensiveness,
                      explanation_timing, faithfulness, pr_curve, roc_curve, stability,
                      sufficiency)
from .model import HainConfig, logit_input_gradient
from .numerics import Rng
from .objective import LossWeights
from .prototypes import build_prototypes
from .training import SelectionState, TrainConfig, chunked_forward, ps_train, train

log = logging.getLogger("hain")

EXPLAIN_METHODS = ("grad-attention", "gradient", "shapley-exact", "shapley-sampled")

# Resolved option names and defaults per command. ``None`` marks options
# that are either required (checked after resolution) or derived.
DEFAULTS: dict[str, dict] = {
    "synth": {
        "out": None, "spec": None, "n_samples": 2000, "n_features": 2000, "n_classes": 4,
        "n_informative": 20, "separation": 2.0, "noise": 1.0, "seed": None,
    },
    "train": {
        "data": None, "label": "label", "out": None, "impute": False,
        "epochs": 30, "seed": None, "lr": 0.05, "lr_decay": 1.0, "batch_size": 32,
        "test_fraction": 0.2, "workers": 1, "staleness": 0,
        "lambda1": 0.01, "lambda2": 0.01, "lambda3": 0.1, "beta": 1.0,
        "target_sparsity": 0.01, "temperature_start": 1.0, "temperature_end": 0.1,
        "group_size": 16, "k_embed": 8, "d_k": 8, "hidden": 32, "d_embed": 16,
    },
    "explain": {
        "checkpoint": None, "data": None, "label": "label", "out": None,
        "method": "grad-attention", "rows": None, "target": None, "n_perms": 2000, "seed": None,
    },
    "select": {"checkpoint": None, "out": None, "top": None},
    "prototypes": {
        "checkpoint": None, "data": None, "label": "label", "out": None,
        "P": 8, "theta": 0.5, "sigma": None, "epochs": 10, "seed": None,
    },
    "evaluate": {
        "checkpoint": None, "data": None, "label": "label", "out": None,
        "interpretability": False, "top_k": 100, "max_explain": 50,
        "stability_epsilon": 0.05, "seed": None,
    },
}

REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out"),
    "explain": ("checkpoint", "data", "out"),
    "select": ("checkpoint", "out"),
    "prototypes": ("checkpoint", "data", "out"),
    "evaluate": ("checkpoint", "data", "out"),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing and config resolution
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hain {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--out", help="output directory")
        return p

    p = command("synth", "generate a synthetic benchmark CSV")
    p.add_argument("--spec", help="JSON file with a synthetic spec")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--n-features", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--n-informative", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)

    p = command("train", "train a model and select features")
    p.add_argument("--data", help="training CSV")
    p.add_argument("--label", help="label column name")
    p.add_argument("--impute", action="store_true", help="mean-impute missing cells")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--lr-decay", type=float, help="per-epoch learning-rate factor")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--test-fraction", type=float, help="held-out fraction; 0 trains on everything")
    p.add_argument("--workers", type=int, help="simulated parameter-server workers")
    p.add_argument("--staleness", type=int, help="maximum gradient staleness")
    p.add_argument("--lambda1", type=float, help="attention entropy weight")
    p.add_argument("--lambda2", type=float, help="gate sparsity weight")
    p.add_argument("--lambda3", type=float, help="attention consistency weight")
    p.add_argument("--beta", type=float, help="regularizer gradient weight")
    p.add_argument("--target-sparsity", type=float)
    p.add_argument("--temperature-start", type=float)
    p.add_argument("--temperature-end", type=float)
    p.add_argument("--group-size", type=int)
    p.add_argument("--k-embed", type=int)
    p.add_argument("--d-k", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--d-embed", type=int)

    p = command("explain", "explain individual predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="CSV with the rows to explain")
    p.add_argument("--label")
    p.add_argument("--method", choices=EXPLAIN_METHODS)
    p.add_argument("--rows", type=_int_list, help="comma-separated row indices (default: all)")
    p.add_argument("--target", help="class name or index (default: predicted class)")
    p.add_argument("--n-perms", type=int, help="permutations for shapley-sampled")
    p.add_argument("--seed", type=int)

    p = command("select", "write the attention-ranked feature list")
    p.add_argument("--checkpoint")
    p.add_argument("--top", type=int, help="keep only the first N rows")

    p = command("prototypes", "build prototypes in the embedding space")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--label")
    p.add_argument("--P", type=int, help="number of prototypes")
    p.add_argument("--theta", type=float, help="neighborhood similarity threshold")
    p.add_argument("--sigma", type=float, help="RBF bandwidth (default: median heuristic)")
    p.add_argument("--epochs", type=int, help="refinement passes")
    p.add_argument("--seed", type=int)

    p = command("evaluate", "predictive and interpretability metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--label")
    p.add_argument("--interpretability", action="store_true")
    p.add_argument("--top-k", type=int, help="features kept/removed for sufficiency")
    p.add_argument("--max-explain", type=int, help="rows used for explanation metrics")
    p.add_argument("--stability-epsilon", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write artifacts here instead of the recorded directory")
    return parser


def resolve(command: str, ns: argparse.Namespace, env=None) -> dict:
    env = os.environ if env is None else env
    cfg = dict(DEFAULTS[command])
    config_path = getattr(ns, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - cfg.keys())
        if unknown:
            raise UsageError(f"unknown {command} options in config: {unknown}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in vars(ns).items() if k in cfg})
    if "seed" in cfg and cfg["seed"] is None:
        try:
            cfg["seed"] = int(env.get("HAIN_SEED", 0))
        except ValueError:
            raise UsageError(f"HAIN_SEED must be an integer, got {env['HAIN_SEED']!r}") from None
    for key in ("data", "checkpoint", "spec", "out"):
        if cfg.get(key) is not None:
            cfg[key] = str(Path(cfg[key]).resolve())
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) " +
                         ", ".join("--" + k.replace("_", "-") for k in missing))
    if command == "explain" and cfg["method"] not in EXPLAIN_METHODS:
        raise UsageError(f"unknown method {cfg['method']!r}; choose from {EXPLAIN_METHODS}")
    return cfg


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _write_manifest(command: str, cfg: dict, inputs: dict[str, str], outputs: dict[str, str],
                    nondeterministic: list[str] | None = None) -> Path:
    out = Path(cfg["out"])
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": cfg,
        "seeds": {"seed": cfg["seed"]} if "seed" in cfg else {},
        "inputs": {k: {"path": str(p), "sha256": file_digest(p)} for k, p in inputs.items()},
        "outputs": outputs,
        "nondeterministic": nondeterministic or [],
        "tool_version": f"hain {__version__}",
    }
    path = out / "manifest.json"
    _dump_json(manifest, path)
    return path


def _load_aligned(cfg: dict, ckpt: Checkpoint) -> Dataset:
    """Load ``cfg['data']`` with the checkpoint's classes and standardization."""
    ds = load_csv(cfg["data"], cfg["label"], class_names=ckpt.class_names)
    if ds.feature_names != ckpt.feature_names:
        raise ContractError(f"{cfg['data']}: feature columns differ from the checkpoint's")
    if ckpt.standardization is not None:
        ds = standardize(ds, ckpt.standardization)
    return ds


def _predict(ckpt: Checkpoint, X: np.ndarray) -> np.ndarray:
    return np.argmax(chunked_forward(ckpt.config, ckpt.params, X, 256).logits, axis=1)


def _target_index(target, class_names: list[str]) -> int | None:
    if target is None:
        return None
    if str(target) in class_names:
        return class_names.index(str(target))
    try:
        idx = int(target)
    except ValueError:
        raise ContractError(f"unknown target class {target!r}") from None
    if not 0 <= idx < len(class_names):
        raise ContractError(f"target index {idx} out of range")
    return idx


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    if cfg["spec"]:
        spec = SyntheticSpec.from_json(Path(cfg["spec"]).read_text(encoding="utf-8"))
        inputs["spec"] = cfg["spec"]
    else:
        spec = SyntheticSpec(n=cfg["n_samples"], d=cfg["n_features"], n_classes=cfg["n_classes"],
                             n_informative=cfg["n_informative"], separation=cfg["separation"],
                             noise=cfg["noise"], seed=cfg["seed"])
    ds, planted = generate_synthetic(spec)
    write_csv(ds, out / "data.csv")
    _dump_json({"informative": planted.tolist(),
                "names": [ds.feature_names[i] for i in planted]}, out / "planted.json")
    _write_manifest("synth", cfg, inputs, {"data": "data.csv", "planted": "planted.json"})
    return 0


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    ds = load_csv(cfg["data"], cfg["label"], impute=cfg["impute"])
    if cfg["test_fraction"] > 0:
        tr_idx, te_idx = split_indices(ds, cfg["test_fraction"], Rng(seed))
    else:
        tr_idx, te_idx = np.arange(ds.n), np.arange(0)
    stats = fit_standardization(ds.X[tr_idx])
    train_ds = standardize(ds.subset(tr_idx), stats)
    val_ds = standardize(ds.subset(te_idx), stats) if te_idx.size else None

    hc = HainConfig(d=ds.d, n_classes=ds.n_classes, k_embed=cfg["k_embed"],
                    group_size=cfg["group_size"], d_k=cfg["d_k"], hidden=cfg["hidden"],
                    d_embed=cfg["d_embed"], seed=seed)
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
                     lr_decay=cfg["lr_decay"],
                     weights=LossWeights(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"]),
                     target_sparsity=cfg["target_sparsity"],
                     temperature_start=cfg["temperature_start"],
                     temperature_end=cfg["temperature_end"], seed=seed,
                     workers=cfg["workers"], max_staleness=cfg["staleness"], beta=cfg["beta"])
    trainer = ps_train if (tc.workers > 1 or tc.max_staleness > 0) else train
    res = trainer(train_ds, hc, tc, val=val_ds)

    mean_gate = chunked_forward(hc, res.params, train_ds.X, tc.eval_chunk).trace.gates.mean(axis=0)
    selection = res.selection.to_dict()
    selection["rho"] = tc.target_sparsity
    selection["mean_gate"] = [float(g).hex() for g in mean_gate]
    ckpt = Checkpoint(hc, res.params, ds.class_names, ds.feature_names, stats,
                      selection=selection, train_config=tc.to_dict(), seed=seed)
    save_checkpoint(ckpt, out / "model.ckpt")
    (out / "trainlog.jsonl").write_text(res.log.to_jsonl(), encoding="utf-8")
    _dump_json({"tau": res.selection.tau, "rho": tc.target_sparsity,
                "selected": res.selection.selected,
                "selected_names": [ds.feature_names[i] for i in res.selection.selected]},
               out / "selection.json")
    _dump_json({"train": tr_idx.tolist(), "test": te_idx.tolist()}, out / "split.json")
    _write_manifest("train", cfg, {"data": cfg["data"]},
                    {"checkpoint": "model.ckpt", "trainlog": "trainlog.jsonl",
                     "selection": "selection.json", "split": "split.json"})
    last = res.log.records[-1] if res.log.records else None
    print(json.dumps({"epochs": tc.epochs,
                      "final_loss": None if last is None else last.train.total,
                      "val_accuracy": None if last is None else last.val_accuracy,
                      "n_selected": len(res.selection.selected)}))
    return 0


def cmd_explain(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(cfg["checkpoint"])
    hc, params = ckpt.config, ckpt.params
    method = cfg["method"]
    if method == "shapley-exact" and hc.d > MAX_EXACT_FEATURES:
        raise CapacityError(f"shapley-exact supports d <= {MAX_EXACT_FEATURES}, checkpoint has "
                            f"d = {hc.d}; use --method shapley-sampled")
    ds = _load_aligned(cfg, ckpt)
    rows = list(range(ds.n)) if cfg["rows"] is None else list(cfg["rows"])
    for r in rows:
        if not 0 <= r < ds.n:
            raise ContractError(f"row {r} out of range (data has {ds.n} rows)")
    fixed = _target_index(cfg["target"], ckpt.class_names)
    baseline = np.zeros(hc.d)  # training mean in standardized units
    lines = []
    for r in rows:
        x = ds.X[r]
        target = fixed if fixed is not None else int(_predict(ckpt, x[None])[0])
        if method == "grad-attention":
            exp = grad_attention_explain(hc, params, x, target)
        elif method == "gradient":
            exp = gradient_explain(hc, params, x, target)
        else:
            v = CharacteristicFn(hc, params, x, baseline, target)
            if method == "shapley-exact":
                exp = shapley_exact(v, hc.d, batched=True)
            else:
                exp = shapley_sampled(v, hc.d, cfg["n_perms"], Rng(cfg["seed"]).stream("explain", r))
            exp.meta["model_calls"] = v.calls
        exp.input_id = r
        exp.target_class = target
        lines.append(json.dumps(exp.to_dict()))
    (out / "explanations.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    _write_manifest("explain", cfg, {"checkpoint": cfg["checkpoint"], "data": cfg["data"]},
                    {"explanations": "explanations.jsonl"})
    return 0


def cmd_select(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(cfg["checkpoint"])
    if not ckpt.selection:
        raise ContractError(f"{cfg['checkpoint']}: checkpoint carries no selection state")
    sel = SelectionState.from_dict(ckpt.selection)
    gates = ckpt.selection.get("mean_gate")
    gates = np.array([float.fromhex(g) for g in gates]) if gates else np.full(ckpt.config.d, np.nan)
    chosen = set(sel.selected)
    order = np.argsort(-sel.alpha_snapshot, kind="stable")
    if cfg["top"] is not None:
        if cfg["top"] < 0:
            raise ContractError("--top must be nonnegative")
        order = order[:cfg["top"]]
    with (out / "features.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "index", "name", "mean_alpha", "gate", "selected"])
        for rank, i in enumerate(order, start=1):
            w.writerow([rank, int(i), ckpt.feature_names[i], repr(float(sel.alpha_snapshot[i])),
                        repr(float(gates[i])), int(i in chosen)])
    _write_manifest("select", cfg, {"checkpoint": cfg["checkpoint"]}, {"features": "features.csv"})
    return 0


def cmd_prototypes(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(cfg["checkpoint"])
    ds = _load_aligned(cfg, ckpt)
    if cfg["P"] > ds.n:
        raise ContractError(f"P={cfg['P']} exceeds the number of samples {ds.n}")
    ps = build_prototypes(ckpt.config, ckpt.params, ds.X, cfg["P"], Rng(cfg["seed"]).stream("prototypes"),
                          y=ds.y, theta=cfg["theta"], sigma=cfg["sigma"], epochs=cfg["epochs"])
    ckpt.prototypes = ps.to_dict()
    save_checkpoint(ckpt, out / "model.ckpt")
    summary = {
        "schema_version": SCHEMA_VERSION,
        "sigma": ps.sigma,
        "theta": ps.theta,
        "all_neighborhoods_empty": not any(ps.sizes),
        "prototypes": [
            {"index": j, "size": size,
             "majority_class": None if lab is None else ckpt.class_names[lab]}
            for j, (size, lab) in enumerate(zip(ps.sizes, ps.labels))
        ],
    }
    _dump_json(summary, out / "prototypes.json")
    _write_manifest("prototypes", cfg, {"checkpoint": cfg["checkpoint"], "data": cfg["data"]},
                    {"checkpoint": "model.ckpt", "summary": "prototypes.json"})
    return 0


def _interpretability(cfg: dict, ckpt: Checkpoint, ds: Dataset, report) -> None:
    hc, params = ckpt.config, ckpt.params
    X = ds.X[:max(1, min(cfg["max_explain"], ds.n))]

    def explain(x):
        target = int(_predict(ckpt, x[None])[0])
        return grad_attention_explain(hc, params, x, target).scores

    faith = []
    for x in X:
        target = int(_predict(ckpt, x[None])[0])
        fwd, g = logit_input_gradient(hc, params, x, target)
        faith.append(faithfulness(fwd.trace.alpha_combined, g))
    report.faithfulness = float(np.mean(faith))
    report.faithfulness_gradient = "abs_logit"
    report.stability = stability(explain, X, cfg["stability_epsilon"], rng=Rng(cfg["seed"]))
    report.stability_epsilon = cfg["stability_epsilon"]

    if ckpt.selection:
        alpha = SelectionState.from_dict(ckpt.selection).alpha_snapshot
    else:
        alpha = chunked_forward(hc, params, ds.X, 256).trace.alpha_combined.mean(axis=0)
    ranking = np.argsort(-alpha, kind="stable")
    k = min(cfg["top_k"], hc.d)
    report.top_k = k
    predict = lambda Z: _predict(ckpt, Z)  # noqa: E731
    try:
        report.sufficiency = sufficiency(predict, ds.X, ds.y, ranking, k)
        report.comprehensiveness = comprehensiveness(predict, ds.X, ds.y, ranking, k)
    except MetricError as exc:
        log.warning("%s", exc)
    report.explanation_time_ms, report.explanation_time_std_ms = explanation_timing(explain, X)


def cmd_evaluate(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(cfg["checkpoint"])
    ds = _load_aligned(cfg, ckpt)
    fwd = chunked_forward(ckpt.config, ckpt.params, ds.X, 256)
    y_pred = np.argmax(fwd.logits, axis=1)
    report = classification_metrics(ds.y, y_pred, fwd.probabilities, len(ckpt.class_names))
    nondet = []
    if cfg["interpretability"]:
        _interpretability(cfg, ckpt, ds, report)
        nondet = ["metrics.json:explanation_time_ms", "metrics.json:explanation_time_std_ms"]
    _dump_json(report.to_dict(), out / "metrics.json")

    for name, curve, cols in (("roc.csv", roc_curve, ("fpr", "tpr")),
                              ("pr.csv", pr_curve, ("recall", "precision"))):
        with (out / name).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", *cols, "threshold"])
            for c, cname in enumerate(ckpt.class_names):
                is_pos = ds.y == c
                if not is_pos.any() or (curve is roc_curve and is_pos.all()):
                    continue
                a, b, thr = curve(is_pos, fwd.probabilities[:, c])
                for u, v, t in zip(a, b, thr):
                    w.writerow([cname, repr(float(u)), repr(float(v)), repr(float(t))])
    _write_manifest("evaluate", cfg, {"checkpoint": cfg["checkpoint"], "data": cfg["data"]},
                    {"metrics": "metrics.json", "roc": "roc.csv", "pr": "pr.csv"}, nondet)
    print(json.dumps({"accuracy": report.accuracy, "f1_macro": report.f1_macro,
                      "auc_roc_macro": report.auc_roc_macro}))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "explain": cmd_explain,
    "select": cmd_select,
    "prototypes": cmd_prototypes,
    "evaluate": cmd_evaluate,
}


def cmd_replay(manifest_path: str, out: str | None) -> int:
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    command = manifest.get("command")
    if command not in COMMANDS:
        raise ContractError(f"{manifest_path}: unknown command {command!r}")
    for key, entry in manifest["inputs"].items():
        if file_digest(entry["path"]) != entry["sha256"]:
            raise ContractError(f"input {key} ({entry['path']}) changed since the recorded run")
    cfg = dict(manifest["config"])
    if out is not None:
        cfg["out"] = out
    return COMMANDS[command](cfg)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if ns.command == "replay":
            return cmd_replay(ns.manifest, ns.out)
        cfg = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hain: error: {exc}", file=sys.stderr)
        return 2
    except (HainError, OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
