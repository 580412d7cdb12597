"""Measurement protocol: robustness curves, smoothness metric, transferability.

All operations are read-only on models. Attacks fan out over record chunks
(thread pool; numpy releases the GIL in BLAS) with results assembled in
chunk order, so outcomes are independent of the worker count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import AttackBudget, run_attack
from .errors import ConfigError

DEFAULT_PNR_GRID = (-30.0, -25.0, -20.0, -15.0, -10.0)
_CHUNK = 256


@dataclass
class CurvePoint:
    pnr_db: float
    accuracy: float
    n_records: int


@dataclass
class RobustnessCurve:
    attack: str
    model_id: str
    points: list
    seed: int = 0
    surrogate_id: str | None = None

    def validate(self):
        pnrs = [p.pnr_db for p in self.points]
        if sorted(pnrs) != pnrs or len(set(pnrs)) != len(pnrs):
            raise ConfigError("curve grid must be strictly increasing")
        if any(not 0.0 <= p.accuracy <= 1.0 for p in self.points):
            raise ConfigError("curve accuracies must lie in [0, 1]")


@dataclass
class SmoothnessReport:
    model_id: str
    mean_gradient_norm: float
    n_records: int
    seed: int = 0


def _stack_records(records):
    if not records:
        raise ConfigError("empty record set")
    snrs = {r.snr_db for r in records}
    if len(snrs) != 1:
        raise ConfigError("records must share one snr_db tag")
    x = np.stack([r.iq for r in records]).astype(np.float32)
    y = np.array([r.label for r in records], dtype=np.int64)
    return x, y, snrs.pop()


def _attack_chunked(gen_model, x, y, kind, budget, jobs):
    chunks = [(s, min(s + _CHUNK, len(x))) for s in range(0, len(x), _CHUNK)]

    def work(bounds):
        s, e = bounds
        return run_attack(kind, gen_model, x[s:e], y[s:e], budget)

    if jobs and jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    out = []
    for p in parts:
        out.extend(p)
    return out


def accuracy_under_attack(model, records, attack="pgd", pnr_grid=DEFAULT_PNR_GRID,
                          model_id="model", seed=0, budget_kind="pnr", max_steps=50,
                          jobs=None, gen_model=None, surrogate_id=None):
    """Accuracy per PNR point under evaluation-mode attacks.

    ``gen_model`` (when given) crafts the attacks while ``model`` is scored:
    that is the transferability protocol; white-box otherwise.
    """
    x, y, snr_db = _stack_records(records)
    crafting = gen_model if gen_model is not None else model
    points = []
    for pnr_db in pnr_grid:
        budget = AttackBudget(pnr_db=pnr_db, snr_db=snr_db, kind=budget_kind,
                              max_steps=max_steps, fallback_seed=seed)
        if pnr_db == -np.inf:
            preds = model.predict(x)
        else:
            outcomes = _attack_chunked(crafting, x, y, attack, budget, jobs)
            adv = np.stack([o.adversarial for o in outcomes]).astype(np.float32)
            preds = model.predict(adv)
        points.append(CurvePoint(pnr_db=float(pnr_db),
                                 accuracy=float(np.mean(preds == y)),
                                 n_records=len(records)))
    curve = RobustnessCurve(attack=attack, model_id=model_id, points=points, seed=seed,
                            surrogate_id=surrogate_id)
    curve.validate()
    return curve


def attack_success_rate(model, records, attack, pnr_db, seed=0, max_steps=50, jobs=None):
    x, y, snr_db = _stack_records(records)
    budget = AttackBudget(pnr_db=pnr_db, snr_db=snr_db, max_steps=max_steps,
                          fallback_seed=seed)
    outcomes = _attack_chunked(model, x, y, attack, budget, jobs)
    return float(np.mean([o.success for o in outcomes]))


def gradient_norm_smoothness(model, records, n=1000, model_id="model", seed=0):
    """Mean l2 norm of the input gradient of the per-record loss."""
    records = records[:n]
    x, y, _ = _stack_records(records)
    norms = []
    for s in range(0, len(x), _CHUNK):
        xb = x[s: s + _CHUNK]
        yb = y[s: s + _CHUNK]
        xt = ad.tensor(xb, requires_grad=True)
        loss = ad.cross_entropy(model.forward(xt), yb, reduction="sum")
        ad.backward(loss)
        g = xt.grad.astype(np.float64)
        norms.extend(np.sqrt((g * g).sum(axis=(1, 2))).tolist())
    return SmoothnessReport(model_id=model_id, mean_gradient_norm=float(np.mean(norms)),
                            n_records=len(records), seed=seed)


def transferability_eval(surrogate, target, records, attack="pgd",
                         pnr_grid=DEFAULT_PNR_GRID, surrogate_id="surrogate",
                         target_id="target", seed=0, max_steps=50, jobs=None):
    """White-box attacks on the surrogate, scored on the target."""
    if surrogate.cfg.input_shape != target.cfg.input_shape:
        raise ConfigError("surrogate/target input shapes differ")
    return accuracy_under_attack(
        target, records, attack=attack, pnr_grid=pnr_grid, model_id=target_id,
        seed=seed, max_steps=max_steps, jobs=jobs, gen_model=surrogate,
        surrogate_id=surrogate_id,
    )


# ---------------------------------------------------------------------------
# reporting


def _group_key(curve):
    return (curve.model_id, curve.attack, curve.surrogate_id or "")


def aggregate_curves(curves):
    """Group per-seed curves and average pointwise across seeds."""
    groups = {}
    for c in curves:
        groups.setdefault(_group_key(c), []).append(c)
    out = []
    for (model_id, attack, surrogate), members in sorted(groups.items()):
        members = sorted(members, key=lambda c: c.seed)
        grids = {tuple(p.pnr_db for p in m.points) for m in members}
        if len(grids) != 1:
            raise ConfigError(f"curve grids differ within group {model_id}/{attack}")
        rows = []
        for i, pnr in enumerate(grids.pop()):
            per_seed = [m.points[i].accuracy for m in members]
            rows.append({
                "pnr_db": pnr,
                "accuracy_mean": float(np.mean(per_seed)),
                "accuracy_per_seed": per_seed,
                "n_records": members[0].points[i].n_records,
            })
        out.append({
            "model": model_id,
            "attack": attack,
            "surrogate": surrogate or None,
            "seeds": [m.seed for m in members],
            "points": rows,
        })
    return out


def emit_report(curves, smoothness, out_dir, config_echo=None):
    """One CSV per aggregated curve plus a machine-readable JSON summary."""
    if not curves and not smoothness:
        raise ConfigError("nothing to report")
    os.makedirs(out_dir, exist_ok=True)
    aggregated = aggregate_curves(curves)
    paths = []
    for group in aggregated:
        tag = group["model"] + (f"__via_{group['surrogate']}" if group["surrogate"] else "")
        path = os.path.join(out_dir, f"curve_{tag}_{group['attack']}.csv")
        seeds = group["seeds"]
        with open(path, "w", newline="") as f:
            header = ["pnr_db", "accuracy_mean"] + [f"accuracy_seed{s}" for s in seeds] + ["n_records"]
            f.write(",".join(header) + "\n")
            for row in group["points"]:
                cells = [f"{row['pnr_db']:g}", f"{row['accuracy_mean']:.6f}"]
                cells += [f"{a:.6f}" for a in row["accuracy_per_seed"]]
                cells.append(str(row["n_records"]))
                f.write(",".join(cells) + "\n")
        paths.append(path)

    summary = {
        "models": sorted({c.model_id for c in curves} | {s.model_id for s in smoothness}),
        "seeds": sorted({c.seed for c in curves} | {s.seed for s in smoothness}),
        "curves": aggregated,
        "smoothness": [
            {
                "model": s.model_id,
                "mean_gradient_norm": s.mean_gradient_norm,
                "n_records": s.n_records,
                "seed": s.seed,
            }
            for s in sorted(smoothness, key=lambda s: (s.model_id, s.seed))
        ],
        "config_echo": config_echo or {},
    }
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return {"summary": summary_path, "curves": paths}
