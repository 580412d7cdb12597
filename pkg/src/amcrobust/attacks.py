"""White-box gradient attacks under exact l2 perturbation budgets.

The budget converts a perturbation-to-noise ratio and the record's SNR tag
into an exact l2 radius; candidates are always projected onto (not into)
the epsilon sphere so each outcome realizes the requested ratio exactly.
Attacks operate on batches internally and never mutate their inputs.

Perturbed records are kept in float64 so the realized norm survives
round-tripping (consumers cast to float32 at the model boundary).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

_ZERO_GRAD_EPS = 1e-20


@dataclass
class AttackBudget:
    pnr_db: float
    snr_db: float
    step_size: float | None = None  # PGD step; defaults to eps/2 per record
    max_steps: int = 50
    mode: str = "evaluation"  # training: exactly 3 steps, no early exit
    kind: str = "pnr"  # pnr | pgnr (pgnr budgets against the stable-noise power)
    fallback_seed: int = 0

    def validate(self):
        if self.mode not in ("training", "evaluation"):
            raise ConfigError(f"unknown attack mode {self.mode!r}")
        if self.kind not in ("pnr", "pgnr"):
            raise ConfigError(f"unknown budget kind {self.kind!r}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError("step_size must be positive")

    @property
    def steps(self):
        return 3 if self.mode == "training" else self.max_steps


@dataclass
class AttackOutcome:
    adversarial: np.ndarray  # (2, 128) float64
    success: bool
    steps_used: int
    perturbation_norm: float
    predicted_label: int


def db_to_linear(db):
    if db == -np.inf:
        return 0.0
    return 10.0 ** (db / 10.0)


def perturbation_budget(x0, pnr_db, snr_db, kind="pnr"):
    """Exact l2 radius for the requested perturbation-to-noise ratio.

    With kind="pgnr" the ratio is taken against the alpha-stable noise
    power; perturbation-to-total-noise is then PGNR/2 (3 dB less), which is
    what enters the radius.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    ratio = db_to_linear(pnr_db)
    if kind == "pgnr":
        ratio /= 2.0
    elif kind != "pnr":
        raise ConfigError(f"unknown budget kind {kind!r}")
    snr_lin = db_to_linear(snr_db)
    return float(np.sqrt(ratio * np.sum(x0 * x0) / (snr_lin + 1.0)))


def project_onto_sphere(x_star, x0, epsilon, fallback_rng=None):
    """Place x_star on the epsilon sphere centred at x0 (exact norm).

    A coincident x_star is pushed out along a seeded random unit direction.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if epsilon == 0.0:
        return x0.copy()
    d = x_star - x0
    norm = float(np.linalg.norm(d))
    if norm == 0.0:
        rng = fallback_rng or np.random.default_rng(0)
        d = rng.normal(size=x0.shape)
        norm = float(np.linalg.norm(d))
    return x0 + (epsilon / norm) * d


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    return x, False


def _epsilons(x0, budget):
    return np.array(
        [perturbation_budget(rec, budget.pnr_db, budget.snr_db, budget.kind) for rec in x0]
    )


def _project_batch(x_star, x0, eps, fallback_seed):
    d = x_star - x0
    norms = np.sqrt(np.sum(d * d, axis=(1, 2)))
    for b in np.nonzero((norms == 0) & (eps > 0))[0]:
        rng = np.random.default_rng(np.random.SeedSequence((fallback_seed, int(b))))
        d[b] = rng.normal(size=x0.shape[1:])
        norms[b] = np.linalg.norm(d[b])
    scale = np.where(norms > 0, eps / np.where(norms > 0, norms, 1.0), 0.0)
    return x0 + scale[:, None, None] * d


def _model_dtype(model):
    return getattr(model, "dtype", np.float32)


def fgm_attack(model, x0, y, budget):
    """Targeted fast gradient method, trying wrong classes in ascending order.

    Returns the first misclassified candidate; if no target class works,
    the candidate with the lowest true-class probability (success=False).
    """
    budget.validate()
    x0b, single = _batched(x0)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    B = x0b.shape[0]
    eps = _epsilons(x0b, budget)
    n_classes = model.cfg.classes if hasattr(model, "cfg") else model.classes

    best = x0b.copy()
    best_prob = np.full(B, np.inf)
    best_pred = model.predict(x0b.astype(np.float32))
    steps_used = np.zeros(B, dtype=np.int64)
    tried = np.zeros(B, dtype=np.int64)
    # zero-budget records keep x0; success iff already misclassified
    done = (eps == 0) & (best_pred != yb)

    if np.all(eps == 0):
        outcomes = [
            AttackOutcome(x0b[b].copy(), bool(best_pred[b] != yb[b]), 0, 0.0, int(best_pred[b]))
            for b in range(B)
        ]
        return outcomes[0] if single else outcomes

    # one forward, one backward per target class; forward runs in the
    # model's dtype, sphere arithmetic stays float64
    xt = ad.tensor(x0b.astype(_model_dtype(model)), requires_grad=True)
    logits = model.forward(xt)
    for t in range(n_classes):
        relevant = (~done) & (yb != t) & (eps > 0)
        if not np.any(relevant):
            continue
        xt.zero_grad()
        ad.backward(ad.cross_entropy(logits, np.full(B, t), reduction="sum"))
        g = xt.grad.astype(np.float64)
        norms = np.sqrt(np.sum(g * g, axis=(1, 2)))
        usable = relevant & (norms > _ZERO_GRAD_EPS)
        if not np.any(usable):
            continue
        cand = x0b.copy()
        cand[usable] = (
            x0b[usable] - (eps[usable] / norms[usable])[:, None, None] * g[usable]
        )
        out = model.forward(cand.astype(np.float32)).data
        shifted = out - out.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        preds = np.argmax(out, axis=1)
        for b in np.nonzero(usable)[0]:
            tried[b] += 1
            if preds[b] != yb[b]:
                done[b] = True
                best[b] = cand[b]
                best_pred[b] = preds[b]
                steps_used[b] = tried[b]
            elif probs[b, yb[b]] < best_prob[b]:
                best_prob[b] = probs[b, yb[b]]
                best[b] = cand[b]
                best_pred[b] = preds[b]

    outcomes = []
    for b in range(B):
        norm = float(np.linalg.norm(best[b] - x0b[b]))
        outcomes.append(
            AttackOutcome(
                adversarial=best[b].copy(),
                success=bool(done[b]),
                steps_used=int(steps_used[b] if done[b] else tried[b]),
                perturbation_norm=norm,
                predicted_label=int(best_pred[b]),
            )
        )
    return outcomes[0] if single else outcomes


def pgd_attack(model, x0, y, budget, loss_builder=None):
    """Projected gradient ascent with exact sphere projection each step.

    training mode runs exactly 3 steps with no early exit; evaluation mode
    exits per record on misclassification, capped at ``max_steps``.
    ``loss_builder(logits, labels) -> summed scalar`` overrides the default
    cross-entropy ascent objective.
    """
    budget.validate()
    x0b, single = _batched(x0)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    B = x0b.shape[0]
    eps = _epsilons(x0b, budget)

    if loss_builder is None:
        def loss_builder(logits, labels):
            return ad.cross_entropy(logits, labels, reduction="sum")

    cur = x0b.copy()
    steps_used = np.zeros(B, dtype=np.int64)
    frozen = eps == 0.0
    early_exit = budget.mode == "evaluation"

    for step in range(budget.steps):
        if np.all(frozen):
            break
        xt = ad.tensor(cur.astype(_model_dtype(model)), requires_grad=True)
        loss = loss_builder(model.forward(xt), yb)
        ad.backward(loss)
        step_sizes = np.full(B, budget.step_size) if budget.step_size is not None else eps / 2.0
        g = xt.grad.astype(np.float64)
        # step a fixed length along the ascent direction: raw gradients can be
        # orders of magnitude smaller than the sphere radius, which would
        # stall the iterate right after the first projection
        gn = np.sqrt(np.sum(g * g, axis=(1, 2)))
        g = np.where(gn[:, None, None] > _ZERO_GRAD_EPS, g / np.where(gn > 0, gn, 1.0)[:, None, None], g)
        x_star = cur + step_sizes[:, None, None] * g
        projected = _project_batch(x_star, x0b, eps, budget.fallback_seed)
        active = ~frozen
        cur[active] = projected[active]
        steps_used[active] = step + 1
        if early_exit:
            preds = model.predict(cur.astype(np.float32))
            frozen = frozen | (preds != yb)

    preds = model.predict(cur.astype(np.float32))
    outcomes = []
    for b in range(B):
        norm = float(np.linalg.norm(cur[b] - x0b[b]))
        outcomes.append(
            AttackOutcome(
                adversarial=cur[b].copy(),
                success=bool(preds[b] != yb[b]),
                steps_used=int(steps_used[b]),
                perturbation_norm=norm,
                predicted_label=int(preds[b]),
            )
        )
    return outcomes[0] if single else outcomes


ATTACKS = {"fgm": fgm_attack, "pgd": pgd_attack}


def run_attack(kind, model, x0, y, budget):
    if kind not in ATTACKS:
        raise ConfigError(f"unknown attack kind {kind!r}")
    return ATTACKS[kind](model, x0, y, budget)


def training_adversary(model, x0, y, pnr_db, snr_db, loss_builder=None, step_size=None):
    """The 3-step PGD used inside robust-training loops."""
    budget = AttackBudget(pnr_db=pnr_db, snr_db=snr_db, mode="training", step_size=step_size)
    outcomes = pgd_attack(model, x0, y, budget, loss_builder=loss_builder)
    return np.stack([o.adversarial for o in outcomes]).astype(np.float32)


def back_computed_pnr_db(outcome, x0, snr_db, kind="pnr"):
    """Invert the budget formula from a realized perturbation norm."""
    x0 = np.asarray(x0, dtype=np.float64)
    snr_lin = db_to_linear(snr_db)
    ratio = outcome.perturbation_norm**2 * (snr_lin + 1.0) / np.sum(x0 * x0)
    if kind == "pgnr":
        ratio *= 2.0
    return float(10.0 * np.log10(ratio))


def write_attack_csv(path, rows):
    """rows: iterable of (record_index, pnr_db, attack, outcome)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["record_index", "pnr_db", "attack", "steps_used",
             "perturbation_norm", "success", "predicted_label"]
        )
        for idx, pnr_db, kind, o in rows:
            w.writerow(
                [idx, pnr_db, kind, o.steps_used,
                 f"{o.perturbation_norm:.9g}", int(o.success), o.predicted_label]
            )
