"""Training recipes: plain, adversarial, and five distillation objectives.

Every robust recipe regenerates its adversarial batch with 3-step PGD
against the current student before each optimizer step. Teachers are
frozen throughout; the attention-matching recipe additionally pulls the
student's per-layer attention maps toward the teacher's on the same
adversarial inputs.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as md
from .attacks import training_adversary
from .errors import ConfigError, NumericalAbort

RECIPES = ("nt", "at", "ard", "iad", "akd", "rslad", "atard")
_NEEDS_TEACHER = ("ard", "iad", "akd", "rslad", "atard")


@dataclass
class Recipe:
    kind: str
    alpha: float = 0.5
    temperature: float = 1.0
    lambda1: float = 0.5
    lambda2: float = 0.25
    beta: float = 0.1
    teacher: object = None        # path or TransformerModel (robust teacher)
    std_teacher: object = None    # path or TransformerModel (standard teacher, akd only)
    train_pnr_db: float = -10.0
    pgd_step_size: float | None = None

    def validate(self):
        if self.kind not in RECIPES:
            raise ConfigError(f"unknown recipe {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.lambda1 + self.lambda2 > 1.0:
            raise ConfigError("lambda1 + lambda2 must not exceed 1")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.kind in _NEEDS_TEACHER and self.teacher is None:
            raise ConfigError(f"recipe {self.kind!r} requires a robust teacher")
        if self.kind == "akd" and self.std_teacher is None:
            raise ConfigError("akd requires a standard-trained teacher as well")
        if self.kind not in _NEEDS_TEACHER and self.teacher is not None:
            raise ConfigError(f"recipe {self.kind!r} takes no teacher")


def _resolve_teacher(spec):
    if spec is None:
        return None
    if isinstance(spec, md.TransformerModel):
        for t in spec.params.values():
            if t.requires_grad:
                raise ConfigError("teacher model must be frozen")
        return spec
    return md.load_checkpoint(spec, trainable=False)


def _soft(logits, temperature=1.0):
    if temperature != 1.0:
        logits = ad.scale(logits, 1.0 / temperature)
    return ad.softmax(logits, axis=-1)


def _ce(logits, y, temperature=1.0):
    if temperature != 1.0:
        logits = ad.scale(logits, 1.0 / temperature)
    return ad.cross_entropy(logits, y)


# ---------------------------------------------------------------------------
# objectives; each returns (total, loss1, loss2) with floats for logging


def loss_nt(model, x, y):
    total = _ce(model.forward(x), y)
    return total, float(total.data), 0.0


def loss_at(model, x, x_adv, y, alpha=0.5):
    clean = _ce(model.forward(x), y)
    adv = _ce(model.forward(x_adv), y)
    total = ad.add(ad.scale(clean, alpha), ad.scale(adv, 1.0 - alpha))
    return total, alpha * float(clean.data), (1.0 - alpha) * float(adv.data)


def loss_ard(student, teacher, x, x_adv, y, alpha=0.5, temperature=1.0):
    t_probs = _soft(teacher.forward(x), temperature).detach()
    s_probs = _soft(student.forward(x_adv), temperature)
    dist = ad.kl_divergence(s_probs, t_probs)
    ce = _ce(student.forward(x), y, temperature)
    total = ad.add(ad.scale(dist, alpha * temperature**2), ad.scale(ce, 1.0 - alpha))
    return total, alpha * temperature**2 * float(dist.data), (1.0 - alpha) * float(ce.data)


def loss_iad(student, teacher, x, x_adv, y, beta=0.1, temperature=1.0):
    """Per-sample trust alpha_i = P_T(true class | adversarial input)^beta."""
    t_adv = _soft(teacher.forward(x_adv), temperature).data
    B = t_adv.shape[0]
    alpha = t_adv[np.arange(B), np.asarray(y)] ** beta
    s_adv = _soft(student.forward(x_adv), temperature)
    t_clean = _soft(teacher.forward(x), temperature).detach()
    s_clean = _soft(student.forward(x), temperature)
    kl_teacher = ad.kl_divergence(s_adv, t_clean, reduction="none")
    kl_self = ad.kl_divergence(s_adv, s_clean, reduction="none")
    aw = ad.tensor(alpha.astype(s_adv.dtype))
    bw = ad.tensor((1.0 - alpha).astype(s_adv.dtype))
    total = ad.tmean(ad.add(ad.mul(aw, kl_teacher), ad.mul(bw, kl_self)))
    loss1 = float(np.mean(alpha * kl_teacher.data))
    return total, loss1, float(total.data) - loss1


def loss_akd(student, teacher_at, teacher_std, x, x_adv, y, lambda1=0.5, lambda2=0.25):
    if teacher_std is None:
        raise ConfigError("akd needs both a robust and a standard teacher")
    s_adv = _soft(student.forward(x_adv))
    ce = _ce(student.forward(x_adv), y)
    kl_at = ad.kl_divergence(s_adv, _soft(teacher_at.forward(x)).detach())
    kl_std = ad.kl_divergence(s_adv, _soft(teacher_std.forward(x)).detach())
    total = ad.add(
        ad.add(ad.scale(ce, 1.0 - lambda1 - lambda2), ad.scale(kl_at, lambda1)),
        ad.scale(kl_std, lambda2),
    )
    loss1 = (1.0 - lambda1 - lambda2) * float(ce.data)
    return total, loss1, float(total.data) - loss1


def loss_rslad(student, teacher, x, x_adv, alpha=0.5, temperature=1.0):
    t_probs = _soft(teacher.forward(x)).detach()
    adv_term = ad.kl_divergence(_soft(student.forward(x_adv), temperature), t_probs)
    clean_term = ad.kl_divergence(_soft(student.forward(x)), t_probs)
    total = ad.add(ad.scale(adv_term, alpha), ad.scale(clean_term, 1.0 - alpha))
    return total, alpha * float(adv_term.data), (1.0 - alpha) * float(clean_term.data)


def atard_map_pairs(teacher_layers):
    """(teacher layer, student layer) index pairs of the map-matching term."""
    first = [(k, 0) for k in range(teacher_layers - 1)]
    second = [(k, 1) for k in range(1, teacher_layers)]
    return first + second


def attention_match_loss(teacher_maps, student_maps):
    """Batch-mean sum of Frobenius distances over the layer pairing."""
    if len(student_maps) != 2:
        raise ConfigError("attention matching expects a 2-layer student")
    if len(teacher_maps) < 2:
        raise ConfigError("attention matching expects a deeper teacher")
    t_shape = teacher_maps[0].shape[-2:]
    s_shape = student_maps[0].shape[-2:]
    if t_shape != s_shape:
        raise ConfigError(f"token-count mismatch: teacher maps {t_shape}, student maps {s_shape}")
    total = None
    for tk, sj in atard_map_pairs(len(teacher_maps)):
        diff = ad.sub(teacher_maps[tk], student_maps[sj])
        sq = ad.tsum(ad.mul(diff, diff), axis=(-2, -1))
        norm = ad.tmean(ad.sqrt(sq)) if sq.ndim else ad.sqrt(sq)
        total = norm if total is None else ad.add(total, norm)
    return total


def loss_atard(student, teacher, x_adv, y):
    """Adversarial CE plus attention-map matching on the same inputs."""
    s_logits, s_maps = student.forward(x_adv, want_maps=True)
    _, t_maps = teacher.forward(x_adv, want_maps=True)
    t_maps = [m.detach() for m in t_maps]
    loss1 = _ce(s_logits, y)
    loss2 = attention_match_loss(t_maps, s_maps)
    total = ad.add(loss1, loss2)
    return total, float(loss1.data), float(loss2.data)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: md.TransformerModel
    history: list            # (epoch, batch, total, loss1, loss2, wall_ms)
    checkpoints: list = field(default_factory=list)
    loss_log_path: str | None = None


def _stack(records):
    x = np.stack([r.iq for r in records]).astype(np.float32)
    y = np.array([r.label for r in records], dtype=np.int64)
    snrs = {r.snr_db for r in records}
    if len(snrs) != 1:
        raise ConfigError("training records must share one SNR tag")
    return x, y, snrs.pop()


def _batch_loss(recipe, student, teacher, std_teacher, xb, yb, snr_db):
    kind = recipe.kind
    if kind == "nt":
        return loss_nt(student, xb, yb)
    if kind == "rslad":
        t_probs = _soft(teacher.forward(xb)).detach()

        def kl_ascent(logits, labels):
            return ad.kl_divergence(ad.softmax(logits, axis=-1), t_probs, reduction="sum")

        x_adv = training_adversary(student, xb, yb, recipe.train_pnr_db, snr_db,
                                   loss_builder=kl_ascent, step_size=recipe.pgd_step_size)
    else:
        x_adv = training_adversary(student, xb, yb, recipe.train_pnr_db, snr_db,
                                   step_size=recipe.pgd_step_size)
    student.zero_grad()  # adversary generation left gradients behind

    if kind == "at":
        return loss_at(student, xb, x_adv, yb, recipe.alpha)
    if kind == "ard":
        return loss_ard(student, teacher, xb, x_adv, yb, recipe.alpha, recipe.temperature)
    if kind == "iad":
        return loss_iad(student, teacher, xb, x_adv, yb, recipe.beta, recipe.temperature)
    if kind == "akd":
        return loss_akd(student, teacher, std_teacher, xb, x_adv, yb, recipe.lambda1, recipe.lambda2)
    if kind == "rslad":
        return loss_rslad(student, teacher, xb, x_adv, recipe.alpha, recipe.temperature)
    if kind == "atard":
        return loss_atard(student, teacher, x_adv, yb)
    raise ConfigError(f"unknown recipe {kind!r}")


def train(recipe, dataset, model_cfg, epochs=30, batch_size=128, lr=1e-3, seed=0,
          out_dir=None, records=None, log_timing=False):
    """Run one training job; returns the final model plus history.

    ``records`` overrides the dataset's train split. With ``out_dir`` set,
    writes one checkpoint per epoch plus a loss-log CSV (wall_ms is 0
    unless ``log_timing`` - reproducible outputs by default).
    """
    recipe.validate()
    teacher = _resolve_teacher(recipe.teacher)
    std_teacher = _resolve_teacher(recipe.std_teacher)
    if recipe.kind == "atard":
        if model_cfg.layers != 2:
            raise ConfigError("attention distillation expects a 2-layer student")
        if teacher.cfg.token_count != model_cfg.token_count:
            raise ConfigError("teacher/student token counts differ")

    x, y, snr_db = _stack(records if records is not None else dataset.train_records)
    student = md.TransformerModel(model_cfg, seed=seed)
    opt = Adam(student.params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7EA1)))

    history = []
    checkpoints = []
    last_good = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for bi, start in enumerate(range(0, len(x), batch_size)):
            idx = order[start: start + batch_size]
            xb, yb = x[idx], y[idx]
            t0 = time.perf_counter()
            total, l1, l2 = _batch_loss(recipe, student, teacher, std_teacher, xb, yb, snr_db)
            if not np.isfinite(total.data):
                if out_dir:
                    _write_loss_log(out_dir, history)
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch} batch {bi}"
                    + (f"; last good checkpoint: {last_good}" if last_good else "")
                )
            student.zero_grad()
            ad.backward(total)
            opt.step()
            student.zero_grad()
            wall_ms = (time.perf_counter() - t0) * 1000.0 if log_timing else 0.0
            history.append((epoch, bi, float(total.data), l1, l2, wall_ms))
        if out_dir:
            path = os.path.join(out_dir, f"epoch{epoch:03d}.ckpt")
            md.save_checkpoint(student, path)
            checkpoints.append(path)
            last_good = path

    log_path = _write_loss_log(out_dir, history) if out_dir else None
    return TrainResult(model=student, history=history, checkpoints=checkpoints,
                       loss_log_path=log_path)


def _write_loss_log(out_dir, history):
    path = os.path.join(out_dir, "loss_log.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "batch", "loss_total", "loss1", "loss2", "wall_ms"])
        for row in history:
            w.writerow([row[0], row[1], f"{row[2]:.8g}", f"{row[3]:.8g}", f"{row[4]:.8g}",
                        f"{row[5]:.6g}"])
    return path
