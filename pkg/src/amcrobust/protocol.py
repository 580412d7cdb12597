"""Desk-scale robustness study: the full measurement protocol in one place.

Per seed: synthesize a dataset, adversarially train a 4-layer teacher,
train NT / AT / attention-distilled students plus a surrogate, then measure
robustness curves (PGD and FGM), attack success rates, input-gradient
smoothness, and cross-architecture transfer. Results cache per seed under
the artifacts directory keyed by a config hash, so reruns are cheap.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import evaluation as ev
from . import model as md
from . import signals as sg
from . import training as tr

# small embeddings keep a CPU run in minutes; layer counts and the 30-epoch
# budget are the load-bearing quantities
TEACHER_CFG = dict(patch_kernel=(2, 32), patch_stride=32, embed_dim=32, layers=4,
                   heads=4, hidden_dim=64, classes=8, input_shape=(2, 128))
STUDENT_CFG = dict(patch_kernel=(2, 32), patch_stride=32, embed_dim=24, layers=2,
                   heads=4, hidden_dim=48, classes=8, input_shape=(2, 128))
SURROGATE_CFG = dict(patch_kernel=(2, 16), patch_stride=16, embed_dim=64, layers=2,
                     heads=4, hidden_dim=256, classes=8, input_shape=(2, 128))


@dataclass
class StudyConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    n_train: int = 8000
    n_test: int = 500
    snr_db: int = 10
    epochs: int = 30
    teacher_epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    train_pnr_db: float = -10.0
    pnr_grid: tuple = (-30.0, -20.0, -10.0)
    eval_max_steps: int = 50
    teacher_cfg: dict = field(default_factory=lambda: dict(TEACHER_CFG))
    student_cfg: dict = field(default_factory=lambda: dict(STUDENT_CFG))
    surrogate_cfg: dict = field(default_factory=lambda: dict(SURROGATE_CFG))

    def fingerprint(self):
        fields = {k: v for k, v in asdict(self).items() if k != "seeds"}
        blob = json.dumps(fields, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _dataset(cfg, seed):
    return sg.generate_dataset(
        cfg.n_train + cfg.n_test, snr_db=cfg.snr_db, schemes=sg.DIGITAL_SCHEMES,
        seed=1000 + seed, test_count=cfg.n_test,
    )


def run_seed(cfg, seed, out_dir):
    """Train and measure everything for one seed; returns the record dict."""
    os.makedirs(out_dir, exist_ok=True)
    ds = _dataset(cfg, seed)
    t_cfg = md.TransformerConfig(**cfg.teacher_cfg)
    s_cfg = md.TransformerConfig(**cfg.student_cfg)
    g_cfg = md.TransformerConfig(**cfg.surrogate_cfg)

    teacher = tr.train(
        tr.Recipe(kind="at", train_pnr_db=cfg.train_pnr_db), ds, t_cfg,
        epochs=cfg.teacher_epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=seed,
    ).model.freeze()
    md.save_checkpoint(teacher, os.path.join(out_dir, "teacher_at.ckpt"))

    students = {}
    for kind in ("nt", "at", "atard"):
        recipe = tr.Recipe(kind=kind, train_pnr_db=cfg.train_pnr_db,
                           teacher=teacher if kind == "atard" else None)
        res = tr.train(recipe, ds, s_cfg, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       lr=cfg.lr, seed=seed)
        students[kind] = res.model.freeze()
        md.save_checkpoint(res.model, os.path.join(out_dir, f"student_{kind}.ckpt"))

    surrogate = tr.train(
        tr.Recipe(kind="nt"), ds, g_cfg, epochs=cfg.epochs, batch_size=cfg.batch_size,
        lr=cfg.lr, seed=seed,
    ).model.freeze()
    md.save_checkpoint(surrogate, os.path.join(out_dir, "surrogate_nt.ckpt"))

    test = ds.test_records
    record = {"seed": seed, "accuracy": {}, "success": {}, "smoothness": {}, "transfer": {}}
    grid = (-np.inf,) + tuple(cfg.pnr_grid)
    for kind, m in students.items():
        for attack in ("pgd", "fgm"):
            curve = ev.accuracy_under_attack(
                m, test, attack=attack, pnr_grid=grid, model_id=f"{kind}-s{seed}",
                seed=seed, max_steps=cfg.eval_max_steps,
            )
            for p in curve.points:
                key = "clean" if p.pnr_db == -np.inf else f"{p.pnr_db:g}"
                record["accuracy"].setdefault(kind, {}).setdefault(attack, {})[key] = p.accuracy
            for pnr in cfg.pnr_grid:
                rate = ev.attack_success_rate(m, test, attack, pnr, seed=seed,
                                              max_steps=cfg.eval_max_steps)
                record["success"].setdefault(kind, {}).setdefault(attack, {})[f"{pnr:g}"] = rate
        rep = ev.gradient_norm_smoothness(m, test, n=cfg.n_test, model_id=kind, seed=seed)
        record["smoothness"][kind] = rep.mean_gradient_norm

    for kind in ("nt", "atard"):
        curve = ev.transferability_eval(
            surrogate, students[kind], test, attack="pgd", pnr_grid=tuple(cfg.pnr_grid),
            surrogate_id="model1-surrogate", target_id=kind, seed=seed,
            max_steps=cfg.eval_max_steps,
        )
        record["transfer"][kind] = {f"{p.pnr_db:g}": p.accuracy for p in curve.points}

    return record


def _seed_path(base, cfg, seed):
    return os.path.join(base, f"seed{seed}.json")


def _worker(payload):
    # keep tiny-matrix workloads single-threaded when seeds run in parallel
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    cfg_dict, seed, out_dir = payload
    cfg = StudyConfig(**cfg_dict)
    record = run_seed(cfg, seed, os.path.join(out_dir, f"seed{seed}"))
    with open(_seed_path(out_dir, cfg, seed), "w") as f:
        json.dump({"fingerprint": cfg.fingerprint(), "record": record}, f, indent=2,
                  sort_keys=True)
    return seed


def run_study(cfg=None, out_dir="artifacts/study", jobs=2, echo=print):
    """Run (or resume) the full study; returns the aggregated summary dict."""
    cfg = cfg or StudyConfig()
    os.makedirs(out_dir, exist_ok=True)
    fp = cfg.fingerprint()

    pending = []
    for seed in cfg.seeds:
        path = _seed_path(out_dir, cfg, seed)
        if os.path.exists(path):
            with open(path) as f:
                blob = json.load(f)
            if blob.get("fingerprint") == fp:
                continue
        pending.append(seed)

    if pending:
        echo(f"study: running seeds {pending} ({len(cfg.seeds) - len(pending)} cached)")
        payloads = [(asdict(cfg), seed, out_dir) for seed in pending]
        if jobs > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for seed in pool.map(_worker, payloads):
                    echo(f"study: seed {seed} done")
        else:
            for payload in payloads:
                _worker(payload)
                echo(f"study: seed {payload[1]} done")

    records = []
    for seed in cfg.seeds:
        with open(_seed_path(out_dir, cfg, seed)) as f:
            records.append(json.load(f)["record"])
    summary = {"fingerprint": fp, "config": asdict(cfg), "seeds": list(cfg.seeds),
               "records": records}
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=str)
    return summary
