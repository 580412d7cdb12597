"""Command-line pipeline: data synthesis, training, attacks, evaluation.

Every subcommand accepts ``--config file.json`` whose keys mirror the flag
names (snake_case); explicit flags win over file values. Runs echo their
fully-resolved configuration into the output directory. Exit codes:
0 success, 2 configuration error, 3 data-format error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import evaluation as ev
from . import model as md
from . import signals as sg
from . import training as tr
from .attacks import AttackBudget, run_attack, write_attack_csv
from .autodiff import ContractError, DimensionError
from .errors import ConfigError, FormatError, NumericalAbort

EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4


def _seed_default():
    env = os.environ.get("AMC_SEED")
    return int(env) if env else 0


def _resolve_out(args):
    if getattr(args, "out", None):
        return args.out
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return os.path.join("runs", f"{stamp}-seed{args.seed}")


def _echo_config(args, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items())
                if k not in ("func", "config") and not k.startswith("_")}
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True, default=str)


def _merge_config_file(args, parser):
    """File values fill in every flag the user left at its default."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as f:
        blob = json.load(f)
    if not isinstance(blob, dict):
        raise ConfigError("config file must hold a JSON object")
    provided = {a.split("=")[0].lstrip("-").replace("-", "_")
                for a in sys.argv[2:] if a.startswith("--")}
    for key, value in blob.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigError(f"unknown config key {key!r}")
        if dest not in provided:
            setattr(args, dest, value)
    return args


def _model_config(args):
    preset = getattr(args, "preset", None)
    path = getattr(args, "model_config", None)
    if preset and path:
        raise ConfigError("give either --preset or --model-config, not both")
    if preset:
        if preset not in md.PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (have {sorted(md.PRESETS)})")
        return md.PRESETS[preset]
    if path:
        with open(path) as f:
            return md.TransformerConfig(**json.load(f))
    raise ConfigError("a model config is required (--preset or --model-config)")


def _load_records(args, split="test"):
    ds = sg.load_container(args.data)
    records = ds.test_records if split == "test" else ds.train_records
    if not records:
        records = ds.records
    limit = getattr(args, "records", None)
    if limit:
        records = records[: int(limit)]
    return ds, records


def _sample_records(records, n, seed):
    if n is None or n >= len(records):
        return list(records)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1)))
    idx = np.sort(rng.choice(len(records), size=n, replace=False))
    return [records[i] for i in idx]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    alpha = None
    if args.alpha_stable is not None:
        alpha = sg.AlphaStableConfig(alpha=float(args.alpha_stable))
    channel = sg.ChannelConfig(kind=args.channel, snr_db=args.snr_db,
                               rician_k=args.rician_k, alpha_stable=alpha)
    if args.schemes == "digital":
        schemes = sg.DIGITAL_SCHEMES
    elif args.schemes == "all":
        schemes = sg.ALL_SCHEMES
    else:
        schemes = tuple(s.strip() for s in args.schemes.split(","))
    ds = sg.generate_dataset(args.records, channel=channel, schemes=schemes,
                             seed=args.seed, test_count=args.test_count)
    out_dir = os.path.dirname(os.path.abspath(args.out_file)) or "."
    os.makedirs(out_dir, exist_ok=True)
    sg.save_container(ds, args.out_file)
    _echo_config(args, out_dir)
    print(f"wrote {len(ds.records)} records, {len(ds.class_names)} classes -> {args.out_file}")
    return 0


def cmd_convert_verify(args):
    ds = sg.load_container(args.file)
    class_hist = {name: 0 for name in ds.class_names}
    snr_hist = {}
    for r in ds.records:
        class_hist[ds.class_names[r.label]] += 1
        snr_hist[r.snr_db] = snr_hist.get(r.snr_db, 0) + 1
    digest = hashlib.sha256()
    for r in ds.records:
        digest.update(r.iq.tobytes())
    print(f"records: {len(ds.records)}")
    print(f"classes: {json.dumps(class_hist, sort_keys=True)}")
    print(f"snr levels: {json.dumps({str(k): v for k, v in sorted(snr_hist.items())})}")
    print(f"payload sha256: {digest.hexdigest()}")
    return 0


def cmd_train(args):
    cfg = _model_config(args)
    ds = sg.load_container(args.data)
    recipe = tr.Recipe(
        kind=args.recipe, alpha=args.alpha, temperature=args.temperature,
        lambda1=args.lambda1, lambda2=args.lambda2, beta=args.beta,
        teacher=args.teacher, std_teacher=args.std_teacher,
        train_pnr_db=args.train_pnr_db,
    )
    out_dir = _resolve_out(args)
    _echo_config(args, out_dir)
    result = tr.train(recipe, ds, cfg, epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, seed=args.seed, out_dir=out_dir, log_timing=args.timing)
    final = result.checkpoints[-1] if result.checkpoints else None
    print(f"trained {args.recipe} for {args.epochs} epochs; final checkpoint: {final}")
    print(f"loss log: {result.loss_log_path}")
    return 0


def cmd_attack(args):
    model = md.load_checkpoint(args.model)
    _, records = _load_records(args)
    records = _sample_records(records, args.records, args.seed)
    x = np.stack([r.iq for r in records])
    y = np.array([r.label for r in records])
    snrs = {r.snr_db for r in records}
    if len(snrs) != 1:
        raise ConfigError("attack records must share one snr_db tag")
    budget = AttackBudget(pnr_db=args.pnr_db, snr_db=snrs.pop(), kind=args.budget_kind,
                          max_steps=args.max_steps, fallback_seed=args.seed)
    outcomes = run_attack(args.kind, model, x, y, budget)
    out_dir = _resolve_out(args)
    _echo_config(args, out_dir)
    path = os.path.join(out_dir, "attack.csv")
    write_attack_csv(path, [(i, args.pnr_db, args.kind, o) for i, o in enumerate(outcomes)])
    rate = float(np.mean([o.success for o in outcomes]))
    print(f"{args.kind} at PNR {args.pnr_db} dB: success rate {rate:.3f} over {len(outcomes)} records")
    print(f"wrote {path}")
    return 0


def _parse_grid(spec):
    vals = []
    for tok in spec.split(","):
        tok = tok.strip()
        vals.append(-np.inf if tok in ("-inf", "clean") else float(tok))
    return tuple(vals)


def cmd_eval(args):
    model = md.load_checkpoint(args.model)
    _, records = _load_records(args)
    grid = _parse_grid(args.pnr_grid)
    curves = []
    for s in range(args.seeds):
        subset = _sample_records(records, args.records, args.seed + s)
        curves.append(
            ev.accuracy_under_attack(model, subset, attack=args.attack, pnr_grid=grid,
                                     model_id=args.model_id, seed=args.seed + s,
                                     budget_kind=args.budget_kind, max_steps=args.max_steps,
                                     jobs=args.jobs)
        )
    out_dir = _resolve_out(args)
    _echo_config(args, out_dir)
    paths = ev.emit_report(curves, [], out_dir,
                           config_echo={"data": args.data, "attack": args.attack})
    print(f"wrote {paths['summary']}")
    return 0


def cmd_transfer(args):
    surrogate = md.load_checkpoint(args.surrogate)
    target = md.load_checkpoint(args.model)
    _, records = _load_records(args)
    grid = _parse_grid(args.pnr_grid)
    curves = []
    for s in range(args.seeds):
        subset = _sample_records(records, args.records, args.seed + s)
        curves.append(
            ev.transferability_eval(surrogate, target, subset, attack=args.attack,
                                    pnr_grid=grid, surrogate_id=args.surrogate_id,
                                    target_id=args.model_id, seed=args.seed + s,
                                    max_steps=args.max_steps, jobs=args.jobs)
        )
    out_dir = _resolve_out(args)
    _echo_config(args, out_dir)
    paths = ev.emit_report(curves, [], out_dir,
                           config_echo={"surrogate": args.surrogate, "target": args.model})
    print(f"wrote {paths['summary']}")
    return 0


def cmd_smoothness(args):
    model = md.load_checkpoint(args.model)
    _, records = _load_records(args)
    records = _sample_records(records, args.n, args.seed)
    report = ev.gradient_norm_smoothness(model, records, n=args.n, model_id=args.model_id,
                                         seed=args.seed)
    out_dir = _resolve_out(args)
    _echo_config(args, out_dir)
    path = os.path.join(out_dir, "smoothness.json")
    with open(path, "w") as f:
        json.dump({"model": report.model_id, "mean_gradient_norm": report.mean_gradient_norm,
                   "n_records": report.n_records, "seed": report.seed}, f, indent=2,
                  sort_keys=True)
    print(f"mean input-gradient norm: {report.mean_gradient_norm:.6f} over {report.n_records} records")
    print(f"wrote {path}")
    return 0


def cmd_params(args):
    if args.ckpt:
        model = md.load_checkpoint(args.ckpt)
        print(model.parameter_count())
        return 0
    cfg = _model_config(args)
    print(md.count_parameters(cfg))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="amcrobust",
                                description="robust compact transformers for radio modulation classification")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON file of flag defaults")
        sp.add_argument("--seed", type=int, default=_seed_default(),
                        help="run seed (falls back to AMC_SEED)")
        if out:
            sp.add_argument("--out", help="output directory (default runs/<stamp>-seed<seed>)")

    g = sub.add_parser("gen-data", help="synthesize a labeled I/Q dataset container")
    common(g, out=False)
    g.add_argument("--records", type=int, default=2000)
    g.add_argument("--snr-db", type=int, default=10)
    g.add_argument("--channel", default="awgn", choices=["awgn", "rayleigh", "rician"])
    g.add_argument("--rician-k", type=float, default=4.0)
    g.add_argument("--alpha-stable", type=float, default=None,
                   help="stability index in (1,2); enables impulsive noise + preprocessing")
    g.add_argument("--schemes", default="digital", help="digital | all | comma list")
    g.add_argument("--test-count", type=int, default=0)
    g.add_argument("--out-file", required=True)
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("convert-verify", help="validate a container and print histograms")
    v.add_argument("file")
    v.set_defaults(func=cmd_convert_verify)

    t = sub.add_parser("train", help="train a model with one of the seven recipes")
    common(t)
    t.add_argument("--recipe", required=True, choices=list(tr.RECIPES))
    t.add_argument("--data", required=True)
    t.add_argument("--preset", help="model preset: " + ", ".join(sorted(md.PRESETS)))
    t.add_argument("--model-config", help="JSON file with architecture fields")
    t.add_argument("--teacher", help="robust teacher checkpoint")
    t.add_argument("--std-teacher", help="standard teacher checkpoint (akd)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--temperature", type=float, default=1.0)
    t.add_argument("--lambda1", type=float, default=0.5)
    t.add_argument("--lambda2", type=float, default=0.25)
    t.add_argument("--beta", type=float, default=0.1)
    t.add_argument("--train-pnr-db", type=float, default=-10.0)
    t.add_argument("--timing", action="store_true",
                   help="record real wall_ms in the loss log (breaks bitwise reproducibility)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="generate adversarial examples, write outcome CSV")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--kind", default="pgd", choices=["fgm", "pgd"])
    a.add_argument("--pnr-db", type=float, required=True)
    a.add_argument("--budget-kind", default="pnr", choices=["pnr", "pgnr"])
    a.add_argument("--max-steps", type=int, default=50)
    a.add_argument("--records", type=int, default=None)
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("eval", help="accuracy-vs-PNR robustness curves")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--model-id", default="model")
    e.add_argument("--data", required=True)
    e.add_argument("--attack", default="pgd", choices=["fgm", "pgd"])
    e.add_argument("--pnr-grid", default="-30,-25,-20,-15,-10")
    e.add_argument("--budget-kind", default="pnr", choices=["pnr", "pgnr"])
    e.add_argument("--seeds", type=int, default=1)
    e.add_argument("--records", type=int, default=None)
    e.add_argument("--max-steps", type=int, default=50)
    e.add_argument("--jobs", type=int, default=os.cpu_count())
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("transfer", help="attacks crafted on a surrogate, scored on a target")
    common(x)
    x.add_argument("--surrogate", required=True)
    x.add_argument("--surrogate-id", default="surrogate")
    x.add_argument("--model", required=True)
    x.add_argument("--model-id", default="target")
    x.add_argument("--data", required=True)
    x.add_argument("--attack", default="pgd", choices=["fgm", "pgd"])
    x.add_argument("--pnr-grid", default="-30,-25,-20,-15,-10")
    x.add_argument("--seeds", type=int, default=1)
    x.add_argument("--records", type=int, default=None)
    x.add_argument("--max-steps", type=int, default=50)
    x.add_argument("--jobs", type=int, default=os.cpu_count())
    x.set_defaults(func=cmd_transfer)

    s = sub.add_parser("smoothness", help="mean input-gradient norm of the loss")
    common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--model-id", default="model")
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.set_defaults(func=cmd_smoothness)

    pa = sub.add_parser("params", help="closed-form or checkpoint parameter count")
    pa.add_argument("--config", dest="model_config", help="architecture JSON")
    pa.add_argument("--preset", help="preset name")
    pa.add_argument("--ckpt", help="checkpoint to inspect")
    pa.set_defaults(func=cmd_params)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if hasattr(args, "config") and args.command != "params":
            args = _merge_config_file(args, parser)
        return args.func(args)
    except (ConfigError, ContractError, DimensionError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
