"""Command-line driver for the full experiment lifecycle.

Subcommands: pretrain, finetune, eval, sweep, gradcheck, report. A single
TOML config file (sections [arch], [data], [plan], [train], [sweep]) plus
--seed/--out/--threads flags fully determine every numeric artifact. All
files are written atomically.

Exit codes: 0 success, 2 config/usage error, 3 numeric failure,
4 partial sweep failure.
"""

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

try:
    import tomllib
except ImportError:
    import tomli as tomllib

import numpy as np

from . import gradcheck as gradcheck_mod
from .backend import BACKEND
from .checkpoint import (
    checkpoint_of,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from .errors import NumericError, VoxpeftError
from .mixpeft import MixPlan, count_params, enumerate_combinations, plan_from_dict, plan_to_dict
from .models import VIT_CNN, VIT_VIT, ArchConfig, build_model
from .peft import PeftMethod
from .presets import hyperparam_preset, plan_preset
from .scanner import get_profile, load_dataset, make_dataset
from .training import Hyperparams, evaluate, history_to_csv, peft_finetune, pretrain
from .volumeio import atomic_write_bytes

_VARIANT_ALIASES = {
    "vit_vit": VIT_VIT, "vit-vit": VIT_VIT, "vitvit": VIT_VIT,
    "vit_cnn": VIT_CNN, "vit-cnn": VIT_CNN, "vitcnn": VIT_CNN,
}
_SCHEDULE_ALIASES = {
    "cosineanneal": "cosine_anneal", "cosine_anneal": "cosine_anneal", "cosine-anneal": "cosine_anneal",
    "warmupcosine": "warmup_cosine", "warmup_cosine": "warmup_cosine", "warmup-cosine": "warmup_cosine",
}


def _atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _subseed(seed, tag):
    return int(np.random.SeedSequence((int(seed), tag)).generate_state(1)[0])


def _load_config(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _arch_from_config(cfg):
    section = dict(cfg.get("arch", {}))
    if "variant" in section:
        key = str(section["variant"]).strip().lower()
        if key not in _VARIANT_ALIASES:
            raise VoxpeftError(f"unknown variant {section['variant']!r}")
        section["variant"] = _VARIANT_ALIASES[key]
    if "skip_layer_indices" in section:
        section["skip_layer_indices"] = tuple(section["skip_layer_indices"])
    return ArchConfig(**section)


def _plan_from_config(cfg, variant):
    section = cfg.get("plan", {})
    if not section or "preset" in section:
        return plan_preset(section.get("preset", "petite"), variant)

    def method(table):
        if not table:
            return None
        table = dict(table)
        for key in ("lora_targets", "ssf_sites"):
            if key in table:
                table[key] = tuple(table[key])
        return PeftMethod(**table)

    return MixPlan(
        encoder_method=method(section.get("encoder")),
        decoder_method=method(section.get("decoder")),
        bitfit_all_layers=bool(section.get("bitfit", False)),
        baseline=section.get("baseline", "none"),
    )


def _hyperparams(cfg, variant, plan, seed, section="train"):
    hp = hyperparam_preset(variant, plan, desk=True, seed=seed)
    overrides = dict(cfg.get(section, {}))
    if "schedule" in overrides:
        key = str(overrides["schedule"]).strip().lower()
        if key not in _SCHEDULE_ALIASES:
            raise VoxpeftError(f"unknown schedule {overrides['schedule']!r}")
        overrides["schedule"] = _SCHEDULE_ALIASES[key]
    if "optimizer" in overrides:
        overrides["optimizer"] = str(overrides["optimizer"]).strip().lower()
    fields = {k: overrides[k] for k in
              ("learning_rate", "weight_decay", "optimizer", "schedule", "epochs", "batch_size")
              if k in overrides}
    return Hyperparams(**{**_hp_dict(hp), **fields, "seed": seed})


def _hp_dict(hp):
    return {
        "learning_rate": hp.learning_rate, "weight_decay": hp.weight_decay,
        "optimizer": hp.optimizer, "schedule": hp.schedule,
        "epochs": hp.epochs, "batch_size": hp.batch_size, "seed": hp.seed,
    }


def _datasets(cfg, seed, phase):
    """(train, val) sample lists for the pretrain or finetune phase."""
    data = cfg.get("data", {})
    mini = bool(data.get("mini", True))
    crop = int(data.get("crop_size", 16))
    if phase == "pretrain":
        scanner = int(data.get("source_scanner", 1))
        n_train = int(data.get("pretrain_samples", 30))
        n_val = int(data.get("pretrain_val_samples", 15))
        tags = (1, 2)
    else:
        scanner = int(data.get("target_scanner", 4))
        n_train = int(data.get("finetune_samples", 10))
        n_val = int(data.get("finetune_val_samples", 15))
        tags = (3, 4)
    profile = get_profile(scanner, mini=mini)
    train = make_dataset(profile, n_train, crop_size=crop, seed=_subseed(seed, tags[0]))
    val = make_dataset(profile, n_val, crop_size=crop, seed=_subseed(seed, tags[1]))
    return train, val


def _write_history(out_dir, result):
    _atomic_write_text(os.path.join(out_dir, "history.csv"), history_to_csv(result.history))


def _metrics_text(report):
    head = f"{'psnr':>10}  {'ssim':>8}  {'nrmse':>8}  {'n_samples':>9}"
    row = f"{report.psnr:>10.4f}  {report.ssim:>8.4f}  {report.nrmse:>8.5f}  {report.n_samples:>9d}"
    return head + "\n" + row + "\n"


# -- subcommands ----------------------------------------------------------------

def cmd_pretrain(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    arch = _arch_from_config(cfg)
    plan = MixPlan(baseline="full_ft")
    hp = _hyperparams(cfg, arch.variant, plan, _subseed(seed, 10))
    train_set, val_set = _datasets(cfg, seed, "pretrain")
    model = build_model(arch, seed=_subseed(seed, 11))
    result = pretrain(model, train_set, val_set, hp)
    os.makedirs(args.out, exist_ok=True)
    _write_history(args.out, result)
    save_checkpoint(os.path.join(args.out, "checkpoint.ptit"),
                    checkpoint_of(model, plan=None, epoch=result.best_epoch))
    print(f"pretrained {arch.variant} for {hp.epochs} epochs on backend={BACKEND}; "
          f"best epoch {result.best_epoch} (val psnr {result.best_psnr:.3f})")
    print(f"artifacts in {args.out}")
    return 0


def _finetune_once(model, plan, cfg, seed, out_dir, hp=None):
    arch = model.config
    hp = hp or _hyperparams(cfg, arch.variant, plan, _subseed(seed, 20))
    train_set, val_set = _datasets(cfg, seed, "finetune")
    result, report = peft_finetune(model, plan, train_set, val_set, hp)
    os.makedirs(out_dir, exist_ok=True)
    _write_history(out_dir, result)
    _atomic_write_text(os.path.join(out_dir, "param_report.json"),
                       json.dumps(report.as_dict(), indent=2) + "\n")
    save_checkpoint(os.path.join(out_dir, "checkpoint.ptit"),
                    checkpoint_of(model, plan=plan, epoch=result.best_epoch))
    metrics = evaluate(model, val_set)
    _atomic_write_text(os.path.join(out_dir, "metrics.json"),
                       json.dumps(metrics.as_dict(), indent=2) + "\n")
    return result, report, metrics


def cmd_finetune(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    ckpt = load_checkpoint(getattr(args, "from"))
    if "arch" in cfg and _arch_from_config(cfg) != ckpt.config:
        raise VoxpeftError("config [arch] disagrees with the checkpoint architecture")
    model = restore_model(ckpt)
    plan = _plan_from_config(cfg, model.config.variant)
    result, report, metrics = _finetune_once(model, plan, cfg, seed, args.out)
    print(f"fine-tuned with plan {plan.label()}: trainable {report.trainable}/{report.total} "
          f"({100 * report.fraction:.3f}%)")
    print(_metrics_text(metrics), end="")
    print(f"artifacts in {args.out}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.model)
    model = restore_model(ckpt)
    if not os.path.isdir(args.data):
        raise VoxpeftError(f"data directory {args.data!r} does not exist")
    dataset = load_dataset(args.data)
    if not dataset:
        raise VoxpeftError(f"data directory {args.data!r} holds no volume pairs")
    report = evaluate(model, dataset)
    payload = json.dumps(report.as_dict(), indent=2)
    print(payload)
    print(_metrics_text(report), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _atomic_write_text(os.path.join(args.out, "metrics.json"), payload + "\n")
    return 0


_RANKING_COLUMNS = ("plan", "encoder", "decoder", "bitfit", "pct_param", "psnr", "ssim", "nrmse")


def _ranking_rows_to_csv(rows):
    lines = [",".join(_RANKING_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r[c]) for c in _RANKING_COLUMNS))
    return "\n".join(lines) + "\n"


def _ranking_rows_to_text(rows):
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in _RANKING_COLUMNS}
    head = "  ".join(c.ljust(widths[c]) for c in _RANKING_COLUMNS)
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in _RANKING_COLUMNS))
    return "\n".join(lines) + "\n"


def _write_ranking(out_dir, rows, failures):
    rows = sorted(rows, key=lambda r: -float(r["psnr"]))
    _atomic_write_text(os.path.join(out_dir, "ranking.csv"), _ranking_rows_to_csv(rows))
    text = _ranking_rows_to_text(rows)
    if failures:
        text += "\nfailed arms:\n" + "\n".join(f"  {name}: {err}" for name, err in failures) + "\n"
    _atomic_write_text(os.path.join(out_dir, "ranking.txt"), text)
    return rows


def _sweep_arm(spec):
    """One sweep arm in a worker process; returns a ranking row or an error."""
    try:
        ckpt = load_checkpoint(spec["ckpt_path"])
        model = restore_model(ckpt)
        plan = plan_from_dict(spec["plan"])
        hp = Hyperparams(**spec["hp"])
        result, report, metrics = _finetune_once(
            model, plan, spec["cfg"], spec["seed"], spec["out_dir"], hp=hp
        )
        enc = plan.encoder_method.kind if plan.encoder_method else "-"
        dec = plan.decoder_method.kind if plan.decoder_method else "-"
        if plan.baseline != "none":
            enc = dec = plan.baseline
        row = {
            "plan": plan.label(),
            "encoder": enc,
            "decoder": dec,
            "bitfit": "yes" if plan.bitfit_all_layers else "no",
            "pct_param": f"{100 * report.fraction:.4f}",
            "psnr": f"{metrics.psnr:.4f}",
            "ssim": f"{metrics.ssim:.4f}",
            "nrmse": f"{metrics.nrmse:.5f}",
        }
        _atomic_write_text(os.path.join(spec["out_dir"], "row.json"), json.dumps(row) + "\n")
        return {"ok": True, "row": row, "name": spec["name"]}
    except Exception as exc:  # arm failures must not kill the sweep
        return {"ok": False, "name": spec["name"], "error": f"{type(exc).__name__}: {exc}"}


def cmd_sweep(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    sweep_cfg = dict(cfg.get("sweep", {}))
    os.makedirs(args.out, exist_ok=True)

    ckpt_path = getattr(args, "from")
    if ckpt_path is None:
        arch = _arch_from_config(cfg)
        plan = MixPlan(baseline="full_ft")
        hp = _hyperparams(cfg, arch.variant, plan, _subseed(seed, 10))
        if "pretrain_epochs" in sweep_cfg:
            hp = Hyperparams(**{**_hp_dict(hp), "epochs": int(sweep_cfg["pretrain_epochs"])})
        train_set, val_set = _datasets(cfg, seed, "pretrain")
        model = build_model(arch, seed=_subseed(seed, 11))
        result = pretrain(model, train_set, val_set, hp)
        ckpt_path = os.path.join(args.out, "pretrained.ptit")
        save_checkpoint(ckpt_path, checkpoint_of(model))
        print(f"pretrained base model ({hp.epochs} epochs, best val psnr {result.best_psnr:.3f})")
    variant = load_checkpoint(ckpt_path).config.variant

    plans = [MixPlan(baseline="no_ft"), MixPlan(baseline="full_ft")] + enumerate_combinations(variant)
    specs = []
    for i, plan in enumerate(plans):
        hp = hyperparam_preset(variant, plan, desk=True, seed=_subseed(seed, 30 + i))
        if "epochs" in sweep_cfg:
            hp = Hyperparams(**{**_hp_dict(hp), "epochs": int(sweep_cfg["epochs"])})
        name = f"arm{i:02d}_{plan.label().replace(':', '-').replace('+', '_')}"
        specs.append({
            "name": name,
            "out_dir": os.path.join(args.out, name),
            "ckpt_path": ckpt_path,
            "plan": plan_to_dict(plan),
            "hp": _hp_dict(hp),
            "cfg": cfg,
            "seed": seed,
        })

    workers = args.threads or os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_arm, specs))
    else:
        outcomes = [_sweep_arm(s) for s in specs]

    rows = [o["row"] for o in outcomes if o["ok"]]
    failures = [(o["name"], o["error"]) for o in outcomes if not o["ok"]]
    ranked = _write_ranking(args.out, rows, failures)
    print(_ranking_rows_to_text(ranked), end="")
    if failures:
        print(f"{len(failures)} arm(s) failed:", file=sys.stderr)
        for name, err in failures:
            print(f"  {name}: {err}", file=sys.stderr)
        return 4
    print(f"sweep complete: {len(rows)} arms in {args.out}")
    return 0


def cmd_report(args):
    rows = []
    for entry in sorted(os.listdir(args.indir)):
        row_path = os.path.join(args.indir, entry, "row.json")
        if os.path.isfile(row_path):
            with open(row_path, "r", encoding="utf-8") as fh:
                rows.append(json.load(fh))
    if not rows:
        raise VoxpeftError(f"no arm results under {args.indir!r}")
    out = args.out or args.indir
    os.makedirs(out, exist_ok=True)
    ranked = _write_ranking(out, rows, [])
    print(_ranking_rows_to_text(ranked), end="")
    return 0


def cmd_gradcheck(args):
    results = gradcheck_mod.run_all(seed=args.seed if args.seed is not None else 0)
    failed = 0
    for name, err in results.items():
        ok = err < args.tol
        failed += 0 if ok else 1
        print(f"{name:28s} {err:.3e}  {'PASS' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} primitives pass at tol {args.tol:g} (backend={BACKEND})")
    return 0 if failed == 0 else 3


def build_parser():
    parser = argparse.ArgumentParser(prog="voxpeft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--threads", type=int, default=0, help="worker pool width (0 = cpu count)")

    p = sub.add_parser("pretrain", help="train a model from scratch on the source scanner")
    common(p, "runs/pretrain")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="apply a fine-tuning plan to a pre-trained checkpoint")
    common(p, "runs/finetune")
    p.add_argument("--from", required=True, help="pre-trained checkpoint path")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a volume-pair directory")
    common(p, "")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="directory of NNNN.short.vol/NNNN.long.vol pairs")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="run every feasible mixed plan plus baselines")
    common(p, "runs/sweep")
    p.add_argument("--from", default=None, help="pre-trained checkpoint (otherwise pretrains first)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    common(p, "")
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="regenerate the ranking table from sweep artifacts")
    common(p, "")
    p.add_argument("indir", help="sweep output directory")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except VoxpeftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
