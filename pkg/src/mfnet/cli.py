"""Command-line entry points: gen-data, train, eval, gradcheck.

stdout carries data (metrics, CSV); stderr carries diagnostics. Every run
directory gets the serialized config, a metrics CSV tagged with the config
hash, and checkpoints that reproduce the run bitwise.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .backbone import build_model
from .checkpoint import (CheckpointError, load_checkpoint, restore_model,
                         save_checkpoint)
from .config import (RunConfig, apply_setting, arch_from_config, config_from_lines,
                     config_hash, config_to_text, load_config)
from .data import (CLASS_NAMES, AugmentSpec, SyntheticSpec, export_frame_folders,
                   generate_synthetic, load_frame_folder, split_by_id_hash)
from .gradcheck import run_all
from .tensor import ConfigurationError, SgdState
from .tsn import SegmentPlan, evaluate, step_lr, train_epoch

METRICS_HEADER = "epoch,split,loss,top1,top5,lr"


def _err(msg):
    print(msg, file=sys.stderr)


def _build_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_setting(cfg, key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out_dir", None) is not None:
        cfg.out_dir = args.out_dir
    return cfg


def _augment_spec(cfg):
    return AugmentSpec(crop_size=(cfg.data_image_size, cfg.data_image_size))


def _synthetic_spec(cfg):
    return SyntheticSpec(
        image_size=(cfg.data_image_size, cfg.data_image_size),
        num_frames=cfg.data_num_frames,
        noise_std=cfg.data_noise_std,
        rng_seed=cfg.seed,
    )


def load_datasets(cfg):
    """Returns (train_samples, eval_samples, num_classes)."""
    if cfg.data_source == "synthetic":
        samples = generate_synthetic(
            _synthetic_spec(cfg), cfg.data_train_per_class + cfg.data_eval_per_class
        )
        train, evals = split_by_id_hash(samples, cfg.data_eval_per_class)
        return train, evals, len(CLASS_NAMES)
    root = Path(cfg.data_root)
    train, skipped_t = load_frame_folder(root / "train")
    evals, skipped_v = load_frame_folder(root / "val")
    if skipped_t or skipped_v:
        _err(f"warning: skipped {skipped_t + skipped_v} unreadable clips")
    classes_file = root / "classes.txt"
    if classes_file.exists():
        ncls = len([l for l in classes_file.read_text().splitlines() if l.strip()])
    else:
        ncls = 1 + max(s.label for s in train + evals)
    return train, evals, ncls


def _validate_train_config(cfg):
    if cfg.model_variant != "off" and cfg.sampling_k_train < 2:
        raise ConfigurationError(
            "motion blocks need sampling.k_train >= 2 (or set model.variant=off)"
        )
    if cfg.optim_batch_size < 1 or cfg.optim_epochs < 1:
        raise ConfigurationError("batch size and epochs must be >= 1")


def run_training(cfg, resume=None, log=None):
    """Train per config; returns (model, metrics_rows, eval_samples).

    Metrics rows are (epoch, split, loss, top1, top5, lr). Per-epoch RNG is
    derived from (seed, epoch), so a resumed run continues identically.
    """
    log = log or _err
    _validate_train_config(cfg)
    train_set, eval_set, ncls = load_datasets(cfg)
    arch = arch_from_config(cfg, ncls)
    model = build_model(arch, cfg.seed)
    state = SgdState(cfg.optim_lr, cfg.optim_momentum, cfg.optim_weight_decay)
    cfg_text = config_to_text(cfg)

    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        restore_model(model, ck, state)
        start_epoch = ck["epoch"] + 1
        log(f"resumed from {resume} at epoch {start_epoch}")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg_text)

    aug = _augment_spec(cfg)
    mean, std = cfg.data_norm_mean, cfg.data_norm_std
    train_plan = SegmentPlan(cfg.sampling_k_train, "train")
    eval_plan = SegmentPlan(cfg.sampling_k_eval, "eval")

    rows = []
    for epoch in range(start_epoch, cfg.optim_epochs):
        lr = step_lr(cfg.optim_lr, epoch, cfg.optim_lr_step)
        state.learning_rate = lr
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7771, epoch]))
        tr_loss, tr_top1, tr_top5 = train_epoch(
            model, train_set, train_plan, state, aug, mean, std,
            cfg.optim_batch_size, rng, cfg.data_workers,
        )
        rows.append((epoch, "train", tr_loss, tr_top1, tr_top5, lr))
        if eval_set and cfg.train_eval_every and (
            (epoch + 1) % cfg.train_eval_every == 0 or epoch == cfg.optim_epochs - 1
        ):
            ev_loss, ev_top1, ev_top5, _ = evaluate(
                model, eval_set, eval_plan, aug, mean, std
            )
            rows.append((epoch, "eval", ev_loss, ev_top1, ev_top5, lr))
            log(f"epoch {epoch}: train {tr_top1:.3f} eval {ev_top1:.3f} "
                f"loss {tr_loss:.4f} lr {lr:g}")
        else:
            log(f"epoch {epoch}: train {tr_top1:.3f} loss {tr_loss:.4f} lr {lr:g}")
        if cfg.train_ckpt_every and (epoch + 1) % cfg.train_ckpt_every == 0:
            save_checkpoint(out_dir / "last.ckpt", cfg_text, epoch,
                            model.registry, model.buffers, state.velocity)

    save_checkpoint(out_dir / "final.ckpt", cfg_text, cfg.optim_epochs - 1,
                    model.registry, model.buffers, state.velocity)
    _write_metrics(out_dir / "metrics.csv", cfg, rows, append=resume is not None)
    return model, rows, eval_set


def _write_metrics(path, cfg, rows, append=False):
    mode = "a" if append and path.exists() else "w"
    with open(path, mode) as fh:
        if mode == "w":
            fh.write(f"# config_hash={config_hash(cfg)}\n")
            fh.write(METRICS_HEADER + "\n")
        for epoch, split, loss, top1, top5, lr in rows:
            fh.write(f"{epoch},{split},{loss:.6f},{top1:.6f},{top5:.6f},{lr:g}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _build_config(args)
    if cfg.data_train_per_class + cfg.data_eval_per_class < 1:
        _err("error: total clip count per class must be >= 1")
        return 2
    if cfg.data_train_per_class < 0 or cfg.data_eval_per_class < 0:
        _err("error: clip counts must be non-negative")
        return 2
    samples = generate_synthetic(
        _synthetic_spec(cfg), cfg.data_train_per_class + cfg.data_eval_per_class
    )
    train, evals = split_by_id_hash(samples, cfg.data_eval_per_class)
    root = Path(cfg.out_dir)
    try:
        export_frame_folders(train, root / "train")
        export_frame_folders(evals, root / "val")
    except OSError as exc:
        _err(f"error: failed writing dataset: {exc}")
        return 1
    per_class = {}
    for s in samples:
        per_class[CLASS_NAMES[s.label]] = per_class.get(CLASS_NAMES[s.label], 0) + 1
    print(f"classes={len(per_class)} train_clips={len(train)} val_clips={len(evals)}")
    for name in CLASS_NAMES:
        print(f"class {name}: {per_class.get(name, 0)} clips")
    return 0


def cmd_train(args):
    cfg = _build_config(args)
    try:
        model, rows, _ = run_training(cfg, resume=args.resume)
    except (ConfigurationError, CheckpointError, ValueError) as exc:
        _err(f"error: {exc}")
        return 2
    print(METRICS_HEADER)
    for epoch, split, loss, top1, top5, lr in rows:
        print(f"{epoch},{split},{loss:.6f},{top1:.6f},{top5:.6f},{lr:g}")
    return 0


def cmd_eval(args):
    ck = load_checkpoint(args.checkpoint)
    cfg = config_from_lines(ck["config_text"].splitlines())
    for item in args.set or []:
        key, value = item.split("=", 1)
        apply_setting(cfg, key.strip(), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    _, eval_set, ncls = load_datasets(cfg)
    model = build_model(arch_from_config(cfg, ncls), cfg.seed)
    try:
        restore_model(model, ck)
    except CheckpointError as exc:
        _err(str(exc))
        return 2
    aug = _augment_spec(cfg)
    mean, std = cfg.data_norm_mean, cfg.data_norm_std

    if args.sweep_k:
        lo, hi = (int(v) for v in args.sweep_k.split(":"))
        print("k_eval,top1,top5")
        for k in range(lo, hi + 1):
            _, top1, top5, _ = evaluate(model, eval_set, SegmentPlan(k, "eval"),
                                        aug, mean, std)
            print(f"{k},{top1:.6f},{top5:.6f}")
        return 0

    loss, top1, top5, confusion = evaluate(
        model, eval_set, SegmentPlan(cfg.sampling_k_eval, "eval"), aug, mean, std
    )
    print(f"top1={top1:.6f}")
    print(f"top5={top5:.6f}")
    print("confusion," + ",".join(CLASS_NAMES[: confusion.shape[1]]))
    for i, row in enumerate(confusion):
        print(f"{CLASS_NAMES[i]}," + ",".join(str(v) for v in row))
    return 0


def cmd_gradcheck(args):
    report, passed = run_all(seed=args.seed or 0)
    for name, (err, thr) in report.items():
        status = "PASS" if err <= thr else "FAIL"
        print(f"op={name} max_rel_err={err:.3e} threshold={thr:g} status={status}")
    if not passed:
        _err("gradcheck: threshold exceeded")
        return 1
    return 0


def _add_common(p):
    p.add_argument("--config", help="path to key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mfnet",
        description="Motion feature network experiments on synthetic gesture clips",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic frame-folder dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model per config")
    _add_common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sweep-k", metavar="LO:HI",
                   help="report accuracy for each eval segment count in range")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError, CheckpointError) as exc:
        _err(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
