"""Command-line entry points: ``python -m ssmae3d <command>`` or ``ssmae3d <command>``.

Run configuration files hold ``key = value`` lines.  Keys are prefixed with
the object they configure: ``model.enc_dim = 32``, ``pretrain.epochs = 20``,
``finetune.base_lr = 0.01``, ``synth.noise = 5.0``; bare ``k`` sets the fold
count.  Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as nc
from .bench import fit_quadratic, format_scaling_table, scaling_csv, scaling_rows
from .data import (SyntheticSpec, VolumeFile, VolumeFormatError, generate_synthetic, load_dataset,
                   write_dataset, write_volume)
from .harness import (TrainConfig, TrainingError, cross_validate, finetune, format_perturb_table,
                      metrics, perturb_eval, predict_scores, pretrain, read_config, write_folds_csv,
                      write_json, write_loss_csv)
from .model import CheckpointError, Classifier, MaeConfig, MaeModel, load_model, save_model
from .saliency import export_slices, latent_to_spatial

log = logging.getLogger("ssmae3d")


class UsageError(Exception):
    pass


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def _build(cls, base, overrides: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return replace(base, **overrides)


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return read_config(args.config)


def _model_config(args, cfg: dict) -> MaeConfig:
    return _build(MaeConfig, MaeConfig.desk(), _section(cfg, "model"))


def _train_config(args, cfg: dict, mode: str) -> TrainConfig:
    base = TrainConfig.desk_pretrain() if mode == "pretrain" else TrainConfig.desk_finetune()
    tc = _build(TrainConfig, base, _section(cfg, mode))
    over = {"seed": args.seed}
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        over["base_lr"] = args.lr
    return replace(tc, **over)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(path):
    if path is None:
        raise UsageError("--data is required")
    if not (Path(path) / "manifest.tsv").is_file():
        raise UsageError(f"no manifest.tsv in {path}")
    return load_dataset(path)


def _checkpoint(path, kind: str | None = None):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, meta = load_model(path)
    if kind is not None and meta.get("kind") != kind:
        raise UsageError(f"{path} holds a {meta.get('kind')} checkpoint, expected {kind}")
    return model, meta


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args, cfg: dict) -> int:
    base = SyntheticSpec.harder() if args.spec == "harder" else SyntheticSpec()
    spec = _build(SyntheticSpec, base, _section(cfg, "synth"))
    over = {"seed": args.seed}
    if args.n is not None:
        over["n"] = args.n
    spec = replace(spec, **over)
    items = generate_synthetic(spec)
    manifest = write_dataset(_out(args), items, spec.task)
    counts = np.bincount([y for _, y in items])
    print(f"wrote {len(items)} volumes ({', '.join(map(str, counts))} per class) and {manifest}")
    return 0


def cmd_pretrain(args, cfg: dict) -> int:
    vols, _ = _dataset(args.data)
    mcfg = _model_config(args, cfg)
    tc = _train_config(args, cfg, "pretrain")
    model = MaeModel(mcfg, args.seed)
    res = pretrain(model, vols, tc)
    out = _out(args)
    save_model(out / "mae.ck", model, "mae", mcfg, epochs=tc.epochs, seed=args.seed)
    write_loss_csv(out / "loss.csv", res.losses)
    write_json(out / "report.json", {"command": "pretrain", "volumes": len(vols), "steps": res.steps,
                                     "final_loss": res.losses[-1] if res.losses else None,
                                     "model": mcfg.to_dict(), "seed": args.seed})
    print(f"pretrained {res.steps} steps, final loss {res.losses[-1] if res.losses else float('nan'):.6f}")
    return 0


def _encoder_from(path, mcfg: MaeConfig):
    if path is None:
        return None, mcfg
    mae, meta = _checkpoint(path, "mae")
    return mae.encoder.state_dict(), mae.cfg


def cmd_finetune(args, cfg: dict) -> int:
    vols, labels = _dataset(args.data)
    state, mcfg = _encoder_from(args.checkpoint, _model_config(args, cfg))
    tc = _train_config(args, cfg, "finetune")
    clf = Classifier(mcfg, args.seed)
    if state is not None:
        clf.encoder.load_state_dict(state)
    res = finetune(clf, vols, labels, tc)
    out = _out(args)
    save_model(out / "classifier.ck", clf, "classifier", mcfg, pretrained=args.checkpoint is not None)
    write_loss_csv(out / "loss.csv", res.losses)
    m = metrics(predict_scores(clf, vols), labels)
    write_json(out / "report.json", {"command": "finetune", "train_metrics": m, "steps": res.steps,
                                     "pretrained": args.checkpoint is not None, "seed": args.seed})
    print(f"fine-tuned {res.steps} steps; training-set metrics {m}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    vols, labels = _dataset(args.data)
    out = _out(args)
    if args.classifier is not None:
        clf, _ = _checkpoint(args.classifier, "classifier")
        m = metrics(predict_scores(clf, vols), labels)
        write_json(out / "report.json", {"command": "eval", "mode": "holdout", "metrics": m})
        print(f"accuracy {m['accuracy']:.4f}  f1 {m['f1']:.4f}  auc {m['auc']:.4f}")
        return 0
    state, mcfg = _encoder_from(args.checkpoint, _model_config(args, cfg))
    tc = _train_config(args, cfg, "finetune")
    k = args.k if args.k is not None else int(cfg.get("k", 5))
    report = cross_validate(vols, labels, mcfg, tc, state, k=k, seed=args.seed)
    write_folds_csv(out / "folds.csv", report)
    write_json(out / "report.json", {"command": "eval", "mode": "kfold", "k": k,
                                     "pretrained": state is not None, **report.to_dict()})
    mm, sd = report.mean, report.std
    print(f"{k}-fold  accuracy {mm['accuracy']:.4f}±{sd['accuracy']:.4f}  "
          f"f1 {mm['f1']:.4f}±{sd['f1']:.4f}  auc {mm['auc']:.4f}±{sd['auc']:.4f}")
    return 0


def cmd_saliency(args, cfg: dict) -> int:
    model, meta = _checkpoint(args.checkpoint)
    encoder = model.encoder
    vols, _ = _dataset(args.data)
    if not 0 <= args.index < len(vols):
        raise UsageError(f"--index {args.index} outside dataset of {len(vols)}")
    vol = vols[args.index:args.index + 1]
    with nc.no_grad():
        Z = encoder.encode_all(vol)
    sal = latent_to_spatial(Z, encoder.cfg.patch, encoder.geom)
    out = _out(args)
    write_volume(out / "saliency.mv3d", VolumeFile(sal.values[0].astype(np.float32)))
    size = sal.values.shape[2 + args.axis]
    idx = args.slices if args.slices else [size // 4, size // 2, 3 * size // 4]
    anatomy = vol[0, args.channel] if args.overlay else None
    export_slices(sal, args.axis, idx, anatomy=anatomy, alpha=args.alpha, out_dir=out, stem="saliency")
    print(f"saliency volume {sal.values.shape[2:]} in [{sal.vmin:.4g}, {sal.vmax:.4g}]; "
          f"{len(idx)} slices along axis {args.axis} in {out}")
    return 0


def cmd_bench(args, cfg: dict) -> int:
    try:
        seqs = [int(s) for s in args.seq.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seq expects comma-separated integers, got {args.seq!r}") from None
    rows = scaling_rows(seqs)
    table = format_scaling_table(rows)
    print(table, end="")
    out = _out(args)
    (out / "scaling.txt").write_text(table)
    (out / "scaling.csv").write_text(scaling_csv(rows))
    if len(rows) >= 6:
        att = [r for r in rows if r.backbone == "attention"]
        coef, r2 = fit_quadratic([r.seq_len for r in att], [r.flops for r in att])
        print(f"attention quadratic fit: T^2 coefficient {coef[0]:.4g}, R^2 {r2:.6f}")
    return 0


def cmd_perturb_eval(args, cfg: dict) -> int:
    clf, _ = _checkpoint(args.classifier, "classifier")
    vols, labels = _dataset(args.data)
    rows = perturb_eval(clf, vols, labels, seed=args.seed, axis=args.axis)
    table = format_perturb_table(rows)
    print(table)
    out = _out(args)
    (out / "perturb.txt").write_text(table + "\n")
    write_json(out / "report.json", {"command": "perturb-eval", "rows": rows})
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".", help="directory for outputs (created)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    p = argparse.ArgumentParser(prog="ssmae3d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a labelled synthetic dataset")
    s.add_argument("--n", type=int)
    s.add_argument("--spec", choices=["main", "harder"], default="main")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="masked-reconstruction pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="train a classifier on a whole dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", help="pretrained MAE checkpoint (omit for random init)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", parents=[common], help="k-fold cross-validated metrics")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", help="pretrained MAE checkpoint for fold initialisation")
    s.add_argument("--classifier", help="score a trained classifier instead of running k-fold")
    s.add_argument("--k", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("saliency", parents=[common], help="latent-to-spatial map and slices")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--axis", type=int, default=0, choices=[0, 1, 2])
    s.add_argument("--slices", type=int, nargs="*")
    s.add_argument("--overlay", action="store_true", help="blend over the input volume")
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--alpha", type=float, default=0.5)
    s.set_defaults(func=cmd_saliency)

    s = sub.add_parser("bench", parents=[common], help="FLOPs and parameter scaling table")
    s.add_argument("--seq", default="196,3136", help="comma-separated sequence lengths")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("perturb-eval", parents=[common], help="accuracy under test-time perturbations")
    s.add_argument("--classifier", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--axis", type=int, default=0, choices=[0, 1, 2])
    s.set_defaults(func=cmd_perturb_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, _load_config(args))
    except (UsageError, FileNotFoundError, VolumeFormatError, CheckpointError,
            TrainingError, ValueError, KeyError) as exc:
        print(f"ssmae3d {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())
