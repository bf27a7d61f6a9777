"""Command-line entry points.

Subcommands: synth, train, finetune, detect, eval, roc. A JSON config file
(--config) carries per-section settings; known sections are "model",
"domain_head", "train", "synth_source", "synth_target", and "detect".
Command-line flags override config values, which override defaults. The
fully resolved configuration is echoed to stdout and recorded in each run's
summary.json. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

Only the standard library is imported at module level so that --threads can
pin the BLAS thread pools before numpy first loads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile


class ConfigError(ValueError):
    """Bad config file or flag combination; maps to exit code 2."""


_SECTIONS = ("model", "domain_head", "train", "synth_source", "synth_target",
             "detect")


# ---------------------------------------------------------------------------
# small IO helpers (atomic writes for everything a run produces)

def _atomic_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-out-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_json(path: str, payload: dict) -> None:
    _atomic_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"config {path}: unknown section(s) {sorted(unknown)}; "
                          f"known sections are {list(_SECTIONS)}")
    return raw


def _build(dc_cls, section: dict | None, overrides: dict, what: str):
    """Dataclass from defaults <- config section <- non-None flag overrides."""
    names = {f.name for f in dataclasses.fields(dc_cls)}
    merged = {}
    for key, value in (section or {}).items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in config section {what!r}; "
                              f"valid keys: {sorted(names)}")
        merged[key] = value
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    for key, value in merged.items():
        if isinstance(value, list):
            merged[key] = tuple(value)
    try:
        return dc_cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def _as_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _echo(resolved: dict) -> None:
    print(json.dumps(resolved, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# shared dataset plumbing

def _load_dataset(manifest_path: str):
    from .dataprep import load_entry, load_manifest
    return [load_entry(e) for e in load_manifest(manifest_path)]


def _split_domains(images):
    from .dataprep import DOMAIN_SOURCE
    source = [im for im in images if im.domain == DOMAIN_SOURCE]
    target = [im for im in images if im.domain != DOMAIN_SOURCE]
    return source, target


def _model_from_checkpoint(path: str):
    from .porenet import load_checkpoint
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommand handlers

def _cmd_synth(args) -> int:
    from . import experiment
    from .dataprep import domain_name, synth_dataset, write_pgm, write_pores
    from .dataprep import DOMAIN_SOURCE, DOMAIN_TARGET
    cfg = _load_config(args.config)
    src_cfg = _build(type(experiment.SOURCE_SYNTH), cfg.get("synth_source"),
                     {}, "synth_source") if cfg.get("synth_source") is not None \
        else experiment.SOURCE_SYNTH
    tgt_cfg = _build(type(experiment.TARGET_SYNTH), cfg.get("synth_target"),
                     {}, "synth_target") if cfg.get("synth_target") is not None \
        else experiment.TARGET_SYNTH
    resolved = {"seed": args.seed, "images_per_domain": args.images,
                "synth_source": _as_dict(src_cfg), "synth_target": _as_dict(tgt_cfg)}
    _echo(resolved)

    os.makedirs(args.out, exist_ok=True)
    entries = []
    for domain, dcfg in ((DOMAIN_SOURCE, src_cfg), (DOMAIN_TARGET, tgt_cfg)):
        for image in synth_dataset(dcfg, args.images, args.seed, domain):
            stem = image.name
            write_pgm(os.path.join(args.out, stem + ".pgm"), image.pixels)
            write_pores(os.path.join(args.out, stem + ".pores"), image.pores)
            entries.append({"image": stem + ".pgm", "pores": stem + ".pores",
                            "domain": domain_name(domain)})
    _atomic_bytes(os.path.join(args.out, "manifest.json"),
                  (json.dumps(entries, indent=2) + "\n").encode())
    _atomic_json(os.path.join(args.out, "summary.json"),
                 {"command": "synth", "n_images": 2 * args.images,
                  "manifest": "manifest.json", "config": resolved})
    print(f"wrote {2 * args.images} images to {args.out}")
    return 0


def _train_configs(args, cfg):
    from .porenet import DomainHeadConfig, ResPoreConfig
    from .trainer import TrainConfig
    model_cfg = _build(ResPoreConfig, cfg.get("model"),
                       {"input_size": args.patch_size,
                        "width_multiplier": args.width}, "model")
    head_section = dict(cfg.get("domain_head") or {})
    head_section.setdefault("input_dim", model_cfg.input_size ** 2)
    head_cfg = _build(DomainHeadConfig, head_section, {}, "domain_head")
    train_cfg = _build(TrainConfig, cfg.get("train"),
                       {"seed": args.seed, "lam": args.lam,
                        "epochs": args.epochs, "batch_size": args.batch_size,
                        "learning_rate": args.lr}, "train")
    return model_cfg, head_cfg, train_cfg


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    model_cfg, head_cfg, train_cfg = _train_configs(args, cfg)
    resolved = {"model": _as_dict(model_cfg), "domain_head": _as_dict(head_cfg),
                "train": _as_dict(train_cfg), "patch_step": args.patch_step,
                "manifest": args.manifest}
    _echo(resolved)

    from .dataprep import labeled_patches, unlabeled_patches
    from .porenet import build_model
    from .trainer import train
    images = _load_dataset(args.manifest)
    source_images, target_images = _split_domains(images)
    if not source_images or not target_images:
        raise RuntimeError("training needs both source and target images in the manifest")
    for im in source_images:
        if im.pores is None:
            raise RuntimeError(f"source image {im.name} has no pore annotations")
    source = [s for im in source_images
              for s in labeled_patches(im, model_cfg.input_size, args.patch_step)]
    target = [s for im in target_images
              for s in unlabeled_patches(im, model_cfg.input_size)]
    model = build_model(model_cfg, head_cfg, train_cfg.seed)
    logs = train(model, source, target, train_cfg, out_dir=args.out)
    _atomic_json(os.path.join(args.out, "summary.json"),
                 {"command": "train", "iterations": len(logs),
                  "n_source_patches": len(source), "n_target_patches": len(target),
                  "final_loss_pore": logs[-1].loss_pore if logs else None,
                  "final_objective": logs[-1].objective if logs else None,
                  "checkpoint": "checkpoint_final.ckpt", "config": resolved})
    print(f"trained {len(logs)} iterations; checkpoint in {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    from .dataprep import labeled_patches
    from .trainer import TrainConfig, finetune_last_layer
    from .porenet import Checkpoint, TrainMeta, save_checkpoint
    train_cfg = _build(TrainConfig, cfg.get("train"),
                       {"seed": args.seed, "epochs": args.epochs,
                        "batch_size": args.batch_size,
                        "learning_rate": args.lr}, "train")
    resolved = {"train": _as_dict(train_cfg), "checkpoint": args.checkpoint,
                "manifest": args.manifest, "patch_step": args.patch_step}
    _echo(resolved)

    ckpt = _model_from_checkpoint(args.checkpoint)
    model = ckpt.model()
    images = [im for im in _load_dataset(args.manifest) if im.pores is not None]
    if not images:
        raise RuntimeError("fine-tuning needs annotated images")
    samples = [s for im in images
               for s in labeled_patches(im, model.cfg.input_size, args.patch_step)]
    losses = finetune_last_layer(model, samples, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    out_ckpt = os.path.join(args.out, "checkpoint_finetuned.ckpt")
    meta = TrainMeta(epoch=train_cfg.epochs, seed=train_cfg.seed,
                     lam=ckpt.meta.lam, learning_rate=train_cfg.learning_rate)
    save_checkpoint(Checkpoint(model.cfg, model.head_cfg, model.params, meta), out_ckpt)
    _atomic_json(os.path.join(args.out, "summary.json"),
                 {"command": "finetune", "n_patches": len(samples),
                  "epoch_losses": losses, "checkpoint": "checkpoint_finetuned.ckpt",
                  "config": resolved})
    print(f"fine-tuned on {len(samples)} patches; final loss {losses[-1]:.6f}")
    return 0


def _detect_settings(args, cfg):
    section = dict(cfg.get("detect") or {})
    known = {"threshold", "window"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in config section "
                          f"'detect'; valid keys: {sorted(known)}")
    threshold = getattr(args, "threshold", None)
    if threshold is None:
        threshold = section.get("threshold", 0.4)
    window = getattr(args, "window", None)
    if window is None:
        window = section.get("window", 5)
    return float(threshold), int(window)


def _cmd_detect(args) -> int:
    cfg = _load_config(args.config)
    threshold, window = _detect_settings(args, cfg)
    resolved = {"checkpoint": args.checkpoint, "image": args.image,
                "threshold": threshold, "window": window,
                "map_format": args.map_format}
    _echo(resolved)

    import numpy as np
    from .dataprep import load_image, write_image, write_pores
    from .detector import detect
    model = _model_from_checkpoint(args.checkpoint).model()
    pixels = load_image(args.image)
    result = detect(model, pixels, threshold, window)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    scaled = np.clip(result.pore_map, 0.0, 1.0)
    map_pixels = np.rint(scaled * 65535).astype(np.uint16)
    map_path = os.path.join(args.out, f"{stem}_map.{args.map_format}")
    tmp = os.path.join(args.out, f".tmp-{stem}_map.{args.map_format}")
    write_image(tmp, map_pixels, comment="scale 65535")
    os.replace(tmp, map_path)
    pores_path = os.path.join(args.out, f"{stem}.pores")
    write_pores(pores_path + ".tmp-pores", result.pores)
    os.replace(pores_path + ".tmp-pores", pores_path)
    _atomic_json(os.path.join(args.out, "summary.json"),
                 {"command": "detect", "n_detections": len(result),
                  "map": os.path.basename(map_path),
                  "pores": os.path.basename(pores_path), "config": resolved})
    print(f"{len(result)} pores detected in {args.image}")
    return 0


def _maps_and_truth(model, images, batch_size: int = 8):
    from .detector import predict_map
    labeled = [im for im in images if im.pores is not None]
    if not labeled:
        raise RuntimeError("evaluation needs annotated images")
    maps = [predict_map(model, im.pixels, batch_size) for im in labeled]
    return maps, [im.pores for im in labeled]


def _filter_domain(images, which: str):
    from .dataprep import DOMAIN_SOURCE, DOMAIN_TARGET
    if which == "all":
        return images
    tag = DOMAIN_SOURCE if which == "source" else DOMAIN_TARGET
    return [im for im in images if im.domain == tag]


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    threshold, window = _detect_settings(args, cfg)
    resolved = {"checkpoint": args.checkpoint, "manifest": args.manifest,
                "threshold": threshold, "window": window, "domain": args.domain}
    _echo(resolved)

    from .evalkit import evaluate_maps
    model = _model_from_checkpoint(args.checkpoint).model()
    images = _filter_domain(_load_dataset(args.manifest), args.domain)
    maps, truths = _maps_and_truth(model, images)
    report = evaluate_maps(maps, truths, threshold, window)
    os.makedirs(args.out, exist_ok=True)
    _atomic_json(os.path.join(args.out, "report.json"), report.to_dict())
    _atomic_json(os.path.join(args.out, "summary.json"),
                 {"command": "eval", "report": "report.json",
                  "f_score": report.f_score, "true_rate": report.true_rate,
                  "false_rate": report.false_rate, "config": resolved})
    print(f"R_T={report.true_rate:.4f} R_F={report.false_rate:.4f} "
          f"F={report.f_score:.4f} over {report.n_images} images")
    return 0


def _cmd_roc(args) -> int:
    cfg = _load_config(args.config)
    _, window = _detect_settings(args, cfg)
    resolved = {"checkpoint": args.checkpoint, "manifest": args.manifest,
                "window": window, "domain": args.domain,
                "target_false_rate": args.target_false_rate}
    _echo(resolved)

    from .evalkit import ROC_CSV_HEADER, operating_point, roc_sweep, roc_to_csv
    model = _model_from_checkpoint(args.checkpoint).model()
    images = _filter_domain(_load_dataset(args.manifest), args.domain)
    maps, truths = _maps_and_truth(model, images)
    curve = roc_sweep(maps, truths, window=window)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "roc.csv")
    roc_to_csv(curve, csv_path + ".tmp-roc")
    os.replace(csv_path + ".tmp-roc", csv_path)
    summary = {"command": "roc", "csv": "roc.csv",
               "n_thresholds": len(curve.thresholds), "config": resolved}
    if args.target_false_rate is not None:
        th, rep = operating_point(curve, args.target_false_rate)
        summary["operating_point"] = {"threshold": th,
                                      "true_rate": rep.true_rate,
                                      "false_rate": rep.false_rate,
                                      "f_score": rep.f_score}
        print(f"operating point: threshold={th:.4g} R_T={rep.true_rate:.4f} "
              f"R_F={rep.false_rate:.4f}")
    _atomic_json(os.path.join(args.out, "summary.json"), summary)
    print(f"swept {len(curve.thresholds)} thresholds over {len(maps)} images")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_common(p, out_required=True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP thread cap (set before numpy loads)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poredetect",
        description="Residual pore detection with adversarial domain transfer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-domain dataset")
    _add_common(p)
    p.add_argument("--images", type=int, default=4, help="images per domain")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("train", help="adversarial training from a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--lam", type=float, default=None,
                   help="gradient-reversal strength")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--width", type=float, default=None,
                   help="channel width multiplier")
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--patch-step", type=int, default=10)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("finetune", help="re-train only the final conv/bn pair")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--patch-step", type=int, default=10)
    p.set_defaults(handler=_cmd_finetune)

    p = sub.add_parser("detect", help="detect pores in one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--map-format", choices=("png", "pgm"), default="png")
    p.set_defaults(handler=_cmd_detect)

    p = sub.add_parser("eval", help="score detections against annotations")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--domain", choices=("source", "target", "all"), default="all")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("roc", help="sweep detection thresholds")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--domain", choices=("source", "target", "all"), default="all")
    p.add_argument("--target-false-rate", type=float, default=None)
    p.set_defaults(handler=_cmd_roc)
    return parser


def _pin_threads(n: int) -> None:
    if "numpy" in sys.modules:
        # too late to change BLAS pools; leave the running config alone
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    _pin_threads(args.threads)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
