"""Command-line entry point.

Subcommands: train-classifier, train-uap, eval, transfer-matrix,
ssim-analysis, alpha-sweep, gradcheck. Every command takes --config plus
dotted overrides (--attack.alpha 0.7) and echoes its effective config
into the output directory so runs are reproducible.

Exit codes: 0 success, 1 check failure, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import evaluation, models, uap
from .data import (ConfigError, DataError, attack_config_from,
                   balanced_subsample, load_dataset, load_model,
                   load_perturbation, save_model, save_perturbation,
                   validate_config)
from .evaluation import (alpha_sweep, config_hash, emit_report, fooling_rate,
                         random_noise_baseline, top1_target_accuracy,
                         transferability_matrix)
from .models import build_classifier, build_generator, train_classifier
from .similarity import layer_similarity_table
from .tensor import ContractViolation, NumericFailure, run_gradcheck_suite
from .uap import train_uap

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _apply_overrides(doc, overrides):
    for dotted, raw in overrides:
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override {dotted!r}: expected section.key")
        section, key = parts
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc.setdefault(section, {})[key] = value
    return doc


def _parse_overrides(rest):
    pairs = []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            dotted, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"override {tok!r} is missing a value")
            dotted, raw = tok[2:], rest[i + 1]
            i += 2
        pairs.append((dotted, raw))
    return pairs


def _load_config(args, rest):
    doc = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}")
    doc = _apply_overrides(doc, _parse_overrides(rest))
    if args.seed is not None:
        doc.setdefault("classifier", {})["seed"] = args.seed
        doc.setdefault("attack", {})["seed"] = args.seed
    return validate_config(doc)


def _echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _dataset(cfg, split):
    ds = cfg["dataset"]
    handle = load_dataset(ds["root"], ds["format"], split,
                          name=ds["name"], num_classes=ds["num_classes"],
                          tune_fraction=ds["tune_fraction"])
    if split == "train":
        if ds["per_class"]:
            handle = balanced_subsample(handle, ds["per_class"],
                                        cfg["classifier"]["seed"])
        elif ds["train_limit"]:
            handle = type(handle)(name=handle.name, split="train",
                                  images=handle.images[:ds["train_limit"]],
                                  labels=handle.labels[:ds["train_limit"]],
                                  num_classes=handle.num_classes)
    return handle


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _load_frozen(path):
    if not path or not os.path.exists(path):
        raise CliError(EXIT_DATA, f"checkpoint not found: {path}")
    model, _meta = load_model(path)
    return model.freeze()


def cmd_train_classifier(cfg, out_dir):
    train = _dataset(cfg, "train")
    test = _dataset(cfg, "test")
    cls = cfg["classifier"]
    model = build_classifier(cls["arch"], train.image_shape, train.num_classes,
                             seed=cls["seed"])
    report = train_classifier(model, train.images, train.labels,
                              epochs=cls["epochs"], batch_size=cls["batch_size"],
                              lr=cls["lr"], seed=cls["seed"],
                              heldout=(test.images, test.labels))
    ckpt = os.path.join(out_dir, f"classifier_{cls['arch']}_seed{cls['seed']}.uapt")
    save_model(model, ckpt, {"train_fingerprint": train.fingerprint,
                             "seed": cls["seed"]})
    rows = [[str(e), f"{l:.6f}", f"{a:.2f}",
             f"{h:.2f}" if report.heldout_accuracy else ""]
            for e, l, a, h in zip(report.epochs, report.train_loss,
                                  report.train_accuracy,
                                  report.heldout_accuracy or [0] * len(report.epochs))]
    _write_csv(os.path.join(out_dir, "train_report.csv"),
               ["epoch", "train_loss", "train_accuracy", "heldout_accuracy"], rows)
    print(f"checkpoint={ckpt} final_heldout="
          f"{report.heldout_accuracy[-1]:.2f}%" if report.heldout_accuracy
          else f"checkpoint={ckpt}")
    return EXIT_OK


def cmd_train_uap(cfg, out_dir):
    train = _dataset(cfg, "train")
    source = _load_frozen(cfg["classifier"]["checkpoint"])
    atk = attack_config_from(cfg)
    gen = build_generator(train.image_shape, seed=cfg["generator"]["seed"])
    pert, history = train_uap(gen, source, train.images, train.labels, atk,
                              dataset_fingerprint=train.fingerprint)
    h = config_hash(cfg.to_dict())
    path = os.path.join(out_dir, f"uap_{source.arch_id}_seed{atk.seed}_{h}.uapt")
    save_perturbation(pert, path)
    _write_csv(os.path.join(out_dir, "history.csv"),
               ["epoch", "ce", "fff_1", "combined", "train_fooling_rate"],
               [[str(r["epoch"]), f"{r['ce']:.6f}", f"{r['fff_1']:.6f}",
                 f"{r['combined']:.6f}", f"{r['train_fooling_rate']:.2f}"]
                for r in history])
    print(f"perturbation={path} "
          f"train_fooling_rate={history[-1]['train_fooling_rate']:.2f}%")
    return EXIT_OK


def cmd_eval(cfg, out_dir):
    ev = cfg["eval"]
    test = _dataset(cfg, "test")
    if ev["max_images"]:
        test_images = test.images[:ev["max_images"]]
        test_labels = test.labels[:ev["max_images"]]
    else:
        test_images, test_labels = test.images, test.labels
    target = _load_frozen(ev["target_checkpoint"])
    if not ev["perturbation"] or not os.path.exists(ev["perturbation"] or ""):
        raise CliError(EXIT_DATA, f"perturbation not found: {ev['perturbation']}")
    pert = load_perturbation(ev["perturbation"])
    if pert.r.shape != target.input_shape:
        raise CliError(EXIT_CONFIG,
                       f"perturbation shape {pert.r.shape} does not match model "
                       f"input {target.input_shape}")
    report = fooling_rate(target, test_images, pert, labels=test_labels,
                          batch_size=ev["batch_size"])
    if ev["baseline"] == "random":
        noise = random_noise_baseline(pert.p, pert.epsilon,
                                      pert.metadata.get("seed", 0) or 0,
                                      target.input_shape)
        report.baseline_fooling_rate = fooling_rate(target, test_images, noise,
                                                    batch_size=ev["batch_size"])
    h = config_hash(cfg.to_dict())
    seed = pert.metadata.get("seed", 0)
    emit_report(report, os.path.join(out_dir, f"fooling_seed{seed}_{h}.json"), "json")
    emit_report(report, os.path.join(out_dir, f"fooling_seed{seed}_{h}.csv"), "csv")
    if pert.metadata.get("mode") == "targeted":
        acc = top1_target_accuracy(target, test_images, pert,
                                   pert.metadata["target_class"],
                                   batch_size=ev["batch_size"])
        with open(os.path.join(out_dir, f"target_accuracy_seed{seed}_{h}.json"),
                  "w", encoding="utf-8") as fh:
            json.dump({"target_class": pert.metadata["target_class"],
                       "top1_target_accuracy": f"{acc:.2f}"}, fh, sort_keys=True)
            fh.write("\n")
    print(f"fooling_rate={report.fooling_rate:.2f}% n={report.n_images}")
    return EXIT_OK


def cmd_transfer_matrix(cfg, out_dir):
    entries = cfg["transfer"]["entries"]
    if not entries or len(entries) < 2:
        raise CliError(EXIT_CONFIG, "transfer.entries: need at least 2 entries")
    missing = [e.get("checkpoint") for e in entries
               if not os.path.exists(e.get("checkpoint", ""))]
    missing += [e.get("perturbation") for e in entries
                if not os.path.exists(e.get("perturbation", ""))]
    if missing:
        raise CliError(EXIT_DATA, "missing artifacts: " + ", ".join(map(str, missing)))
    test = _dataset(cfg, "test")
    mods = [_load_frozen(e["checkpoint"]) for e in entries]
    perts = {m.arch_id: load_perturbation(e["perturbation"])
             for m, e in zip(mods, entries)}
    matrix = transferability_matrix(mods, perts, test.images,
                                    batch_size=cfg["eval"]["batch_size"])
    h = config_hash(cfg.to_dict())
    emit_report(matrix, os.path.join(out_dir, f"transfer_{h}.csv"), "csv")
    emit_report(matrix, os.path.join(out_dir, f"transfer_{h}.json"), "json")
    print("transfer matrix written; row Avg+ = "
          + ", ".join(f"{a}:{v:.2f}" for a, v in zip(matrix.archs, matrix.row_averages)))
    return EXIT_OK


def _write_pgm(path, values):
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    pixels = (scaled * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def cmd_ssim_analysis(cfg, out_dir):
    sim = cfg["similarity"]
    if not sim["reference"] or not sim["models"]:
        raise CliError(EXIT_CONFIG, "similarity.reference and similarity.models required")
    test = _dataset(cfg, "test")
    images = test.images[:sim["max_images"]]
    handles = {e["arch"]: _load_frozen(e["checkpoint"]) for e in sim["models"]}
    if sim["reference"] not in handles:
        raise CliError(EXIT_CONFIG,
                       f"similarity.reference {sim['reference']!r} not among models")
    reference = handles[sim["reference"]]
    comparisons = [m for a, m in handles.items() if a != sim["reference"]]
    layers = sim["layers"] or list(range(1, 7))
    report = layer_similarity_table(reference, comparisons, images, layers,
                                    evaluation_fingerprint=test.fingerprint)
    h = config_hash(cfg.to_dict())
    emit_report(report, os.path.join(out_dir, f"ssim_{h}.csv"), "csv")
    from .similarity import mean_feature_map
    from .tensor import Tensor, no_grad
    for arch, model in sorted(handles.items()):
        with no_grad():
            _, taps = model.forward(Tensor(images[:1]), taps=layers)
        for l in layers:
            fmap = mean_feature_map(taps[l].data[0])
            _write_pgm(os.path.join(out_dir, f"featmap_{arch}_l{l}.pgm"),
                       fmap.values)
    print(f"ssim report written with {len(report.rows)} rows")
    return EXIT_OK


def cmd_alpha_sweep(cfg, out_dir):
    train = _dataset(cfg, "train")
    tune = _dataset(cfg, "tune")
    source = _load_frozen(cfg["classifier"]["checkpoint"])
    atk = attack_config_from(cfg)
    alphas = cfg["sweep"]["alphas"] or [0.0, 0.6, 0.7, 0.8, 1.0]
    gen_seed = cfg["generator"]["seed"]
    rows = alpha_sweep(lambda: build_generator(train.image_shape, seed=gen_seed),
                       source, train.images, train.labels, tune.images, atk,
                       alphas, train_fingerprint=train.fingerprint,
                       tune_fingerprint=tune.fingerprint)
    h = config_hash(cfg.to_dict())
    _write_csv(os.path.join(out_dir, f"alpha_sweep_{h}.csv"),
               ["alpha", "fooling_rate", "best"],
               [[f"{r['alpha']:.2f}", f"{r['fooling_rate']:.2f}",
                 "1" if r["best"] else "0"] for r in rows])
    best = next(r for r in rows if r["best"])
    print(f"best alpha={best['alpha']:.2f} fooling_rate={best['fooling_rate']:.2f}%")
    return EXIT_OK


def cmd_gradcheck(cfg, out_dir, seed=0):
    reports = run_gradcheck_suite(seed=seed)
    failed = False
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.op}: max_rel_error={r.max_rel_error:.3e} ({r.points} points) {status}")
        failed = failed or not r.passed
    return EXIT_CHECK_FAILED if failed else EXIT_OK


COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "train-uap": cmd_train_uap,
    "eval": cmd_eval,
    "transfer-matrix": cmd_transfer_matrix,
    "ssim-analysis": cmd_ssim_analysis,
    "alpha-sweep": cmd_alpha_sweep,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="uapforge",
        description="Universal adversarial perturbation toolkit")
    parser.add_argument("command", choices=[*COMMANDS, "gradcheck"])
    parser.add_argument("--config", default=None)
    parser.add_argument("--out", default="out")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--jobs", type=int, default=1)  # evaluation batching only
    args, rest = parser.parse_known_args(argv)
    try:
        if args.command == "gradcheck":
            os.makedirs(args.out, exist_ok=True)
            return cmd_gradcheck(None, args.out, seed=args.seed or 0)
        cfg = _load_config(args, rest)
        _echo_config(cfg, args.out)
        return COMMANDS[args.command](cfg, args.out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
