"""Command-line front end: data synthesis, training, generation, evaluation.

Each file-producing subcommand writes under one run directory — named by
UTC timestamp plus a configuration hash unless ``--out`` picks the
location — and prints the paths it wrote. The resolved configuration is
saved alongside the outputs, so any run can be reproduced from its
directory alone. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error. Set ``VIEWMORPH_VERBOSE=1`` (or ``2``) for progress
logging on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import build_dataset, load_dataset
from .errors import ConfigError, ViewmorphError
from .evaluation import (
    ClassifierConfig,
    fewshot_eval,
    knn_idpres,
    model_generator,
    train_feature_extractor,
)
from .networks import VARIANTS, NetworkConfig, one_hot_codes
from .reporting import (
    contact_sheet,
    format_summary,
    save_accuracy_figure,
    save_loss_figure,
    write_reports,
    write_summary,
)
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger("viewmorph")


def _hash8(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:8]


def _run_dir(explicit, config_text: str) -> Path:
    if explicit is not None:
        out = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        out = Path("runs") / f"{stamp}-{_hash8(config_text)}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out_dir: Path, text: str) -> None:
    (out_dir / "config.txt").write_text(text, encoding="utf-8")


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} is not >= 1")
    return value


def _nonnegative(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 0:
        raise argparse.ArgumentTypeError(f"{value} is negative")
    return value


# --- subcommands --------------------------------------------------------


def cmd_gen_data(args) -> int:
    manifest = build_dataset(
        args.identities, args.per_cell, args.out, seed=args.seed, image_size=args.image_size
    )
    print(f"manifest: {manifest.manifest_path}")
    print(f"images: {len(manifest.paths)}")
    return 0


def _load_split(manifest, name: str):
    data = load_dataset(manifest)
    return data if name == "all" else data.split(name)


def cmd_train(args) -> int:
    data = _load_split(args.data, args.split)
    if args.config is not None:
        config = TrainConfig.from_text(Path(args.config).read_text(encoding="utf-8"))
    else:
        n_identities = int(np.max(data.identities)) + 1
        config = TrainConfig(network=NetworkConfig(n_identities=n_identities))
    if args.ablation is not None:
        config = dataclasses.replace(
            config, network=dataclasses.replace(config.network, variant=args.ablation)
        )
    for field in ("steps", "seed", "batch_size", "checkpoint_every"):
        value = getattr(args, field)
        if value is not None:
            config = dataclasses.replace(config, **{field: value})

    config_text = config.to_text()
    out = _run_dir(args.out, config_text)
    _write_config(out, config_text)

    def progress(step, d_loss, g_loss):
        if step % config.checkpoint_every == 0 or step == config.steps:
            log.info("step %d  d_loss %.4f  g_loss %.4f", step, d_loss, g_loss)

    result = train(config, data, out, resume_from=args.resume, progress=progress)
    save_loss_figure(result.metrics_path, out / "loss.png")
    print(f"run directory: {out}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    print(f"loss figure: {out / 'loss.png'}")
    if result.d_losses:
        print(f"final: d_loss {result.d_losses[-1]:.6f}  g_loss {result.g_losses[-1]:.6f}")
    return 0


def cmd_generate(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    net = loaded.config.network
    data = _load_split(args.data, args.split)
    m = len(data.images)
    if args.count > m:
        raise ConfigError(f"requested {args.count} inputs but the {args.split} split has {m}")

    config_text = (
        f"checkpoint={args.checkpoint}\ncount={args.count}\nseed={args.seed}\nsplit={args.split}\n"
    )
    out = _run_dir(args.out, config_text)
    _write_config(out, config_text)

    picked = np.arange(args.count) * m // args.count
    originals = data.images[picked]
    rng = np.random.default_rng(args.seed)
    generate = model_generator(loaded.gen, batch_size=args.batch_size)
    sheets = []
    for view in range(net.n_viewpoints):
        log.info("generating viewpoint %d/%d", view + 1, net.n_viewpoints)
        codes = one_hot_codes(np.full(args.count, view), net.n_viewpoints)
        z = rng.standard_normal((args.count, net.noise_features))
        sheets.append(generate(originals, z, codes))
    generated = np.stack(sheets, axis=1)
    sheet_path = out / "contact_sheet.png"
    contact_sheet(originals, generated, sheet_path)
    print(f"run directory: {out}")
    print(f"contact sheet: {sheet_path}")
    return 0


def _eval_prelude(args):
    loaded = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    generate = model_generator(loaded.gen, batch_size=args.batch_size)
    return loaded, data, generate


def _finish_eval(reports, out: Path) -> int:
    report_path = out / "report.tsv"
    write_reports(reports, report_path)
    write_summary(reports, out / "summary.txt")
    save_accuracy_figure(reports, out / "accuracy.png")
    print(f"run directory: {out}")
    print(f"report: {report_path}")
    sys.stdout.write(format_summary(reports))
    return 0


def cmd_eval_idpres(args) -> int:
    loaded, data, generate = _eval_prelude(args)
    net = loaded.config.network
    config_text = (
        f"protocol=idpres\nnc={args.nc}\nk={args.k}\nseed={args.seed}\n"
        f"extractor_steps={args.extractor_steps}\n" + loaded.config.to_text()
    )
    out = _run_dir(args.out, config_text)
    _write_config(out, config_text)

    log.info("training feature extractor on the auxiliary split")
    extractor = train_feature_extractor(
        data.split("auxiliary"), ClassifierConfig(steps=args.extractor_steps, seed=args.seed)
    )
    log.info("running identity-preservation protocol")
    report = knn_idpres(
        data.split("standard"),
        generate,
        extractor,
        n_classes=args.nc,
        k=args.k,
        n_viewpoints=net.n_viewpoints,
        noise_features=net.noise_features,
        seed=args.seed,
        config_hash=_hash8(config_text),
    )
    return _finish_eval([report], out)


def cmd_eval_fewshot(args) -> int:
    loaded, data, generate = _eval_prelude(args)
    net = loaded.config.network
    config_text = (
        f"protocol=fewshot\nnc={args.nc}\nshots={args.shots}\nseed={args.seed}\n"
        f"fakes_per_image={args.fakes_per_image}\nclassifier_steps={args.classifier_steps}\n"
        + loaded.config.to_text()
    )
    out = _run_dir(args.out, config_text)
    _write_config(out, config_text)

    log.info("running few-shot protocol (baseline, then augmented)")
    baseline, augmented = fewshot_eval(
        data.split("standard"),
        generate,
        n_classes=args.nc,
        shots=args.shots,
        config=ClassifierConfig(steps=args.classifier_steps, seed=args.seed),
        fakes_per_image=args.fakes_per_image,
        n_viewpoints=net.n_viewpoints,
        noise_features=net.noise_features,
        seed=args.seed,
        config_hash=_hash8(config_text),
    )
    return _finish_eval([baseline, augmented], out)


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(
        seed=args.seed,
        instances=args.instances,
        progress=lambda r: log.info("%s: %.3e", r.name, r.max_rel_err),
    )
    print(gradcheck.format_table(results))
    return 0 if all(r.passed for r in results) else 1


# --- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewmorph",
        description="Viewpoint-transforming sprite GAN: data, training, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a labeled sprite dataset")
    p.add_argument("--identities", type=_positive, required=True, help="number of identities")
    p.add_argument("--per-cell", type=_positive, required=True,
                   help="samples per identity-viewpoint cell")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=_nonnegative, default=0)
    p.add_argument("--image-size", type=_positive, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the generator and discriminator")
    p.add_argument("--data", required=True, help="manifest CSV path")
    p.add_argument("--config", help="key=value configuration file (defaults fit the dataset)")
    p.add_argument("--ablation", choices=VARIANTS, help="architecture variant override")
    p.add_argument("--steps", type=_nonnegative, help="training steps override")
    p.add_argument("--seed", type=_nonnegative, help="seed override")
    p.add_argument("--batch-size", type=_positive, help="batch size override")
    p.add_argument("--checkpoint-every", type=_positive, help="checkpoint interval override")
    p.add_argument("--split", choices=("auxiliary", "standard", "all"), default="auxiliary",
                   help="which manifest split to train on")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", help="run directory (default: runs/<stamp>-<hash>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="render a contact sheet of generated viewpoints")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest CSV path")
    p.add_argument("--count", type=_positive, default=8, help="input images to transform")
    p.add_argument("--split", choices=("auxiliary", "standard", "all"), default="standard")
    p.add_argument("--seed", type=_nonnegative, default=0)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--out", help="run directory (default: runs/<stamp>-<hash>)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval-idpres", help="identity preservation of generated images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest CSV path")
    p.add_argument("--nc", type=_positive, required=True, help="classes in the protocol")
    p.add_argument("--k", type=_positive, default=5, help="nearest neighbors")
    p.add_argument("--seed", type=_nonnegative, default=0)
    p.add_argument("--extractor-steps", type=_positive, default=500)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--out", help="run directory (default: runs/<stamp>-<hash>)")
    p.set_defaults(func=cmd_eval_idpres)

    p = sub.add_parser("eval-fewshot", help="few-shot classification with augmentation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest CSV path")
    p.add_argument("--nc", type=_positive, required=True, help="classes in the protocol")
    p.add_argument("--shots", type=_positive, required=True, help="training images per class")
    p.add_argument("--seed", type=_nonnegative, default=0)
    p.add_argument("--fakes-per-image", type=_positive, default=20)
    p.add_argument("--classifier-steps", type=_positive, default=500)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--out", help="run directory (default: runs/<stamp>-<hash>)")
    p.set_defaults(func=cmd_eval_fewshot)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    p.add_argument("--seed", type=_nonnegative, default=0)
    p.add_argument("--instances", type=_positive, default=gradcheck.DEFAULT_INSTANCES)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _configure_logging() -> None:
    level = {"1": logging.INFO, "2": logging.DEBUG}.get(
        os.environ.get("VIEWMORPH_VERBOSE", ""), logging.WARNING
    )
    logging.basicConfig(stream=sys.stderr, level=level, format="%(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ViewmorphError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
