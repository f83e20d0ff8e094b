"""Command-line entry point: prep | train | gen | fid | tsne | stats | serve.

Every command writes a run manifest (command, config, seed, input hashes,
output paths, version) next to its outputs so a run can be reproduced
from the manifest alone.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, nets, pipeline, stats, train
from . import features as ft
from . import fid as fid_mod
from . import tsne as tsne_mod
from .errors import (ConfigError, CropError, DataError, FormatError,
                     RadsynthError, ValidationError)

USER_ERRORS = (ConfigError, ValidationError, DataError, FormatError, CropError)


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _hash_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_input(path):
    path = Path(path)
    if path.is_file():
        return _hash_file(path)
    if path.is_dir():
        digest = hashlib.sha256()
        for p in sorted(path.rglob("*")):
            if p.is_file():
                digest.update(f"{p.relative_to(path)}:{p.stat().st_size}\n".encode())
        return f"dir:{digest.hexdigest()}"
    return "missing"


def write_run_manifest(out_dir, command, config, seed, inputs, outputs):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "seed": seed,
        "config": config,
        "input_hashes": {str(k): _hash_input(k) for k in inputs},
        "outputs": [str(o) for o in outputs],
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_prep(args):
    crop = pipeline.CropSpec(args.crop_width_fraction, args.crop_height_fraction,
                             args.crop_bottom_margin)
    ad = pipeline.ADParams(args.ad_iterations, args.ad_dt, args.ad_kappa, args.ad_conductance)
    cfg = pipeline.PreprocConfig(crop, args.size, args.size, args.denoise, ad)
    exclude = []
    if args.exclude:
        exclude = [line.strip() for line in open(args.exclude) if line.strip()]
    manifest = pipeline.build_manifest(args.input_dir, exclude)
    written = pipeline.preprocess_dataset(manifest, cfg, args.out_dir)
    manifest_path = Path(args.out_dir) / "manifest.csv"
    manifest.to_csv(manifest_path)
    write_run_manifest(args.out_dir, "prep",
                       {"crop": vars(crop), "size": args.size, "denoise": args.denoise,
                        "ad": vars(ad), "exclude_count": len(exclude)},
                       None, [args.input_dir], written + [str(manifest_path)])
    print(f"prep: {len(manifest)} listed, {len(manifest.included)} included, "
          f"{len(written)} written to {args.out_dir}")
    return 0


def _resolve_train_config(args):
    overrides = {}
    for flag, key in (("size", "image_size"), ("critic_iters", "critic_iters"),
                      ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("gp_lambda", "gp_lambda"), ("lr", "lr"), ("beta1", "beta1"),
                      ("beta2", "beta2"), ("seed", "seed"),
                      ("checkpoint_interval", "checkpoint_interval"),
                      ("steps", "max_steps")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = val
    if args.denoise is not None:
        overrides["denoise"] = args.denoise
    if args.preset:
        return train.TrainConfig.from_preset(args.preset, **overrides)
    return train.TrainConfig(**overrides)


def cmd_train(args):
    cfg = _resolve_train_config(args)
    gen_cfg = nets.GeneratorConfig(noise_channels=args.noise_dim, img_channels=1,
                                   target_size=cfg.image_size, base_features=args.base_features)
    critic_cfg = nets.CriticConfig(img_channels=1, input_size=cfg.image_size,
                                   base_features=args.base_features)
    dataset = pipeline.load_folder_dataset(args.data)
    if dataset.images.shape[2] != cfg.image_size:
        raise ConfigError(f"dataset images are {dataset.images.shape[2]}x"
                          f"{dataset.images.shape[3]}, config wants {cfg.image_size}")

    def progress(step, record):
        if args.verbose and step % 50 == 0:
            print(f"step {step}: d_loss={record.d_loss:.4f} g_loss={record.g_loss:.4f} "
                  f"w_est={record.wasserstein_estimate:.4f}")

    result = train.run_training(cfg, dataset, gen_cfg, critic_cfg, run_dir=args.out,
                                step_callback=progress)
    log_path = Path(args.out) / "log.csv"
    write_run_manifest(args.out, "train",
                       {"train": vars(cfg), "generator": vars(gen_cfg),
                        "critic": vars(critic_cfg), "preset": args.preset},
                       cfg.seed, [args.data],
                       result.checkpoints + [str(log_path)])
    print(f"train: {len(result.log)} generator steps, "
          f"{len(result.checkpoints)} checkpoints in {args.out}")
    return 0


def cmd_gen(args):
    generator = nets.build_from_checkpoint(args.checkpoint)
    if generator.config.get("kind") != "generator":
        raise ConfigError(f"{args.checkpoint} is not a generator checkpoint")
    noise_dim = generator.config["noise_channels"]
    rng = np.random.default_rng(args.seed)
    z = rng.standard_normal((args.count, noise_dim, 1, 1)).astype(np.float32)
    out = generator(z)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(args.count):
        img = pipeline.denormalize(out.data[i])
        path = out_dir / f"img_{i:04d}.png"
        pipeline.save_image(img, path)
        paths.append(str(path))
    write_run_manifest(out_dir, "gen",
                       {"checkpoint": str(args.checkpoint), "count": args.count},
                       args.seed, [args.checkpoint], paths)
    print(f"gen: wrote {len(paths)} images to {out_dir}")
    return 0


def _load_feature_set(spec, extractor, label=None):
    """spec is a path: .csv loads stored features, a directory extracts
    from its PNGs with the shared extractor."""
    path = Path(spec)
    if path.suffix.lower() == ".csv":
        fs = ft.read_features_csv(path)
        if label:
            fs.label = label
        return fs
    images = np.stack([pipeline.load_image(p).pixels
                       for p in sorted(path.glob("*.png"))])
    return ft.extract_features(images, extractor, label or path.name)


def _parse_labeled(values):
    out = []
    for item in values:
        if "=" not in item:
            raise ConfigError(f"expected LABEL=PATH, got {item!r}")
        label, path = item.split("=", 1)
        out.append((label, path))
    return out


def cmd_fid(args):
    extractor = ft.get_extractor(args.extractor, seed=args.extractor_seed)
    reference = _load_feature_set(args.reference, extractor, args.reference_label)
    candidates = [_load_feature_set(path, extractor, label)
                  for label, path in _parse_labeled(args.candidate)]
    rows = fid_mod.fid_report(reference, candidates)
    fid_mod.write_fid_report(rows, args.out)
    write_run_manifest(Path(args.out).parent, "fid",
                       {"extractor": extractor.descriptor if hasattr(extractor, "descriptor")
                        else args.extractor, "reference": str(args.reference)},
                       args.extractor_seed,
                       [args.reference] + [p for _, p in _parse_labeled(args.candidate)],
                       [args.out])
    for label, ref, score in rows:
        print(f"{label} vs {ref}: {score:.4f}")
    return 0


def cmd_tsne(args):
    extractor = ft.get_extractor(args.extractor, seed=args.extractor_seed)
    sets = [_load_feature_set(path, extractor, label)
            for label, path in _parse_labeled(args.features)]
    descriptors = {fs.descriptor for fs in sets}
    if len(descriptors) > 1:
        raise ConfigError(f"feature sets use different extractors: {sorted(descriptors)}")
    matrix = np.vstack([fs.features for fs in sets])
    labels = [fs.label for fs in sets for _ in range(fs.features.shape[0])]
    ids = [f"{fs.label}{i}" for fs in sets for i in range(fs.features.shape[0])]
    cfg = tsne_mod.TsneConfig(perplexity=args.perplexity, iterations=args.iterations,
                              seed=args.seed)
    embedding, kl_log = tsne_mod.tsne_embed(matrix, cfg)
    tsne_mod.write_embedding_csv(args.out, embedding, ids, labels)
    write_run_manifest(Path(args.out).parent, "tsne",
                       {"perplexity": args.perplexity, "iterations": args.iterations},
                       args.seed, [p for _, p in _parse_labeled(args.features)], [args.out])
    print(f"tsne: {matrix.shape[0]} points embedded; final KL={kl_log[-1][1]:.4f}")
    return 0


def cmd_stats(args):
    records = stats.read_scores_csv(args.scores)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = stats.aggregate_means(records)
    table.to_csv(out_dir / "table3.csv")
    table.best_to_csv(out_dir / "table3_best.csv")

    # pool all twelve criterion scores per model for the rank tests
    groups = {}
    for r in records:
        groups.setdefault(r.model_id, []).extend(r.scores[c] for c in stats.CRITERIA)
    names = sorted(groups)
    result = stats.dunn_test([groups[m] for m in names], correction=args.correction,
                             group_names=names)
    stats.write_dunn_csv(result, out_dir / "tableA1.csv")
    with open(out_dir / "kruskal.csv", "w") as fh:
        fh.write("h,p\n")
        fh.write(f"{result.h:.9g},{result.p_kw:.9g}\n")
    stats.export_plot_data(records, out_dir / "boxplot.csv", out_dir / "radar.csv")
    write_run_manifest(out_dir, "stats",
                       {"correction": args.correction}, None, [args.scores],
                       [str(out_dir / n) for n in
                        ("table3.csv", "table3_best.csv", "tableA1.csv",
                         "kruskal.csv", "boxplot.csv", "radar.csv")])
    print(f"stats: {len(records)} records over models {names}; "
          f"Kruskal-Wallis H={result.h:.4f} p={result.p_kw:.3g}")
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import create_app
    token = os.environ.get("RADSYNTH_TOKEN") or None
    app = create_app(args.storage, token=token)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = Parser(prog="radsynth",
                    description="WGAN-GP workbench for dental radiograph crops")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="build a manifest and preprocess a directory of PNGs")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--crop-width-fraction", type=float, default=0.70)
    p.add_argument("--crop-height-fraction", type=float, default=0.55)
    p.add_argument("--crop-bottom-margin", type=float, default=0.02)
    p.add_argument("--denoise", action="store_true")
    p.add_argument("--ad-iterations", type=int, default=20)
    p.add_argument("--ad-dt", type=float, default=0.15)
    p.add_argument("--ad-kappa", type=float, default=15.0)
    p.add_argument("--ad-conductance", choices=["exponential", "rational"],
                   default="exponential")
    p.add_argument("--exclude", help="text file of image ids to exclude")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train a WGAN-GP on a directory of preprocessed PNGs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(train.PRESETS))
    p.add_argument("--size", type=int)
    p.add_argument("--critic-iters", type=int, dest="critic_iters")
    p.add_argument("--epochs", type=int)
    p.add_argument("--denoise", type=int, choices=[0, 1], default=None,
                   help="mark whether the data was denoised (pipeline handoff)")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--gp-lambda", type=float, dest="gp_lambda")
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="stop after this many generator steps")
    p.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval")
    p.add_argument("--base-features", type=int, default=64)
    p.add_argument("--noise-dim", type=int, default=100)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen", help="generate images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fid", help="FID report of candidate sets against a reference")
    p.add_argument("--reference", required=True, help="image directory or features .csv")
    p.add_argument("--reference-label", default="R")
    p.add_argument("--candidate", action="append", required=True,
                   metavar="LABEL=PATH", help="repeatable")
    p.add_argument("--extractor", choices=["pixel", "random_conv"], default="random_conv")
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fid)

    p = sub.add_parser("tsne", help="2-D embedding of feature sets")
    p.add_argument("--features", action="append", required=True,
                   metavar="LABEL=PATH", help="image directory or features .csv; repeatable")
    p.add_argument("--extractor", choices=["pixel", "random_conv"], default="random_conv")
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("stats", help="score aggregation, rank tests, plot data")
    p.add_argument("--scores", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--correction", choices=["none", "bonferroni", "holm"], default="none")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("serve", help="run the rating service (token via RADSYNTH_TOKEN)")
    p.add_argument("--storage", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RadsynthError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
