"""Command-line surface: make-synth, train, probe, knn, attn-map.

Exit codes are a stable contract: 0 success, 1 usage error, 2 data or
config error, 3 runtime/numerical error. Every subcommand takes --seed
(default 42) and is byte-reproducible for a fixed seed. The default config
file can also be supplied through the RETINASSL_CONFIG environment
variable; explicit --config wins.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .configio import load_config, parse_assignments
from .data import (generate_synthetic_dataset, load_manifest,
                   write_synthetic_dataset)
from .distill import METRICS_HEADER, init_train_state, train_loop
from .errors import (CheckpointError, ConfigError, DataFormatError,
                     DecodeError, InputError, ManifestError, ParameterError,
                     RetinaSSLError, TrainingError)
from .evaluation import (KnnConfig, attention_heatmaps, build_index,
                         compute_metrics, extract_features, knn_classify,
                         probe_eval_transform, probe_predict,
                         probe_train_transform, train_linear_probe)
from .imagecodec import decode_image, encode_image

CONFIG_ENV_VAR = "RETINASSL_CONFIG"
DEFAULT_SEED = 42

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; the contract says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class _OutputLock:
    """Advisory lock so concurrent invocations do not share an output dir."""

    def __init__(self, directory):
        self.path = os.path.join(str(directory), ".retinassl.lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise InputError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead")
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)
        return False


def _build_parser() -> _Parser:
    parser = _Parser(prog="retinassl",
                     description="Self-distilled ViT pretraining and "
                                 "evaluation for retinal grading.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--config", default=None,
                       help=f"config file (default: ${CONFIG_ENV_VAR})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, e.g. --set distill.tau_t=0.04")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("make-synth", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=32)

    p = sub.add_parser("train", help="self-supervised training (label-blind)")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--steps", type=int, default=None,
                   help="step count (default: full schedule)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also checkpoint every N steps (0 = only at the end)")

    for name in ("probe", "knn"):
        p = sub.add_parser(name, help=f"{name} evaluation of a checkpoint")
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--train-manifest", required=True)
        p.add_argument("--train-images", required=True)
        p.add_argument("--test-manifest", required=True)
        p.add_argument("--test-images", required=True)
        if name == "knn":
            p.add_argument("--k", type=int, default=None,
                           help="neighbor count (default from config)")

    p = sub.add_parser("attn-map", help="CLS attention heatmaps for one image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    return parser


def _resolve_config(args):
    path = args.config or os.environ.get(CONFIG_ENV_VAR) or None
    overrides = parse_assignments(args.set, source="--set")
    return load_config(path, overrides)


def cmd_make_synth(args) -> int:
    config = _resolve_config(args)
    dataset = generate_synthetic_dataset(args.seed, args.per_class, args.size)
    os.makedirs(args.out, exist_ok=True)
    with _OutputLock(args.out):
        write_synthetic_dataset(dataset, args.out)
    counts = {g: int((dataset.grades == g).sum()) for g in range(5)}
    print(f"wrote {len(dataset.grades)} images to {args.out}")
    print("per-grade counts: " + ", ".join(f"{g}:{c}" for g, c in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_config(args)
    # label-blind on purpose: grades never reach the SSL loop
    manifest = load_manifest(args.manifest, args.images, label_blind=True)
    images = manifest.load_images()
    if len(images) == 0:
        raise InputError("manifest resolves to zero images")

    if args.resume:
        state, vit, head, crop, distill = load_checkpoint(args.resume)
    else:
        vit, head, crop, distill = (config.vit, config.head, config.crop,
                                    config.distill)
        state = init_train_state(vit, head, seed=args.seed)

    b = min(distill.batch_size, len(images))
    steps_per_epoch = max(1, int(np.ceil(len(images) / b)))
    total = distill.total_epochs * steps_per_epoch
    n_steps = total - state.step if args.steps is None else args.steps
    if state.step + n_steps > total:
        raise InputError(f"{n_steps} steps from step {state.step} exceeds the "
                         f"{total}-step schedule")

    os.makedirs(args.out, exist_ok=True)
    with _OutputLock(args.out):
        lines: list[str] = []

        def checkpoint_hook(metrics, st):
            if args.checkpoint_every and st.step % args.checkpoint_every == 0:
                save_checkpoint(st, os.path.join(args.out, f"step{st.step:06d}.ckpt"),
                                vit, head, crop, distill)

        train_loop(images, state, vit, head, crop, distill, n_steps=n_steps,
                   log_lines=lines, step_callback=checkpoint_hook)
        with open(os.path.join(args.out, "metrics.log"), "w") as fh:
            fh.write(METRICS_HEADER + "\n")
            fh.write("".join(line + "\n" for line in lines))
        save_checkpoint(state, os.path.join(args.out, "final.ckpt"),
                        vit, head, crop, distill)
    print(f"trained {n_steps} steps, final step {state.step}")
    return EXIT_OK


def _load_eval_data(args, image_size):
    train_m = load_manifest(args.train_manifest, args.train_images, split="train")
    test_m = load_manifest(args.test_manifest, args.test_images, split="test")
    return train_m, test_m


def _write_metrics(out_dir, metrics):
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(metrics.report_text())
    with open(os.path.join(out_dir, "confusion.csv"), "w") as fh:
        fh.write(metrics.confusion_csv())


def cmd_probe(args) -> int:
    config = _resolve_config(args)
    state, vit, head, crop, distill = load_checkpoint(args.checkpoint)
    train_m, test_m = _load_eval_data(args, vit.image_size)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0xF11C]))

    train_imgs = probe_train_transform(train_m.load_images(), vit.image_size,
                                       rng, flip=config.probe.flip_augment)
    feats = extract_features(state.teacher, train_imgs, vit,
                             config.data.n_last_blocks)
    probe_cfg = config.probe
    probe_cfg.seed = args.seed
    probe = train_linear_probe(feats, train_m.grades(), probe_cfg)

    test_imgs = probe_eval_transform(test_m.load_images(), vit.image_size)
    test_feats = extract_features(state.teacher, test_imgs, vit,
                                  config.data.n_last_blocks)
    metrics = compute_metrics(probe_predict(probe, test_feats), test_m.grades())
    os.makedirs(args.out, exist_ok=True)
    with _OutputLock(args.out):
        _write_metrics(args.out, metrics)
    print(f"probe accuracy = {metrics.accuracy:.4f}")
    return EXIT_OK


def cmd_knn(args) -> int:
    config = _resolve_config(args)
    state, vit, head, crop, distill = load_checkpoint(args.checkpoint)
    train_m, test_m = _load_eval_data(args, vit.image_size)
    knn_cfg = KnnConfig(k=args.k if args.k is not None else config.knn.k,
                        temperature=config.knn.temperature,
                        majority=config.knn.majority)
    index = build_index(state.teacher, probe_eval_transform(
        train_m.load_images(), vit.image_size), train_m.grades(), vit,
        config.data.n_last_blocks)
    if not 1 <= knn_cfg.k <= len(index.features):
        raise InputError(f"k={knn_cfg.k} outside 1..{len(index.features)}")
    queries = build_index(state.teacher, probe_eval_transform(
        test_m.load_images(), vit.image_size), test_m.grades(), vit,
        config.data.n_last_blocks)
    preds = knn_classify(index, queries.features, knn_cfg)
    metrics = compute_metrics(preds, test_m.grades())
    os.makedirs(args.out, exist_ok=True)
    with _OutputLock(args.out):
        _write_metrics(args.out, metrics)
    print(f"knn (k={knn_cfg.k}) accuracy = {metrics.accuracy:.4f}")
    return EXIT_OK


def cmd_attn_map(args) -> int:
    _resolve_config(args)
    state, vit, head, crop, distill = load_checkpoint(args.checkpoint)
    image = decode_image(args.image)
    h, w = image.shape[-2:]
    if h != w or h % vit.patch_size != 0 or h != vit.image_size:
        raise InputError(
            f"image is {h}x{w} but the model wants "
            f"{vit.image_size}x{vit.image_size}; resize it first")
    maps = attention_heatmaps(state.teacher, image, vit)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    os.makedirs(args.out, exist_ok=True)
    with _OutputLock(args.out):
        for hi in range(vit.n_heads):
            for ci in range(vit.n_cls_tokens):
                encode_image(os.path.join(args.out, f"{stem}_h{hi}_c{ci}.png"),
                             maps[hi, ci])
        montage = np.vstack([np.hstack(list(maps[hi]))
                             for hi in range(vit.n_heads)])
        encode_image(os.path.join(args.out, f"{stem}_montage.png"), montage)
    n = vit.n_heads * vit.n_cls_tokens
    print(f"wrote {n} heatmaps + montage to {args.out}")
    return EXIT_OK


_COMMANDS = {"make-synth": cmd_make_synth, "train": cmd_train,
             "probe": cmd_probe, "knn": cmd_knn, "attn-map": cmd_attn_map}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataFormatError, DecodeError, ManifestError,
            CheckpointError, InputError, ParameterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError, RetinaSSLError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
