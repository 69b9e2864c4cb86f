"""Command-line front door: data generation, training, swapping, evaluation, ablation.

Exit codes: 0 success, 1 usage error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path

from .checkpoint import CheckpointError
from .core import ConfigError, TrainConfig, load_config, save_config, validate_config
from .data import FaceDataset, load_image, load_image_folder, save_dataset, save_image, synthesize_dataset
from .evaluation import (
    evaluate_generator,
    fit_attribute_regressor,
    format_ablation_table,
    run_ablation,
    save_ablation_rows,
)
from .generator import generate
from .training import PRESETS, TrainingDiverged, apply_preset, load_checkpoint, train

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _add_config_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides (defaults from --config, flags win)")
    for f in fields(TrainConfig):
        typ = type(getattr(TrainConfig(), f.name))
        group.add_argument(f"--{f.name}", type=typ, default=None, metavar=typ.__name__.upper())


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "preset", None):
        cfg = apply_preset(args.preset, cfg)
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(TrainConfig)
        if getattr(args, f.name, None) is not None
    }
    if overrides:
        cfg = replace(cfg, **overrides)
    return validate_config(cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idswap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[], help="write a synthetic face dataset to disk")
    p.add_argument("--out", required=True, help="output folder")
    p.add_argument("--identities", type=int, default=8)
    p.add_argument("--per-identity", type=int, default=500)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a face-swapping model on an image folder")
    p.add_argument("--data", required=True, help="image folder (subfolder per identity)")
    p.add_argument("--out", required=True, help="run folder for log and checkpoints")
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named training variant")
    p.add_argument("--embedder-epochs", type=int, default=10)
    p.add_argument("--quiet", action="store_true")
    _add_config_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("swap", help="swap one source identity onto one target image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("evaluate", help="metric report for a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation image folder")
    p.add_argument("--out", required=True, help="report folder")
    p.add_argument("--n-pairs", type=int, default=200)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare several presets")
    p.add_argument("--presets", required=True, help="comma-separated preset names")
    p.add_argument("--data", required=True, help="training image folder")
    p.add_argument("--eval-data", help="evaluation folder; defaults to a split of --data")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="base config file")
    p.add_argument("--n-pairs", type=int, default=200)
    _add_config_overrides(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def cmd_gen_data(args) -> int:
    dataset = synthesize_dataset(args.identities, args.per_identity, args.size, args.seed)
    manifest = save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} images for {dataset.n_identities} identities; manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_image_folder(args.data, size=cfg.image_size)
    state = train(
        cfg,
        dataset,
        args.out,
        embedder_epochs=args.embedder_epochs,
        progress=not args.quiet,
    )
    print(f"finished {state.step} steps; checkpoints and log in {args.out}")
    return 0


def cmd_swap(args) -> int:
    state = load_checkpoint(args.checkpoint)
    source = load_image(args.source)
    target = load_image(args.target)
    expected = state.cfg.image_size
    for name, img in (("source", source), ("target", target)):
        if img.shape[-2:] != (expected, expected):
            raise ValueError(
                f"{name} image is {img.shape[-2]}x{img.shape[-1]} but the checkpoint "
                f"expects {expected}x{expected}"
            )
    result = generate(state.generator, state.embedder, source, target)
    save_image(result, args.out)
    print(f"wrote {args.out}")
    return 0


def _split_eval(dataset: FaceDataset, fraction: float = 0.1) -> tuple[FaceDataset, FaceDataset]:
    import numpy as np

    train_idx, eval_idx = [], []
    for _, idx in sorted(dataset.indices_by_identity().items()):
        cut = max(1, int(round(len(idx) * fraction)))
        eval_idx.extend(idx[-cut:])
        train_idx.extend(idx[:-cut])
    def subset(indices):
        indices = np.asarray(sorted(indices))
        return FaceDataset(
            dataset.images[indices],
            dataset.identity_ids[indices],
            specs=[dataset.specs[i] for i in indices] if dataset.specs is not None else None,
            identity_params=dataset.identity_params,
            identity_names=dataset.identity_names,
        )
    return subset(train_idx), subset(eval_idx)


def _maybe_regressor(eval_ds: FaceDataset, seed: int):
    if eval_ds.specs is None:
        print("note: no attribute ground truth in the dataset; attr_error will be NaN")
        return None
    fit_ds, val_ds = _split_eval(eval_ds, fraction=0.2)
    return fit_attribute_regressor(fit_ds, val_ds, seed=seed)


def cmd_evaluate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    eval_ds = load_image_folder(args.data, size=state.cfg.image_size)
    regressor = _maybe_regressor(eval_ds, state.cfg.seed)
    row = evaluate_generator(
        state.generator,
        state.embedder,
        eval_ds,
        regressor=regressor,
        preset=Path(args.checkpoint).name,
        n_pairs=args.n_pairs,
        seed=state.cfg.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = format_ablation_table([row])
    (out / "report.txt").write_text(table, encoding="utf-8")
    save_ablation_rows([row], out / "report.jsonl")
    print(table, end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    names = [n for n in args.presets.split(",") if n]
    train_ds = load_image_folder(args.data, size=cfg.image_size)
    if args.eval_data:
        eval_ds = load_image_folder(args.eval_data, size=cfg.image_size)
    else:
        train_ds, eval_ds = _split_eval(train_ds)
    regressor = _maybe_regressor(eval_ds, cfg.seed)
    from .embedder import pretrain_embedder

    embedder = pretrain_embedder(train_ds, epochs=10, embed_dim=cfg.embed_dim, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(
        names, cfg, train_ds, eval_ds, embedder,
        regressor=regressor, out_dir=out, n_pairs=args.n_pairs,
    )
    table = format_ablation_table(rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    save_ablation_rows(rows, out / "ablation.jsonl")
    print(table, end="")
    by_name = {r.preset: r for r in rows}
    if {"oFM", "SimSwap", "nFM"} <= set(by_name):
        o, s, n = by_name["oFM"], by_name["SimSwap"], by_name["nFM"]
        retrieval_ok = o.id_retrieval <= s.id_retrieval + 2.0 and s.id_retrieval <= n.id_retrieval + 2.0
        recon_ok = n.self_recon_loss >= max(o.self_recon_loss, s.self_recon_loss)
        print(f"ordering check: id_retrieval oFM<=SimSwap<=nFM (2pt band): {'PASS' if retrieval_ok else 'FAIL'}")
        print(f"ordering check: self_recon_loss nFM maximal: {'PASS' if recon_ok else 'FAIL'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except (
        ConfigError,
        CheckpointError,
        TrainingDiverged,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
