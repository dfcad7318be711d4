"""``deskmae`` command line: pack, pretrain, linprobe, finetune, partialft, reconstruct, flops."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from deskmae import data as D
from deskmae import flops as F
from deskmae import mae as M
from deskmae import train as TR
from deskmae import vit
from deskmae.config import ENCODER_KEYS, MAE_KEYS, ConfigError, RunConfig
from deskmae.tensor import Tensor

log = logging.getLogger("deskmae")

EXIT_CONFIG = 2
EXIT_DATA = 3
SEPARATOR = 4
GRAY = 128
CHECKPOINT = "checkpoint.maeckpt"
MODEL_CONFIG = "model.conf"
METRICS = "metrics.csv"


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def load_dataset(path) -> tuple[D.PackedDataset, D.ChannelStats]:
    ds = D.load_packed(path)
    sp = D.stats_path(path)
    stats = D.read_stats(sp, ds.channels) if sp.exists() else D.compute_stats(ds)
    return ds, stats


def model_text(cfg: RunConfig) -> str:
    return cfg.dump(ENCODER_KEYS + MAE_KEYS)


def resolve_config(args, protocol: str) -> RunConfig:
    """``--config`` if given, else the model file saved beside the checkpoint, else defaults."""
    if args.config:
        return RunConfig.load(args.config, protocol, args.scale)
    ckpt = getattr(args, "checkpoint", None)
    if ckpt and (Path(ckpt).parent / MODEL_CONFIG).exists():
        return RunConfig.load(Path(ckpt).parent / MODEL_CONFIG, protocol, args.scale)
    return RunConfig.defaults(protocol, args.scale)


def load_encoder(path, enc: vit.ViTConfig) -> dict[str, np.ndarray]:
    arrays = vit.load_checkpoint(path)
    depth = len({k.split(".")[2] for k in arrays if k.startswith("encoder.blocks.")})
    if depth != enc.depth:
        raise ConfigError(f"checkpoint {path} has {depth} encoder blocks, config expects {enc.depth}")
    expected = vit.init_encoder(enc, np.random.default_rng(0))
    for k, v in expected.items():
        if k not in arrays:
            raise ConfigError(f"checkpoint {path} lacks {k}")
        if arrays[k].shape != v.shape:
            raise ConfigError(f"checkpoint tensor {k} has shape {arrays[k].shape}, config expects {v.shape}")
    return arrays


def write_outputs(out: Path, result: TR.RunResult, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    vit.save_checkpoint(out / CHECKPOINT, {k: v.data for k, v in result.params.items()})
    (out / MODEL_CONFIG).write_text(model_text(cfg), encoding="utf-8")
    result.log.write(out / METRICS)


def epochs(cfg: RunConfig, total: Optional[int]) -> dict:
    """Override the schedule length; warmup is clamped to fit."""
    if total is None:
        return {}
    return {"total_epochs": total, "warmup_epochs": min(cfg["warmup_epochs"], total)}


def digest(arrays: Mapping[str, object], names: Sequence[str]) -> str:
    h = hashlib.sha256()
    for k in sorted(names):
        v = arrays[k]
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.data if isinstance(v, Tensor) else v, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pack(args) -> int:
    """Pack a directory of P6 images listed in a ``<file> <label>`` manifest."""
    labels: dict[str, int] = {}
    with open(args.labels, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].split()
            if not body:
                continue
            if len(body) != 2:
                raise D.DataError(f"{args.labels}:{lineno}: expected '<file> <label>'")
            try:
                labels[body[0]] = int(body[1])
            except ValueError:
                raise D.DataError(f"{args.labels}:{lineno}: label {body[1]!r} is not an integer") from None
    files = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() == ".ppm")
    images, ys = [], []
    for path in files:
        img = D.read_ppm(path)
        if images and img.shape != images[0].shape:
            raise D.DataError(f"{path.name}: extents {img.shape[1]}x{img.shape[0]} differ from "
                              f"{images[0].shape[1]}x{images[0].shape[0]} of {files[0].name}")
        if path.name not in labels:
            raise D.DataError(f"{path.name}: no label in {args.labels}")
        images.append(img)
        ys.append(labels[path.name])
    h, w = images[0].shape[:2] if images else (0, 0)
    n_classes = args.classes or (max(ys) + 1 if ys else 1)
    pixels = np.stack(images) if images else np.zeros((0, h, w, 3), np.uint8)
    ds = D.PackedDataset(h, w, 3, n_classes, np.array(ys, np.int64), pixels)
    D.write_packed(args.out, ds)
    D.write_stats(D.stats_path(args.out), D.compute_stats(ds))
    print(f"packed {len(ds)} images ({w}x{h}, {n_classes} classes) into {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args, "pretrain")
    cfg = cfg.update(mask_ratio=args.mask_ratio, sampling=args.sampling, target_kind=args.target,
                     decoder_depth=args.decoder_depth, decoder_width=args.decoder_width, **epochs(cfg, args.epochs))
    mcfg = cfg.mae_config()
    ds, stats = load_dataset(args.data)
    print(f"patches {mcfg.encoder.n_patches} len_keep {mcfg.len_keep} mask_ratio {mcfg.mask_ratio} "
          f"sampling {mcfg.sampling} target {mcfg.target_kind} decoder {mcfg.decoder_depth}x{mcfg.decoder_width}")
    result = TR.pretrain(mcfg, cfg.recipe(), ds, args.seed, stats, spec=cfg.augment_spec())
    write_outputs(Path(args.out), result, cfg)
    print(f"final masked_mse {result.log.last('train', 'masked_mse'):.6g} after {cfg['total_epochs']} epochs")
    return 0


def _classify(args, protocol: str, **recipe_overrides) -> int:
    cfg = resolve_config(args, protocol)
    cfg = cfg.update(**epochs(cfg, args.epochs), **recipe_overrides)
    enc = cfg.encoder()
    encoder = load_encoder(args.checkpoint, enc) if args.checkpoint else None
    ds, stats = load_dataset(args.data)
    eval_ds = D.load_packed(args.eval_data) if args.eval_data else None
    kind = "supervised_scratch" if protocol == "finetune" and encoder is None else protocol
    result = TR.run_protocol(kind, enc, cfg.recipe(), ds, eval_ds, encoder, args.seed, stats, cfg.augment_spec())
    write_outputs(Path(args.out), result, cfg)
    if encoder is not None and protocol == "partial_ft":
        recipe = cfg.recipe()
        probe = vit.init_classifier(enc, ds.n_classes, np.random.default_rng(0))
        k = enc.depth if recipe.frozen_blocks is None else recipe.frozen_blocks
        frozen = [n for n in probe if n not in TR.freeze_prefix(probe, enc.depth, k, recipe.mlp_only)]
        print(f"frozen sha256 before {digest(encoder, frozen)} after {digest(result.params, frozen)}")
    for split, metric in (("train", "acc"), ("val", "acc")):
        try:
            print(f"{split} {metric} {result.log.last(split, metric):.6g}")
        except KeyError:
            pass
    return 0


def cmd_linprobe(args) -> int:
    return _classify(args, "linprobe")


def cmd_finetune(args) -> int:
    return _classify(args, "finetune")


def cmd_partialft(args) -> int:
    return _classify(args, "partial_ft", frozen_blocks=args.blocks, mlp_only=args.mlp_only or None)


def triptych(masked: np.ndarray, pred: np.ndarray, truth: np.ndarray, sep: int = SEPARATOR) -> np.ndarray:
    h = truth.shape[0]
    bar = np.zeros((h, sep, truth.shape[2]), np.uint8)
    return np.concatenate([masked, bar, pred, bar, truth], axis=1)


def reconstruct(params: Mapping[str, Tensor], cfg: M.MaeConfig, images: np.ndarray, plans, stats: D.ChannelStats,
                basis: Optional[M.PcaBasis] = None) -> list[np.ndarray]:
    """Triptych bytes ``[H, 3W + 2*sep, C]`` for each standardized image."""
    enc = cfg.encoder
    if cfg.mask_tokens_in_encoder:
        latents = M.encode_with_mask_tokens(images, plans, params, cfg)
    else:
        latents = M.encode_visible(images, plans, params, cfg)
    pred = M.decode_full(latents, plans, params, cfg).data.astype(np.float64)
    patches = vit.patchify(images.astype(np.float64), enc.patch_size)
    if cfg.target_kind == "normalized_pixels":
        # show normalized predictions at each true patch's own mean and scale
        mu = patches.mean(axis=-1, keepdims=True)
        sd = np.sqrt(patches.var(axis=-1, keepdims=True) + cfg.norm_eps)
        pred = pred * sd + mu
    elif cfg.target_kind == "pca":
        pred = basis.reconstruct(pred)
    grid = (enc.grid, enc.grid)
    out = []
    for b, plan in enumerate(plans):
        truth = D.unstandardize(images[b], stats)
        shown = D.unstandardize(vit.unpatchify(pred[b], grid, enc.patch_size), stats)
        cells = vit.patchify(truth, enc.patch_size).copy()
        cells[plan.mask.astype(bool)] = GRAY
        masked = vit.unpatchify(cells, grid, enc.patch_size).astype(np.uint8)
        out.append(triptych(masked, shown, truth))
    return out


def cmd_reconstruct(args) -> int:
    from PIL import Image

    cfg = resolve_config(args, "pretrain")
    if args.mask_ratio is not None:
        cfg = cfg.update(mask_ratio=args.mask_ratio)
    mcfg = cfg.mae_config()
    arrays = vit.load_checkpoint(args.checkpoint)
    load_encoder(args.checkpoint, mcfg.encoder)
    params = vit.params_from_arrays(arrays)
    expected = M.init_mae(mcfg, np.random.default_rng(0))
    for k, v in expected.items():
        if k not in params or params[k].shape != v.shape:
            raise ConfigError(f"checkpoint {args.checkpoint} does not match the model config at {k}")
    ds, stats = load_dataset(args.data)
    indices = [int(i) for i in args.indices.split(",") if i.strip()]
    bad = [i for i in indices if not 0 <= i < len(ds)]
    if bad:
        raise ConfigError(f"indices {bad} out of range for {len(ds)} images")
    images = D.render(ds, indices, None, stats, size=mcfg.encoder.image_size)
    plans = M.sample_plans(mcfg, args.seed, 0, indices)
    basis = TR.fit_pca_basis(ds, mcfg, stats) if mcfg.target_kind == "pca" else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, panel in zip(indices, reconstruct(params, mcfg, images, plans, stats, basis)):
        Image.fromarray(panel, "RGB").save(out / f"recon_{i:05d}.png")
    print(f"wrote {len(indices)} triptychs at mask ratio {mcfg.mask_ratio} to {out}")
    return 0


def cmd_flops(args) -> int:
    ratios = [float(r) for r in args.ratios.split(",")]
    depths = [int(d) for d in args.decoder_depths.split(",")]
    rows = F.sweep(ratios, depths, args.decoder_width)
    enc = vit.PRESETS["vit-l"]
    frac = F.decoder_token_fraction(enc, 8, 512, enc.n_patches)
    fields = ["encoder", "n_patches", "decoder_depth", "decoder_width", "mask_ratio", "len_keep", "gflops", "speedup"]
    writer = csv.DictWriter(sys.stdout, fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    print(f"# decoder/encoder FLOPs per token (vit-l, decoder 8x512): {frac:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "flops.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fields)
            w.writeheader()
            w.writerows(rows)
    if args.measure:
        cfg = resolve_config(args, "pretrain")
        mcfg = dataclasses.replace(M.tiny_desk(), mask_ratio=args.measure_ratio) if not args.config else \
            dataclasses.replace(cfg.mae_config(), mask_ratio=args.measure_ratio)
        t = F.measure_speedup(mcfg, seed=args.seed)
        print(f"# measured step at mask ratio {args.measure_ratio}: {t.without_mask_tokens * 1e3:.1f} ms without "
              f"mask tokens in the encoder, {t.with_mask_tokens * 1e3:.1f} ms with; speedup {t.speedup:.2f}x")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed (u64)")
    common.add_argument("--config", help="key = value run configuration")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--scale", choices=("desk", "reference"), default="desk", help="which recipe presets to default to")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deskmae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", parents=[common], help="pack P6 images into a MAEDS1 file")
    p.add_argument("images")
    p.add_argument("labels")
    p.add_argument("out_path", metavar="out")
    p.add_argument("--classes", type=int)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("pretrain", parents=[common], help="masked-autoencoder pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--sampling", choices=M.SAMPLERS)
    p.add_argument("--target", choices=M.TARGETS)
    p.add_argument("--decoder-depth", type=int)
    p.add_argument("--decoder-width", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    for name, func, help_ in (("linprobe", cmd_linprobe, "linear probing on frozen features"),
                              ("finetune", cmd_finetune, "end-to-end fine-tuning"),
                              ("partialft", cmd_partialft, "fine-tune only the last blocks")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", required=name != "finetune",
                       help="pretrained checkpoint (finetune without one trains from scratch)")
        p.add_argument("--data", required=True)
        p.add_argument("--eval-data")
        p.add_argument("--epochs", type=int)
        if name == "partialft":
            p.add_argument("--blocks", type=int, default=1)
            p.add_argument("--mlp-only", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("reconstruct", parents=[common], help="write masked/prediction/truth triptychs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--indices", default="0")
    p.add_argument("--mask-ratio", type=float)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("flops", parents=[common], help="analytic FLOPs sweep and measured step timing")
    p.add_argument("--ratios", default="0,0.5,0.75,0.9")
    p.add_argument("--decoder-depths", default="1,2,4,8")
    p.add_argument("--decoder-width", type=int, default=512)
    p.add_argument("--measure", action="store_true")
    p.add_argument("--measure-ratio", type=float, default=0.75)
    p.set_defaults(func=cmd_flops, out=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "pack":
        args.out = args.out_path
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, vit.CheckpointError, M.MaskError, ValueError) as exc:
        if isinstance(exc, D.DataError):
            print(f"deskmae: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(exc, vit.CheckpointError):
            print(f"deskmae: checkpoint error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"deskmae: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"deskmae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
