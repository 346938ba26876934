"""Command-line entry point: ``mavnet {synth,inspect,train,eval,infer,bench}``.

Every failure exits with status 2 and one stderr line of the form
``mavnet-error command=<cmd> type=<ExceptionName> message=<text>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from .autodiff import OptimizerConfig
from .checkpoint import Checkpoint, load_checkpoint
from .model import Model, ModelConfig
from .ops import dilation_saturation_bound, output_shape, param_count, receptive_field
from .train import RunConfig, bench, evaluate, predict, train

log = logging.getLogger("mavnet")


def _model_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        return ModelConfig.from_dict(doc.get("model", doc) if "blocks" not in doc else doc)
    return ModelConfig.default(num_classes=args.num_classes, input_channels=args.input_channels)


def inspect_report(config: ModelConfig, height: int, width: int) -> dict:
    shape = (1, config.input_channels, height, width)
    blocks, stack = [], []
    for k, b in enumerate(config.blocks):
        layers = config.layer_stack([b])
        stack += layers
        shape = output_shape(layers, shape)
        rf = receptive_field(stack)
        blocks.append({"index": k, "kind": b.kind, "params": param_count(layers),
                       "output_shape": list(shape), "receptive_field": list(rf),
                       **({"dilation": b.dilation} if hasattr(b, "dilation") else {})})
    encoder = config.layer_stack(config.encoder_blocks())
    return {
        "total_params": config.param_count(),
        "input_shape": [1, config.input_channels, height, width],
        "output_shape": list(shape),
        "encoder_receptive_field": list(receptive_field(encoder)),
        "saturation_bound_k": {"height": dilation_saturation_bound(height),
                               "width": dilation_saturation_bound(width)},
        "blocks": blocks,
    }


def cmd_inspect(args):
    config = _model_config(args)
    rep = inspect_report(config, args.height, args.width)
    if args.json:
        print(json.dumps(rep, indent=2))
        return
    print(f"{'#':>2} {'block':<18}{'params':>8}  {'output shape':<22}{'RF (h x w)':>12}")
    for b in rep["blocks"]:
        name = b["kind"] + (f"(D={b['dilation']})" if "dilation" in b else "")
        rf = "x".join(map(str, b["receptive_field"]))
        print(f"{b['index']:>2} {name:<18}{b['params']:>8}  {str(tuple(b['output_shape'])):<22}{rf:>12}")
    print(f"total parameters: {rep['total_params']}")
    print("encoder receptive field: " + "x".join(map(str, rep["encoder_receptive_field"])))
    k = rep["saturation_bound_k"]
    print(f"dilation saturation bound K: {k['height']} (height {args.height}), {k['width']} (width {args.width})")


def cmd_synth(args):
    samples = D.generate_synthetic(0 if args.seed is None else args.seed, args.count, args.size, args.classes, args.channels)
    path = D.save_dataset(samples, args.out, D.palette_for(args.classes), args.split)
    print(path)


def _run_config(args) -> RunConfig:
    doc = (RunConfig.load(args.config) if args.config else RunConfig()).to_dict()
    for key in ("train_manifest", "val_manifest", "loss", "gamma", "batch_size", "max_steps",
                "eval_interval", "checkpoint_interval", "patience", "centroid_class", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    if args.class_weights:
        doc["class_weights"] = [float(v) for v in args.class_weights.split(",")]
    if args.lr is not None:
        doc["optimizer"]["learning_rate"] = args.lr
    if args.no_augment:
        doc["augmentation"] = None
    return RunConfig.from_dict(doc)


def cmd_train(args):
    cfg = _run_config(args)
    if not cfg.train_manifest:
        raise ValueError("a training manifest is required (--train or train_manifest in --config)")
    manifest = D.load_manifest(cfg.train_manifest)
    val_manifest = D.load_manifest(cfg.val_manifest) if cfg.val_manifest else None
    if val_manifest:
        D.check_disjoint([manifest, val_manifest])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start, meta = 0, {}
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model, start, meta = ckpt.to_model(), ckpt.step, ckpt.meta
        log.info("resuming from step %d", start)
    else:
        config = cfg.model or ModelConfig.default(num_classes=manifest.palette.num_classes,
                                                  input_channels=args.input_channels)
        model = Model(config, seed=cfg.seed)
    if model.config.num_classes != manifest.palette.num_classes:
        raise ValueError(f"model has {model.config.num_classes} classes, palette has "
                         f"{manifest.palette.num_classes}")
    train_samples = D.load_samples(manifest)
    val_samples = D.load_samples(val_manifest) if val_manifest else None
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    reports_path = out / "val_reports.jsonl"

    def on_eval(step, report):
        with open(reports_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"step": step, **report.to_dict()}, sort_keys=True) + "\n")

    result = train(model, train_samples, cfg, val_samples, start_step=start,
                   log_path=out / "loss.log", checkpoint_path=out / "checkpoint.mavn",
                   class_names=list(manifest.palette.names), ignore_index=manifest.palette.ignore_index,
                   meta=meta, on_eval=on_eval)
    print(f"trained to step {result.step}; checkpoint {out / 'checkpoint.mavn'}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    manifest = D.load_manifest(args.manifest)
    if ckpt.config.num_classes != manifest.palette.num_classes:
        raise ValueError(f"checkpoint has {ckpt.config.num_classes} classes but the palette has "
                         f"{manifest.palette.num_classes}")
    model = ckpt.to_model()
    samples = D.load_samples(manifest)
    report = evaluate(model, samples, list(manifest.palette.names), manifest.palette.ignore_index,
                      args.centroid_class)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(str(prefix) + ".txt").write_text(report.to_text(), encoding="utf-8")
    Path(str(prefix) + ".json").write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.to_text())


def cmd_infer(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    palette = D.palette_for(model.config.num_classes) if not args.palette else \
        D.ClassPalette.from_dict(json.loads(Path(args.palette).read_text()) if Path(args.palette).exists()
                                 else args.palette)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = D.read_image(path)
        if image.shape[0] != model.config.input_channels:
            if image.shape[0] == 1:
                image = np.repeat(image, model.config.input_channels, axis=0)
            else:
                raise ValueError(f"{path}: {image.shape[0]} channels, model expects {model.config.input_channels}")
        mask = predict(model, image[None])[0]
        stem = Path(path).stem
        D.write_labels(out / f"{stem}_mask.png", mask, palette)
        if args.overlay:
            base = D.to_uint8(image).transpose(1, 2, 0)
            if base.shape[2] == 1:
                base = np.repeat(base, 3, axis=2)
            blend = (0.5 * base + 0.5 * palette.colorize(mask)).astype(np.uint8)
            Image.fromarray(blend, "RGB").save(out / f"{stem}_overlay.png")
        print(out / f"{stem}_mask.png")


def cmd_bench(args):
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).to_model()
    else:
        model = Model(_model_config(args), seed=0 if args.seed is None else args.seed)
    rep = bench(model, args.height, args.width, args.iterations, args.warmup, args.batch)
    print(json.dumps(rep.to_dict(), indent=2) if args.json else rep.to_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (run config for train, model config otherwise)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mavnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", type=int, default=2, choices=(2, 4))
    s.add_argument("--channels", type=int, default=3, choices=(1, 3))
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("inspect", parents=[common], help="parameter counts, shapes, receptive fields")
    s.add_argument("--num-classes", type=int, default=2)
    s.add_argument("--input-channels", type=int, default=3)
    s.add_argument("--height", type=int, default=1024)
    s.add_argument("--width", type=int, default=1280)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("train", parents=[common], help="train from manifests")
    s.add_argument("--train", dest="train_manifest")
    s.add_argument("--val", dest="val_manifest")
    s.add_argument("--out", required=True, help="run directory (checkpoint, loss.log, reports)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--loss", choices=("focal", "cross_entropy"))
    s.add_argument("--gamma", type=float)
    s.add_argument("--class-weights", help="comma-separated per-class weights, e.g. 1,20")
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--eval-interval", type=int)
    s.add_argument("--checkpoint-interval", type=int)
    s.add_argument("--patience", type=int, help="stop after this many eval intervals without a lower mean training loss")
    s.add_argument("--centroid-class", type=int)
    s.add_argument("--input-channels", type=int, default=3)
    s.add_argument("--no-augment", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="metrics report for a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output prefix; writes <out>.txt and <out>.json")
    s.add_argument("--centroid-class", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", parents=[common], help="predict masks for images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--overlay", action="store_true")
    s.add_argument("--palette", help="preset name or palette JSON file")
    s.add_argument("images", nargs="+")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", parents=[common], help="time forward passes")
    s.add_argument("--checkpoint")
    s.add_argument("--num-classes", type=int, default=2)
    s.add_argument("--input-channels", type=int, default=3)
    s.add_argument("--height", type=int, default=1024)
    s.add_argument("--width", type=int, default=1280)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--iterations", type=int, default=10)
    s.add_argument("--warmup", type=int, default=2)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    # accept os.PathLike arguments when called from Python
    args = parser.parse_args(None if argv is None else [str(a) for a in argv])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = 1 if args.deterministic else args.threads
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                args.func(args)
        else:
            args.func(args)
    except Exception as exc:  # noqa: BLE001
        message = " ".join(str(exc).split())
        print(f"mavnet-error command={args.command} type={type(exc).__name__} message={message}",
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
