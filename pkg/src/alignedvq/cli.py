"""Command-line interface.

One executable covering the whole workflow: synthetic data generation,
baseline training, aligned-VQ fine-tuning, evaluation, coefficient-of-
variation statistics, payload arithmetic, split serving, and benchmark
sweeps. Exit codes: 0 ok, 2 config error, 3 I/O error, 4 protocol/desync
error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import containers, runtime, wire
from .data import DataConfig, DataConfigError, generate
from .encoder import (ModelConfig, PartitionError, PartitionSpec, TAP_LOCATIONS,
                      VARIANTS, VisionEncoder)
from .train import (TrainConfig, TrainConfigError, TrainingDiverged, evaluate,
                    finetune_alignedvq, train_baseline)
from .vq import CodebookError, VQConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PROTOCOL = 4
EXIT_NUMERIC = 5


def _resolved(args, defaults: dict) -> dict:
    file_values = cfgmod.load_config_file(args.config) if args.config else {}
    flag_values = {k: getattr(args, k) for k in defaults if hasattr(args, k)}
    return cfgmod.resolve(defaults, file_values, flag_values)


def _load_bundle(checkpoint, codebooks=None):
    bundle = containers.load_checkpoint(checkpoint)
    if bundle.vq_module is not None:
        if codebooks is None:
            raise cfgmod.RunConfigError(
                "checkpoint carries a VQ module; pass --codebooks")
        bundle.attach_codebooks(containers.load_codebooks(codebooks))
    return bundle


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8")
    print(f"wrote {path}", file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    defaults = dict(num_classes=10, samples_per_class=200, image_size=32,
                    channels=1, noise_sigma=0.05, seed=0)
    opts = _resolved(args, defaults)
    dataset = generate(DataConfig(**opts))
    containers.save_dataset(args.out, dataset)
    print(f"generated {len(dataset)} images "
          f"({len(dataset.train_idx)} train / {len(dataset.val_idx)} val) -> {args.out}")
    return EXIT_OK


def _model_defaults():
    return dict(image_size=32, patch_size=8, channels=1, embed_dim=64, depth=4,
                heads=4, num_classes=10, variant="pre_norm", seed=0)


def cmd_train(args):
    defaults = dict(patch_size=8, embed_dim=64, depth=4, heads=4, variant="pre_norm",
                    seed=0, lr=3e-4, epochs=15, batch_size=64, beta=0.25)
    opts = _resolved(args, defaults)
    dataset = containers.load_dataset(args.data)
    # image geometry and class count follow the dataset
    model = VisionEncoder(ModelConfig(
        image_size=dataset.config.image_size, channels=dataset.config.channels,
        num_classes=dataset.config.num_classes, patch_size=opts["patch_size"],
        embed_dim=opts["embed_dim"], depth=opts["depth"], heads=opts["heads"],
        variant=opts["variant"], seed=opts["seed"]))
    train_cfg = TrainConfig(lr=opts["lr"], epochs=opts["epochs"],
                            batch_size=opts["batch_size"], seed=opts["seed"])
    report = train_baseline(model, dataset, train_cfg)
    containers.save_checkpoint(args.out, model)
    print(report.table())
    print(f"final val accuracy: {report.val_accuracy[-1]:.4f}")
    if args.csv:
        _write_text(args.csv, report.to_csv())
    return EXIT_OK


def cmd_finetune(args):
    defaults = dict(block=0, location="LN1", num_codebooks=1, num_groups=1,
                    entries=256, beta=0.25, lr=1e-4, epochs=8, batch_size=64,
                    seed=0)
    opts = _resolved(args, defaults)
    dataset = containers.load_dataset(args.data)
    bundle = containers.load_checkpoint(args.checkpoint)
    model = bundle.model
    partition = PartitionSpec(opts["block"], opts["location"])
    vq_config = VQConfig(opts["num_codebooks"], opts["num_groups"], opts["entries"],
                         model.cfg.embed_dim)
    freeze = {"backbone"}
    if args.no_adapter:
        freeze.add("adapter")
    if args.no_dlp:
        freeze.add("dlp")
    train_cfg = TrainConfig(beta=opts["beta"], lr=opts["lr"], epochs=opts["epochs"],
                            batch_size=opts["batch_size"], seed=opts["seed"],
                            freeze=frozenset(freeze))
    module, report = finetune_alignedvq(model, partition, vq_config, dataset, train_cfg,
                                        use_dlp=not args.no_dlp,
                                        use_adapter=not args.no_adapter)
    containers.save_checkpoint(args.out, model, partition, module)
    containers.save_codebooks(args.codebooks, module.codebooks)
    print(report.table())
    print(f"final val accuracy: {report.val_accuracy[-1]:.4f}")
    if args.csv:
        _write_text(args.csv, report.to_csv())
    return EXIT_OK


def cmd_eval(args):
    bundle = _load_bundle(args.checkpoint, args.codebooks)
    dataset = containers.load_dataset(args.data)
    acc = evaluate(bundle.model, dataset, bundle.partition, bundle.vq_module,
                   split=args.split)
    print(f"{acc:.4f}")
    return EXIT_OK


def cmd_stats_cv(args):
    defaults = {**_model_defaults(), "block": 0}
    opts = _resolved(args, defaults)
    if args.checkpoint:
        model = containers.load_checkpoint(args.checkpoint).model
    else:
        model_keys = _model_defaults().keys()
        model = VisionEncoder(ModelConfig(**{k: opts[k] for k in model_keys}))
    if args.data:
        dataset = containers.load_dataset(args.data)
        images = dataset.images[dataset.val_idx]
    else:
        rng = np.random.default_rng(opts["seed"])
        images = rng.normal(size=(64, model.cfg.image_size, model.cfg.image_size,
                                  model.cfg.channels)).astype(np.float32)
    stats = model.location_cv(images, block_index=opts["block"])
    print(f"{'location':>8} {'cv':>10}")
    for loc in TAP_LOCATIONS:
        print(f"{loc:>8} {stats[loc]:>10.5f}")
    if args.csv:
        rows = "location,cv\n" + "".join(f"{loc},{stats[loc]:.6f}\n" for loc in TAP_LOCATIONS)
        _write_text(args.csv, rows)
    return EXIT_OK


def cmd_payload_size(args):
    defaults = dict(tokens=577, index_bits=12, num_codebooks=1, num_groups=1,
                    batch=1, channels=1024, precision_bits=16)
    opts = _resolved(args, defaults)
    try:
        model = wire.SizeModel(channels=opts["channels"], precision_bits=opts["precision_bits"],
                               num_codebooks=opts["num_codebooks"], num_groups=opts["num_groups"],
                               index_bits=opts["index_bits"], tokens=opts["tokens"],
                               batch=opts["batch"])
    except wire.WireError as exc:
        raise cfgmod.RunConfigError(str(exc)) from exc
    size = wire.payload_size(model)
    print(f"{float(size['theoretical_kb']):.3f} KB")
    print(f"on wire: {size['on_wire_bytes']} B (header + padding included)", file=sys.stderr)
    if args.raw:
        print(f"raw features: {float(wire.raw_feature_kb(model)):.3f} KB")
    if args.image:
        h, w, ch = (int(v) for v in args.image.split("x"))
        print(f"raw image: {float(wire.raw_image_kb(h, w, ch)):.2f} KB")
    return EXIT_OK


def cmd_compress_rate(args):
    defaults = dict(channels=1024, precision_bits=16, index_bits=12,
                    num_codebooks=1, num_groups=1)
    opts = _resolved(args, defaults)
    try:
        model = wire.SizeModel(channels=opts["channels"], precision_bits=opts["precision_bits"],
                               num_codebooks=opts["num_codebooks"], num_groups=opts["num_groups"],
                               index_bits=opts["index_bits"])
    except wire.WireError as exc:
        raise cfgmod.RunConfigError(str(exc)) from exc
    print(f"{float(wire.compression_rate(model)):.2f}")
    return EXIT_OK


def cmd_split_serve(args):
    defaults = dict(host="127.0.0.1", port=9511, count=0, seed=0)
    opts = _resolved(args, defaults)
    bundle = _load_bundle(args.checkpoint, args.codebooks)
    if bundle.vq_module is None:
        raise cfgmod.RunConfigError("split serving needs a fine-tuned VQ checkpoint")
    if args.role == "cloud":
        server = runtime.CloudServer(bundle.model, bundle.partition, bundle.vq_module,
                                     host=opts["host"], port=opts["port"])
        print(f"cloud serving on {server.address[0]}:{server.address[1]}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.stop()
        return EXIT_OK
    if not args.data:
        raise cfgmod.RunConfigError("edge role needs --data for request images")
    dataset = containers.load_dataset(args.data)
    images, labels = dataset.val
    client = runtime.EdgeClient(opts["host"], opts["port"], bundle.model,
                                bundle.partition, bundle.vq_module)
    count = opts["count"] or len(labels)
    correct = 0
    try:
        for i in range(count):
            idx = i % len(labels)
            logits, echoed, edge_s = client.request(images[idx:idx + 1])
            pred = int(np.argmax(logits))
            correct += int(pred == labels[idx])
            print(f"request {echoed}: pred={pred} label={int(labels[idx])} "
                  f"edge={edge_s * 1000:.2f}ms")
    finally:
        client.close()
    print(f"accuracy over {count} requests: {correct / count:.4f}")
    return EXIT_OK


def cmd_bench(args):
    defaults = dict(seed=0)
    opts = _resolved(args, defaults)
    bundle = _load_bundle(args.checkpoint, args.codebooks)
    if bundle.vq_module is None:
        raise cfgmod.RunConfigError("bench needs a fine-tuned VQ checkpoint")
    dataset = containers.load_dataset(args.data)
    accuracy = evaluate(bundle.model, dataset, bundle.partition, bundle.vq_module)
    sample = dataset.images[dataset.val_idx[:1]]
    payload, _ = runtime.edge_run(sample, bundle.model, bundle.partition, bundle.vq_module)
    edge_s, cloud_s, mono_s = runtime.measure_compute(
        bundle.model, bundle.partition, bundle.vq_module, sample)
    baselines = {}
    for spec_str in args.baseline or []:
        name, kb = spec_str.split("=")
        baselines[name] = Fraction(kb) * 1024
    bandwidths = [float(b) * 1e6 for b in (args.bandwidths or "0.25,0.5,1,2,4").split(",")]
    rows = runtime.latency_sweep(len(payload), baselines, bandwidths,
                                 edge_s, cloud_s, mono_s)
    vcfg = bundle.vq_module.vq_config
    print(f"accuracy={accuracy:.4f} payload={len(payload)}B "
          f"(n={vcfg.num_codebooks} g={vcfg.num_groups} m={vcfg.index_bits})")
    header = list(rows[0].keys())
    print(",".join(header))
    lines = [",".join(str(row[k]) for k in header) for row in rows]
    print("\n".join(lines))
    if args.csv:
        _write_text(args.csv, ",".join(header) + "\n" + "\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alignedvq",
        description="Post-normalization vector quantization with dual linear "
                    "projection, and the split edge-cloud runtime around it.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--seed", type=int, help="PRNG seed")
        p.add_argument("--csv", help="write machine-readable CSV here")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset shard")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", dest="num_classes", type=int)
    p.add_argument("--per-class", dest="samples_per_class", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--sigma", dest="noise_sigma", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the baseline encoder")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="attach aligned VQ at a partition and fine-tune")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="baseline checkpoint")
    p.add_argument("--out", required=True, help="fine-tuned checkpoint path")
    p.add_argument("--codebooks", required=True, help="codebook container path")
    p.add_argument("--block", type=int)
    p.add_argument("--location", choices=TAP_LOCATIONS)
    p.add_argument("--stages", dest="num_codebooks", type=int)
    p.add_argument("--groups", dest="num_groups", type=int)
    p.add_argument("--entries", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--no-dlp", action="store_true")
    p.add_argument("--no-adapter", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codebooks")
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats-cv", help="coefficient of variation per tap location")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--block", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.set_defaults(func=cmd_stats_cv)

    p = sub.add_parser("payload-size", help="payload arithmetic (exact rationals)")
    common(p)
    p.add_argument("--tokens", type=int)
    p.add_argument("--bits", dest="index_bits", type=int)
    p.add_argument("--stages", dest="num_codebooks", type=int)
    p.add_argument("--groups", dest="num_groups", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--precision", dest="precision_bits", type=int)
    p.add_argument("--raw", action="store_true", help="also print raw feature size")
    p.add_argument("--image", help="HxWxC, also print raw image size")
    p.set_defaults(func=cmd_payload_size)

    p = sub.add_parser("compress-rate", help="compression rate C*K/(n*g*m)")
    common(p)
    p.add_argument("--channels", type=int)
    p.add_argument("--precision", dest="precision_bits", type=int)
    p.add_argument("--bits", dest="index_bits", type=int)
    p.add_argument("--stages", dest="num_codebooks", type=int)
    p.add_argument("--groups", dest="num_groups", type=int)
    p.set_defaults(func=cmd_compress_rate)

    p = sub.add_parser("split-serve", help="run the edge or cloud half over a socket")
    common(p)
    p.add_argument("--role", choices=("edge", "cloud"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codebooks", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--data", help="dataset shard (edge role)")
    p.add_argument("--count", type=int, help="requests to send (edge role)")
    p.set_defaults(func=cmd_split_serve)

    p = sub.add_parser("bench", help="accuracy/payload/latency sweep")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codebooks", required=True)
    p.add_argument("--bandwidths", help="comma-separated Mbps grid")
    p.add_argument("--baseline", action="append",
                   help="name=KB fixed-payload baseline, repeatable")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (wire.CodebookDesyncError, wire.WireError, runtime.TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (containers.ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (cfgmod.RunConfigError, DataConfigError, TrainConfigError, PartitionError,
            CodebookError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
