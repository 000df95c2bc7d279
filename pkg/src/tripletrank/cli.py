"""Command-line surface: data generation, training, evaluation, diagnostics.

Every parameter resolves from exactly one source (default < config file <
flag) and the resolution is recorded in a run manifest next to the outputs,
so any reported number can be replayed. The config file is flat
``key = value`` lines; keys match the flag names with dashes.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from tripletrank import __version__, datagen, evaluation, net as netmod, trainer
from tripletrank.data import load_dataset, load_relevance, save_dataset, save_relevance
from tripletrank.rankloss import LossConfig
from tripletrank.sampler import BufferSet, SamplerConfig


@dataclasses.dataclass(frozen=True)
class Param:
    name: str
    type: type
    default: object
    help: str
    is_flag: bool = False


_COMMON_SAMPLER = [
    Param("capacity", int, 64, "reservoir buffer capacity per category"),
    Param("t-p", float, float("inf"), "positive-sampling relevance cap T_p"),
    Param("t-r", float, 0.1, "in-class relevance margin T_r"),
    Param("ooc-ratio", float, 0.2, "out-of-class negative sample ratio"),
    Param("max-failures", int, 50, "sampling failure budget per example"),
]

PARAMS = {
    "gen-data": [
        Param("out", str, "data", "output directory"),
        Param("categories", int, 10, "number of categories"),
        Param("images-per-category", int, 50, "training images per category"),
        Param("eval-per-category", int, 20, "held-out eval images per category"),
        Param("latent-dim", int, 4, "planted latent dimensionality"),
        Param("shape", str, "3,32,32", "tensor shape C,H,W"),
        Param("spread", float, 0.1, "within-category latent spread"),
        Param("decay", float, 1.0, "relevance decay rate"),
        Param("pixel-noise", float, 0.35, "rendering noise level"),
        Param("seed", int, 0, "generator seed"),
    ],
    "train": [
        Param("data", str, "data", "dataset directory (from gen-data)"),
        Param("out", str, "run", "output directory"),
        Param("net-config", str, "", "architecture file (empty = built-in default)"),
        Param("lr", float, 0.01, "learning rate"),
        Param("momentum", float, 0.9, "momentum coefficient"),
        Param("batch", int, 8, "triplets per gradient step"),
        Param("workers", int, 1, "worker count (1 = deterministic)"),
        Param("triplets", int, 200_000, "total triplet budget"),
        Param("seed", int, 0, "training seed"),
        Param("max-shift", int, 2, "max augmentation pixel shift"),
        Param("gap", float, 1.0, "hinge gap parameter"),
        Param("weight-decay", float, 0.001, "L2 regularization strength"),
        Param("uniform", bool, False, "use uniform triplet sampling", is_flag=True),
        Param("pretrain", bool, False, "softmax-pretrain the full path", is_flag=True),
        Param("pretrain-epochs", int, 5, "pretraining epochs"),
        Param("log-interval", int, 200, "steps between log records"),
        Param("checkpoint-interval", int, 200, "steps between periodic checkpoints"),
        *_COMMON_SAMPLER,
    ],
    "eval": [
        Param("data", str, "data", "dataset directory (uses the eval split)"),
        Param("checkpoint", str, "run/model.ckpt", "trained model checkpoint"),
        Param("out", str, "", "report path (empty = print only)"),
        Param("outcomes-csv", str, "", "optional per-triplet outcome CSV path"),
        Param("k", int, 30, "top-K cutoff for score-at-top-K"),
        Param("pool-size", int, 100, "candidate pool size per query"),
        Param("triplets", int, 2000, "number of evaluation triplets"),
        Param("seed", int, 0, "evaluation sampling seed"),
        *_COMMON_SAMPLER,
    ],
    "sampler-stats": [
        Param("data", str, "data", "dataset directory"),
        Param("out", str, "stats", "output directory"),
        Param("probe-triplets", int, 10_000, "triplets drawn for diagnostics"),
        Param("uniform", bool, False, "use uniform triplet sampling", is_flag=True),
        Param("seed", int, 0, "sampling seed"),
        Param("sweep-ratios", str, "0,0.2,0.5,0.8,1.0", "out-of-class ratios to sweep"),
        Param("sweep-budget", int, 0, "training triplets per sweep point (0 skips the sweep)"),
        Param("eval-triplets", int, 500, "eval triplets per sweep point"),
        Param("k", int, 30, "top-K cutoff for sweep scores"),
        Param("pool-size", int, 100, "pool size for sweep scores"),
        Param("lr", float, 0.01, "sweep training learning rate"),
        Param("batch", int, 8, "sweep training batch size"),
        *_COMMON_SAMPLER,
    ],
    "export-filters": [
        Param("checkpoint", str, "run/model.ckpt", "trained model checkpoint"),
        Param("out", str, "filters", "output directory"),
        Param("upscale", int, 8, "nearest-neighbor upscale factor"),
    ],
    "show-config": [],
}


def _read_config_file(path):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    return values


def _coerce(param, raw):
    if param.is_flag:
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    return param.type(raw)


def resolve(command, args):
    """Apply default < file < flag precedence; returns (values, sources)."""
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    values, sources = {}, {}
    for param in PARAMS[command]:
        attr = param.name.replace("-", "_")
        flag_value = getattr(args, attr, None)
        if flag_value is not None and not (param.is_flag and flag_value is False):
            values[param.name] = flag_value
            sources[param.name] = "flag"
        elif param.name in file_values:
            values[param.name] = _coerce(param, file_values[param.name])
            sources[param.name] = "file"
        else:
            values[param.name] = param.default
            sources[param.name] = "default"
    unknown = set(file_values) - {p.name for p in PARAMS[command]}
    if unknown:
        raise ValueError(f"config file has unknown keys for {command}: {sorted(unknown)}")
    return values, sources


def write_run_manifest(out_dir, command, values, sources):
    manifest = {
        "command": command,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "params": {
            name: {"value": values[name], "source": sources[name]} for name in values
        },
    }
    canon = json.dumps(manifest["params"], sort_keys=True, default=str)
    manifest["config_hash"] = hashlib.sha256(canon.encode()).hexdigest()[:16]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    return manifest


def _sampler_config(values, seed):
    return SamplerConfig(
        buffer_capacity=values["capacity"],
        t_p=values["t-p"],
        t_r=values["t-r"],
        out_of_class_ratio=values["ooc-ratio"],
        max_failures=values["max-failures"],
        seed=seed,
    )


def _load_split(data_dir, split):
    manifest = os.path.join(data_dir, f"{split}.manifest.jsonl")
    if not os.path.exists(manifest):
        raise ValueError(f"no {split} split at {manifest}; run gen-data first")
    dataset = load_dataset(manifest)
    relevance = load_relevance(os.path.join(data_dir, f"{split}.relevance.csv"), dataset)
    return dataset, relevance


def cmd_gen_data(values, sources):
    shape = tuple(int(s) for s in values["shape"].split(","))
    config = datagen.GenConfig(
        num_categories=values["categories"],
        images_per_category=values["images-per-category"],
        eval_per_category=values["eval-per-category"],
        latent_dim=values["latent-dim"],
        shape=shape,
        spread=values["spread"],
        decay=values["decay"],
        pixel_noise=values["pixel-noise"],
        seed=values["seed"],
    )
    train_ds, train_rel, eval_ds, eval_rel = datagen.generate_split(config)
    out = values["out"]
    os.makedirs(out, exist_ok=True)
    save_dataset(train_ds, os.path.join(out, "train.manifest.jsonl"))
    save_relevance(train_rel, os.path.join(out, "train.relevance.csv"))
    if eval_ds is not None:
        save_dataset(eval_ds, os.path.join(out, "eval.manifest.jsonl"))
        save_relevance(eval_rel, os.path.join(out, "eval.relevance.csv"))
    write_run_manifest(out, "gen-data", values, sources)
    print(f"wrote {len(train_ds)} train / {0 if eval_ds is None else len(eval_ds)} eval "
          f"images to {out}")
    return 0


def _build_net(values, seed):
    if values["net-config"]:
        with open(values["net-config"]) as fh:
            text = fh.read()
    else:
        text = netmod.default_config_text()
    config = netmod.parse_net_config(text)
    return netmod.MultiscaleNet(config, rng=np.random.default_rng(seed))


def _train_config(values):
    return trainer.TrainConfig(
        learning_rate=values["lr"],
        momentum=values["momentum"],
        batch_size=values["batch"],
        workers=values["workers"],
        triplet_budget=values["triplets"],
        seed=values["seed"],
        max_shift=values["max-shift"],
        uniform_sampling=values["uniform"],
        log_interval=values["log-interval"],
        loss=LossConfig(gap=values["gap"], weight_decay=values["weight-decay"]),
        sampler=_sampler_config(values, values["seed"]),
    )


def cmd_train(values, sources):
    dataset, relevance = _load_split(values["data"], "train")
    network = _build_net(values, values["seed"])
    config = _train_config(values)
    out = values["out"]
    os.makedirs(out, exist_ok=True)
    write_run_manifest(out, "train", values, sources)
    with open(os.path.join(out, "net.ini"), "w") as fh:
        fh.write(netmod.canonical_config_text(network.config))

    log_records = []
    if values["pretrain"]:
        pre = trainer.pretrain_softmax(
            dataset, network, config, epochs=values["pretrain-epochs"]
        )
        for record in pre.log:
            log_records.append({"phase": "pretrain", **record})
        print(f"pretrain accuracy: {pre.final_accuracy:.3f}")

    ckpt_path = os.path.join(out, "checkpoint.ckpt")
    interval = max(1, values["checkpoint-interval"] // max(1, values["log-interval"]))
    calls = {"n": 0}

    def checkpoint_cb(steps, params):
        calls["n"] += 1
        if calls["n"] % interval == 0:
            tmp = ckpt_path + ".tmp"
            netmod.save_checkpoint(tmp, network, extra={"steps": steps}, params=params)
            os.replace(tmp, ckpt_path)

    run = trainer.train if config.workers == 1 else trainer.train_async
    result = run(dataset, relevance, network, config, checkpoint_cb=checkpoint_cb)
    for record in result.log:
        log_records.append({"phase": "rank", **record})
    with open(os.path.join(out, "train_log.jsonl"), "w") as fh:
        for record in log_records:
            fh.write(json.dumps(record, default=str) + "\n")
    netmod.save_checkpoint(
        os.path.join(out, "model.ckpt"), network, extra={"steps": result.steps}
    )
    print(f"trained {result.steps} steps on {result.triplets_used} triplets "
          f"in {result.wall_s:.1f}s; model at {os.path.join(out, 'model.ckpt')}")
    return 0


def _eval_model(network, dataset, relevance, values, seed):
    rng = np.random.default_rng(seed)
    triplets = evaluation.sample_eval_triplets(
        dataset, relevance, values["triplets"] if "triplets" in values
        else values["eval-triplets"],
        _sampler_config(values, seed), rng, uniform=True,
    )
    groups = evaluation.build_eval_groups(dataset, triplets, values["pool-size"], rng)
    embed = evaluation.dataset_embedder(network, dataset)
    return evaluation.evaluate(embed, triplets, groups, values["k"]), triplets, embed


def cmd_eval(values, sources):
    if not os.path.exists(values["checkpoint"]):
        raise ValueError(f"missing checkpoint {values['checkpoint']}")
    dataset, relevance = _load_split(values["data"], "eval")
    network, _ = netmod.load_checkpoint(values["checkpoint"])
    report, triplets, embed = _eval_model(network, dataset, relevance, values, values["seed"])
    payload = report.as_dict()
    print(json.dumps(payload, indent=2))
    if values["out"]:
        out_dir = os.path.dirname(values["out"]) or "."
        os.makedirs(out_dir, exist_ok=True)
        with open(values["out"], "w") as fh:
            json.dump(payload, fh, indent=2)
        write_run_manifest(out_dir, "eval", values, sources)
    if values["outcomes-csv"]:
        d_pos, d_neg = evaluation.pair_distances(embed, triplets)
        with open(values["outcomes-csv"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query", "positive", "negative", "kind", "d_pos", "d_neg", "correct"])
            for t, dp, dn in zip(triplets, d_pos, d_neg):
                writer.writerow([
                    t.query_id, t.positive_id, t.negative_id, t.negative_kind.value,
                    f"{dp:.6g}", f"{dn:.6g}", int(dp < dn),
                ])
    return 0


def cmd_sampler_stats(values, sources):
    dataset, relevance = _load_split(values["data"], "train")
    out = values["out"]
    os.makedirs(out, exist_ok=True)
    write_run_manifest(out, "sampler-stats", values, sources)

    rng = np.random.default_rng(values["seed"])
    buffers = BufferSet(_sampler_config(values, values["seed"]))
    buffers.insert_dataset(dataset, relevance, rng)
    draw = buffers.uniform_sample_triplet if values["uniform"] else buffers.sample_triplet
    for _ in range(values["probe-triplets"]):
        draw(relevance, rng)
    stats = buffers.stats_report()
    stats["mode"] = "uniform" if values["uniform"] else "weighted"
    with open(os.path.join(out, "stats.json"), "w") as fh:
        json.dump(stats, fh, indent=2)
    print(json.dumps({k: stats[k] for k in
                      ("mode", "emitted_total", "out_of_class_fraction")}, indent=2))

    if values["sweep-budget"] > 0:
        eval_ds, eval_rel = _load_split(values["data"], "eval")
        rows = []
        for ratio in [float(r) for r in values["sweep-ratios"].split(",")]:
            sweep_values = dict(values)
            sweep_values["ooc-ratio"] = ratio
            config = trainer.TrainConfig(
                learning_rate=values["lr"],
                batch_size=values["batch"],
                triplet_budget=values["sweep-budget"],
                seed=values["seed"],
                uniform_sampling=values["uniform"],
                sampler=_sampler_config(sweep_values, values["seed"]),
            )
            network = _build_net({"net-config": ""}, values["seed"])
            result = trainer.train(dataset, relevance, network, config)
            report, _, _ = _eval_model(network, eval_ds, eval_rel, sweep_values, values["seed"])
            rows.append({
                "ratio": ratio,
                "mode": "uniform" if values["uniform"] else "weighted",
                "precision": report.precision,
                "score_at_top_k": report.score_at_top_k,
                "emitted_out_of_class_fraction":
                    result.sampler_stats["out_of_class_fraction"],
            })
            print(f"ratio {ratio:.2f}: precision {report.precision:.3f}, "
                  f"score-{values['k']} {report.score_at_top_k}")
        sweep_path = os.path.join(out, "sweep.csv")
        with open(sweep_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(f"sweep table at {sweep_path}")
    return 0


def _kernel_grid(kernels, upscale):
    """Tile (K, C, s, s) kernels into one displayable uint8 grid."""
    k, c, s, _ = kernels.shape
    cols = int(np.ceil(np.sqrt(k)))
    rows = int(np.ceil(k / cols))
    pad = 1
    cell = s + pad
    channels = 3 if c == 3 else 1
    grid = np.zeros((rows * cell + pad, cols * cell + pad, channels), dtype=np.float64)
    for idx in range(k):
        img = kernels[idx] if c == 3 else kernels[idx].mean(axis=0, keepdims=True)
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        r, col = divmod(idx, cols)
        grid[
            pad + r * cell : pad + r * cell + s,
            pad + col * cell : pad + col * cell + s,
        ] = img.transpose(1, 2, 0)
    grid = np.repeat(np.repeat(grid, upscale, axis=0), upscale, axis=1)
    return (grid * 255).astype(np.uint8)


def cmd_export_filters(values, sources):
    from PIL import Image

    if not os.path.exists(values["checkpoint"]):
        raise ValueError(f"missing checkpoint {values['checkpoint']}")
    network, _ = netmod.load_checkpoint(values["checkpoint"])
    out = values["out"]
    os.makedirs(out, exist_ok=True)
    write_run_manifest(out, "export-filters", values, sources)
    written = []
    for path_name, kernels in network.first_conv_kernels().items():
        grid = _kernel_grid(np.asarray(kernels), values["upscale"])
        img = Image.fromarray(grid[..., 0] if grid.shape[-1] == 1 else grid)
        target = os.path.join(out, f"filters_{path_name}.png")
        img.save(target)
        written.append(target)
        print(f"{path_name}: {kernels.shape[0]} kernels -> {target}")
    if not written:
        raise ValueError("checkpoint's architecture has no convolutional layers")
    return 0


def cmd_show_config(values, sources):
    for command in sorted(PARAMS):
        if not PARAMS[command]:
            continue
        print(f"[{command}]")
        for param in PARAMS[command]:
            print(f"  {param.name} = {param.default}  # {param.help}")
        print()
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sampler-stats": cmd_sampler_stats,
    "export-filters": cmd_export_filters,
    "show-config": cmd_show_config,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tripletrank",
        description="Triplet-ranking similarity embeddings at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, params in PARAMS.items():
        p = sub.add_parser(command, help=f"{command} command")
        p.add_argument("--config", type=str, default=None, help="flat key=value config file")
        for param in params:
            flag = f"--{param.name}"
            if param.is_flag:
                p.add_argument(flag, action="store_true", default=False, help=param.help)
            else:
                p.add_argument(flag, type=param.type, default=None, help=param.help)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        values, sources = resolve(args.command, args)
        return _HANDLERS[args.command](values, sources)
    except (ValueError, RuntimeError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
