"""Command-line entry point.

Subcommands: gen-data, train, train-gate, eval, sweep, flops, inspect.
Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
Every artifact embeds the resolved config and content hashes of its inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys

import numpy as np

from . import evalkit, synthdata, training, uncertainty
from .posehead import skeleton_table
from .runconfig import ConfigError, file_hash, load_config


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so errors map to exit code 1."""

    def error(self, message):
        raise ConfigError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON run config file")
    p.add_argument("--seed", type=int, help="master seed (feeds gen and train)")


def build_parser() -> _Parser:
    parser = _Parser(prog="iterpose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    _add_common(p)
    p.add_argument("--out", required=True, help="output .ipd path")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--size", type=int, help="image size (multiple of 32)")
    p.add_argument("--background", choices=synthdata.BACKGROUNDS)
    p.add_argument("--noise-sigma", type=float, help="sensor noise level")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--protocol", choices=training.PROTOCOLS)
    p.add_argument("--l-max", type=int)
    p.add_argument("--loop-point", type=int)
    p.add_argument("--amg-mode", choices=("attention", "direct_upsample", "none"))
    p.add_argument("--base-channels", type=int)
    p.add_argument("--fc-width", type=int)
    p.add_argument("--epochs-initial", type=int)
    p.add_argument("--epochs-per-loop", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--noise-aug", type=float,
                   help="per-batch Gaussian pixel noise during training")

    p = sub.add_parser("train-gate", help="train the exit gate on a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="input checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint with gate")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="accuracy weight in the gate reward")
    p.add_argument("--tau-gate", type=float, help="gate softmax temperature")
    p.add_argument("--cost-mode", choices=("cumulative", "marginal"))
    p.add_argument("--gate-epochs", type=int)
    p.add_argument("--gate-lr", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="report JSON path (default: stdout)")
    p.add_argument("--split", default="val")
    p.add_argument("--gate", choices=evalkit.MECHANISMS,
                   help="exit mechanism (default from config)")
    p.add_argument("--tau-var", type=float)
    p.add_argument("--tau-gate", type=float)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--heatmaps", type=int, default=0, metavar="N",
                   help="write confidence heatmaps for the first N samples")
    p.add_argument("--heatmap-dir", default=".")
    p.add_argument("--per-loop-report", action="store_true",
                   help="include per-loop loss distributions")

    p = sub.add_parser("sweep", help="accuracy/compute trade-off curve")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mechanism", required=True, choices=("tau_var", "tau_gate"))
    p.add_argument("--values", required=True,
                   help="comma-separated knob values, ascending")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--split", default="val")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("flops", help="print the FLOPs table for a config")
    _add_common(p)
    p.add_argument("--l-max", type=int)
    p.add_argument("--loop-point", type=int)
    p.add_argument("--amg-mode", choices=("attention", "direct_upsample", "none"))
    p.add_argument("--base-channels", type=int)
    p.add_argument("--fc-width", type=int)
    p.add_argument("--input-size", type=int)

    p = sub.add_parser("inspect", help="dump a checkpoint or dataset header")
    p.add_argument("path")
    p.add_argument("--skeleton", action="store_true",
                   help="also print the joint table")
    return parser


_MODEL_FLAGS = {"l_max": "l_max", "loop_point": "loop_point",
                "amg_mode": "amg_mode", "base_channels": "base_channels",
                "fc_width": "fc_width", "input_size": "input_size"}
_TRAIN_FLAGS = {"protocol": "protocol", "epochs_initial": "epochs_initial",
                "epochs_per_loop": "epochs_per_loop", "batch_size": "batch_size",
                "lr": "lr", "noise_aug": "noise_aug",
                "gate_epochs": "gate_epochs", "gate_lr": "gate_lr"}
_GEN_FLAGS = {"n": "n", "size": "size", "background": "background",
              "noise_sigma": "noise_sigma"}
_GATE_FLAGS = {"lam": "lam", "tau_gate": "tau_gate", "tau_var": "tau_var",
               "cost_mode": "cost_mode", "gate": "mechanism"}


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    for table, section in ((_GEN_FLAGS, "gen"), (_MODEL_FLAGS, "model"),
                           (_TRAIN_FLAGS, "train"), (_GATE_FLAGS, "gate")):
        vals = {key: getattr(args, attr) for attr, key in table.items()
                if getattr(args, attr, None) is not None}
        if vals:
            out[section] = vals
    return out


def _config(args):
    return load_config(getattr(args, "config", None), _overrides(args))


def _require_files(args, *attrs):
    for attr in attrs:
        path = getattr(args, attr, None)
        if path is not None and not os.path.exists(path):
            raise ConfigError(f"--{attr} file does not exist: {path}")


def _load_split(path, split):
    ds = synthdata.load_dataset(path)
    return ds, ds.split(split)


def _sync_input_size(rc, ds, path):
    size = ds.header["size"]
    if rc.model.input_size != size:
        if rc.was_set("model.input_size"):
            raise ConfigError(f"model.input_size={rc.model.input_size} does not "
                              f"match dataset {path} (size {size})")
        rc.model.input_size = size


def _write_json(report, path):
    text = json.dumps(report, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_gen_data(args) -> int:
    _require_files(args, "config")
    rc = _config(args)
    synthdata.generate_dataset(rc.gen, args.out, jobs=args.jobs)
    print(f"wrote {rc.gen.n} samples ({rc.gen.size}x{rc.gen.size}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    _require_files(args, "config", "data")
    rc = _config(args)
    ds, _ = _load_split(args.data, "all")
    _sync_input_size(rc, ds, args.data)
    rc.validate()
    train, val = ds.split("train"), ds.split("val")
    net, opt, log, rng = training.train_model(rc.model, rc.train, train, val)
    inputs = {"hashes": {"data": file_hash(args.data)},
              "resolved_config": rc.resolved()}
    training.save_checkpoint(args.out, net, rc.train, log, opt, rng, inputs)
    last = log[-1]["val"]
    print(f"trained {rc.train.protocol} for {len(log)} epochs; "
          f"val err2d per loop: {[round(e, 3) for e in last['err2d']]}")
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_train_gate(args) -> int:
    _require_files(args, "config", "data", "ckpt")
    rc = _config(args)
    net, header, _ = training.load_checkpoint(args.ckpt)
    rc.model = net.cfg
    ds, _ = _load_split(args.data, "all")
    if ds.header["size"] != net.cfg.input_size:
        raise ConfigError(f"dataset size {ds.header['size']} does not match "
                          f"checkpoint input_size {net.cfg.input_size}")
    train = ds.split("train")
    counts = evalkit.count_flops(net.cfg)
    log = training.train_gate(net, rc.train, train,
                              per_loop_gflops=counts["per_loop"] / 1e9,
                              lam=rc.gate.lam, tau_gate=rc.gate.tau_gate,
                              cumulative=rc.gate.cost_mode == "cumulative")
    inputs = {"hashes": {"data": file_hash(args.data),
                         "ckpt": file_hash(args.ckpt)},
              "resolved_config": rc.resolved()}
    training.save_checkpoint(args.out, net, rc.train, header["log"] + log,
                             None, None, inputs)
    print(f"gate trained for {rc.train.gate_epochs} epochs; "
          f"mean exit loop {log[-1]['mean_exit_loop']:.2f}")
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    _require_files(args, "config", "data", "ckpt")
    rc = _config(args)
    net, header, _ = training.load_checkpoint(args.ckpt)
    rc.model = net.cfg
    ds, split = _load_split(args.data, args.split)
    mechanism = rc.gate.mechanism
    if mechanism == "learned" and net.gate is None:
        raise ConfigError("checkpoint has no gate; run train-gate first or "
                          "use --gate none/threshold")
    if net.gate is not None and rc.was_set("gate.tau_gate"):
        net.gate.tau = rc.gate.tau_gate
    tau_var = rc.gate.tau_var if mechanism == "threshold" else None
    report = evalkit.evaluate(net, split, mechanism, tau_var=tau_var,
                              seed=rc.seed, jobs=args.jobs)
    report["split"] = args.split
    report["inputs"] = {"data": file_hash(args.data), "ckpt": file_hash(args.ckpt)}
    report["resolved_config"] = rc.resolved()
    if args.per_loop_report:
        report["per_loop_losses"] = evalkit.per_loop_report(
            net, split, rc.train.gamma_2d, rc.train.gamma_3d, rc.train.gamma_var)
    if args.heatmaps:
        _write_heatmaps(net, split, args.heatmaps, args.heatmap_dir)
    _write_json(report, args.out)
    if args.out:
        e = report["exit"]
        print(f"{args.split}: err2d {e['err2d']:.3f}px err3d {e['err3d']:.4f} "
              f"auc3d {e['auc_3d']:.3f} avg loops {e['avg_loops']:.2f}")
        print(f"wrote report {args.out}")
    return 0


def _write_heatmaps(net, data, count, out_dir):
    from .diffengine import Tensor, no_grad
    net.eval()
    count = min(count, len(data.images))
    with no_grad():
        outs = net.forward_loop(Tensor(data.images[:count]))
    out = outs[-1]
    var = uncertainty.per_joint_variance_2d(out.var.alpha_2d)
    size = net.cfg.input_size
    for i in range(count):
        maps = uncertainty.confidence_heatmap(out.j2d.data[i], var[i], size)
        path = f"{out_dir}/heatmap_{i:03d}.pgm"
        uncertainty.write_pgm(path, maps.max(axis=0))
        print(f"wrote {path}")


def cmd_sweep(args) -> int:
    _require_files(args, "config", "data", "ckpt")
    rc = _config(args)
    net, header, _ = training.load_checkpoint(args.ckpt)
    rc.model = net.cfg
    _, split = _load_split(args.data, args.split)
    try:
        values = [float(v) for v in args.values.split(",")]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated numbers, "
                          f"got {args.values!r}")
    if args.mechanism == "tau_gate" and net.gate is None:
        raise ConfigError("checkpoint has no gate; tau_gate sweep needs one")
    rows = evalkit.tradeoff_sweep(net, split, args.mechanism, values,
                                  seed=rc.seed, jobs=args.jobs)
    hashes = {"data": file_hash(args.data), "ckpt": file_hash(args.ckpt)}
    text = evalkit.sweep_csv(rows, rc.resolved(), hashes)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_flops(args) -> int:
    rc = _config(args)
    table = evalkit.count_flops(rc.model)
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    if not os.path.exists(args.path):
        raise ConfigError(f"file does not exist: {args.path}")
    with open(args.path, "rb") as fh:
        magic = fh.read(4)
    if magic == training.MAGIC:
        header = training.read_checkpoint_header(args.path)
        kind = "checkpoint"
        n_params = sum(int(np.prod(s)) for _, s in header["params"])
        summary = {"kind": kind, "version": header["version"],
                   "parameters": n_params, "has_gate": header["has_gate"],
                   "model": header["config"]["model"],
                   "train": header["config"]["train"],
                   "epochs_logged": len(header["log"]),
                   "inputs": header.get("inputs", {})}
    elif magic == synthdata.MAGIC:
        ds = synthdata.load_dataset(args.path)
        summary = {"kind": "dataset", **ds.header}
    else:
        raise ConfigError(f"{args.path}: unknown file type (magic {magic!r})")
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.skeleton:
        print()
        print(skeleton_table())
    return 0


_COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train,
             "train-gate": cmd_train_gate, "eval": cmd_eval,
             "sweep": cmd_sweep, "flops": cmd_flops, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, struct.error) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
