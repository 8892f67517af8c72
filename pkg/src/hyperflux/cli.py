"""Command-line front end.

Every run writes into an output directory: a manifest capturing the
resolved configuration (and its hash), the epoch records as CSV, and a
checkpoint where it makes sense. Failures print a single machine-readable
JSON line to stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import __version__
from .data import generate_dataset, load_idx
from .flops import flops_for_net
from .network import MaskedNet, load_checkpoint, save_checkpoint
from .powerlaw import PowerLawFit, fit_power_law, fit_report, write_report_csv
from .saliency import (
    read_series_csv,
    run_pruning_sweep,
    sweep_to_series,
    write_series_csv,
)
from .training import (
    TrainConfig,
    Trainer,
    converged,
    run_constant_pressure,
    write_records_csv,
)

# The reference desk problem: two interleaved spirals against a 2-64-64-2
# perceptron. Values below are calibrated so that the dense baseline clears
# 95% validation accuracy and the default gamma grid spans the plateau,
# compression, and collapse behaviors.
DEFAULT_CONFIG = {
    "dataset": {
        "kind": "spirals",
        "n": 2000,
        "classes": 2,
        "noise": 0.08,
        "seed": 7,
        "val_fraction": 0.2,
    },
    "net": {
        "hidden": [64, 64],
        "seed": 1,
    },
    "train": {
        "pruning_epochs": 60,
        "stabilization_epochs": 20,
        "pretrain_epochs": 150,
        "batch_size": 100,
        "seed": 1,
        "eta_w_start": 0.5,
        "eta_w_end": 0.003,
        "eta_w_schedule": "cosine",
        "momentum": 0.9,
        "weight_decay": 0.0,
        "eta_t": 0.0005,
        "t_optimizer": "adam",
        "ste": "one",
        "policy": "trajectory",
        "target_density_pct": 5.0,
        "invert_trajectory": False,
        "step_u": 0.1,
        "exponent_alpha": 1.5,
    },
    "sweep": {
        "gammas": [0.02, 0.1, 0.5, 2.0, 8.0, 32.0],
        "epochs": 300,
        "eta_w": 0.1,
    },
    "prune": {
        "fraction": 0.1,
        "retrain_epochs": 10,
        "steps": 44,
        "eta_w": 0.1,
    },
    "fit": {
        "eps_acc": 1.0,
        "min_len": 4,
        "r2_floor": 0.9,
    },
}


class CliError(Exception):
    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: list) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # private deep copy
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}", path=str(p))
        try:
            with open(p, "rb") as fh:
                loaded = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise CliError(f"config file {p} is not valid TOML: {exc}",
                           path=str(p)) from exc
        config = _deep_merge(config, loaded)
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare string
        node = config
        for key in keys[:-1]:
            nxt = node.get(key)
            if not isinstance(nxt, dict):
                nxt = {}
                node[key] = nxt
            node = nxt
        node[keys[-1]] = value
    return config


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def build_dataset(config: dict):
    d = config["dataset"]
    if "images" in d:
        return load_idx(d["images"], d["labels"],
                        val_fraction=d.get("val_fraction", 0.0),
                        seed=d.get("seed", 0))
    return generate_dataset(
        d["kind"], n=d["n"], classes=d["classes"],
        noise=d.get("noise"), seed=d["seed"],
        val_fraction=d["val_fraction"],
    )


def build_net(config: dict, dataset) -> MaskedNet:
    sizes = [dataset.n_features, *config["net"]["hidden"], dataset.n_classes]
    return MaskedNet.initialize(sizes, seed=config["net"]["seed"],
                                ste=config["train"].get("ste", "one"))


def build_train_config(config: dict) -> TrainConfig:
    section = dict(config["train"])
    if "curve_decay" in section and section["curve_decay"] is not None:
        section["curve_decay"] = tuple(section["curve_decay"])
    try:
        return TrainConfig(**section)
    except TypeError as exc:
        raise CliError(f"bad train config: {exc}") from exc


def write_manifest(out_dir: Path, command: str, config: dict,
                   outputs: list) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config,
        "config_sha256": config_hash(config),
        "outputs": sorted(str(o) for o in outputs),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_flips_csv(path, trainer: Trainer) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step", "regrown", "pruned"))
        for i, (regrown, pruned) in enumerate(trainer.flip_log.steps):
            writer.writerow((i, regrown, pruned))


def _write_layer_csv(path, net: MaskedNet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("layer", "active", "total", "density"))
        for i, (fan_in, fan_out, active) in enumerate(net.layer_shapes()):
            total = fan_in * fan_out
            writer.writerow((i, active, total, repr(active / total)))


# -- subcommands ----------------------------------------------------------------


def cmd_pretrain(args) -> int:
    config = load_config(args.config, args.set or [])
    out = _out_dir(args)
    dataset = build_dataset(config)
    net = build_net(config, dataset)
    tc = build_train_config(config)
    trainer = Trainer(net, dataset, tc)
    records = trainer.pretrain(args.epochs or tc.pretrain_epochs)
    write_records_csv(out / "pretrain_records.csv", records)
    trainer.save(out / "checkpoint.npz")
    trainer.close()
    write_manifest(out, "pretrain", config,
                   [out / "pretrain_records.csv", out / "checkpoint.npz"])
    final = records[-1]
    print(f"pretrained {len(records)} epochs: "
          f"val acc {final.val_acc:.4f}, loss {final.loss:.4f}")
    return 0


def _load_start_net(args, config, dataset):
    if getattr(args, "from_checkpoint", None):
        net, _ = load_checkpoint(args.from_checkpoint)
        return net, True
    return build_net(config, dataset), False


def cmd_train(args) -> int:
    config = load_config(args.config, args.set or [])
    out = _out_dir(args)
    dataset = build_dataset(config)
    net, pretrained = _load_start_net(args, config, dataset)
    tc = build_train_config(config)
    trainer = Trainer(net, dataset, tc, records_path=out / "records.csv")
    if not pretrained and tc.pretrain_epochs:
        pre = trainer.pretrain()
        write_records_csv(out / "pretrain_records.csv", pre)
    records = trainer.run_training()
    trainer.save(out / "checkpoint.npz")
    _write_flips_csv(out / "flips.csv", trainer)
    _write_layer_csv(out / "layer_sparsity.csv", net)
    trainer.close()
    outputs = [out / "records.csv", out / "checkpoint.npz", out / "flips.csv",
               out / "layer_sparsity.csv"]
    write_manifest(out, "train", config, outputs)
    final = records[-1]
    print(f"trained {len(records)} epochs: density {final.density:.4f}, "
          f"val acc {final.val_acc:.4f}")
    print(flops_for_net(net).summary())
    return 0


def cmd_constant_gamma(args) -> int:
    config = load_config(args.config, args.set or [])
    out = _out_dir(args)
    dataset = build_dataset(config)
    net, pretrained = _load_start_net(args, config, dataset)
    tc = build_train_config(config)
    if args.track_flux:
        tc = replace(tc, track_flux=True, t_optimizer="sgd")
    run_cfg = replace(tc, eta_w_start=config["sweep"].get("eta_w", tc.eta_w_start))
    if not pretrained and tc.pretrain_epochs:
        # Warm up at the training rate, then run the sweep protocol rate.
        warm = Trainer(net, dataset, tc)
        warm.pretrain()
        warm.close()
    records, trainer = run_constant_pressure(
        net, dataset, run_cfg, args.gamma, args.epochs,
        records_path=out / "records.csv")
    trainer.save(out / "checkpoint.npz")
    _write_flips_csv(out / "flips.csv", trainer)
    write_manifest(out, "constant-gamma", config,
                   [out / "records.csv", out / "checkpoint.npz", out / "flips.csv"])
    final = records[-1]
    print(f"gamma={args.gamma}: density {final.density:.4f}, "
          f"val acc {final.val_acc:.4f}, converged={converged(records)}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config, args.set or [])
    out = _out_dir(args)
    dataset = build_dataset(config)
    tc = build_train_config(config)
    gammas = args.gammas or config["sweep"]["gammas"]
    epochs = args.epochs or config["sweep"]["epochs"]

    if args.from_checkpoint:
        start_net, _ = load_checkpoint(args.from_checkpoint)
    else:
        start_net = build_net(config, dataset)
        if tc.pretrain_epochs:
            warm = Trainer(start_net, dataset, tc)
            warm.pretrain()
            warm.close()
    run_cfg = replace(tc, eta_w_start=config["sweep"].get("eta_w", tc.eta_w_start))
    outputs = []
    runs = []
    for gamma in gammas:
        net = start_net.clone()
        run_dir = out / f"gamma-{gamma:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        records, trainer = run_constant_pressure(
            net, dataset, run_cfg, gamma, epochs,
            records_path=run_dir / "records.csv", pretrain=False)
        trainer.save(run_dir / "checkpoint.npz")
        outputs += [run_dir / "records.csv", run_dir / "checkpoint.npz"]
        runs.append((gamma, records))
        print(f"gamma={gamma:g}: density {records[-1].density:.4f}, "
              f"val acc {records[-1].val_acc:.4f}, converged={converged(records)}")
    flags = []
    series = sweep_to_series(runs, "hyperflux", flags)
    write_series_csv(out / "series.csv", series)
    outputs.append(out / "series.csv")
    if flags:
        with open(out / "flags.json", "w") as fh:
            json.dump([{"reason": f.reason, "threshold": f.threshold,
                        "density": f.density} for f in flags], fh, indent=2)
        outputs.append(out / "flags.json")
        for f in flags:
            print(f"dropped gamma={f.threshold:g}: {f.reason}")
    write_manifest(out, "sweep", config, outputs)
    print(f"series: {len(series)} points -> {out / 'series.csv'}")
    return 0


def _run_prune_sweep(args, method: str) -> int:
    config = load_config(args.config, args.set or [])
    out = _out_dir(args)
    dataset = build_dataset(config)
    tc = build_train_config(config)
    section = config["prune"]
    if args.from_checkpoint:
        net, _ = load_checkpoint(args.from_checkpoint)
    else:
        net = build_net(config, dataset)
        if tc.pretrain_epochs:
            warm = Trainer(net, dataset, tc)
            warm.pretrain()
            warm.close()
    run_cfg = replace(tc, eta_w_start=section.get("eta_w", tc.eta_w_start))
    records = run_pruning_sweep(
        net, dataset, run_cfg, method=method,
        fraction=args.fraction or section["fraction"],
        retrain_epochs=args.retrain_epochs or section["retrain_epochs"],
        steps=args.steps or section["steps"])
    flags = []
    series = sweep_to_series(records, method, flags)
    write_series_csv(out / "series.csv", series)
    save_checkpoint(out / "checkpoint.npz", net)
    write_manifest(out, method, config,
                   [out / "series.csv", out / "checkpoint.npz"])
    print(f"{method}: {len(series)} points, final density "
          f"{records[-1].density:.5f}, final acc {records[-1].accuracy:.4f}")
    return 0


def cmd_imp(args) -> int:
    return _run_prune_sweep(args, "magnitude")


def cmd_taylor(args) -> int:
    return _run_prune_sweep(args, "taylor")


def cmd_fit(args) -> int:
    config = load_config(args.config, args.set or [])
    section = config["fit"]
    series = read_series_csv(args.input)
    dense_accuracy = args.dense_accuracy
    if dense_accuracy is None:
        # Closest-to-dense point stands in for the unpruned baseline.
        dense_accuracy = max(p.accuracy for p in series.points)
    result = fit_power_law(
        series, dense_accuracy,
        eps_acc=args.eps_acc if args.eps_acc is not None else section["eps_acc"],
        min_len=args.min_len or section["min_len"],
        r2_floor=args.r2_floor if args.r2_floor is not None else section["r2_floor"])
    if not isinstance(result, PowerLawFit):
        print("no power-law region found")
        counts = {r: result.labels.count(r) for r in (1, 2, 3)}
        print(f"labels: {counts[1]} plateau, {counts[2]} law, {counts[3]} collapse")
        return 1
    print(fit_report(result))
    if args.out:
        out = _out_dir(args)
        write_report_csv(out / "fit_points.csv", result)
        with open(out / "fit_report.txt", "w") as fh:
            fh.write(fit_report(result) + "\n")
        write_manifest(out, "fit", config,
                       [out / "fit_points.csv", out / "fit_report.txt"])
    return 0


def cmd_export(args) -> int:
    net, extra = load_checkpoint(args.checkpoint)
    out = Path(args.output) if args.output else None
    if args.what == "histogram":
        actives = np.concatenate(
            [l.omega[l.t > 0].reshape(-1) for l in net.layers])
        rows = []
        if actives.size:
            counts, edges = np.histogram(actives, bins=args.bins)
            rows = [(repr(float(lo)), repr(float(hi)), int(c))
                    for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
        _write_csv(out, ("bin_low", "bin_high", "count"), rows)
    elif args.what == "layers":
        rows = []
        for i, (fan_in, fan_out, active) in enumerate(net.layer_shapes()):
            total = fan_in * fan_out
            rows.append((i, active, total, repr(active / total)))
        _write_csv(out, ("layer", "active", "total", "density"), rows)
    elif args.what == "flips":
        keys = sorted(k for k in extra if k.startswith("flips_layer"))
        if not keys:
            raise CliError(f"{args.checkpoint} holds no flip counters",
                           checkpoint=str(args.checkpoint))
        rows = []
        for key in keys:
            layer = int(key[len("flips_layer"):])
            counts = extra[key].reshape(-1)
            for flat, count in enumerate(counts):
                if count:
                    rows.append((layer, flat, int(count)))
        _write_csv(out, ("layer", "index", "flips"), rows)
    else:  # pragma: no cover - argparse chokes first
        raise CliError(f"unknown export {args.what!r}")
    return 0


def _write_csv(path, header, rows) -> None:
    if path is None:
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# -- argument parsing -------------------------------------------------------------


def _add_common(p, out_default: str) -> None:
    p.add_argument("--config", help="TOML config file layered over defaults")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--out", default=out_default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperflux",
        description="Presence-parameter pruning runs and sweep analysis.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="dense warmup, presence frozen")
    _add_common(p, "runs/pretrain")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="pruning stage plus stabilization")
    _add_common(p, "runs/train")
    p.add_argument("--from-checkpoint", help="start from a pretrained checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("constant-gamma", help="run at one fixed pressure")
    _add_common(p, "runs/constant-gamma")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--from-checkpoint")
    p.add_argument("--track-flux", action="store_true",
                   help="log per-step flux (forces plain SGD on presence)")
    p.set_defaults(fn=cmd_constant_gamma)

    p = sub.add_parser("sweep", help="constant-pressure runs over a gamma grid")
    _add_common(p, "runs/sweep")
    p.add_argument("--gammas", type=lambda s: [float(v) for v in s.split(",")],
                   default=None, help="comma-separated gamma grid")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--from-checkpoint")
    p.set_defaults(fn=cmd_sweep)

    for name, fn in (("imp", cmd_imp), ("taylor", cmd_taylor)):
        p = sub.add_parser(name, help=f"{name} prune-retrain sweep")
        _add_common(p, f"runs/{name}")
        p.add_argument("--fraction", type=float, default=None)
        p.add_argument("--retrain-epochs", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--from-checkpoint")
        p.set_defaults(fn=fn)

    p = sub.add_parser("fit", help="fit the power law on a series CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default=None)
    p.add_argument("--eps-acc", type=float, default=None,
                   help="collapse cutoff in accuracy percentage points")
    p.add_argument("--min-len", type=int, default=None)
    p.add_argument("--r2-floor", type=float, default=None)
    p.add_argument("--dense-accuracy", type=float, default=None)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("export", help="derive CSVs from a checkpoint")
    p.add_argument("what", choices=("histogram", "layers", "flips"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--output", default=None, help="CSV path (default stdout)")
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          **exc.context}), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
