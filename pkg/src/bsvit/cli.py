"""Command-line interface: train, eval, sweep-burst, energy, adjacency-dump, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as dio
from .attention import build_adjacency
from .model import CONFIG_VERSION, ConfigError, ModelConfig, build_model, infer, load_checkpoint, save_checkpoint
from .profiler import EnergyLedger, complexity_report, energy_from_counts, estimate_energy
from .report import format_table, svg_bar, svg_line, write_csv
from .training import TrainConfig, evaluate, fit

log = logging.getLogger("bsvit")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

DEFAULT_DATA = {"kind": "synth", "classes": 2, "samples": 500, "noise": 0.1, "jitter": 3,
                "path": None, "event_clip": None, "limit": None}
TOY_MODEL = dict(in_channels=1, height=16, width=16, timesteps=2, depth=1, dim=32, n_max=4,
                 num_classes=2, stem_pools=2)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` (or ``section.key=value``) overrides to a sectioned config."""
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--override expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = _parse_value(raw)
        if "." in key:
            section, name = key.split(".", 1)
            if section not in cfg:
                raise ConfigError(key, "unknown config section")
            cfg[section][name] = value
            continue
        for section in ("model", "train", "data"):
            if key in cfg[section]:
                cfg[section][key] = value
                break
        else:
            raise ConfigError(key, "unknown config field")
    return cfg


def load_run_config(args) -> dict:
    """Defaults, then the config file, then CLI flags, then overrides."""
    cfg = {"version": CONFIG_VERSION, "model": dict(ModelConfig(**TOY_MODEL).to_dict()),
           "train": TrainConfig(epochs=20).to_dict(), "data": dict(DEFAULT_DATA)}
    cfg["model"].pop("version")
    if getattr(args, "config", None):
        try:
            user = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"--config: no such file {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON ({exc})")
        if user.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError("version", f"unsupported config version {user['version']}")
        for section in ("model", "train", "data"):
            for key, value in user.get(section, {}).items():
                if key not in cfg[section] and key != "version":
                    raise ConfigError(f"{section}.{key}", "unknown config field")
                if key != "version":
                    cfg[section][key] = value
    if getattr(args, "dataset", None):
        cfg["data"]["kind"] = args.dataset
    if getattr(args, "data_path", None):
        cfg["data"]["path"] = args.data_path
    if getattr(args, "seed", None) is not None:
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    apply_overrides(cfg, getattr(args, "override", None) or [])
    ModelConfig.from_dict(cfg["model"])  # validates
    known = set(TrainConfig().to_dict())
    bad = set(cfg["train"]) - known
    if bad:
        raise ConfigError(f"train.{sorted(bad)[0]}", "unknown config field")
    return cfg


def echo_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def load_dataset(cfg: dict, split_seed_offset: int = 0) -> dio.Dataset:
    d, m = cfg["data"], cfg["model"]
    kind = d["kind"]
    if kind == "synth":
        data = dio.synth_dataset(int(d["classes"]), int(d["samples"]),
                                 (m["in_channels"], m["height"], m["width"]),
                                 seed=int(cfg["train"]["seed"]) + split_seed_offset,
                                 noise=float(d["noise"]), jitter=int(d["jitter"]))
    elif kind in ("cifar", "events"):
        if not d.get("path"):
            raise UsageError(f"--data-path is required for dataset '{kind}'")
        path = Path(d["path"])
        if not path.exists():
            raise UsageError(f"--data-path: no such file or directory {path}")
        if kind == "cifar":
            images, labels = dio.load_cifar_batch(path)
            data = dio.Dataset(images, labels, int(m["num_classes"]))
        else:
            data = load_event_folder(path, m, d.get("event_clip"))
    else:
        raise ConfigError("data.kind", f"unknown dataset {kind!r} (synth, cifar, events)")
    if d.get("limit"):
        data = data.subset(np.arange(min(int(d["limit"]), len(data))))
    return data


def load_event_folder(path: Path, m: dict, clip) -> dio.Dataset:
    """Event streams named ``<label>_<anything>.txt`` become (T, 2, H, W) samples."""
    files = sorted(path.glob("*.txt")) if path.is_dir() else [path]
    frames, labels = [], []
    for f in files:
        label = f.stem.split("_", 1)[0]
        if not label.isdigit():
            raise ConfigError("data.path", f"event file {f.name} lacks a '<label>_' prefix")
        stream = dio.read_events(f, m["height"], m["width"])
        frames.append(dio.bin_events(stream, m["timesteps"], clip))
        labels.append(int(label))
    if not frames:
        return dio.Dataset(np.zeros((0, m["timesteps"], 2, m["height"], m["width"]), np.float32),
                           np.zeros(0, np.int64), int(m["num_classes"]))
    return dio.Dataset(np.stack(frames), np.array(labels, np.int64), int(m["num_classes"]))


def _train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args)
    out = Path(args.out)
    echo_config(out, cfg)
    data = load_dataset(cfg)
    model = build_model(ModelConfig.from_dict(cfg["model"]))
    history = fit(model, data, _train_cfg(cfg), out / "metrics.jsonl")
    save_checkpoint(model, out / "checkpoint")
    final = dict(history[-1])
    final["eval_acc"] = evaluate(model, data)["accuracy"]
    (out / "final_metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True))
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    out = Path(args.out)
    echo_config(out, cfg)
    ckpt = Path(args.checkpoint)
    if not (ckpt / "config.json").exists():
        raise UsageError(f"--checkpoint: no checkpoint at {ckpt}")
    model = load_checkpoint(ckpt, ModelConfig.from_dict(cfg["model"]) if args.config else None)
    cfg["model"] = {k: v for k, v in model.config.to_dict().items() if k != "version"}
    data = load_dataset(cfg)
    if args.shuffle:
        data = data.subset(np.random.default_rng(args.shuffle).permutation(len(data)))
    report = evaluate(model, data, engine=args.engine)
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    rows = [{"class": c, **v} for c, v in report["per_class"].items()]
    write_csv(out / "per_class.csv", rows, ["class", "total", "correct"])
    print(f"top-1 accuracy: {report['accuracy']:.4f} on {report['n']} samples")
    print(format_table(rows, ["class", "total", "correct"]))
    return EXIT_OK


def parse_levels(text: str) -> list[int]:
    try:
        levels = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--levels must be comma-separated integers, got {text!r}")
    if not levels:
        raise UsageError("--levels is empty")
    if any(v < 1 for v in levels):
        raise UsageError("--levels must all be >= 1")
    dup = sorted({v for v in levels if levels.count(v) > 1})
    if dup:
        raise UsageError(f"--levels contains duplicate level(s) {dup}")
    return levels


def cmd_sweep_burst(args) -> int:
    levels = parse_levels(args.levels)
    cfg = load_run_config(args)
    out = Path(args.out)
    echo_config(out, cfg)
    data = load_dataset(cfg)
    rows = []
    for level in levels:
        mcfg = dict(cfg["model"], n_max=level)
        model = build_model(ModelConfig.from_dict(mcfg))
        history = fit(model, data, _train_cfg(cfg))
        acc = evaluate(model, data)["accuracy"]
        rows.append({"burst_level": level, "accuracy": acc, "epochs": len(history)})
        log.info("level %d: accuracy %.4f", level, acc)
    write_csv(out / "sweep.csv", rows, ["burst_level", "accuracy", "epochs"])
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))
    svg_line(out / "sweep.svg", [r["burst_level"] for r in rows], [r["accuracy"] for r in rows],
             "accuracy vs burst level")
    print(format_table(rows, ["burst_level", "accuracy", "epochs"]))
    return EXIT_OK


def parse_count(text: str) -> float:
    """Accept plain numbers or K/M/G suffixes (``178.78M``)."""
    scale = {"K": 1e3, "M": 1e6, "G": 1e9}
    t = text.strip().upper()
    try:
        if t and t[-1] in scale:
            return float(t[:-1]) * scale[t[-1]]
        return float(t)
    except ValueError:
        raise UsageError(f"cannot parse operation count {text!r}")


def _energy_pass(model, data: dio.Dataset) -> tuple[dict, list[dict]]:
    totals = EnergyLedger()
    for img in data.images:
        ledger = EnergyLedger()
        infer(model, img, ledger)
        totals = totals.merge(ledger)
    n = len(data)
    summary = {"images": n, "n_sop": totals.n_sop / n, "n_sign": totals.n_sign / n,
               "n_mac": totals.n_mac / n, "energy_uj": estimate_energy(totals) / n * 1e6,
               "complexity": complexity_report(totals)["layers"]}
    layers = [{"layer": name, "sop": rec.sop_count / n, "sign": rec.sign_count / n, "mac": rec.mac_count / n}
              for name, rec in totals.records.items()]
    return summary, layers


def cmd_energy(args) -> int:
    out = Path(args.out)
    if args.sops is not None or args.signs is not None:
        if args.sops is None or args.signs is None:
            raise UsageError("replay mode needs both --sops and --signs")
        n_sop, n_sign = parse_count(args.sops), parse_count(args.signs)
        e = energy_from_counts(n_sop, n_sign)
        report = {"mode": "replay", "n_sop": n_sop, "n_sign": n_sign, "energy_uj": e * 1e6}
        out.mkdir(parents=True, exist_ok=True)
        (out / "energy.json").write_text(json.dumps(report, indent=2))
        print(format_table([{"#Sops": f"{n_sop / 1e6:.2f}M", "#Sign": f"{n_sign / 1e6:.2f}M",
                             "Energy": f"{e * 1e6:.2f}uJ"}], ["#Sops", "#Sign", "Energy"]))
        return EXIT_OK
    if not args.checkpoint:
        raise UsageError("--checkpoint is required unless --sops/--signs are given")
    cfg = load_run_config(args)
    ckpt = Path(args.checkpoint)
    if not (ckpt / "config.json").exists():
        raise UsageError(f"--checkpoint: no checkpoint at {ckpt}")
    model = load_checkpoint(ckpt)
    cfg["model"] = {k: v for k, v in model.config.to_dict().items() if k != "version"}
    echo_config(out, cfg)
    data = load_dataset(cfg, split_seed_offset=1)
    if len(data) == 0:
        raise ValueError("energy profiling needs at least one sample")
    runs = {}
    settings = [("masked", True), ("unmasked", False)] if args.compare_mask else [("model", None)]
    for label, flag in settings:
        if flag is not None:
            model.set_mask(flag)
        summary, layers = _energy_pass(model, data)
        runs[label] = summary
        write_csv(out / f"energy_layers_{label}.csv", layers, ["layer", "sop", "sign", "mac"])
    report = {"mode": "measured", "runs": runs}
    (out / "energy.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    rows = [{"run": k, "#Sops": f"{v['n_sop'] / 1e6:.4f}M", "#Sign": f"{v['n_sign'] / 1e6:.4f}M",
             "Energy": f"{v['energy_uj']:.4f}uJ", "MACs": int(v["n_mac"])} for k, v in runs.items()]
    print(format_table(rows, ["run", "#Sops", "#Sign", "Energy", "MACs"]))
    svg_bar(out / "energy.svg", list(runs), [v["energy_uj"] for v in runs.values()], "energy per image (uJ)")
    return EXIT_OK


def parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid expects HxW, got {text!r}")
    if h < 1 or w < 1:
        raise UsageError("--grid dimensions must be positive")
    return h, w


def adjacency_pbm(h: int, w: int) -> str:
    """Plain PBM (P1) of the patch mask; a comment line carries a JSON header."""
    mask = build_adjacency(h, w)
    n = mask.n
    header = json.dumps({"grid_h": h, "grid_w": w, "nnz": int(mask.nnz)})
    rows = [" ".join(str(int(v)) for v in row) for row in mask.matrix]
    return "\n".join(["P1", f"# {header}", f"{n} {n}", *rows]) + "\n"


def cmd_adjacency_dump(args) -> int:
    h, w = parse_grid(args.grid)
    text = adjacency_pbm(h, w)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .tensor import matmul_addonly, matmul_float

    out = Path(args.out)
    cfg = load_run_config(args)
    echo_config(out, cfg)
    rng = np.random.default_rng(cfg["train"]["seed"])
    spikes = rng.integers(0, 5, size=(256, 128)).astype(np.int32)
    weights = rng.normal(size=(128, 128)).astype(np.float32)
    res = {}
    for name, fn in (("matmul_float", lambda: matmul_float(spikes, weights)),
                     ("matmul_addonly", lambda: matmul_addonly(spikes, weights))):
        t = time.perf_counter()
        for _ in range(args.repeat):
            fn()
        res[name + "_ms"] = (time.perf_counter() - t) / args.repeat * 1e3
    model = build_model(ModelConfig.from_dict(cfg["model"]))
    m = model.config
    img = rng.normal(size=(m.in_channels, m.height, m.width)).astype(np.float32)
    t = time.perf_counter()
    for _ in range(args.repeat):
        infer(model, img)
    res["inference_ms"] = (time.perf_counter() - t) / args.repeat * 1e3
    (out / "bench.json").write_text(json.dumps(res, indent=2, sort_keys=True))
    print(format_table([res], sorted(res)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="run config JSON with 'model', 'train' and 'data' sections")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed for model init, data and shuffling")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field after loading (repeatable)")
    if data:
        p.add_argument("--dataset", choices=["synth", "cifar", "events"], default=None)
        p.add_argument("--data-path", default=None, help="CIFAR binary batch or event-file folder")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsvit", description="Burst-spiking vision transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics, checkpoint and config")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy and per-class counts of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--engine", choices=["graph", "spike"], default="graph")
    p.add_argument("--shuffle", type=int, default=0, help="shuffle evaluation order with this seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-burst", help="train one model per burst level")
    _common(p)
    p.add_argument("--levels", required=True, help="comma-separated burst levels, e.g. 1,2,5")
    p.set_defaults(func=cmd_sweep_burst)

    p = sub.add_parser("energy", help="operation counts and energy per image")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--sops", help="replay mode: SOP count (suffixes K/M/G allowed)")
    p.add_argument("--signs", help="replay mode: spike-emission count")
    p.add_argument("--compare-mask", action="store_true", help="profile with and without the patch mask")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("adjacency-dump", help="write the patch adjacency mask as a PBM image")
    p.add_argument("--grid", required=True, help="token grid as HxW")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.set_defaults(func=cmd_adjacency_dump)

    p = sub.add_parser("bench", help="kernel and inference timings")
    _common(p, data=False)
    p.add_argument("--repeat", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
