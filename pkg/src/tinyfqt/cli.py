"""Command-line entry point: train, eval, bench and memory."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import IDXError, epoch_order, load_idx, split_shuffle, stream
from .graph import (
    PRECISIONS,
    CheckpointError,
    Model,
    build_small_cnn,
    load_checkpoint,
    plan_memory,
    reset_layers,
    save_checkpoint,
)
from .optim import SparseConfig, TrainConfig, Trainer, evaluate

# RAM / Flash budgets in bytes
PRESETS = {
    "rp2040": (264 * 1024, 16 * 1024 * 1024),
    "nrf52840": (256 * 1024, 1024 * 1024),
    "imxrt1062": (1024 * 1024, 16 * 1024 * 1024),
}

METRIC_COLUMNS = ["epoch", "step", "loss", "test_acc", "macs_fwd", "macs_bwd", "selected_frac_mean"]


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    precision: str = "uint8"
    conv1: int = 8
    conv2: int = 16
    hidden: int = 32
    kernel: int = 3
    init_seed: int = 0
    checkpoint: Optional[str] = None
    reset_last: int = 0


@dataclass
class DataSection:
    images: str = "data/mnist10k/images-idx3-ubyte.gz"
    labels: str = "data/mnist10k/labels-idx1-ubyte.gz"
    class_count: int = 10
    train_fraction: float = 0.8
    split_seed: int = 0


@dataclass
class TrainSection:
    learning_rate: float = 0.001
    batch_size: int = 48
    epochs: int = 5
    seed: int = 0
    lambda_min: Optional[float] = None
    lambda_max: float = 1.0


@dataclass
class BenchSection:
    lambda_min: list = field(default_factory=lambda: [1.0, 0.5, 0.1])
    steps: int = 480


@dataclass
class MemorySection:
    ram_kb: Optional[float] = None
    flash_kb: Optional[float] = None


@dataclass
class OutputSection:
    step_log: bool = False


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    bench: BenchSection = field(default_factory=BenchSection)
    memory: MemorySection = field(default_factory=MemorySection)
    output: OutputSection = field(default_factory=OutputSection)
    base_dir: Path = Path(".")

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def train_config(self, precision: Optional[str] = None, lambda_min="config") -> TrainConfig:
        t = self.train
        lmin = t.lambda_min if lambda_min == "config" else lambda_min
        sparse = None if lmin is None else SparseConfig(lmin, t.lambda_max)
        return TrainConfig(t.learning_rate, t.batch_size, precision or self.model.precision, sparse, t.seed)


_SECTION_TYPES = {
    "model": ModelSection,
    "data": DataSection,
    "train": TrainSection,
    "bench": BenchSection,
    "memory": MemorySection,
    "output": OutputSection,
}


def _check_type(section: str, key: str, value, default):
    ok_num = isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, bool):
        good = isinstance(value, bool)
    elif isinstance(default, int):
        good = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None and key.startswith(("lambda", "ram", "flash")):
        good = ok_num
    elif isinstance(default, list):
        good = isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    else:
        good = isinstance(value, str)
    if not good:
        raise ConfigError(f"[{section}] {key}: unexpected value {value!r}")


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Build a RunConfig from a parsed TOML table, rejecting unknown keys."""
    cfg = RunConfig(base_dir=Path(base_dir))
    for section, table in raw.items():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}] (expected one of {sorted(_SECTION_TYPES)})")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        obj = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(obj)}
        for key, value in table.items():
            if key not in names:
                raise ConfigError(f"[{section}] unknown key {key!r} (expected one of {sorted(names)})")
            _check_type(section, key, value, getattr(obj, key))
            setattr(obj, key, value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    m, t, d, b = cfg.model, cfg.train, cfg.data, cfg.bench
    if m.precision not in PRECISIONS:
        raise ConfigError(f"[model] precision must be one of {PRECISIONS}, got {m.precision!r}")
    for name in ("conv1", "conv2", "hidden", "kernel"):
        if getattr(m, name) < 1:
            raise ConfigError(f"[model] {name} must be >= 1")
    if m.reset_last < 0:
        raise ConfigError("[model] reset_last must be >= 0")
    if not t.learning_rate > 0:
        raise ConfigError(f"[train] learning_rate must be > 0, got {t.learning_rate}")
    if t.batch_size < 1:
        raise ConfigError(f"[train] batch_size must be >= 1, got {t.batch_size}")
    if t.epochs < 0:
        raise ConfigError("[train] epochs must be >= 0")
    lmins = ([] if t.lambda_min is None else [t.lambda_min]) + list(b.lambda_min)
    for lmin in lmins:
        if not 0.0 <= lmin <= t.lambda_max <= 1.0:
            raise ConfigError(
                f"lambda_min ({lmin}) must satisfy 0 <= lambda_min <= lambda_max ({t.lambda_max}) <= 1"
            )
    if not 0.0 < d.train_fraction < 1.0:
        raise ConfigError("[data] train_fraction must be in (0, 1)")
    if b.steps < 1:
        raise ConfigError("[bench] steps must be >= 1")


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        validate(cfg)
        return cfg
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return parse_config(raw, p.parent)


# ---------------------------------------------------------------------------
# shared plumbing


def load_data(cfg: RunConfig) -> tuple:
    d = cfg.data
    ds = load_idx(cfg.resolve(d.images), cfg.resolve(d.labels), d.class_count)
    return split_shuffle(ds, d.train_fraction, d.split_seed)


def make_model(cfg: RunConfig, input_shape: tuple, num_classes: int) -> tuple:
    """(model, trainer state from a checkpoint or None)."""
    m = cfg.model
    state = None
    if m.checkpoint:
        model, state = load_checkpoint(cfg.resolve(m.checkpoint))
        if m.reset_last:
            model = reset_layers(model, m.reset_last, seed=cfg.train.seed)
            state = None
    else:
        model = build_small_cnn(m.precision, input_shape, num_classes, m.conv1, m.conv2, m.hidden, m.kernel, m.init_seed)
    return model, state


def format_report(report, ram_limit=None, flash_limit=None) -> str:
    lines = [
        f"  feature maps            {report.feature_map_bytes:>10d} B",
        f"  trainable + grad buffers {report.trainable_weight_and_gradbuf_bytes:>9d} B",
        f"  static weights          {report.static_weight_bytes:>10d} B",
    ]
    if ram_limit is not None:
        flag = "OVER" if report.ram_bytes > ram_limit else "ok"
        lines.append(f"  RAM  {report.ram_bytes} / {int(ram_limit)} B  {flag}")
    if flash_limit is not None:
        flag = "OVER" if report.flash_bytes > flash_limit else "ok"
        lines.append(f"  Flash {report.flash_bytes} / {int(flash_limit)} B  {flag}")
    return "\n".join(lines)


def run_training(model: Model, trainer: Trainer, train_ds, test_ds, epochs: int, seed: int, step_log=None) -> list:
    """Train for ``epochs`` and return one metrics row per epoch (row 0 is the baseline)."""
    acc, _ = evaluate(model, stream(test_ds, range(len(test_ds))))
    rows = [dict(epoch=0, step=trainer.steps, loss="", test_acc=acc, macs_fwd=0, macs_bwd=0, selected_frac_mean="")]
    for epoch in range(1, epochs + 1):
        total_loss = 0.0
        macs_f = macs_b = 0
        fracs = []
        for x, y in stream(train_ds, epoch_order(len(train_ds), seed, epoch)):
            t0 = time.perf_counter()
            s = trainer.train_step(x, y)
            total_loss += s.loss
            macs_f += s.macs_fwd
            macs_b += s.macs_bwd
            fracs.append(s.selected_frac_mean)
            if step_log is not None:
                step_log.writerow([s.step, epoch, f"{s.loss:.6f}", f"{s.selected_frac_mean:.4f}", macs_b, f"{time.perf_counter() - t0:.6f}"])
        acc, _ = evaluate(model, stream(test_ds, range(len(test_ds))))
        rows.append(
            dict(
                epoch=epoch,
                step=trainer.steps,
                loss=f"{total_loss / len(train_ds):.6f}",
                test_acc=acc,
                macs_fwd=macs_f,
                macs_bwd=macs_b,
                selected_frac_mean=f"{float(np.mean(fracs)):.6f}",
            )
        )
        print(f"epoch {epoch}: loss {rows[-1]['loss']}  test_acc {acc:.4f}  macs_bwd {macs_b}", flush=True)
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, out: Path) -> int:
    train_ds, test_ds = load_data(cfg)
    model, state = make_model(cfg, train_ds.sample_shape, train_ds.class_count)
    tcfg = cfg.train_config(model.precision)
    trainer = Trainer(model, tcfg)
    trainer.load_state(state)
    report = plan_memory(model, tcfg)
    print(f"model: {model}")
    print("memory:\n" + format_report(report))
    out.mkdir(parents=True, exist_ok=True)
    step_file = open(out / "steps.csv", "w", newline="") if cfg.output.step_log else None
    try:
        step_log = None
        if step_file is not None:
            step_log = csv.writer(step_file)
            step_log.writerow(["step", "epoch", "loss", "selected_frac_mean", "macs_bwd", "wall_s"])
        rows = run_training(model, trainer, train_ds, test_ds, cfg.train.epochs, cfg.train.seed, step_log)
    finally:
        if step_file is not None:
            step_file.close()
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    save_checkpoint(model, out / "model.qtrn", trainer.state())
    summary = {
        "precision": model.precision,
        "epochs": cfg.train.epochs,
        "steps": trainer.steps,
        "final_test_acc": rows[-1]["test_acc"],
        "memory": report.as_dict(),
        "trainable_layers": sorted(model.trainable),
        "layer_visits": {str(k): v for k, v in sorted(trainer.visits.items())},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"final test accuracy {rows[-1]['test_acc']:.4f}; wrote {out}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str, out: Path) -> int:
    model, _ = load_checkpoint(checkpoint)
    _, test_ds = load_data(cfg)
    acc, conf = evaluate(model, stream(test_ds, range(len(test_ds))))
    print(f"top-1 accuracy {acc:.4f} on {len(test_ds)} samples")
    print("confusion (rows: true, cols: predicted)")
    for i, row in enumerate(conf):
        print(f"  {i:>2d}: " + " ".join(f"{v:>5d}" for v in row))
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps({"accuracy": acc, "confusion": conf.tolist()}, indent=2) + "\n")
    return 0


def bench_run(cfg: RunConfig, model: Model, train_ds, lambda_min: Optional[float], steps: int) -> dict:
    model = model.copy()
    trainer = Trainer(model, cfg.train_config(model.precision, lambda_min))
    order = epoch_order(len(train_ds), cfg.train.seed, 1)
    macs = 0
    loss = 0.0
    t0 = time.perf_counter()
    for n, (x, y) in enumerate(stream(train_ds, order)):
        if n == steps:
            break
        s = trainer.train_step(x, y)
        macs += s.macs_bwd
        loss = s.loss
    return {"macs_bwd": macs, "wall_s": time.perf_counter() - t0, "final_loss": loss}


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    train_ds, _ = load_data(cfg)
    model, _ = make_model(cfg, train_ds.sample_shape, train_ds.class_count)
    steps = min(cfg.bench.steps, len(train_ds))
    dense = bench_run(cfg, model, train_ds, None, steps)
    results = []
    print(f"{'lambda_min':>10} {'mac_ratio':>10} {'wall_ratio':>10} {'final_loss':>10}")
    for lmin in cfg.bench.lambda_min:
        r = bench_run(cfg, model, train_ds, float(lmin), steps)
        row = {
            "lambda_min": float(lmin),
            "lambda_max": cfg.train.lambda_max,
            "macs_bwd": r["macs_bwd"],
            "mac_ratio": dense["macs_bwd"] / r["macs_bwd"] if r["macs_bwd"] else float("inf"),
            "wall_ratio": dense["wall_s"] / r["wall_s"] if r["wall_s"] else float("inf"),
            "final_loss": r["final_loss"],
        }
        results.append(row)
        print(f"{row['lambda_min']:>10.2f} {row['mac_ratio']:>10.3f} {row['wall_ratio']:>10.3f} {row['final_loss']:>10.4f}")
    report = {"precision": model.precision, "steps": steps, "dense_macs_bwd": dense["macs_bwd"], "results": results}
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0


def cmd_memory(cfg: RunConfig, out: Path, preset: Optional[str]) -> int:
    ram = cfg.memory.ram_kb * 1024 if cfg.memory.ram_kb is not None else None
    flash = cfg.memory.flash_kb * 1024 if cfg.memory.flash_kb is not None else None
    if preset is not None:
        ram, flash = PRESETS[preset]
    m = cfg.model
    reports = {}
    over = False
    for precision in PRECISIONS:
        model = build_small_cnn(precision, (1, 28, 28), cfg.data.class_count, m.conv1, m.conv2, m.hidden, m.kernel, m.init_seed)
        if m.reset_last:
            model = reset_layers(model, m.reset_last)
        report = plan_memory(model, cfg.train_config(precision))
        reports[precision] = report.as_dict()
        print(f"{precision}:\n" + format_report(report, ram, flash))
        over |= (ram is not None and report.ram_bytes > ram) or (flash is not None and report.flash_bytes > flash)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"preset": preset, "ram_limit": ram, "flash_limit": flash, "reports": reports}
    (out / "memory.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinyfqt", description="8-bit fully quantized training for small CNNs")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("train", "train a model and write metrics plus a checkpoint"),
        ("eval", "evaluate a checkpoint on the test split"),
        ("bench", "compare sparse and dense backward cost"),
        ("memory", "report RAM/Flash segments per precision mode"),
    ]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override [train] seed")
        sp.add_argument("--out", default="runs/latest", help="output directory")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="device RAM/Flash limits")
        if name == "eval":
            sp.add_argument("--checkpoint", required=True, help="model checkpoint to evaluate")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.train.seed = args.seed
        out = Path(args.out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, out)
        if args.command == "bench":
            return cmd_bench(cfg, out)
        return cmd_memory(cfg, out, args.preset)
    except (ConfigError, CheckpointError, IDXError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
