"""Command-line entry point: ``axial3d {synth,train,eval,bench,verify}``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data
from . import evalbench as eb
from . import network as net
from .attention import set_kernel_perturbation
from .experiment import fold_datasets
from .training import Schedule, predict, train

log = logging.getLogger("axial3d")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"
    epochs: list[int] = field(default_factory=lambda: [20, 40])
    lrs: list[float] = field(default_factory=lambda: [1e-3, 1e-4])
    batch_size: int = 64
    fold: str = "0"
    d_sizes: list[int] = field(default_factory=lambda: list(net.DEFAULT_D_SIZES))

    def schedule(self) -> Schedule:
        if len(self.epochs) != len(self.lrs):
            raise UsageError("epochs and lrs must list the same number of phases")
        return Schedule(list(zip(self.epochs, self.lrs)), self.batch_size)

    def folds(self) -> list[int]:
        if self.fold == "all":
            return list(range(10))
        try:
            k = int(self.fold)
        except ValueError:
            raise UsageError(f"fold must be an index or 'all', got {self.fold!r}") from None
        if not 0 <= k < 10:
            raise UsageError(f"fold {k} outside 0..9")
        return [k]


_LIST_INT = ("epochs", "d_sizes")
_LIST_FLOAT = ("lrs",)


def parse_config(text: str) -> RunConfig:
    values = {}
    known = {f.name for f in fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        try:
            if key in _LIST_INT:
                values[key] = [int(v) for v in value.split(",")]
            elif key in _LIST_FLOAT:
                values[key] = [float(v) for v in value.split(",")]
            elif key in ("seed", "batch_size"):
                values[key] = int(value)
            else:
                values[key] = value
        except ValueError:
            raise UsageError(f"config line {lineno}: bad value for {key}: {value!r}") from None
    cfg = RunConfig(**values)
    if len(cfg.d_sizes) != 6:
        raise UsageError("d_sizes needs six entries")
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data on disk
# ---------------------------------------------------------------------------

MANIFEST = "manifest.tsv"


def load_split(data_dir: Path):
    """Samples from a manifest as ``[(sample, uid, fold)]``."""
    entries = data.read_manifest(data_dir / MANIFEST)
    seen: dict[int, int] = {}
    out = []
    for path, fold in entries:
        s = data.read_volume(path)
        i = seen.get(s.nodule_id, 0)
        seen[s.nodule_id] = i + 1
        out.append((s, data.sample_uid(s, i), fold))
    return out


def _datasets(items, held_out: int):
    folds = {s.nodule_id: f for s, _, f in items}
    return fold_datasets([(s, u) for s, u, _ in items], folds, held_out)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = data.synth_generate(args.n_benign, args.n_malignant, args.seed)
    entries = []
    if samples:
        folds = data.kfold_split(samples, 10, args.seed)
        for s in samples:
            for i, c in enumerate(data.augment_rotations(s)):
                name = f"nodule{s.nodule_id:05d}_rot{i}.axv"
                data.write_volume(c, out / name)
                entries.append((name, folds[s.nodule_id]))
    data.write_manifest(entries, out / MANIFEST)
    print(f"wrote {len(entries)} volumes and {out / MANIFEST}")
    return 0


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config file {cfg_path} not found")
    cfg = parse_config(cfg_path.read_text())
    if args.fold is not None:
        cfg.fold = args.fold
    data_dir = Path(cfg.data_dir)
    if not (data_dir / MANIFEST).is_file():
        raise UsageError(f"{data_dir / MANIFEST} not found")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = cfg.schedule()
    folds = cfg.folds()
    items = load_split(data_dir)
    for k in folds:
        run_dir = out_dir / f"fold{k}" if len(folds) > 1 else out_dir
        run_dir.mkdir(parents=True, exist_ok=True)
        trainset, testset, (mean, std) = _datasets(items, k)
        model = net.build_model(cfg.d_sizes, cfg.seed)
        extra = {"data.mean": np.array(mean), "data.std": np.array(std)}
        log_path = run_dir / "train.log"
        with open(log_path, "w") as fh:
            def emit(line, fh=fh):
                fh.write(line + "\n")
                fh.flush()
                print(line)
            train(model, trainset, schedule, cfg.seed, val=testset, ckpt_dir=run_dir,
                  extra_tensors=extra, on_epoch=emit)
        (run_dir / "config.txt").write_text(serialize_config(cfg))
        print(f"fold {k}: checkpoint {run_dir / 'final.axck'}")
    return 0


def cmd_eval(args) -> int:
    tensors = net.load_checkpoint(args.ckpt)
    model = net.model_from_tensors(tensors)
    if "data.mean" not in tensors or "data.std" not in tensors:
        raise UsageError(f"{args.ckpt}: checkpoint has no data.mean/data.std scaler entries")
    mean, std = float(tensors["data.mean"]), float(tensors["data.std"])
    items = [(s, f) for s, _, f in load_split(Path(args.data)) if f == args.fold]
    if not items:
        raise UsageError(f"fold {args.fold} has no samples in {args.data}")
    x = np.stack([(s.volume.astype(np.float64) - mean) / std for s, _ in items])[:, None]
    y = np.array([s.label for s, _ in items], dtype=np.float64)
    print(eb.evaluate(predict(model, x), y).line())
    return 0


def parse_shapes(text: str) -> list[tuple[int, int, int]]:
    shapes = []
    for token in (t.strip() for t in text.split(",")):
        if not token:
            continue
        parts = token.lower().split("x")
        try:
            dims = tuple(int(p) for p in parts)
        except ValueError:
            dims = ()
        if len(dims) != 3 or min(dims) < 1:
            raise UsageError(f"bad shape token {token!r}, expected ZxWxH")
        shapes.append(dims)
    return shapes


def cmd_bench(args) -> int:
    for row in eb.bench(parse_shapes(args.shapes), d=args.d):
        print(row)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    if args.inject_kernel_error:
        set_kernel_perturbation(args.inject_kernel_error)
    try:
        ok = run_checks()
    finally:
        set_kernel_perturbation(0.0)
    print("verify: all checks passed" if ok else "verify: FAILED")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="axial3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic AXV1 volumes and a fold manifest")
    s.add_argument("--n-benign", type=int, required=True)
    s.add_argument("--n-malignant", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on all folds but the held-out one")
    s.add_argument("--config", required=True)
    s.add_argument("--fold", default=None, help="fold index or 'all' (overrides config)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics of a checkpoint on one fold")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--fold", type=int, required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="nominal and counted attention costs")
    s.add_argument("--shapes", required=True, help="comma-separated ZxWxH list")
    s.add_argument("--d", type=int, default=8, help="embedding size for counted runs")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("verify", help="run the self-check suite")
    s.add_argument("--inject-kernel-error", type=float, default=0.0, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, data.ConfigError, data.FormatError, net.CheckpointFormatError) as exc:
        print(f"axial3d {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"axial3d {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
