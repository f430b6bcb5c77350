"""``gesturestream`` command line: data preparation, training, streaming and evaluation."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .bench import bench_model, format_table, run_bench
from .data import DatasetManifest, SyntheticConfig, import_shrec21, load_canonical, write_synthetic
from .exceptions import ConfigError, GestureStreamError, NumericError, ParseError
from .model import GestureModel, ModelConfig
from .online import StreamLabeler, ThresholdTable, extract_events, make_engine
from .pipeline import evaluate_online, fit_thresholds, holdout_split, training_windows
from .skeleton import NO_GESTURE
from .training import TrainConfig, train

log = logging.getLogger("gesturestream")

# model fields a run config may set; classes and joint count come from the data
_MODEL_KEYS = ("sgcn_channels", "d_model", "num_layers", "heads", "d_ff", "dropout", "partition",
               "add_self_loops", "edge_importance", "normalize_input")


@dataclass
class OnlineConfig:
    window: int = 20
    stride: int = 5
    engine: str = "batch"
    memory: int | None = None
    min_duration: int = 5
    merge_gap: int | None = None
    default_threshold: float = 0.5
    min_overlap: float = 0.5
    iou_threshold: float = 0.25

    def __post_init__(self):
        if self.stride < 1 or self.window < self.stride:
            raise ConfigError(f"need stride >= 1 and window >= stride (window={self.window}, stride={self.stride})")
        if self.engine not in ("batch", "continual"):
            raise ConfigError(f"engine must be 'batch' or 'continual', got {self.engine!r}")
        if self.min_duration < 1 or (self.merge_gap is not None and self.merge_gap < 0):
            raise ConfigError("need min_duration >= 1 and merge_gap >= 0")
        if not 0.0 <= self.default_threshold <= 1.0 or not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError("thresholds must lie in [0, 1]")

    @property
    def gap(self) -> int:
        return self.stride if self.merge_gap is None else self.merge_gap


@dataclass
class RunConfig:
    """Effective settings of one command: config file merged with flag overrides."""

    seed: int = 0
    val_fraction: float = 0.2
    model: dict = field(default_factory=lambda: {k: v for k, v in ModelConfig().to_dict().items()
                                                 if k in _MODEL_KEYS})
    train: TrainConfig = field(default_factory=TrainConfig)
    online: OnlineConfig = field(default_factory=OnlineConfig)
    synthetic: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "val_fraction": self.val_fraction, "model": dict(self.model),
                "train": self.train.to_dict(), "online": asdict(self.online),
                "synthetic": dict(self.synthetic)}

    def model_config(self, classes, num_joints: int) -> ModelConfig:
        return ModelConfig(classes=tuple(classes), num_joints=num_joints, window=self.online.window,
                           **self.model)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = cls()
        model = dict(base.model)
        bad = set(doc.get("model", {})) - set(_MODEL_KEYS)
        if bad:
            raise ConfigError(f"unknown model config keys: {sorted(bad)}")
        model.update(doc.get("model", {}))
        online = asdict(base.online)
        bad = set(doc.get("online", {})) - set(online)
        if bad:
            raise ConfigError(f"unknown online config keys: {sorted(bad)}")
        online.update(doc.get("online", {}))
        cfg = cls(seed=int(doc.get("seed", 0)), val_fraction=float(doc.get("val_fraction", 0.2)),
                  model=model, train=TrainConfig.from_dict({**base.train.to_dict(), **doc.get("train", {})}),
                  online=OnlineConfig(**online), synthetic=dict(doc.get("synthetic", {})))
        # validate the model block with a placeholder vocabulary
        cfg.model_config(("A", NO_GESTURE), 20)
        SyntheticConfig(**cfg.synthetic)
        if not 0.0 <= cfg.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return cfg


def resolve_config(args) -> RunConfig:
    doc: dict = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", f"{args.config}:{exc.lineno}") from None
        if not isinstance(doc, dict):
            raise ParseError("config must be a JSON object", args.config)
    doc = copy.deepcopy(doc)
    # flags win over the file
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
        doc.setdefault("train", {})["seed"] = args.seed
        doc.setdefault("synthetic", {})["seed"] = args.seed
    for flag in ("window", "stride", "engine", "memory"):
        value = getattr(args, flag, None)
        if value is not None:
            doc.setdefault("online", {})[flag] = value
    if getattr(args, "max_epochs", None) is not None:
        doc.setdefault("train", {})["max_epochs"] = args.max_epochs
    return RunConfig.from_dict(doc)


def _echo(cfg: RunConfig) -> None:
    print("effective config: " + json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _train_val_streams(manifest: DatasetManifest, cfg: RunConfig):
    train_streams = manifest.load_split("train")
    val_streams = manifest.load_split("val")
    if not val_streams:
        train_streams, val_streams = holdout_split(train_streams, cfg.val_fraction)
    return train_streams, val_streams


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} file not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    doc = dict(cfg.synthetic)
    for name in ("num_train", "num_test", "num_val"):
        if getattr(args, name) is not None:
            doc[name] = getattr(args, name)
    doc.setdefault("seed", cfg.seed)
    manifest = write_synthetic(SyntheticConfig(**doc), args.out)
    print(json.dumps({"out": str(args.out), "sequences": len(manifest.records),
                      "classes": manifest.classes}))
    return 0


def cmd_import_shrec21(args, cfg: RunConfig) -> int:
    manifest = import_shrec21(args.directory, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train", "test")}
    print(json.dumps({"out": str(args.out), "sequences": len(manifest.records), **counts,
                      "classes": len(manifest.classes)}))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = DatasetManifest.load(_require(args.data, "data"))
    train_streams, val_streams = _train_val_streams(manifest, cfg)
    on = cfg.online
    x, y = training_windows(train_streams, manifest.classes, on.window, on.stride, on.min_overlap)
    xv, yv = training_windows(val_streams, manifest.classes, on.window, on.stride, on.min_overlap,
                              include_segments=False)
    model = GestureModel.create(cfg.model_config(manifest.classes, manifest.joints), seed=cfg.seed)
    log.info("training on %d windows, validating on %d", len(x), len(xv))
    model, history = train(model, x, y, xv, yv, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.npz")
    _write_json(out / "history.json", history.to_dict())
    _write_json(out / "config.json", cfg.to_dict())
    print(json.dumps({"checkpoint": str(out / "model.npz"), "epochs": len(history),
                      "best_epoch": history.best_epoch,
                      "best_val_accuracy": max(history.val_accuracy)}))
    return 0


def cmd_learn_thresholds(args, cfg: RunConfig) -> int:
    manifest = DatasetManifest.load(_require(args.data, "data"))
    model = GestureModel.load(_require(args.checkpoint, "checkpoint"))
    _, val_streams = _train_val_streams(manifest, cfg)
    on = cfg.online
    table = fit_thresholds(model, val_streams, on.window, on.stride, on.min_overlap, on.default_threshold)
    table.save(args.out)
    print(json.dumps(table.to_dict(), sort_keys=True))
    return 0


def cmd_eval_offline(args, cfg: RunConfig) -> int:
    manifest = DatasetManifest.load(_require(args.data, "data"))
    model = GestureModel.load(_require(args.checkpoint, "checkpoint"))
    on = cfg.online
    x, y = training_windows(manifest.load_split(args.split), list(model.config.classes), on.window,
                            on.stride, on.min_overlap)
    pred = model.predict(x)
    classes = list(model.config.classes)
    per_class = {c: float((pred[y == i] == i).mean()) for i, c in enumerate(classes) if (y == i).any()}
    report = {"split": args.split, "windows": int(len(y)), "accuracy": float((pred == y).mean()),
              "per_class_accuracy": per_class}
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _read_frames(source, num_joints: int):
    """Yield frames from a canonical JSON file or from line-delimited text (stdin when ``-``)."""
    if source not in (None, "-") and str(source).endswith(".json"):
        yield from load_canonical(source, num_joints).frames
        return
    handle = sys.stdin if source in (None, "-") else open(source)
    try:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                values = np.array([float(t) for t in line.split()])
            except ValueError:
                raise ParseError("non-numeric value", f"line {lineno}") from None
            if values.size != num_joints * 3:
                raise ParseError(f"expected {num_joints * 3} values, found {values.size}", f"line {lineno}")
            yield values.reshape(num_joints, 3)
    finally:
        if handle is not sys.stdin:
            handle.close()


def cmd_stream(args, cfg: RunConfig) -> int:
    model = GestureModel.load(_require(args.checkpoint, "checkpoint"))
    table = ThresholdTable.load(_require(args.thresholds, "thresholds")) if args.thresholds else \
        ThresholdTable(default_threshold=cfg.online.default_threshold)
    on = cfg.online
    labeler = StreamLabeler(make_engine(model, on.engine, on.window, on.memory), table, on.window, on.stride)
    labels: list[str] = []
    out = sys.stdout

    def emit(pairs):
        for idx, label in pairs:
            labels.append(label)
            out.write(f"{idx} {label}\n")
        out.flush()

    frame_index = -1
    try:
        for frame_index, frame in enumerate(_read_frames(args.input, model.config.num_joints)):
            emit(labeler.push(frame))
    except NumericError as exc:
        raise NumericError(f"{exc} (stream, frame {frame_index})") from None
    emit(labeler.finish())
    events = [ev.to_dict() for ev in extract_events(labels, on.min_duration, on.gap)]
    if args.out:
        _write_json(args.out, {"events": events, "frames": len(labels)})
    else:
        print(json.dumps({"events": events}), file=sys.stderr)
    return 0


def cmd_eval_online(args, cfg: RunConfig) -> int:
    manifest = DatasetManifest.load(_require(args.data, "data"))
    model = GestureModel.load(_require(args.checkpoint, "checkpoint"))
    table = ThresholdTable.load(_require(args.thresholds, "thresholds")) if args.thresholds else \
        ThresholdTable(default_threshold=cfg.online.default_threshold)
    on = cfg.online
    report, _, _ = evaluate_online(model, table, manifest.load_split(args.split), on.window, on.stride,
                                   on.engine, on.memory, on.min_duration, on.merge_gap, on.iou_threshold)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.to_json())
    print(report.to_table())
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    windows = args.windows or ([cfg.online.window] if args.window is not None else [16, 64, 128])
    model = bench_model(num_layers=cfg.model["num_layers"], d_model=cfg.model["d_model"],
                        heads=cfg.model["heads"], seed=cfg.seed)
    results = run_bench(windows, args.steps, cfg.seed, model)
    doc = {"results": [r.to_dict() for r in results]}
    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    print(format_table(results))
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "import-shrec21": cmd_import_shrec21,
    "train": cmd_train,
    "learn-thresholds": cmd_learn_thresholds,
    "eval-offline": cmd_eval_offline,
    "stream": cmd_stream,
    "eval-online": cmd_eval_online,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    online = argparse.ArgumentParser(add_help=False)
    online.add_argument("--window", type=int)
    online.add_argument("--stride", type=int)
    online.add_argument("--engine", choices=("batch", "continual"))
    online.add_argument("--memory", type=int, help="continual memory length n (default: window)")

    parser = argparse.ArgumentParser(prog="gesturestream", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic annotated dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-test", type=int)
    p.add_argument("--num-val", type=int)

    p = sub.add_parser("import-shrec21", parents=[common], help="convert a raw SHREC'21 release")
    p.add_argument("directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common, online], help="train a window classifier")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-epochs", type=int)

    p = sub.add_parser("learn-thresholds", parents=[common, online], help="learn per-class thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-offline", parents=[common, online], help="window accuracy on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")

    p = sub.add_parser("stream", parents=[common, online], help="label a frame stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thresholds")
    p.add_argument("--input", default="-", help="canonical .json file, text frames, or - for stdin")
    p.add_argument("--out", help="write detected events here (default: stderr)")

    p = sub.add_parser("eval-online", parents=[common, online], help="online metrics on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thresholds")
    p.add_argument("--split", default="test")
    p.add_argument("--out")

    p = sub.add_parser("bench", parents=[common, online], help="continual vs batch per-step cost")
    p.add_argument("--windows", type=int, nargs="+")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _echo(cfg)
        return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"gesturestream {args.command}: numeric guard: {exc}", file=sys.stderr)
        return 3
    except (GestureStreamError, OSError) as exc:
        print(f"gesturestream {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
