"""Command-line front end.

Every subcommand reads one resolved configuration: built-in defaults, then
an optional INI file (``--config``), then command-line flags. Each config key
``section.key`` has a mirror flag ``--key`` (underscores become dashes).
``--help-config`` prints the schema. A ``run.json`` written by an earlier
command is also accepted as ``--config``; rerunning from it reproduces the
primary outputs byte for byte.

All randomness derives from ``training.seed`` through
:func:`mealsense.seeding.derive_seed`.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .classifier import SwinConfig, default_class_names, train_classifier
from .data import WindowPair, load_windows
from .detector import (
    EatingDetector,
    UNetConfig,
    calibrate_from_errors,
    detection_accuracy,
    grid_csv,
    hyperparam_search,
    train_reconstructor,
)
from .errors import ConfigError, IoError, MealSenseError
from .nn import Checkpoint
from .nn.checkpoint import atomic_write
from .nn.gradcheck import run_suite
from .pipeline import (
    NON_EATING,
    Pipeline,
    ablate_single_stage,
    ablation_csv,
    dump_json,
    evaluate,
    export_report,
    measure_latency,
)
from .seeding import derive_seed
from .synth import generate_dataset
from .workflow import SCHEMES, eating, make_split

log = logging.getLogger("mealsense")

GRAD_TOLERANCE = 1e-4


# --- configuration schema ------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(",", " ").split()]


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text: str) -> str | None:
    return None if str(text).strip() == "" else str(text)


def _opt_int(text: str) -> int | None:
    return None if str(text).strip().lower() in ("", "none") else int(text)


@dataclass(frozen=True)
class Option:
    section: str
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


SCHEMA: tuple[Option, ...] = (
    Option("paths", "manifest", _opt_str, None, "dataset manifest.json"),
    Option("paths", "out_dir", str, "out", "directory receiving every output of the command"),
    Option("paths", "detector", _opt_str, None, "detector checkpoint"),
    Option("paths", "classifier", _opt_str, None, "classifier checkpoint"),
    Option("split", "scheme", str, "subject", f"one of {', '.join(SCHEMES)}"),
    Option("split", "test_subjects", int, 1, "subject scheme: held-out test subjects (last by id)"),
    Option("split", "val_subjects", int, 1, "subject scheme: validation/calibration subjects"),
    Option("split", "test_fraction", float, 1 / 9, "middle scheme: middle fraction of each recording"),
    Option("synth", "classes", int, 5, "food classes in the synthetic dataset"),
    Option("synth", "subjects", int, 4, "synthetic subjects"),
    Option("synth", "minutes", float, 1.0, "eating minutes per class per subject"),
    Option("detector", "mask_ratio", float, 0.15, "fraction of timesteps masked"),
    Option("detector", "segment_len", int, 8, "mask segment length in timesteps"),
    Option("detector", "base_channels", int, 32, "U-Net channels at the first level"),
    Option("detector", "depth", int, 3, "U-Net encoder levels"),
    Option("detector", "full_signal", _bool, False, "reconstruction loss over all timesteps instead of masked ones"),
    Option("detector", "mask_draws", int, 1, "masks averaged per window at inference"),
    Option("detector", "percentile", float, 80.0, "threshold percentile of eating calibration errors"),
    Option("detector", "select_percentiles", _floats, [], "calibrate: pick the best of these on validation"),
    Option("detector", "ratios", _floats, [0.1, 0.15, 0.2], "search: mask ratios"),
    Option("detector", "percentiles", _floats, [70.0, 80.0, 90.0], "search: threshold percentiles"),
    Option("detector", "top_k", int, 20, "search: ranked cells kept"),
    Option("classifier", "patch_size", int, 4, "timesteps per patch"),
    Option("classifier", "embed_dim", int, 48, "token dimension of the first stage"),
    Option("classifier", "stage_depths", _ints, [2, 2], "blocks per stage"),
    Option("classifier", "stage_heads", _ints, [3, 6], "attention heads per stage"),
    Option("classifier", "window_size", int, 8, "tokens per attention window"),
    Option("classifier", "mlp_ratio", int, 4, "MLP hidden width / token dimension"),
    Option("training", "epochs", int, 50, "passes over the training windows"),
    Option("training", "batch", int, 16, "minibatch size"),
    Option("training", "lr", float, 1e-4, "Adam learning rate"),
    Option("training", "seed", _opt_int, None, "master seed; required by synth and training commands"),
    Option("latency", "trials", int, 100, "timed inferences"),
    Option("latency", "warmup", int, 10, "untimed warmup inferences"),
    Option("gradcheck", "seeds", _ints, [0, 1, 2], "seeds per op"),
)
BY_KEY = {o.key: o for o in SCHEMA}


def config_help() -> str:
    lines = ["# INI file; every key has a mirror flag (--key-with-dashes). Lists are comma separated."]
    section = None
    for o in SCHEMA:
        if o.section != section:
            section = o.section
            lines.append(f"\n[{section}]")
        default = ", ".join(str(x) for x in o.default) if isinstance(o.default, list) else o.default
        lines.append(f"# {o.help}")
        lines.append(f"{o.key} = {'' if default is None else default}")
    return "\n".join(lines) + "\n"


def _read_config_file(path: Path) -> dict[str, Any]:
    if not path.is_file():
        raise IoError(f"config file not found: {path}")
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        flat = {}
        for section in doc.get("config", {}).values():
            flat.update(section)
        unknown = sorted(set(flat) - set(BY_KEY))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return flat
    parser = configparser.ConfigParser()
    parser.read(path)
    values: dict[str, Any] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            opt = BY_KEY.get(key)
            if opt is None or opt.section != section:
                raise ConfigError(f"unknown config key [{section}] {key}")
            try:
                values[key] = opt.parse(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for [{section}] {key}: {e}") from None
    return values


def resolve_config(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    flat = {o.key: o.default for o in SCHEMA}
    if args.config:
        flat.update(_read_config_file(Path(args.config)))
    for o in SCHEMA:
        if hasattr(args, o.key):
            flat[o.key] = getattr(args, o.key)
    nested: dict[str, dict[str, Any]] = {}
    for o in SCHEMA:
        nested.setdefault(o.section, {})[o.key] = flat[o.key]
    return nested


class Run:
    """Resolved configuration plus the bookkeeping every command shares."""

    def __init__(self, command: str, config: dict[str, dict[str, Any]]):
        self.command = command
        self.config = config
        self.flat = {k: v for section in config.values() for k, v in section.items()}
        self.out = Path(self.flat["out_dir"])
        self.outputs: list[Path] = []

    def __getitem__(self, key: str) -> Any:
        return self.flat[key]

    def require_seed(self) -> int:
        if self["seed"] is None:
            raise ConfigError(f"`{self.command}` needs training.seed (--seed)")
        return int(self["seed"])

    def path(self, key: str) -> Path:
        value = self[key]
        if value is None:
            raise ConfigError(f"`{self.command}` needs paths.{key} (--{key})")
        p = Path(value)
        if not p.exists():
            raise IoError(f"paths.{key} does not exist: {p}")
        return p

    def write(self, name: str, data: bytes | str) -> Path:
        p = self.out / name
        atomic_write(p, data.encode() if isinstance(data, str) else data)
        self.outputs.append(p)
        return p

    def save_checkpoint(self, name: str, ckpt: Checkpoint) -> Path:
        return self.write(name, ckpt.to_bytes())

    def finish(self) -> Path:
        hashes = {}
        for p in sorted(set(self.outputs)):
            hashes[p.relative_to(self.out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        doc = {
            "command": self.command,
            "version": __version__,
            "seed": self["seed"],
            "config": self.config,
            "artifacts": hashes,
        }
        p = self.out / "run.json"
        atomic_write(p, dump_json(doc).encode())
        return p


# --- shared helpers ---------------------------------------------------------------------


def _windows(run: Run) -> list[WindowPair]:
    return load_windows(run.path("manifest"))


def _split(run: Run, windows: Sequence[WindowPair]):
    return make_split(windows, run["scheme"], run["test_subjects"], run["val_subjects"], run["test_fraction"])


def _unet_config(run: Run) -> UNetConfig:
    return UNetConfig(
        base_channels=run["base_channels"],
        depth=run["depth"],
        mask_ratio=run["mask_ratio"],
        mask_segment_len=run["segment_len"],
        full_signal=run["full_signal"],
    )


def _swin_config(run: Run, num_classes: int) -> SwinConfig:
    try:
        return SwinConfig(
            patch_size=run["patch_size"],
            embed_dim=run["embed_dim"],
            stage_depths=tuple(run["stage_depths"]),
            stage_heads=tuple(run["stage_heads"]),
            window_size=run["window_size"],
            mlp_ratio=run["mlp_ratio"],
            num_classes=num_classes,
        )
    except ValueError as e:
        raise ConfigError(f"classifier config: {e}") from None


def _load_detector(run: Run) -> EatingDetector:
    return EatingDetector.from_checkpoint(Checkpoint.load(run.path("detector")))


def _pipeline(run: Run) -> Pipeline:
    return Pipeline.load(run.path("detector"), run.path("classifier"))


def _loss_csv(curve: Sequence[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, v in enumerate(curve, 1):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


# --- commands --------------------------------------------------------------------------


def cmd_synth(run: Run) -> None:
    seed = run.require_seed()
    cert = generate_dataset(run.out, run["classes"], run["subjects"], run["minutes"], seed)
    run.outputs += sorted(run.out.joinpath("sessions").glob("*.csv"))
    run.outputs += [run.out / "manifest.json", run.out / "certificate.json"]
    print(
        f"wrote {cert['windows']} windows ({cert['eating_windows']} eating) to {run.out / 'manifest.json'}; "
        f"spectral-oracle accuracy {cert['oracle_accuracy']:.4f}"
    )


def cmd_train_detector(run: Run) -> None:
    seed = run.require_seed()
    split = _split(run, _windows(run))
    det = train_reconstructor(
        eating(split.train), _unet_config(run), run["epochs"], run["batch"], run["lr"], derive_seed(seed, "train-detector")
    )
    det.mask_draws = run["mask_draws"]
    run.save_checkpoint("detector.ckpt", det.to_checkpoint())
    run.write("detector_loss.csv", _loss_csv(det.loss_curve))
    print(f"detector trained on {len(eating(split.train))} eating windows; final loss {det.loss_curve[-1]:.5f}")


def cmd_calibrate(run: Run) -> None:
    det = _load_detector(run)
    det.mask_draws = run["mask_draws"]
    val = _split(run, _windows(run)).val
    cal_errors = det.errors(eating(val))
    candidates = run["select_percentiles"] or [run["percentile"]]
    rows = []
    if len(candidates) > 1:
        val_errors = det.errors(val)
        for p in candidates:
            det.calibration = calibrate_from_errors(cal_errors, p)
            rows.append((p, det.calibration.tau, detection_accuracy(det.decide(val_errors), val)))
        # best validation accuracy; ties go to the lower percentile
        best = min(rows, key=lambda r: (-r[2], r[0]))[0]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["percentile", "tau", "accuracy"])
        w.writerows([repr(float(p)), repr(float(t)), repr(float(a))] for p, t, a in rows)
        run.write("calibration.csv", buf.getvalue())
    else:
        best = candidates[0]
    det.calibration = calibrate_from_errors(cal_errors, best)
    run.save_checkpoint("detector.calibrated.ckpt", det.to_checkpoint())
    print(f"percentile {best:g}: tau {det.calibration.tau:.6f} from {det.calibration.calibration_size} eating windows")


def cmd_search(run: Run) -> None:
    seed = run.require_seed()
    split = _split(run, _windows(run))
    top, grid, models = hyperparam_search(
        run["ratios"], run["percentiles"], split.train, split.val, run["top_k"], _unet_config(run),
        run["epochs"], run["batch"], run["lr"], derive_seed(seed, "search"),
    )
    run.write("gridsearch.csv", grid_csv(grid))
    run.write("search_top.json", dump_json([asdict(c) for c in top]))
    for ratio, det in models.items():
        best = min((c for c in grid if c.ratio == ratio), key=lambda c: (-c.accuracy, c.percentile))
        det.mask_draws = run["mask_draws"]
        det.calibration = calibrate_from_errors(det.errors(eating(split.val)), best.percentile)
        run.save_checkpoint(f"detector_r{ratio:g}.ckpt", det.to_checkpoint())
    c = top[0]
    print(f"best: ratio {c.ratio:g}, percentile {c.percentile:g}, validation accuracy {c.accuracy:.4f}")


def cmd_train_classifier(run: Run) -> None:
    seed = run.require_seed()
    windows = _windows(run)
    split = _split(run, windows)
    labels = {w.food_label for w in windows if w.food_label is not None}
    if not labels:
        raise ConfigError("manifest holds no eating windows")
    n = max(labels) + 1
    train = eating(split.train + split.val)
    clf = train_classifier(
        train, _swin_config(run, n), run["epochs"], run["batch"], run["lr"],
        derive_seed(seed, "train-classifier"), default_class_names(n),
    )
    run.save_checkpoint("classifier.ckpt", clf.to_checkpoint())
    run.write("classifier_loss.csv", _loss_csv(clf.loss_curve))
    print(f"classifier trained on {len(train)} eating windows, {n} classes; final loss {clf.loss_curve[-1]:.5f}")


def cmd_eval(run: Run) -> None:
    pipe = _pipeline(run)
    test = _split(run, _windows(run)).test
    report = evaluate(pipe, test)
    run.outputs += export_report(report, run.out)
    print(f"two-stage accuracy {report.overall_accuracy:.4f}; stage-1 accuracy {report.stage1_accuracy:.4f} "
          f"on {report.n_windows} windows")


def cmd_ablate(run: Run) -> None:
    from .classifier import FoodClassifier

    clf = FoodClassifier.from_checkpoint(Checkpoint.load(run.path("classifier")))
    test = _split(run, _windows(run)).test
    rows = ablate_single_stage(clf, test)
    run.write("ablation.csv", ablation_csv(rows))
    best = max(rows, key=lambda r: r.accuracy)
    print(f"best single-stage accuracy {best.accuracy:.4f} at CST {best.threshold:g}")


def cmd_infer(run: Run) -> None:
    pipe = _pipeline(run)
    windows = _windows(run)
    labels, errors = pipe.predict(windows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "session", "start_t", "error", "label", "name"])
    for win, lab, err in zip(windows, labels, errors):
        name = "Non-eating" if lab == NON_EATING else pipe.class_names[lab]
        w.writerow([win.subject_id, win.session, f"{win.start_t:.6f}", repr(float(err)), int(lab), name])
    run.write("predictions.csv", buf.getvalue())
    print(f"{len(windows)} windows, {int((labels != NON_EATING).sum())} labeled eating")


def cmd_latency(run: Run) -> None:
    pipe = _pipeline(run)
    test = _split(run, _windows(run)).test
    if not test:
        raise ConfigError("no test window to time")
    stats = measure_latency(pipe, test[0], run["trials"], run["warmup"])
    run.write("latency.json", dump_json({"latency_ms": stats, "threads": 1}))
    print(f"latency {stats['mean']:.3f} +- {stats['std']:.3f} ms (p95 {stats['p95']:.3f}) over {stats['n_trials']} trials")


def cmd_grad_check(run: Run) -> int:
    results = run_suite(seeds=run["seeds"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["op", "seed", "shape", "max_rel_error", "pass"])
    for r in results:
        w.writerow([r.op, r.seed, r.shape, repr(r.max_rel_error), int(r.max_rel_error < GRAD_TOLERANCE)])
    run.write("gradcheck.csv", buf.getvalue())
    failed = sorted({r.op for r in results if r.max_rel_error >= GRAD_TOLERANCE})
    worst = max(results, key=lambda r: r.max_rel_error)
    print(f"{len(results)} checks; worst {worst.op} {worst.max_rel_error:.2e}; failed ops: {failed or 'none'}")
    return 1 if failed else 0


COMMANDS: dict[str, tuple[Callable[[Run], int | None], str]] = {
    "synth": (cmd_synth, "generate the synthetic fixture"),
    "train-detector": (cmd_train_detector, "train the masked U-Net on eating windows"),
    "calibrate": (cmd_calibrate, "set the detector threshold on validation eating windows"),
    "search": (cmd_search, "mask-ratio x percentile grid search"),
    "train-classifier": (cmd_train_classifier, "train the food classifier on eating windows"),
    "eval": (cmd_eval, "two-stage evaluation on the test split"),
    "ablate": (cmd_ablate, "single-stage classifier with confidence thresholds"),
    "infer": (cmd_infer, "label every window of a manifest"),
    "latency": (cmd_latency, "time single-window two-stage inference"),
    "grad-check": (cmd_grad_check, "finite-difference check of every differentiable op"),
}


# --- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file, or a run.json from an earlier run")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    for o in SCHEMA:
        kind = {_floats: "list", _ints: "list", _bool: "bool"}.get(o.parse, "")
        common.add_argument(
            o.flag, dest=o.key, type=o.parse, default=argparse.SUPPRESS,
            metavar=kind.upper() or None, help=f"[{o.section}] {o.help}",
        )
    parser = argparse.ArgumentParser(prog="mealsense", description="Two-stage IMU food-intake recognition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--help-config", action="store_true", help="print the config file schema and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def _fail(err: BaseException, code: int) -> int:
    print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.help_config:
        sys.stdout.write(config_help())
        return 0
    if not args.command:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        run = Run(args.command, resolve_config(args))
        code = COMMANDS[args.command][0](run) or 0
        run.finish()
        return code
    except ConfigError as e:
        return _fail(e, 2)
    except IoError as e:
        return _fail(e, 3)
    except MealSenseError as e:
        return _fail(e, 1)
    except OSError as e:
        return _fail(IoError(str(e)), 3)


if __name__ == "__main__":
    sys.exit(main())
