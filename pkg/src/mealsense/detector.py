"""Stage one: eating-state detection by masked reconstruction.

A 1-D U-Net is trained on eating windows only to fill in randomly masked
timesteps. At inference the same masking is applied and the reconstruction
error on the masked timesteps is compared with a threshold calibrated as a
nearest-rank percentile of errors on held-out eating windows: windows the
model reconstructs poorly are declared non-eating.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import GLASSES_ROWS, WATCH_ROWS, WINDOW_LEN, State, WindowPair
from .errors import CheckpointError, ConfigError, EmptyTrainingSet, ShapeMismatch, TooFewSamples
from .nn import BatchNorm1d, Checkpoint, Conv1d, ConvTranspose1d, Module, Tensor, adam_step, concat, no_grad
from .nn import functional as F
from .seeding import derive_seed, numpy_rng

log = logging.getLogger(__name__)

FUSED_CHANNELS = 12


# --- input fusion --------------------------------------------------------------


def fuse_window(w: WindowPair, stats: "InputStats | None" = None) -> np.ndarray:
    """Stack watch and glasses channels into a ``[12, 128]`` array.

    Glasses rows are placed on their own timestamps and linearly interpolated
    onto the watch grid (held constant past the last glasses sample).
    """
    watch_t = np.arange(WATCH_ROWS) * (WINDOW_LEN / WATCH_ROWS)
    glasses_t = np.arange(GLASSES_ROWS) * (WINDOW_LEN / GLASSES_ROWS)
    up = np.stack([np.interp(watch_t, glasses_t, w.glasses_mat[:, c]) for c in range(6)], axis=1)
    x = np.concatenate([w.watch_mat, up], axis=1).T
    if stats is not None:
        x = stats.apply(x)
    return x


def fuse_batch(windows: Sequence[WindowPair], stats: "InputStats | None" = None) -> np.ndarray:
    if not windows:
        return np.zeros((0, FUSED_CHANNELS, WATCH_ROWS), dtype=np.float32)
    x = np.stack([fuse_window(w) for w in windows])
    if stats is not None:
        x = stats.apply(x)
    return x.astype(np.float32)


@dataclass
class InputStats:
    """Per-channel standardization fitted on a training set."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "InputStats":
        # x: [N, C, L]
        mean = x.mean(axis=(0, 2))
        std = x.std(axis=(0, 2))
        return cls(mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None]) / self.std[:, None]


# --- masking --------------------------------------------------------------------


def mask_count(ratio: float, seq_len: int) -> int:
    return int(math.floor(ratio * seq_len + 0.5))


def make_mask(seq_len: int, ratio: float, segment_len: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of exactly ``round(ratio * seq_len)`` timesteps in disjoint segments."""
    target = mask_count(ratio, seq_len)
    if target < 1:
        raise ValueError(f"mask ratio {ratio} masks no timestep of {seq_len}")
    if target > seq_len:
        raise ValueError("mask ratio above 1")
    mask = np.zeros(seq_len, dtype=bool)
    remaining = target
    while remaining > 0:
        seg = min(segment_len, remaining)
        # starts whose segment is entirely unmasked
        free = ~mask
        run = np.convolve(free.astype(np.int64), np.ones(seg, dtype=np.int64), mode="valid")
        starts = np.flatnonzero(run == seg)
        if starts.size == 0:
            # fragmented: take the earliest free timesteps to hit the count exactly
            mask[np.flatnonzero(free)[:remaining]] = True
            break
        s = int(starts[rng.integers(starts.size)])
        mask[s : s + seg] = True
        remaining -= seg
    return mask


def mask_window(x: np.ndarray, ratio: float, segment_len: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero every channel at randomly chosen timesteps of ``x[C, L]``."""
    mask = make_mask(x.shape[-1], ratio, segment_len, np.random.default_rng(seed))
    out = x.copy()
    out[..., mask] = 0.0
    return out, mask


# --- network -------------------------------------------------------------------


@dataclass
class UNetConfig:
    in_channels: int = FUSED_CHANNELS
    base_channels: int = 32
    depth: int = 3
    seq_len: int = WATCH_ROWS
    mask_ratio: float = 0.15
    mask_segment_len: int = 8
    full_signal: bool = False

    def __post_init__(self):
        if self.seq_len % (2**self.depth):
            raise ValueError(f"seq_len {self.seq_len} not divisible by 2**depth")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")


class ConvBlock(Module):
    """(conv3 -> batch norm -> relu) twice."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv1d(c_in, c_out, 3, rng, padding=1)
        self.bn1 = BatchNorm1d(c_out)
        self.conv2 = Conv1d(c_out, c_out, 3, rng, padding=1)
        self.bn2 = BatchNorm1d(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class UNet1d(Module):
    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        ch = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
        self.enc = [ConvBlock(cfg.in_channels if i == 0 else ch[i - 1], ch[i], rng) for i in range(cfg.depth)]
        self.bottleneck = ConvBlock(ch[cfg.depth - 1], ch[cfg.depth], rng)
        self.up = [ConvTranspose1d(ch[i + 1], ch[i], 2, rng, stride=2) for i in range(cfg.depth)]
        self.dec = [ConvBlock(2 * ch[i], ch[i], rng) for i in range(cfg.depth)]
        self.head = Conv1d(ch[0], cfg.in_channels, 1, rng)

    def __call__(self, x: Tensor, trace: list | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[1:] != (self.cfg.in_channels, self.cfg.seq_len):
            raise ShapeMismatch(f"expected [B, {self.cfg.in_channels}, {self.cfg.seq_len}], got {x.shape}")
        skips = []
        h = x
        for block in self.enc:
            h = block(h)
            skips.append(h)
            if trace is not None:
                trace.append(("enc", h.shape[1:]))
            h = F.max_pool1d(h)
        h = self.bottleneck(h)
        if trace is not None:
            trace.append(("bottleneck", h.shape[1:]))
        for i in reversed(range(self.cfg.depth)):
            h = self.dec[i](concat([skips[i], self.up[i](h)], axis=1))
            if trace is not None:
                trace.append(("dec", h.shape[1:]))
        return self.head(h)


def unet_forward(model: UNet1d, x: np.ndarray | Tensor) -> Tensor:
    """Reconstruct a single ``[C, L]`` window or a ``[B, C, L]`` batch."""
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    single = t.ndim == 2
    if single:
        t = t.reshape(1, *t.shape)
    out = model(t)
    return out.reshape(out.shape[1:]) if single else out


# --- calibration ----------------------------------------------------------------


@dataclass
class ThresholdCalibration:
    percentile: float
    tau: float
    calibration_size: int

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")


def nearest_rank(errors: Sequence[float], percentile: float) -> float:
    """``e[ceil(p/100 * n)]`` of the ascending errors (1-indexed)."""
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise TooFewSamples("no errors to rank")
    rank = math.ceil(Fraction(str(percentile)) * e.size / 100)
    return float(e[max(rank, 1) - 1])


def calibrate_from_errors(errors: Sequence[float], percentile: float = 80.0, min_size: int = 10) -> ThresholdCalibration:
    if len(errors) < min_size:
        raise TooFewSamples(f"need at least {min_size} calibration windows, got {len(errors)}")
    return ThresholdCalibration(float(percentile), nearest_rank(errors, percentile), len(errors))


# --- detector -------------------------------------------------------------------


@dataclass
class EatingDetector:
    cfg: UNetConfig
    model: UNet1d
    stats: InputStats
    calibration: ThresholdCalibration | None = None
    mask_seed: int = 0
    mask_draws: int = 1
    loss_curve: list[float] = field(default_factory=list)
    train_info: dict = field(default_factory=dict)

    def window_seeds(self, w: WindowPair) -> list[int]:
        key = f"{w.start_t:.6f}"
        if self.mask_draws == 1:
            return [derive_seed(self.mask_seed, f"mask@{key}")]
        return [derive_seed(self.mask_seed, f"mask@{key}#{j}") for j in range(self.mask_draws)]

    def errors(self, windows: Sequence[WindowPair], seeds: Sequence[Sequence[int]] | None = None, batch: int = 64) -> np.ndarray:
        """Reconstruction error per window (averaged over the window's mask draws)."""
        if seeds is None:
            seeds = [self.window_seeds(w) for w in windows]
        x = fuse_batch(windows, self.stats)
        out = np.zeros(len(windows))
        self.model.eval()
        rows, owners, masks = [], [], []
        for i, ss in enumerate(seeds):
            for s in ss:
                mask = make_mask(self.cfg.seq_len, self.cfg.mask_ratio, self.cfg.mask_segment_len, np.random.default_rng(s))
                rows.append(i)
                masks.append(mask)
        rows_a = np.asarray(rows)
        masks_a = np.asarray(masks)
        errs = np.zeros(len(rows))
        with no_grad():
            for lo in range(0, len(rows), batch):
                idx = rows_a[lo : lo + batch]
                m = masks_a[lo : lo + batch]
                xb = x[idx]
                xm = np.where(m[:, None, :], np.float32(0), xb)
                rec = self.model(Tensor(xm)).data
                sq = (rec.astype(np.float64) - xb) ** 2
                if self.cfg.full_signal:
                    errs[lo : lo + batch] = sq.mean(axis=(1, 2))
                else:
                    errs[lo : lo + batch] = (sq * m[:, None, :]).sum(axis=(1, 2)) / (m.sum(axis=1) * sq.shape[1])
        counts = np.bincount(rows_a, minlength=len(windows))
        out = np.bincount(rows_a, weights=errs, minlength=len(windows)) / np.maximum(counts, 1)
        return out

    def reconstruction_error(self, w: WindowPair, seed: int | None = None) -> float:
        seeds = [[seed]] if seed is not None else None
        return float(self.errors([w], seeds)[0])

    def calibrate(self, windows: Sequence[WindowPair], percentile: float = 80.0) -> ThresholdCalibration:
        if any(not w.is_eating for w in windows):
            raise ValueError("calibration windows must all be eating windows")
        self.calibration = calibrate_from_errors(self.errors(windows), percentile)
        return self.calibration

    def decide(self, errors: np.ndarray) -> list[State]:
        if self.calibration is None:
            raise ConfigError("detector lacks field 'calibration'; calibrate it first")
        tau = self.calibration.tau
        return [State.EATING if e <= tau else State.NON_EATING for e in errors]

    def detect(self, w: WindowPair) -> State:
        return self.decide(self.errors([w]))[0]

    # -- persistence --------------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        tensors = dict(self.model.state_dict())
        tensors["input.mean"] = self.stats.mean
        tensors["input.std"] = self.stats.std
        config = {
            "kind": "detector",
            "unet": asdict(self.cfg),
            "calibration": None if self.calibration is None else asdict(self.calibration),
            "mask_seed": self.mask_seed,
            "mask_draws": self.mask_draws,
            "loss_curve": self.loss_curve,
            "train": self.train_info,
        }
        return Checkpoint(tensors, config)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EatingDetector":
        if ckpt.config.get("kind") != "detector":
            raise CheckpointError("checkpoint does not hold a detector")
        cfg = UNetConfig(**ckpt.config["unet"])
        model = UNet1d(cfg, np.random.default_rng(0))
        state = {k: v for k, v in ckpt.tensors.items() if not k.startswith("input.")}
        model.load_state_dict(state)
        cal = ckpt.config.get("calibration")
        return cls(
            cfg=cfg,
            model=model,
            stats=InputStats(ckpt.tensors["input.mean"], ckpt.tensors["input.std"]),
            calibration=None if cal is None else ThresholdCalibration(**cal),
            mask_seed=ckpt.config.get("mask_seed", 0),
            mask_draws=ckpt.config.get("mask_draws", 1),
            loss_curve=list(ckpt.config.get("loss_curve", [])),
            train_info=ckpt.config.get("train", {}),
        )


def train_reconstructor(
    windows: Sequence[WindowPair],
    cfg: UNetConfig | None = None,
    epochs: int = 100,
    batch: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
) -> EatingDetector:
    """Fit the U-Net to reconstruct masked timesteps of eating windows."""
    cfg = cfg or UNetConfig()
    if not windows:
        raise EmptyTrainingSet("no training windows")
    if any(not w.is_eating for w in windows):
        raise EmptyTrainingSet("reconstructor trains on eating windows only; got non-eating windows")
    raw = fuse_batch(windows)
    stats = InputStats.fit(raw)
    x = stats.apply(raw).astype(np.float32)
    model = UNet1d(cfg, numpy_rng(seed, "detector:init"))
    shuffle_rng = numpy_rng(seed, "detector:shuffle")
    mask_rng = numpy_rng(seed, "detector:mask")
    params = model.parameters()
    curve: list[float] = []
    model.train()
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(x))
        total, count = 0.0, 0
        for lo in range(0, len(order), batch):
            idx = order[lo : lo + batch]
            xb = x[idx]
            m = np.stack([make_mask(cfg.seq_len, cfg.mask_ratio, cfg.mask_segment_len, mask_rng) for _ in idx])
            xm = np.where(m[:, None, :], np.float32(0), xb)
            out = model(Tensor(xm))
            loss = F.mse_loss(out, xb, None if cfg.full_signal else m[:, None, :])
            model.zero_grad()
            loss.backward()
            adam_step(params, lr=lr)
            total += float(loss.data) * len(idx)
            count += len(idx)
        curve.append(total / count)
        log.info("detector epoch %d/%d loss %.5f", epoch + 1, epochs, curve[-1])
    model.eval()
    return EatingDetector(
        cfg=cfg,
        model=model,
        stats=stats,
        mask_seed=derive_seed(seed, "detector:inference-mask"),
        loss_curve=curve,
        train_info={"epochs": epochs, "batch": batch, "lr": lr, "seed": seed, "windows": len(windows)},
    )


def detection_accuracy(states: Sequence[State], windows: Sequence[WindowPair]) -> float:
    if not windows:
        return 0.0
    return sum(s is w.state_label for s, w in zip(states, windows)) / len(windows)


@dataclass
class GridCell:
    ratio: float
    percentile: float
    accuracy: float
    tau: float = 0.0


def hyperparam_search(
    ratios: Sequence[float],
    percentiles: Sequence[float],
    train: Sequence[WindowPair],
    validation: Sequence[WindowPair],
    top_k: int = 20,
    base_cfg: UNetConfig | None = None,
    epochs: int = 100,
    batch: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
    calibration: Sequence[WindowPair] | None = None,
) -> tuple[list[GridCell], list[GridCell], dict[float, EatingDetector]]:
    """Grid over mask ratio x threshold percentile.

    One reconstructor is trained per ratio (on the eating windows of
    ``train``); each percentile is a calibration of that model on
    ``calibration`` (default: the eating windows of ``validation``).
    Returns ``(top_k ranked cells, full grid in input order, models by ratio)``.
    """
    if not any(w.is_eating for w in validation) or all(w.is_eating for w in validation):
        raise ValueError("validation set must contain both eating and non-eating windows")
    base_cfg = base_cfg or UNetConfig()
    cal_windows = list(calibration) if calibration is not None else [w for w in validation if w.is_eating]
    eating_train = [w for w in train if w.is_eating]
    grid: list[GridCell] = []
    models: dict[float, EatingDetector] = {}
    for ratio in ratios:
        cfg = UNetConfig(**{**asdict(base_cfg), "mask_ratio": ratio})
        det = train_reconstructor(eating_train, cfg, epochs=epochs, batch=batch, lr=lr, seed=derive_seed(seed, f"search:{ratio}"))
        models[ratio] = det
        cal_err = det.errors(cal_windows)
        val_err = det.errors(validation)
        for p in percentiles:
            det.calibration = calibrate_from_errors(cal_err, p)
            acc = detection_accuracy(det.decide(val_err), validation)
            grid.append(GridCell(ratio, p, acc, det.calibration.tau))
        det.calibration = None
    ranked = sorted(grid, key=lambda c: (-c.accuracy, c.ratio, c.percentile))
    return ranked[:top_k], grid, models


def grid_csv(grid: Sequence[GridCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ratio", "percentile", "accuracy"])
    for c in grid:
        w.writerow([repr(float(c.ratio)), repr(float(c.percentile)), repr(float(c.accuracy))])
    return buf.getvalue()
