"""Stage two: food-type recognition with a 1-D shifted-window transformer.

The fused ``[12, 128]`` window is cut into patches of 4 timesteps, embedded,
and passed through two stages of windowed self-attention blocks. Blocks
alternate between plain windows and windows shifted by half a window so
information crosses window borders. A patch-merging layer halves the token
count between stages; the head averages the final tokens and projects to the
class logits.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import FOOD_NAMES, WindowPair
from .detector import FUSED_CHANNELS, InputStats, fuse_batch
from .errors import CheckpointError, ClassAbsent, MissingLabel, ShapeMismatch
from .nn import Checkpoint, LayerNorm, Linear, Module, Parameter, Tensor, adam_step, no_grad
from .nn import functional as F
from .seeding import numpy_rng

log = logging.getLogger(__name__)


@dataclass
class SwinConfig:
    in_channels: int = FUSED_CHANNELS
    seq_len: int = 128
    patch_size: int = 4
    embed_dim: int = 48
    stage_depths: tuple[int, ...] = (2, 2)
    stage_heads: tuple[int, ...] = (3, 6)
    window_size: int = 8
    mlp_ratio: int = 4
    num_classes: int = len(FOOD_NAMES)

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.stage_heads = tuple(self.stage_heads)
        if len(self.stage_depths) != len(self.stage_heads):
            raise ValueError("stage_depths and stage_heads differ in length")
        if self.seq_len % self.patch_size:
            raise ValueError("seq_len must be divisible by patch_size")
        tokens, dim = self.seq_len // self.patch_size, self.embed_dim
        for s, heads in enumerate(self.stage_heads):
            if tokens % self.window_size:
                raise ValueError(f"stage {s}: {tokens} tokens not divisible by window {self.window_size}")
            if dim % heads:
                raise ValueError(f"stage {s}: dim {dim} not divisible by {heads} heads")
            tokens, dim = tokens // 2, dim * 2
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size


# --- windows ----------------------------------------------------------------------


def shift_mask(tokens: int, window_size: int, shift: int) -> np.ndarray | None:
    """Additive ``[n_windows, W, W]`` mask blocking pairs split by the cyclic roll."""
    if shift == 0:
        return None
    # After rolling by -shift, position i holds original token (i + shift) % T;
    # tokens that wrapped around (original index < shift) must not see the rest.
    wrapped = (np.arange(tokens) + shift) % tokens < shift
    groups = wrapped.reshape(-1, window_size)
    blocked = groups[:, :, None] != groups[:, None, :]
    return np.where(blocked, F.MASK_VALUE, 0.0)


def window_partition(tokens: Tensor, window_size: int, shift: int = 0) -> tuple[Tensor, np.ndarray | None]:
    """``[B, T, D]`` -> ``[B, T / W, W, D]`` after rolling by ``-shift``; also returns the mask."""
    B, T, D = tokens.shape
    if T % window_size or not 0 <= shift < window_size:
        raise ShapeMismatch(f"cannot partition {T} tokens into windows of {window_size} with shift {shift}")
    x = tokens.roll(-shift, axis=1) if shift else tokens
    return x.reshape(B, T // window_size, window_size, D), shift_mask(T, window_size, shift)


def window_merge(windows: Tensor, shift: int = 0) -> Tensor:
    """Inverse of :func:`window_partition`."""
    B, n, W, D = windows.shape
    x = windows.reshape(B, n * W, D)
    return x.roll(shift, axis=1) if shift else x


# --- layers ---------------------------------------------------------------------------


def relative_index(window_size: int) -> np.ndarray:
    i = np.arange(window_size)
    return i[:, None] - i[None, :] + window_size - 1


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, W, D = x.shape
        d = D // self.heads
        x = x.reshape(*lead, W, self.heads, d)
        n = len(lead)
        return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))

    def __call__(self, x: Tensor, bias: Tensor | None, mask: np.ndarray | None) -> Tensor:
        # x: [..., W, D]; bias: [H, W, W]; mask: [n_windows, W, W] for x = [B, n, W, D]
        if mask is not None:
            mask = mask[:, None, :, :]
        o = F.attention(self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)), mask, bias)
        n = o.ndim - 3
        o = o.transpose(tuple(range(n)) + (n + 1, n, n + 2))
        *lead, W, H, d = o.shape
        return self.proj(o.reshape(*lead, W, H * d))


class SwinBlock(Module):
    """Pre-norm residual block: windowed attention, then a GELU MLP."""

    def __init__(self, dim: int, heads: int, window_size: int, shift: int, mlp_ratio: int, rng: np.random.Generator):
        self.window_size, self.shift = window_size, shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def __call__(self, x: Tensor, rel_bias: Tensor | None = None, windowed: bool = True) -> Tensor:
        h = self.norm1(x)
        if windowed:
            win, mask = window_partition(h, self.window_size, self.shift)
            a = window_merge(self.attn(win, rel_bias, mask), self.shift)
        else:
            a = self.attn(h, rel_bias, None)
        x = x + a
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class PatchMerging(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(2 * dim)
        self.reduction = Linear(2 * dim, 2 * dim, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        if T % 2:
            raise ShapeMismatch(f"patch merging needs an even token count, got {T}")
        return self.reduction(self.norm(x.reshape(B, T // 2, 2 * D)))


class Stage(Module):
    def __init__(self, dim: int, depth: int, heads: int, cfg: SwinConfig, rng: np.random.Generator):
        self.window_size = cfg.window_size
        self.rel_table = Parameter(np.zeros((2 * cfg.window_size - 1, heads)))
        self.blocks = [
            SwinBlock(dim, heads, cfg.window_size, 0 if i % 2 == 0 else cfg.window_size // 2, cfg.mlp_ratio, rng)
            for i in range(depth)
        ]

    def rel_bias(self) -> Tensor:
        return self.rel_table.take(relative_index(self.window_size)).transpose(2, 0, 1)

    def __call__(self, x: Tensor) -> Tensor:
        bias = self.rel_bias()
        for block in self.blocks:
            x = block(x, bias)
        return x


class PatchEmbed(Module):
    def __init__(self, cfg: SwinConfig, rng: np.random.Generator):
        self.patch_size = cfg.patch_size
        self.proj = Linear(cfg.patch_dim, cfg.embed_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        # [B, C, L] -> [B, L/P, C*P]; a patch is flattened channel-major
        B, C, L = x.shape
        P = self.patch_size
        if L % P:
            raise ShapeMismatch(f"length {L} not divisible by patch size {P}")
        patches = x.reshape(B, C, L // P, P).transpose(0, 2, 1, 3).reshape(B, L // P, C * P)
        return self.proj(patches)


class SwinClassifier1d(Module):
    def __init__(self, cfg: SwinConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng)
        self.stages = []
        self.merges = []
        dim = cfg.embed_dim
        for s, (depth, heads) in enumerate(zip(cfg.stage_depths, cfg.stage_heads)):
            self.stages.append(Stage(dim, depth, heads, cfg, rng))
            if s < len(cfg.stage_depths) - 1:
                self.merges.append(PatchMerging(dim, rng))
                dim *= 2
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, cfg.num_classes, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1:] != (self.cfg.in_channels, self.cfg.seq_len):
            raise ShapeMismatch(f"expected [B, {self.cfg.in_channels}, {self.cfg.seq_len}], got {x.shape}")
        h = self.embed(x)
        for s, stage in enumerate(self.stages):
            h = stage(h)
            if s < len(self.merges):
                h = self.merges[s](h)
        return self.head(self.norm(h).mean(axis=1))


def patch_embed(model: SwinClassifier1d, x: np.ndarray | Tensor) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    single = t.ndim == 2
    out = model.embed(t.reshape(1, *t.shape) if single else t)
    return out.reshape(out.shape[1:]) if single else out


# --- classifier -----------------------------------------------------------------------------


@dataclass
class FoodClassifier:
    cfg: SwinConfig
    model: SwinClassifier1d
    stats: InputStats
    class_names: list[str] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    train_info: dict = field(default_factory=dict)

    def logits(self, windows: Sequence[WindowPair], batch: int = 64) -> np.ndarray:
        x = fuse_batch(windows, self.stats)
        out = np.zeros((len(windows), self.cfg.num_classes))
        with no_grad():
            for lo in range(0, len(windows), batch):
                out[lo : lo + batch] = self.model(Tensor(x[lo : lo + batch])).data
        return out

    def probabilities(self, windows: Sequence[WindowPair]) -> np.ndarray:
        z = self.logits(windows)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def classify(self, w: WindowPair) -> np.ndarray:
        return self.probabilities([w])[0]

    def to_checkpoint(self) -> Checkpoint:
        tensors = dict(self.model.state_dict())
        tensors["input.mean"] = self.stats.mean
        tensors["input.std"] = self.stats.std
        cfg = asdict(self.cfg)
        cfg["stage_depths"] = list(cfg["stage_depths"])
        cfg["stage_heads"] = list(cfg["stage_heads"])
        return Checkpoint(
            tensors,
            {
                "kind": "classifier",
                "swin": cfg,
                "class_names": self.class_names,
                "loss_curve": self.loss_curve,
                "train": self.train_info,
            },
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FoodClassifier":
        if ckpt.config.get("kind") != "classifier":
            raise CheckpointError("checkpoint does not hold a classifier")
        cfg = SwinConfig(**ckpt.config["swin"])
        model = SwinClassifier1d(cfg, np.random.default_rng(0))
        model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("input.")})
        return cls(
            cfg=cfg,
            model=model,
            stats=InputStats(ckpt.tensors["input.mean"], ckpt.tensors["input.std"]),
            class_names=list(ckpt.config.get("class_names", [])),
            loss_curve=list(ckpt.config.get("loss_curve", [])),
            train_info=ckpt.config.get("train", {}),
        )


def default_class_names(n: int) -> list[str]:
    return list(FOOD_NAMES[:n]) if n <= len(FOOD_NAMES) else [f"class {i}" for i in range(n)]


def train_classifier(
    windows: Sequence[WindowPair],
    cfg: SwinConfig | None = None,
    epochs: int = 100,
    batch: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
    class_names: Sequence[str] | None = None,
) -> FoodClassifier:
    """Minimize cross-entropy of the food label over eating windows."""
    cfg = cfg or SwinConfig()
    for w in windows:
        if w.food_label is None:
            raise MissingLabel(f"window at {w.start_t:.2f}s ({w.subject_id}/{w.session}) has no food label")
    y = np.array([w.food_label for w in windows], dtype=np.int64)
    absent = sorted(set(range(cfg.num_classes)) - set(y.tolist()))
    if absent:
        raise ClassAbsent(f"classes without training windows: {absent}")
    raw = fuse_batch(windows)
    stats = InputStats.fit(raw)
    x = stats.apply(raw).astype(np.float32)
    model = SwinClassifier1d(cfg, numpy_rng(seed, "classifier:init"))
    shuffle_rng = numpy_rng(seed, "classifier:shuffle")
    params = model.parameters()
    curve: list[float] = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(x))
        total = 0.0
        for lo in range(0, len(order), batch):
            idx = order[lo : lo + batch]
            loss = F.cross_entropy(model(Tensor(x[idx])), y[idx])
            model.zero_grad()
            loss.backward()
            adam_step(params, lr=lr)
            total += float(loss.data) * len(idx)
        curve.append(total / len(x))
        log.info("classifier epoch %d/%d loss %.5f", epoch + 1, epochs, curve[-1])
    return FoodClassifier(
        cfg=cfg,
        model=model,
        stats=stats,
        class_names=list(class_names) if class_names else default_class_names(cfg.num_classes),
        loss_curve=curve,
        train_info={"epochs": epochs, "batch": batch, "lr": lr, "seed": seed, "windows": len(windows)},
    )
