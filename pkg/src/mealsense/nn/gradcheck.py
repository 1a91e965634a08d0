from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, concat, matmul


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``fn`` maps ``inputs`` to a scalar tensor. Every input with
    ``requires_grad`` is perturbed one coordinate at a time; the relative error
    per coordinate is ``|a - n| / max(|a|, |n|, floor)``. Run in float64.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        if a is None:
            a = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# --- op registry ------------------------------------------------------------------
#
# Each case builds float64 inputs for one differentiable op from a seeded
# generator and one of two shape variants, and returns (fn, inputs). The
# output is contracted with a fixed random tensor so every output coordinate
# contributes a distinct weight to the checked scalar.


def _t(rng: np.random.Generator, *shape, grad: bool = True, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=grad, dtype=np.float64)


def _spread(rng: np.random.Generator, *shape) -> Tensor:
    # distinct values, at least 0.05 apart: keeps max/relu kinks out of the +-h band
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * 0.05 + rng.uniform(-0.01, 0.01, n)
    return Tensor(vals.reshape(shape), requires_grad=True, dtype=np.float64)


def _contract(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return lambda o: (o * w).sum()


def _case(op: Callable[..., Tensor], inputs: list[Tensor], rng: np.random.Generator):
    with_proj = _contract(op(*inputs), rng)
    return (lambda *xs: with_proj(op(*xs))), inputs


def _bn(training: bool):
    def op(x, g, b):
        c = x.shape[1]
        return F.batch_norm1d(x, g, b, np.zeros(c), np.ones(c), training=training)

    return op


def _cases():
    S = [(2, 3, 5), (3, 2, 6)]  # [B, C, L] variants
    A = [(3, 4), (2, 5)]

    def elementwise(name, fn):
        return name, lambda r, i: _case(fn, [_t(r, *A[i]), _t(r, *A[i][-1:])], r)

    yield elementwise("add", lambda a, b: a + b)
    yield elementwise("sub", lambda a, b: a - b)
    yield elementwise("mul", lambda a, b: a * b)
    yield "div", lambda r, i: _case(
        lambda a, b: a / b, [_t(r, *A[i]), Tensor(r.uniform(1.0, 2.0, A[i][-1:]), requires_grad=True, dtype=np.float64)], r
    )
    # away from zero, where central differences on a cubic lose relative precision
    yield "pow", lambda r, i: _case(
        lambda a: a ** (3 - 1.5 * i), [Tensor(r.uniform(0.5, 1.5, A[i]), requires_grad=True, dtype=np.float64)], r
    )
    yield "matmul", lambda r, i: _case(matmul, [_t(r, 2, *A[i]), _t(r, A[i][1], 3)], r)
    yield "sum", lambda r, i: _case(lambda a: a.sum(axis=i, keepdims=bool(i)), [_t(r, *A[i])], r)
    yield "mean", lambda r, i: _case(lambda a: a.mean(axis=1 - i), [_t(r, *A[i])], r)
    yield "reshape", lambda r, i: _case(lambda a: a.reshape(-1), [_t(r, *A[i])], r)
    yield "transpose", lambda r, i: _case(lambda a: a.transpose(2, 0, 1), [_t(r, *S[i])], r)
    yield "roll", lambda r, i: _case(lambda a: a.roll(2 - 3 * i, axis=2), [_t(r, *S[i])], r)
    yield "take", lambda r, i: _case(lambda a: a.take(np.array([2, 0, 2, 1][: 3 + i])), [_t(r, 3, *A[i])], r)
    yield "concat", lambda r, i: _case(lambda a, b: concat([a, b], axis=1), [_t(r, *S[i]), _t(r, S[i][0], 2, S[i][2])], r)
    yield "conv1d", lambda r, i: _case(
        lambda x, w, b: F.conv1d(x, w, b, stride=1 + i, padding=1 - i),
        [_t(r, *S[i]), _t(r, 4, S[i][1], 3), _t(r, 4)], r,
    )
    yield "conv1d_transposed", lambda r, i: _case(
        lambda y, w, b: F.conv1d_transposed(y, w, b, stride=2 - i),
        [_t(r, *S[i]), _t(r, S[i][1], 2, 2 + i), _t(r, 2)], r,
    )
    yield "batch_norm1d/train", lambda r, i: _case(_bn(True), [_t(r, *S[i]), _t(r, S[i][1]), _t(r, S[i][1])], r)
    yield "batch_norm1d/eval", lambda r, i: _case(_bn(False), [_t(r, *S[i]), _t(r, S[i][1]), _t(r, S[i][1])], r)
    yield "layer_norm", lambda r, i: _case(F.layer_norm, [_t(r, *S[i]), _t(r, S[i][2]), _t(r, S[i][2])], r)
    yield "relu", lambda r, i: _case(F.relu, [_spread(r, *S[i])], r)
    yield "gelu", lambda r, i: _case(F.gelu, [_t(r, *S[i], scale=2.0)], r)
    yield "max_pool1d", lambda r, i: _case(F.max_pool1d, [_spread(r, S[i][0], S[i][1], 6)], r)
    yield "linear", lambda r, i: _case(F.linear, [_t(r, *S[i]), _t(r, 3, S[i][2]), _t(r, 3)], r)
    yield "softmax", lambda r, i: _case(F.softmax, [_t(r, *S[i])], r)

    def attn(r, i):
        T, d = 4 + 2 * i, 3
        mask = np.where(r.random((T, T)) < 0.3, F.MASK_VALUE, 0.0)
        np.fill_diagonal(mask, 0.0)
        return _case(
            lambda q, k, v, b: F.attention(q, k, v, mask=mask, bias=b),
            [_t(r, 2, T, d), _t(r, 2, T, d), _t(r, 2, T, d), _t(r, T, T)], r,
        )

    yield "attention", attn

    def mse(r, i):
        m = None if i == 0 else (r.random((S[i][0], 1, S[i][2])) < 0.5)
        if m is not None:
            m[..., 0] = True
        return (lambda x, t: F.mse_loss(x, t, m)), [_t(r, *S[i]), _t(r, *S[i])]

    yield "mse_loss", mse

    def xent_case(r, i):
        labels = r.integers(0, A[i][1], size=A[i][0])
        return (lambda z: F.cross_entropy(z, labels)), [_t(r, *A[i], scale=2.0)]

    yield "cross_entropy", xent_case


def op_names() -> list[str]:
    return [name for name, _ in _cases()]


@dataclass
class GradCheckResult:
    op: str
    seed: int
    shape: int
    max_rel_error: float


def run_suite(seeds: Sequence[int] = (0, 1, 2), shapes: Sequence[int] = (0, 1), h: float = 1e-3) -> list[GradCheckResult]:
    """Grad-check every registered op for every (seed, shape variant)."""
    results = []
    for name, build in _cases():
        for seed in seeds:
            for shape in shapes:
                fn, inputs = build(np.random.default_rng([seed, shape, len(name)]), shape)
                results.append(GradCheckResult(name, seed, shape, grad_check(fn, inputs, h=h)))
    return results
