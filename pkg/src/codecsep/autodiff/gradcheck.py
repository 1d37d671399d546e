"""Central finite-difference checks for the differentiable ops.

Each registered check builds float64 inputs of the requested shapes, runs the
op, contracts the output with a fixed random projection to get a scalar, and
compares the analytic gradient of every input against central differences.
The error reported is norm-wise: ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from . import tensor as T

OpFn = Callable[..., T.Tensor]


@dataclass
class GradCheck:
    fn: OpFn
    shapes: list[tuple[int, ...]]
    positive: bool = False  # inputs drawn from [0.5, 2] instead of N(0, 1)
    make_inputs: Callable | None = None  # (rng, shapes) -> arrays, overrides the above


@dataclass
class GradCheckReport:
    op: str
    seed: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op} seed={self.seed} rel_err={self.max_rel_error:.3e} tol={self.tolerance:g}"


def _attention(q, k, v):
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    return T.matmul(T.softmax(scores, axis=-1), v)


def _noisy_copy(rng, shapes):
    ref = rng.standard_normal(shapes[1])
    return [ref + 0.5 * rng.standard_normal(shapes[0]), ref]


REGISTRY: dict[str, GradCheck] = {
    "add": GradCheck(T.add, [(3, 4), (3, 4)]),
    "add_bias": GradCheck(T.add, [(2, 3, 5), (1, 3, 1)]),
    "sub": GradCheck(T.sub, [(3, 4), (3, 1)]),
    "mul": GradCheck(T.mul, [(3, 4), (3, 4)]),
    "div": GradCheck(T.div, [(3, 4), (3, 4)], positive=True),
    "scale": GradCheck(lambda x: T.scale(x, -2.5), [(4, 5)]),
    "square": GradCheck(T.square, [(4, 5)]),
    "sin": GradCheck(T.sin, [(4, 5)]),
    "snake": GradCheck(T.snake, [(4, 8)]),
    "relu": GradCheck(T.relu, [(4, 5)]),
    "tanh": GradCheck(T.tanh, [(4, 5)]),
    "log10": GradCheck(T.log10, [(4, 5)], positive=True),
    "sum": GradCheck(lambda x: T.sum_(x, axis=1), [(3, 4, 2)]),
    "mean": GradCheck(lambda x: T.mean(x, axis=-1, keepdims=True), [(3, 4, 2)]),
    "reshape": GradCheck(lambda x: T.reshape(x, (6, 4)), [(3, 4, 2)]),
    "transpose": GradCheck(lambda x: T.transpose(x, (2, 0, 1)), [(3, 4, 2)]),
    "slice": GradCheck(lambda x: x[:, 1:3], [(3, 5)]),
    "concat": GradCheck(lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "matmul": GradCheck(T.matmul, [(2, 3, 4), (4, 5)]),
    "linear": GradCheck(T.linear, [(2, 3, 4), (4, 5), (5,)]),
    "softmax": GradCheck(lambda x: T.softmax(x, axis=-1), [(3, 6)]),
    "layer_norm": GradCheck(T.layer_norm, [(2, 3, 6), (6,), (6,)]),
    "conv1d": GradCheck(lambda x, w, b: T.conv1d(x, w, b, stride=2, padding=1), [(2, 3, 11), (4, 3, 4), (4,)]),
    "conv1d_transposed": GradCheck(
        lambda x, w, b: T.conv1d_transposed(x, w, b, stride=3, padding=1, output_padding=1),
        [(2, 3, 5), (3, 2, 6), (2,)],
    ),
    "attention": GradCheck(_attention, [(2, 5, 4), (2, 5, 4), (2, 5, 4)]),
    # estimates near their references: the loss is only smooth away from the eps floor
    "si_sdr_loss": GradCheck(lambda e, r: losses.si_sdr(e, r), [(3, 16), (3, 16)], make_inputs=_noisy_copy),
}


def register(name: str, check: GradCheck) -> None:
    REGISTRY[name] = check


def _inputs(check: GradCheck, shapes, rng) -> list[np.ndarray]:
    if check.make_inputs is not None:
        return check.make_inputs(rng, shapes)
    if check.positive:
        return [rng.uniform(0.5, 2.0, size=s) for s in shapes]
    return [rng.standard_normal(s) for s in shapes]


def grad_check(op_name: str, shapes=None, tolerance: float = 1e-3, seed: int = 0, h: float = 1e-4) -> GradCheckReport:
    if op_name not in REGISTRY:
        raise KeyError(f"no gradient check registered for {op_name!r}")
    check = REGISTRY[op_name]
    rng = np.random.default_rng(seed)
    arrays = _inputs(check, shapes or check.shapes, rng)

    probe = check.fn(*[T.Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe.shape)

    def objective(values: list[np.ndarray]) -> float:
        with T.no_grad():
            return float(np.sum(check.fn(*[T.Tensor(v) for v in values]).data * proj))

    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = check.fn(*leaves)
    T.sum_(T.mul(out, T.Tensor(proj))).backward()

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        numeric = np.zeros_like(arrays[i])
        work = [a.copy() for a in arrays]
        flat = work[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = objective(work)
            flat[j] = orig - h
            fm = objective(work)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return GradCheckReport(op_name, seed, worst, tolerance)
