"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: kv[1], reverse=True)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def format(self) -> str:
        lines = [f"{name}: max rel err {err:.3e}" for name, err in self.worst]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation, scaled by the larger of the two gradients' magnitudes."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def numerical_gradient(loss_fn: Callable[[dict[str, Tensor]], Tensor], values: Mapping[str, np.ndarray],
                       name: str, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. ``values[name]``, evaluated in float64."""
    base = {k: np.asarray(v, dtype=np.float64).copy() for k, v in values.items()}
    target = base[name]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(loss_fn({k: Tensor(v, dtype=np.float64) for k, v in base.items()}).data)
        flat[i] = orig - eps
        minus = float(loss_fn({k: Tensor(v, dtype=np.float64) for k, v in base.items()}).data)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def grad_check(loss_fn: Callable[[dict[str, Tensor]], Tensor], values: Mapping[str, np.ndarray],
               tolerance: float = 1e-3, eps: float = 1e-5, dtype=np.float32) -> GradCheckReport:
    """Compare backward() gradients against a 64-bit central-difference oracle.

    ``loss_fn`` receives a dict of tensors keyed like ``values`` and must return
    a scalar tensor; it is called once in ``dtype`` for the analytic pass and
    repeatedly in float64 for the oracle.
    """
    report = GradCheckReport(tolerance)
    if not values:
        return report
    # round through the analytic dtype so both routes see identical inputs
    values = {k: np.asarray(v, dtype=dtype).astype(np.float64) for k, v in values.items()}
    inputs = {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True) for k, v in values.items()}
    loss_fn(inputs).backward()
    for name, t in inputs.items():
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = numerical_gradient(loss_fn, values, name, eps)
        report.errors[name] = relative_error(analytic, numeric)
    return report


def _away_from_zero(rng, shape, lo=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _distinct(rng, shape):
    # spaced values keep max-pool winners stable under the probe step
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2) * (2.0 / n)).reshape(shape) + rng.uniform(-1e-3, 1e-3, size=shape)


def primitive_checks(seed: int) -> list[tuple[str, Callable, dict[str, np.ndarray]]]:
    """One randomly shaped probe per differentiable primitive, plus a small CNN."""
    from . import ops

    rng = np.random.default_rng(seed)
    b = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h = int(rng.integers(3, 7))
    stride, padding = [(1, 1), (1, 0), (2, 1), (1, 2)][seed % 4]
    if stride == 2 and (h + 2 * padding - 3) % 2:
        h += 1
    ho = ops.conv_output_extent(h, stride, padding)
    r_conv = rng.standard_normal((b, cout, ho, ho))
    checks = [(
        f"conv2d[s{stride},p{padding}]",
        lambda t, r=r_conv, s=stride, p=padding: ops.weighted_sum(ops.conv2d(t["x"], t["k"], t["b"], s, p), r),
        {"x": rng.standard_normal((b, cin, h, h)), "k": rng.standard_normal((cout, cin, 3, 3)),
         "b": rng.standard_normal(cout)},
    )]

    hp = 2 * int(rng.integers(1, 4))
    r_pool = rng.standard_normal((b, cin, hp // 2, hp // 2))
    checks.append(("maxpool2d", lambda t, r=r_pool: ops.weighted_sum(ops.maxpool2d(t["x"]), r),
                   {"x": _distinct(rng, (b, cin, hp, hp))}))

    r_gap = rng.standard_normal((b, cin))
    checks.append(("global_avg_pool", lambda t, r=r_gap: ops.weighted_sum(ops.global_avg_pool(t["x"]), r),
                   {"x": rng.standard_normal((b, cin, h, h + 1))}))

    n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    r_dense = rng.standard_normal((b, m))
    checks.append(("dense", lambda t, r=r_dense: ops.weighted_sum(ops.dense(t["x"], t["w"], t["b"]), r),
                   {"x": rng.standard_normal((b, n)), "w": rng.standard_normal((m, n)), "b": rng.standard_normal(m)}))

    r_relu = rng.standard_normal((b, n))
    checks.append(("relu", lambda t, r=r_relu: ops.weighted_sum(ops.relu(t["x"]), r),
                   {"x": _away_from_zero(rng, (b, n))}))

    r_add = rng.standard_normal((b, n))
    checks.append(("add", lambda t, r=r_add: ops.weighted_sum(ops.add(t["x"], t["y"]), r),
                   {"x": rng.standard_normal((b, n)), "y": rng.standard_normal((b, n))}))

    r_flat = rng.standard_normal((b, cin * h * h))
    checks.append(("flatten", lambda t, r=r_flat: ops.weighted_sum(ops.flatten(t["x"]), r),
                   {"x": rng.standard_normal((b, cin, h, h))}))

    c = int(rng.integers(2, 5))
    labels = rng.integers(0, c, size=b + 1)
    checks.append(("softmax_cross_entropy", lambda t, y=labels: ops.softmax_cross_entropy(t["z"], y)[0],
                   {"z": 2.0 * rng.standard_normal((b + 1, c))}))

    y = rng.integers(0, 3, size=2)

    def mini_cnn(t, y=y):
        a = ops.maxpool2d(ops.relu(ops.conv2d(t["x"], t["k1"], t["b1"])))
        a = ops.relu(ops.conv2d(a, t["k2"], t["b2"]))
        return ops.softmax_cross_entropy(ops.dense(ops.global_avg_pool(a), t["w"], t["bw"]), y)[0]

    checks.append(("mini_cnn", mini_cnn, {
        "x": rng.uniform(0, 1, (2, 1, 6, 6)),
        "k1": 0.5 * rng.standard_normal((2, 1, 3, 3)), "b1": 0.1 * rng.standard_normal(2),
        "k2": 0.5 * rng.standard_normal((3, 2, 3, 3)), "b2": 0.1 * rng.standard_normal(3),
        "w": rng.standard_normal((3, 3)), "bw": 0.1 * rng.standard_normal(3),
    }))
    return checks


def run_primitive_suite(seeds, tolerance: float = 1e-3) -> dict[str, GradCheckReport]:
    """Grad-check every primitive for every seed; keys are ``"<primitive>@<seed>"``."""
    out = {}
    for seed in seeds:
        for name, fn, values in primitive_checks(seed):
            out[f"{name}@{seed}"] = grad_check(fn, values, tolerance)
    return out
