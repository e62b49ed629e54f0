"""Factored-vs-vectorized gradient step cost: flop models and measurements.

The closed-form leading-order multiply counts for an N x N scene at
sampling ratio alpha are (sqrt(alpha) + alpha) * N^3 for the factored step
and alpha * N^4 for the dense vectorized step. Wall times are medians over
repeated runs of numerically-verified-equivalent implementations.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .sensing import vec
from .unfolding import measurements_for_ratio

VEC_BYTES_CAP = 2**30


@dataclass
class BenchReport:
    n: int
    alpha: float
    reps: int
    kron_flops: float
    vec_flops: float
    kron_seconds: float
    kron_samples: list[float]
    kron_bytes: int
    vec_seconds: float | None = None
    vec_samples: list[float] | None = None
    vec_bytes: int | None = None
    rss_delta_bytes: int | None = None
    equivalence_error: float | None = None
    note: str = ""

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2)

    def render_table(self) -> str:
        def fmt(value, unit=""):
            if value is None:
                return "skipped"
            return f"{value:.6g}{unit}"

        rows = [
            ("quantity", "kronecker", "vectorized"),
            ("model flops", fmt(self.kron_flops), fmt(self.vec_flops)),
            ("median seconds", fmt(self.kron_seconds), fmt(self.vec_seconds)),
            ("est. peak bytes", fmt(self.kron_bytes), fmt(self.vec_bytes)),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = []
        for i, row in enumerate(rows):
            lines.append(" | ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)))
            if i == 0:
                lines.append("-+-".join("-" * w for w in widths))
        if self.note:
            lines.append(f"note: {self.note}")
        return "\n".join(lines)


def flops_estimate(n: int, alpha: float) -> tuple[float, float]:
    """Leading-order multiply counts (kron, vectorized) with unit constants."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    kron = (np.sqrt(alpha) + alpha) * float(n) ** 3
    dense = alpha * float(n) ** 4
    return float(kron), float(dense)


def _median_time(fn, reps: int) -> tuple[float, list[float]]:
    fn()  # warm up
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), samples


def bench_inputs(n: int, alpha: float, seed: int = 0):
    """Seeded random factors and data used by the timing run."""
    m = measurements_for_ratio(n, alpha)
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(n)
    phi = rng.standard_normal((m, n)) * scale
    psi = rng.standard_normal((m, n)) * scale
    x = rng.standard_normal((n, n))
    y = rng.standard_normal((m, m))
    return phi, psi, x, y


def time_gradient_step(
    n: int,
    alpha: float,
    reps: int = 5,
    seed: int = 0,
    rho: float = 0.5,
    max_vec_bytes: int = VEC_BYTES_CAP,
) -> BenchReport:
    """Measure one factored vs one dense vectorized gradient step.

    The dense side is skipped (with a note) when materializing kron(psi, phi)
    would exceed max_vec_bytes. Inputs are seeded and identical across runs.
    """
    if reps < 3:
        raise ValueError("need at least 3 repetitions for a median")
    phi, psi, x, y = bench_inputs(n, alpha, seed)
    m = phi.shape[0]

    def kron_step():
        return x + rho * phi.T @ (y - phi @ x @ psi.T) @ psi

    kron_flops, vec_flops = flops_estimate(n, alpha)
    # Live float64 tensors during the factored step: two factors, scene,
    # measurement, the two-sided product intermediates, and the output.
    kron_bytes = 8 * (2 * (m * n) + 2 * (n * n) + 2 * (m * m) + 2 * (m * n))

    report = BenchReport(
        n=n,
        alpha=alpha,
        reps=reps,
        kron_flops=kron_flops,
        vec_flops=vec_flops,
        kron_seconds=0.0,
        kron_samples=[],
        kron_bytes=kron_bytes,
    )

    vec_bytes = 8 * (m * m * n * n)
    dense_ok = vec_bytes <= max_vec_bytes
    if not dense_ok:
        report.note = (
            f"vectorized side skipped: kron(psi, phi) needs {vec_bytes} bytes, "
            f"cap is {max_vec_bytes}"
        )

    rss_before = _rss_bytes()
    if dense_ok:
        a = np.kron(psi, phi)
        xv = vec(x)
        yv = vec(y)

        def vec_step():
            return xv + rho * a.T @ (yv - a @ xv)

        report.equivalence_error = float(np.max(np.abs(vec(kron_step()) - vec_step())))
        if report.equivalence_error > 1e-5:
            raise AssertionError(
                f"implementations disagree by {report.equivalence_error} before timing"
            )
        report.vec_bytes = vec_bytes + 8 * (2 * n * n + 2 * m * m)
        report.vec_seconds, report.vec_samples = _median_time(vec_step, reps)
    if rss_before is not None:
        after = _rss_bytes()
        if after is not None:
            report.rss_delta_bytes = max(0, after - rss_before)

    report.kron_seconds, report.kron_samples = _median_time(kron_step, reps)
    return report


def _rss_bytes() -> int | None:
    try:
        import psutil
    except ImportError:
        return None
    return psutil.Process().memory_info().rss
