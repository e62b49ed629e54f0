"""Classical tensor-ISTA reconstruction.

Alternates the factored gradient step
    Z_k = X_{k-1} + rho * phi.T @ (Y - phi @ X_{k-1} @ psi.T) @ psi
with a proximal denoiser (elementwise soft threshold or isotropic TV via
Chambolle dual projections), minimizing
    0.5 * ||Y - phi @ X @ psi.T||_F^2 + lam * R(X).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .sensing import FactorPair, adjoint, forward

PROX_KINDS = ("soft_threshold", "tv")


class SolverDivergence(RuntimeError):
    """Raised when the objective becomes NaN/Inf during iteration."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"objective diverged at iteration {iteration}: {value}")
        self.iteration = iteration


@dataclass
class IstaConfig:
    """Step size, regularization, and stopping parameters.

    rho is the gradient step size; when a penalty eta is supplied instead,
    rho is derived as 1/(1+eta) and sigma = sqrt(lam/eta) becomes available
    as the implied denoising noise level. The proximal weight used per
    iteration is rho*lam, the coupling under which the objective decreases
    monotonically for rho <= 1/sigma_max(A)^2.
    """

    rho: float = 1.0
    lam: float = 0.0
    eta: float | None = None
    max_iters: int = 200
    tol: float = 1e-5
    prox: str = "tv"
    tv_iters: int = 20

    def __post_init__(self):
        if self.eta is not None:
            if self.eta <= 0:
                raise ValueError("eta must be positive when given")
            self.rho = 1.0 / (1.0 + self.eta)
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.prox not in PROX_KINDS:
            raise ValueError(f"prox must be one of {PROX_KINDS}, got {self.prox!r}")
        if self.tv_iters < 1:
            raise ValueError("tv_iters must be >= 1")

    @property
    def sigma(self) -> float:
        if self.eta is None:
            raise ValueError("sigma is only defined when eta is set")
        return float(np.sqrt(self.lam / self.eta))


@dataclass
class SolveTrace:
    """Per-iteration objective values and relative changes."""

    objectives: list[float] = field(default_factory=list)
    rel_changes: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.objectives)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "objective", "rel_change"])
            for i, (obj, rel) in enumerate(zip(self.objectives, self.rel_changes), start=1):
                writer.writerow([i, f"{obj:.12g}", f"{rel:.12g}"])


def tgd_step(x: np.ndarray, y: np.ndarray, pair: FactorPair, rho: float) -> np.ndarray:
    """One factored gradient-descent step on the data-fidelity term."""
    residual = y - forward(pair, x)
    return x + rho * adjoint(pair, residual)


def soft_threshold(v: np.ndarray, tau: float) -> np.ndarray:
    """Elementwise sign(v) * max(|v| - tau, 0), the prox of tau*||.||_1."""
    if tau < 0:
        raise ValueError(f"threshold must be >= 0, got {tau}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def _grad2d(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Forward differences, zero at the far boundary (Neumann).
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:-1, :] = u[1:, :] - u[:-1, :]
    gy[:, :-1] = u[:, 1:] - u[:, :-1]
    return gx, gy


def _div2d(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    # Negative adjoint of _grad2d: <grad u, p> = -<u, div p>.
    div = np.zeros_like(px)
    div[0, :] += px[0, :]
    div[1:-1, :] += px[1:-1, :] - px[:-2, :]
    div[-1, :] += -px[-2, :]
    div[:, 0] += py[:, 0]
    div[:, 1:-1] += py[:, 1:-1] - py[:, :-2]
    div[:, -1] += -py[:, -2]
    return div


def tv_isotropic(x: np.ndarray) -> float:
    """Discrete isotropic total variation with forward differences."""
    gx, gy = _grad2d(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.sqrt(gx**2 + gy**2)))


def tv_prox(z: np.ndarray, weight: float, inner_iters: int = 20) -> np.ndarray:
    """Approximate prox of weight*TV_iso at z via Chambolle dual projection.

    Iterates p <- (p + tau*grad(div p - z/weight)) / (1 + tau*|grad(...)|)
    with tau = 0.249 and returns z - weight*div(p). Output is unconstrained.
    """
    if weight < 0:
        raise ValueError(f"tv weight must be >= 0, got {weight}")
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    if weight == 0:
        return z.copy()
    tau = 0.249
    px = np.zeros_like(z)
    py = np.zeros_like(z)
    for _ in range(inner_iters):
        u = _div2d(px, py) - z / weight
        ux, uy = _grad2d(u)
        norm = np.sqrt(ux**2 + uy**2)
        px = (px + tau * ux) / (1.0 + tau * norm)
        py = (py + tau * uy) / (1.0 + tau * norm)
    return z - weight * _div2d(px, py)


def objective(
    x: np.ndarray, y: np.ndarray, pair: FactorPair, lam: float, prox: str = "tv"
) -> float:
    """Data fidelity 0.5*||Y - phi X psi^T||_F^2 plus lam times l1 or TV."""
    residual = y - forward(pair, x)
    with np.errstate(over="ignore"):
        fidelity = 0.5 * float(np.sum(residual**2))
    if lam == 0:
        return fidelity
    if prox == "soft_threshold":
        reg = float(np.sum(np.abs(x)))
    elif prox == "tv":
        reg = tv_isotropic(x)
    else:
        raise ValueError(f"prox must be one of {PROX_KINDS}, got {prox!r}")
    return fidelity + lam * reg


def ista_solve(
    y: np.ndarray, pair: FactorPair, cfg: IstaConfig
) -> tuple[np.ndarray, SolveTrace]:
    """Run tensor ISTA from the adjoint initialization.

    Returns the reconstruction and a trace of objective values and relative
    Frobenius changes. Raises SolverDivergence if the objective leaves the
    finite range.
    """
    x = adjoint(pair, y)
    trace = SolveTrace()
    tau = cfg.rho * cfg.lam
    for k in range(1, cfg.max_iters + 1):
        z = tgd_step(x, y, pair, cfg.rho)
        if cfg.prox == "soft_threshold":
            x_new = soft_threshold(z, tau)
        else:
            x_new = tv_prox(z, tau, cfg.tv_iters) if tau > 0 else z
        if not np.isfinite(x_new).all():
            raise SolverDivergence(k, float("nan"))
        obj = objective(x_new, y, pair, cfg.lam, cfg.prox)
        if not np.isfinite(obj):
            raise SolverDivergence(k, obj)
        denom = max(float(np.linalg.norm(x)), 1e-12)
        rel = float(np.linalg.norm(x_new - x)) / denom
        trace.objectives.append(obj)
        trace.rel_changes.append(rel)
        x = x_new
        if rel < cfg.tol:
            break
    return x, trace
