"""Measurement-matrix construction and the Kronecker-factored forward model.

A scene X (n_r x n_c) is compressed along both axes by a pair of small
matrices: Y = phi @ X @ psi.T with phi (m_r x n_r) and psi (m_c x n_c).
The equivalent vectorized system uses the dense matrix A = kron(psi, phi),
which `kron_expand` materializes for oracle checks only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEMES = ("hadamard_cc", "learnable", "custom")

# Hard ceiling for kron_expand; the whole point of the factored model is
# never to build A at production scale.
KRON_MAX_ELEMENTS = 2**27


@dataclass(frozen=True)
class FactorPair:
    """The two measurement matrices plus construction metadata.

    Attributes:
        phi: Row-axis matrix, shape (m_r, n_r) with m_r <= n_r.
        psi: Column-axis matrix, shape (m_c, n_c) with m_c <= n_c.
        scheme: One of 'hadamard_cc', 'learnable', 'custom'.
    """

    phi: np.ndarray
    psi: np.ndarray
    scheme: str = "custom"

    def __post_init__(self):
        phi = np.array(self.phi, dtype=np.float64)
        psi = np.array(self.psi, dtype=np.float64)
        phi.flags.writeable = False
        psi.flags.writeable = False
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "psi", psi)
        if phi.ndim != 2 or psi.ndim != 2:
            raise ValueError("factor matrices must be 2-D")
        if phi.shape[0] > phi.shape[1] or psi.shape[0] > psi.shape[1]:
            raise ValueError(
                f"factors must be wide or square, got phi {phi.shape}, psi {psi.shape}"
            )
        if not (np.isfinite(phi).all() and np.isfinite(psi).all()):
            raise ValueError("factor matrices must be finite")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.phi.shape[1], self.psi.shape[1])

    @property
    def measurement_shape(self) -> tuple[int, int]:
        return (self.phi.shape[0], self.psi.shape[0])

    @property
    def sampling_ratio(self) -> float:
        m_r, n_r = self.phi.shape
        m_c, n_c = self.psi.shape
        return (m_r * m_c) / (n_r * n_c)


def sylvester_hadamard(order: int) -> np.ndarray:
    """Build the +-1 Hadamard matrix of a power-of-two order.

    Uses the doubling recursion H_2n = [[H, H], [H, -H]] starting from [[1]],
    so H @ H.T = order * I.
    """
    if order < 1 or (order & (order - 1)) != 0:
        raise ValueError(f"Hadamard order must be a power of two, got {order}")
    h = np.ones((1, 1), dtype=np.float64)
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    return h


def sequency_order(h: np.ndarray) -> np.ndarray:
    """Permutation sorting Hadamard rows by sign-transition count.

    Rows with fewer transitions come first (low spatial frequency first);
    ties keep their original order.
    """
    h = np.asarray(h)
    transitions = np.count_nonzero(np.diff(np.sign(h), axis=1), axis=1)
    return np.argsort(transitions, kind="stable")


def build_factor_pair(
    n_r: int,
    n_c: int,
    m_r: int,
    m_c: int,
    scheme: str = "hadamard_cc",
    seed: int | None = None,
) -> FactorPair:
    """Construct a factor pair for an n_r x n_c scene and m_r x m_c measurement.

    For 'hadamard_cc' each factor keeps the first m sequency-ordered rows of
    the order-n Hadamard matrix, scaled by 1/sqrt(n) so a square factor is
    orthonormal. 'learnable' returns the same matrices as an initialization
    for trainable factors. The seed is accepted for interface stability; the
    construction is deterministic.
    """
    del seed
    if scheme not in ("hadamard_cc", "learnable"):
        raise ValueError(f"build_factor_pair supports hadamard_cc/learnable, got {scheme!r}")
    if not (1 <= m_r <= n_r and 1 <= m_c <= n_c):
        raise ValueError(
            f"need 1 <= m <= n per axis, got rows {m_r}/{n_r}, cols {m_c}/{n_c}"
        )

    def factor(n: int, m: int) -> np.ndarray:
        h = sylvester_hadamard(n)
        rows = sequency_order(h)[:m]
        return h[rows] / np.sqrt(n)

    return FactorPair(phi=factor(n_r, m_r), psi=factor(n_c, m_c), scheme=scheme)


def _check_image(pair: FactorPair, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != pair.image_shape:
        raise ValueError(f"image shape {x.shape} does not match factors {pair.image_shape}")
    if not np.isfinite(x).all():
        raise ValueError("image contains non-finite entries")
    return x


def _check_measurement(pair: FactorPair, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != pair.measurement_shape:
        raise ValueError(
            f"measurement shape {y.shape} does not match factors {pair.measurement_shape}"
        )
    if not np.isfinite(y).all():
        raise ValueError("measurement contains non-finite entries")
    return y


def forward(pair: FactorPair, x: np.ndarray) -> np.ndarray:
    """Factored measurement Y = phi @ X @ psi.T."""
    x = _check_image(pair, x)
    return pair.phi @ x @ pair.psi.T


def adjoint(pair: FactorPair, y: np.ndarray) -> np.ndarray:
    """Back-projection X0 = phi.T @ Y @ psi, the adjoint of `forward`."""
    y = _check_measurement(pair, y)
    return pair.phi.T @ y @ pair.psi


def kron_expand(pair: FactorPair, max_elements: int = KRON_MAX_ELEMENTS) -> np.ndarray:
    """Materialize the dense equivalent A = kron(psi, phi).

    With column-stacking vectorization, vec(forward(X)) = A @ vec(X).
    Oracle use only; refuses to allocate beyond max_elements entries.
    """
    m_r, n_r = pair.phi.shape
    m_c, n_c = pair.psi.shape
    elements = (m_r * m_c) * (n_r * n_c)
    if elements > max_elements:
        raise ValueError(
            f"kron_expand would allocate {elements} elements, over the limit {max_elements}"
        )
    return np.kron(pair.psi, pair.phi)


def vec(x: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization matching kron_expand's convention."""
    return np.asarray(x).reshape(-1, order="F")


def unvec(v: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of `vec`."""
    return np.asarray(v).reshape(shape, order="F")


def add_noise(y: np.ndarray, sigma: float, seed: int | None = None) -> np.ndarray:
    """Additive i.i.d. Gaussian noise with standard deviation sigma."""
    if sigma < 0:
        raise ValueError(f"noise std must be >= 0, got {sigma}")
    y = np.asarray(y, dtype=np.float64)
    if sigma == 0:
        return y.copy()
    rng = np.random.default_rng(seed)
    return y + rng.normal(0.0, sigma, size=y.shape)
