"""Low-rank adapter with a Gaussian variational factor.

A frozen base weight ``w0`` (m x n) is adapted through a rank-r update
``b @ a`` where ``b`` (m x r) is deterministic and trainable while ``a``
(r x n) carries a fully factorized Gaussian posterior with mean ``mean_a``
and standard deviation ``omega = g * g`` element-wise.  The
Bayesianization is deliberately asymmetric: ``b`` starts at zero, so at
initialization every forward pass reproduces the frozen base exactly and
weight sampling adds no noise.

Three forward passes are provided:

* ``forward_mean``       - posterior mean weights, no sampling;
* ``forward_naive_shared`` - one sampled ``a`` shared by the whole batch
  (slow-converging: every example sees the same perturbation);
* ``forward_flipout``    - shared base noise decorrelated across examples
  by per-example sign masks, so each example experiences a
  pseudo-independent weight draw at the cost of one extra low-rank
  product.  Per example i the effective perturbation is
  ``(e * omega) * outer(t_i, s_i)``, which leaves the per-example marginal
  distribution identical to naive independent sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Sampler, ShapeError

__all__ = [
    "VariationalAdapter",
    "FlipoutMasks",
    "sample_flipout_masks",
    "forward_mean",
    "sample_a",
    "forward_flipout",
    "forward_naive_shared",
    "save_adapter",
    "load_adapter",
]

_MAGIC = "bayeslora-adapter"
_VERSION = 1


@dataclass
class VariationalAdapter:
    """Frozen base weight plus the parameters of the low-rank posterior."""

    w0: np.ndarray      # (m, n) frozen base weight
    b: np.ndarray       # (m, r) deterministic low-rank factor
    mean_a: np.ndarray  # (r, n) posterior mean of the a-factor
    g: np.ndarray       # (r, n) std parameter; omega = g * g

    def __post_init__(self) -> None:
        m, n = self.w0.shape
        r = self.b.shape[1]
        if self.b.shape != (m, r):
            raise ShapeError(f"b must be ({m}, r), got {self.b.shape}")
        if self.mean_a.shape != (r, n):
            raise ShapeError(f"mean_a must be ({r}, {n}), got {self.mean_a.shape}")
        if self.g.shape != (r, n):
            raise ShapeError(f"g must be ({r}, {n}), got {self.g.shape}")
        if not (1 <= r < min(m, n)):
            raise ValueError(f"rank must satisfy 1 <= r < min(m, n); got r={r}, m={m}, n={n}")
        for name in ("w0", "b", "mean_a", "g"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def m(self) -> int:
        return self.w0.shape[0]

    @property
    def n(self) -> int:
        return self.w0.shape[1]

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    def omega(self) -> np.ndarray:
        """Element-wise posterior standard deviation, recomputed on demand."""
        return self.g * self.g


@dataclass
class FlipoutMasks:
    """Per-batch sign masks and base noise for one flipout forward pass."""

    s: np.ndarray  # (n, batch) entries in {-1, +1}
    t: np.ndarray  # (batch, r) entries in {-1, +1}
    e: np.ndarray  # (r, n) standard-normal base noise

    def __post_init__(self) -> None:
        if not np.all(np.abs(self.s) == 1.0):
            raise ValueError("s entries must be exactly +/-1")
        if not np.all(np.abs(self.t) == 1.0):
            raise ValueError("t entries must be exactly +/-1")


def sample_flipout_masks(adapter: VariationalAdapter, batch: int, sampler: Sampler) -> FlipoutMasks:
    """Fresh sign masks and base noise for a batch; resample every call."""
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    return FlipoutMasks(
        s=sampler.rademacher(adapter.n, batch),
        t=sampler.rademacher(batch, adapter.rank),
        e=sampler.gaussian(adapter.rank, adapter.n),
    )


def _check_input(adapter: VariationalAdapter, h: np.ndarray) -> None:
    if h.ndim != 2 or h.shape[0] != adapter.n:
        raise ShapeError(f"input must be ({adapter.n}, batch), got {h.shape}")
    if h.shape[1] < 1:
        raise ShapeError("batch size must be >= 1")


def forward_mean(adapter: VariationalAdapter, h: np.ndarray) -> np.ndarray:
    """Deterministic pass with the posterior mean: w0 @ h + b @ mean_a @ h."""
    _check_input(adapter, h)
    return adapter.w0 @ h + adapter.b @ (adapter.mean_a @ h)


def sample_a(adapter: VariationalAdapter, noise: np.ndarray) -> np.ndarray:
    """Reparameterized posterior draw: mean_a + (g*g) * noise."""
    if noise.shape != adapter.mean_a.shape:
        raise ShapeError(f"noise must be {adapter.mean_a.shape}, got {noise.shape}")
    return adapter.mean_a + adapter.omega() * noise


def forward_flipout(adapter: VariationalAdapter, h: np.ndarray, masks: FlipoutMasks) -> np.ndarray:
    """Batched stochastic pass with per-example decorrelated perturbations.

    z = w0 @ h + b @ (mean_a @ h + [(e * omega)(h * s)] * t^T)
    """
    _check_input(adapter, h)
    batch = h.shape[1]
    if masks.s.shape != (adapter.n, batch):
        raise ShapeError(f"s mask must be ({adapter.n}, {batch}), got {masks.s.shape}")
    if masks.t.shape != (batch, adapter.rank):
        raise ShapeError(f"t mask must be ({batch}, {adapter.rank}), got {masks.t.shape}")
    if masks.e.shape != (adapter.rank, adapter.n):
        raise ShapeError(f"e noise must be ({adapter.rank}, {adapter.n}), got {masks.e.shape}")
    perturb = ((masks.e * adapter.omega()) @ (h * masks.s)) * masks.t.T
    return adapter.w0 @ h + adapter.b @ (adapter.mean_a @ h + perturb)


def forward_naive_shared(adapter: VariationalAdapter, h: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Stochastic pass where one sampled ``a`` is shared by the whole batch."""
    _check_input(adapter, h)
    a = sample_a(adapter, noise)
    return adapter.w0 @ h + adapter.b @ (a @ h)


def _format_matrix(a: np.ndarray) -> str:
    return " ".join(float(x).hex() for x in a.ravel(order="C"))


def _parse_matrix(text: str, rows: int, cols: int, name: str) -> np.ndarray:
    values = [float.fromhex(tok) for tok in text.split()]
    if len(values) != rows * cols:
        raise ValueError(f"{name}: expected {rows * cols} entries, got {len(values)}")
    return np.array(values, dtype=np.float64).reshape(rows, cols)


def save_adapter(adapter: VariationalAdapter, path: str) -> None:
    """Write a textual record that round-trips bit-exactly (hex floats)."""
    lines = [
        f"{_MAGIC} {_VERSION}",
        f"dims {adapter.m} {adapter.n} {adapter.rank}",
        "w0 " + _format_matrix(adapter.w0),
        "b " + _format_matrix(adapter.b),
        "mean_a " + _format_matrix(adapter.mean_a),
        "g " + _format_matrix(adapter.g),
    ]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_adapter(path: str) -> VariationalAdapter:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"{_MAGIC} {_VERSION}":
        raise ValueError(f"not a {_MAGIC} v{_VERSION} file: {path}")
    header = lines[1].split()
    if header[0] != "dims" or len(header) != 4:
        raise ValueError(f"malformed dims line in {path}")
    m, n, r = (int(tok) for tok in header[1:])
    fields: dict[str, np.ndarray] = {}
    shapes = {"w0": (m, n), "b": (m, r), "mean_a": (r, n), "g": (r, n)}
    for line in lines[2:6]:
        name, _, payload = line.partition(" ")
        if name not in shapes:
            raise ValueError(f"unexpected field {name!r} in {path}")
        fields[name] = _parse_matrix(payload, *shapes[name], name=name)
    if set(fields) != set(shapes):
        raise ValueError(f"missing fields in {path}")
    return VariationalAdapter(**fields)
