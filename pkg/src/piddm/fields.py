"""Grid geometry, field containers, flat layouts, masks and random streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid. ``n_t == 1`` marks a static problem.

    For two-dimensional static problems (Darcy, Poisson) the "time" axis is
    used as the second spatial axis.
    """

    n_x: int
    n_t: int = 1
    extent_x: float = 1.0
    extent_t: float = 1.0

    def __post_init__(self):
        if self.n_x < 3 or self.n_t < 1:
            raise ValueError(f"grid too small: n_x={self.n_x}, n_t={self.n_t}")
        if not (self.extent_x > 0 and self.extent_t > 0):
            raise ValueError("grid extents must be positive")

    @property
    def h_x(self) -> float:
        return self.extent_x / (self.n_x - 1)

    @property
    def h_t(self) -> float:
        if self.n_t == 1:
            return float("inf")
        return self.extent_t / (self.n_t - 1)

    @property
    def size(self) -> int:
        return self.n_x * self.n_t

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_t, self.n_x)

    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.extent_x, self.n_x)

    def t(self) -> np.ndarray:
        if self.n_t == 1:
            return np.zeros(1)
        return np.linspace(0.0, self.extent_t, self.n_t)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, T)`` arrays of shape ``(n_t, n_x)``."""
        return np.meshgrid(self.x(), self.t())

    def refined(self) -> "GridSpec":
        """Grid with both spacings halved."""
        n_t = self.n_t if self.n_t == 1 else 2 * self.n_t - 1
        return GridSpec(2 * self.n_x - 1, n_t, self.extent_x, self.extent_t)


@dataclass(frozen=True)
class Field:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size != self.grid.size:
            raise ValueError(f"field has {values.size} values, grid needs {self.grid.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", values)

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


@dataclass(frozen=True)
class Layout:
    """Describes how a joint sample ``(u, a)`` is packed into a flat vector.

    ``coef`` is ``"field"`` when ``a`` lives on the same grid as ``u`` and
    ``"scalar"`` when ``a`` is a short parameter vector of length ``n_coef``
    stored as a trailing block.
    """

    grid: GridSpec
    coef: str = "scalar"
    n_coef: int = 1

    def __post_init__(self):
        if self.coef not in ("field", "scalar"):
            raise ValueError(f"unknown coefficient kind {self.coef!r}")
        if self.coef == "field":
            object.__setattr__(self, "n_coef", self.grid.size)
        elif self.n_coef < 1:
            raise ValueError("scalar layouts need at least one coefficient")

    @property
    def n_u(self) -> int:
        return self.grid.size

    @property
    def width(self) -> int:
        return self.n_u + self.n_coef

    @property
    def u_slice(self) -> slice:
        return slice(0, self.n_u)

    @property
    def a_slice(self) -> slice:
        return slice(self.n_u, self.width)


@dataclass(frozen=True)
class JointSample:
    u: Field
    a: Field | np.ndarray
    layout: Layout = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if isinstance(self.a, Field):
            if self.a.grid != self.u.grid:
                raise ValueError("u and a must share a grid")
            layout = Layout(self.u.grid, "field")
        else:
            a = np.atleast_1d(np.asarray(self.a, dtype=float))
            if not np.all(np.isfinite(a)):
                raise ValueError("coefficients must be finite")
            object.__setattr__(self, "a", a)
            layout = Layout(self.u.grid, "scalar", a.size)
        if self.layout is not None and self.layout != layout:
            raise ValueError("layout does not match sample contents")
        object.__setattr__(self, "layout", layout)


def flatten(x: JointSample) -> np.ndarray:
    """Pack ``u`` (time-major) followed by ``a`` into one vector."""
    a = x.a.values if isinstance(x.a, Field) else x.a
    return np.concatenate([x.u.values, a])


def unflatten(vec: np.ndarray, layout: Layout) -> JointSample:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (layout.width,):
        raise ValueError(f"expected vector of length {layout.width}, got shape {vec.shape}")
    u = Field(layout.grid, vec[layout.u_slice].copy())
    a_vals = vec[layout.a_slice].copy()
    a = Field(layout.grid, a_vals) if layout.coef == "field" else a_vals
    return JointSample(u, a)


def stack(samples) -> np.ndarray:
    """Flatten a sequence of joint samples into a ``(n, width)`` array."""
    return np.stack([flatten(s) for s in samples])


class RngSource:
    """Seeded, counter-based random stream.

    Uniforms come from the Philox counter generator; normals are produced by
    Box-Muller on those uniforms so a seed gives the same stream everywhere.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    @property
    def counter(self) -> int:
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return low + (high - low) * self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def child(self, name: str | int) -> "RngSource":
        """Independent sub-stream derived from this seed and a name."""
        key = zlib.crc32(str(name).encode())
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, key])
        return RngSource(int(seq.generate_state(1, dtype=np.uint64)[0]))


def as_rng(rng) -> RngSource:
    if isinstance(rng, RngSource):
        return rng
    return RngSource(0 if rng is None else int(rng))


def sample_noise(shape, rng: RngSource) -> np.ndarray:
    """I.i.d. standard normal draws."""
    dims = (shape,) if np.isscalar(shape) else tuple(shape)
    if any(int(d) <= 0 for d in dims) or len(dims) == 0:
        raise ValueError(f"noise shape must be positive, got {shape}")
    return rng.normal(dims)


def apply_mask(x, obs, mask) -> np.ndarray:
    """Observed entries where ``mask == 1``, ``x`` elsewhere."""
    x = np.asarray(x, dtype=float)
    obs = np.asarray(obs, dtype=float)
    mask = np.asarray(mask)
    if x.shape[-1] != obs.shape[-1] or x.shape[-1] != mask.shape[-1]:
        raise ValueError("x, obs and mask must have the same length")
    return np.where(mask.astype(bool), obs, x)


def validate_mask(mask, width: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=float).reshape(-1)
    if mask.size != width:
        raise ValueError(f"mask length {mask.size} != sample width {width}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    return mask
