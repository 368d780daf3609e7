"""Classical enhancement filters for thermal frames and the sequential chain.

Every filter takes and returns an :class:`ImageBuffer` holding integer
samples (``uint8`` or ``uint16``). Arithmetic happens in float64 and results
are rounded back to the sample grid, so applying a chain stage by stage is
identical to applying it in one go.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage


class FilterError(ValueError):
    pass


class ChainStageError(FilterError):
    def __init__(self, index: int, kind: str, cause: Exception):
        super().__init__(f"stage {index} ({kind}): {cause}")
        self.index = index
        self.kind = kind
        self.cause = cause


@dataclass
class ImageBuffer:
    data: np.ndarray
    depth: int = 8

    def __post_init__(self):
        data = np.asarray(self.data)
        if self.depth not in (8, 16):
            raise FilterError(f"unsupported bit depth {self.depth}")
        if data.ndim != 2:
            raise FilterError(f"expected a single-channel raster, got shape {data.shape}")
        dtype = np.uint8 if self.depth == 8 else np.uint16
        if data.dtype != dtype:
            if np.issubdtype(data.dtype, np.floating):
                data = np.rint(data)
            if data.size and (data.min() < 0 or data.max() > self.max_value):
                raise FilterError(f"samples outside [0, {self.max_value}]")
            data = data.astype(dtype)
        self.data = data

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def max_value(self) -> int:
        return (1 << self.depth) - 1

    @classmethod
    def from_float(cls, values: np.ndarray, depth: int) -> "ImageBuffer":
        top = (1 << depth) - 1
        return cls(np.clip(np.rint(values), 0, top), depth)

    def as_float(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ImageBuffer)
            and self.depth == other.depth
            and np.array_equal(self.data, other.data)
        )


def read_image(path: str | Path) -> ImageBuffer:
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise OSError(f"cannot read image {path}")
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_BGR2GRAY)
    if data.dtype == np.uint8:
        return ImageBuffer(data, 8)
    if data.dtype == np.uint16:
        return ImageBuffer(data, 16)
    raise OSError(f"{path}: unsupported sample type {data.dtype}")


def write_image(img: ImageBuffer, path: str | Path) -> None:
    if not cv2.imwrite(str(path), img.data):
        raise OSError(f"cannot write image {path}")


def _require_nonempty(img: ImageBuffer) -> None:
    if img.data.size == 0:
        raise FilterError("zero-area image")


def to_8bit(img: ImageBuffer) -> ImageBuffer:
    """Min-max normalization to 8 bits; 8-bit input is returned unchanged."""
    if img.depth == 8:
        return img
    _require_nonempty(img)
    v = img.as_float()
    lo, hi = v.min(), v.max()
    if hi == lo:
        return ImageBuffer.from_float(np.full_like(v, lo * 255.0 / img.max_value), 8)
    return ImageBuffer.from_float((v - lo) * (255.0 / (hi - lo)), 8)


# ---------------------------------------------------------------------------
# Contrast
# ---------------------------------------------------------------------------

def histogram_equalize(img: ImageBuffer, clip_threshold: float = 10000) -> ImageBuffer:
    """Global equalization from a clipped histogram; always returns 8 bits.

    Bins holding more than ``clip_threshold`` pixels count as exactly
    ``clip_threshold`` in the cumulative distribution.
    """
    _require_nonempty(img)
    if clip_threshold <= 0:
        raise FilterError("clip_threshold must be positive")
    levels = img.max_value + 1
    hist = np.bincount(img.data.ravel(), minlength=levels).astype(np.float64)
    hist = np.minimum(hist, clip_threshold)
    cdf = np.cumsum(hist)
    present = np.flatnonzero(hist)
    cdf_min = cdf[present[0]]
    span = cdf[-1] - cdf_min
    if span <= 0:
        # single intensity: keep its relative level
        lut = np.arange(levels, dtype=np.float64) * (255.0 / img.max_value)
    else:
        lut = (cdf - cdf_min) * (255.0 / span)
    return ImageBuffer.from_float(lut[img.data], 8)


def _clahe_lut(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    n = tile.size
    clip = max(clip_limit * n / 256.0, 1.0)
    excess = np.maximum(hist - clip, 0.0).sum()
    hist = np.minimum(hist, clip) + excess / 256.0
    return np.cumsum(hist) * (255.0 / n)


def clahe_tile_luts(img8: np.ndarray, tile_grid: int, clip_limit: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-tile mappings plus tile-row and tile-column boundaries.

    The image is reflect-padded on the bottom and right to a multiple of the
    grid so every tile holds the same number of pixels.
    """
    h, w = img8.shape
    ph, pw = -(-h // tile_grid) * tile_grid, -(-w // tile_grid) * tile_grid
    img8 = np.pad(img8, ((0, ph - h), (0, pw - w)), mode="reflect")
    rows = np.arange(tile_grid + 1) * (ph // tile_grid)
    cols = np.arange(tile_grid + 1) * (pw // tile_grid)
    luts = np.empty((tile_grid, tile_grid, 256))
    for i in range(tile_grid):
        for j in range(tile_grid):
            luts[i, j] = _clahe_lut(img8[rows[i]: rows[i + 1], cols[j]: cols[j + 1]], clip_limit)
    return luts, rows, cols


def clahe(img: ImageBuffer, tile_grid: int = 8, clip_limit: float = 2.0) -> ImageBuffer:
    """Contrast-limited adaptive equalization on a ``tile_grid`` x ``tile_grid`` grid.

    Non-8-bit input is min-max normalized first. Mappings of the four nearest
    tile centers are blended bilinearly.
    """
    _require_nonempty(img)
    if tile_grid < 1:
        raise FilterError("tile_grid must be >= 1")
    if clip_limit <= 0:
        raise FilterError("clip_limit must be positive")
    src = to_8bit(img).data
    h, w = src.shape
    if tile_grid > min(h, w):
        tile_grid = 1
    luts, rows, cols = clahe_tile_luts(src, tile_grid, clip_limit)
    cy = (rows[:-1] + rows[1:] - 1) / 2.0
    cx = (cols[:-1] + cols[1:] - 1) / 2.0

    def axis_weights(coords, centers):
        idx = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, len(centers) - 1)
        nxt = np.minimum(idx + 1, len(centers) - 1)
        span = np.where(nxt > idx, centers[nxt] - centers[idx], 1.0)
        frac = np.clip((coords - centers[idx]) / span, 0.0, 1.0)
        frac = np.where(nxt > idx, frac, 0.0)
        return idx, nxt, frac

    r0, r1, fy = axis_weights(np.arange(h, dtype=float), cy)
    c0, c1, fx = axis_weights(np.arange(w, dtype=float), cx)
    R0, C0 = np.meshgrid(r0, c0, indexing="ij")
    R1, C1 = np.meshgrid(r1, c1, indexing="ij")
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    out = (
        (1 - FY) * (1 - FX) * luts[R0, C0, src]
        + (1 - FY) * FX * luts[R0, C1, src]
        + FY * (1 - FX) * luts[R1, C0, src]
        + FY * FX * luts[R1, C1, src]
    )
    return ImageBuffer.from_float(out, 8)


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------

def median_filter(img: ImageBuffer, kernel: int = 3) -> ImageBuffer:
    _require_nonempty(img)
    if kernel < 1 or kernel % 2 == 0:
        raise FilterError(f"median kernel must be odd and >= 1, got {kernel}")
    return ImageBuffer(ndimage.median_filter(img.data, size=kernel, mode="nearest"), img.depth)


def bilateral_filter(
    img: ImageBuffer, diameter: int = 4, sigma_spatial: float = 35.0, sigma_range: float | None = None
) -> ImageBuffer:
    """Edge-preserving average with Gaussian spatial and intensity weights.

    The window covers offsets within ``diameter // 2`` pixels (a disc);
    borders replicate.
    """
    _require_nonempty(img)
    if diameter < 1:
        raise FilterError("diameter must be >= 1")
    sigma_range = sigma_spatial if sigma_range is None else sigma_range
    if sigma_spatial <= 0 or sigma_range <= 0:
        raise FilterError("bilateral sigmas must be positive")
    r = max(diameter // 2, 1) if diameter > 1 else 0
    f = img.as_float()
    if r == 0:
        return img
    pad = np.pad(f, r, mode="edge")
    h, w = f.shape
    num = np.zeros_like(f)
    den = np.zeros_like(f)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx * dx + dy * dy > r * r:
                continue
            nb = pad[r + dy: r + dy + h, r + dx: r + dx + w]
            wgt = np.exp(-(dx * dx + dy * dy) / (2 * sigma_spatial**2) - (nb - f) ** 2 / (2 * sigma_range**2))
            num += wgt * nb
            den += wgt
    return ImageBuffer.from_float(num / den, img.depth)


def bandpass_response(values: np.ndarray, radius_low: float, radius_high: float) -> np.ndarray:
    """Unclamped output of the radial binary-mask frequency filter.

    Radii are in cycles per image measured from the centered DC term.
    """
    h, w = values.shape
    spec = np.fft.fftshift(np.fft.fft2(values))
    yy, xx = np.mgrid[0:h, 0:w]
    radius = np.hypot(yy - h // 2, xx - w // 2)
    mask = (radius >= radius_low) & (radius <= radius_high)
    return np.real(np.fft.ifft2(np.fft.ifftshift(spec * mask)))


def bandpass_filter(img: ImageBuffer, radius_low: float = 0.0, radius_high: float = 87.0) -> ImageBuffer:
    _require_nonempty(img)
    if not (0 <= radius_low < radius_high):
        raise FilterError(f"need 0 <= radius_low < radius_high, got {radius_low}, {radius_high}")
    return ImageBuffer.from_float(bandpass_response(img.as_float(), radius_low, radius_high), img.depth)


def _grad(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _div(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`_grad`."""
    d = np.zeros_like(px)
    d[:, 0] = px[:, 0]
    d[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    d[:, -1] = -px[:, -2]
    d[0, :] += py[0, :]
    d[1:-1, :] += py[1:-1, :] - py[:-2, :]
    d[-1, :] += -py[-2, :]
    return d


def rof_energy(u: np.ndarray, f: np.ndarray, weight: float) -> float:
    gx, gy = _grad(u)
    return float(0.5 * np.sum((u - f) ** 2) + weight * np.sum(np.sqrt(gx**2 + gy**2)))


def chambolle_tv(
    f: np.ndarray, weight: float, max_iters: int = 100, tol: float = 1e-4, step: float = 0.248,
    energies: list | None = None,
) -> np.ndarray:
    """Dual projection iteration for the ROF model on a float array.

    Stops when the largest dual-variable update falls below ``tol``. When
    ``energies`` is a list, the ROF energy after each iteration is appended.
    """
    if f.shape[0] < 2 or f.shape[1] < 2:
        return f.copy()
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    u = f.copy()
    for _ in range(max_iters):
        gx, gy = _grad(_div(px, py) - f / weight)
        norm = 1.0 + step * np.sqrt(gx**2 + gy**2)
        nx = (px + step * gx) / norm
        ny = (py + step * gy) / norm
        change = max(np.abs(nx - px).max(), np.abs(ny - py).max())
        px, py = nx, ny
        u = f - weight * _div(px, py)
        if energies is not None:
            energies.append(rof_energy(u, f, weight))
        if change < tol:
            break
    return u


def chambolle_tv_denoise(img: ImageBuffer, weight: float = 4.0, max_iters: int = 100, tol: float = 1e-4) -> ImageBuffer:
    """Total-variation denoising; ``weight`` is in the image's own intensity units."""
    _require_nonempty(img)
    if weight <= 0:
        raise FilterError("weight must be positive")
    if max_iters < 1:
        raise FilterError("max_iters must be >= 1")
    return ImageBuffer.from_float(chambolle_tv(img.as_float(), weight, max_iters, tol), img.depth)


# ---------------------------------------------------------------------------
# Chain
# ---------------------------------------------------------------------------

class FilterKind(str, enum.Enum):
    HIST_EQ = "hist_eq"
    CLAHE = "clahe"
    MEDIAN = "median"
    BILATERAL = "bilateral"
    BANDPASS = "bandpass"
    CHAMBOLLE_TV = "chambolle_tv"

    @classmethod
    def parse(cls, name: str) -> "FilterKind":
        key = name.strip().lower().replace("-", "_")
        aliases = {"histeq": "hist_eq", "chambolletv": "chambolle_tv", "chambolle": "chambolle_tv", "tv": "chambolle_tv"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise FilterError(f"unknown filter kind {name!r}") from None


_FILTERS = {
    FilterKind.HIST_EQ: histogram_equalize,
    FilterKind.CLAHE: clahe,
    FilterKind.MEDIAN: median_filter,
    FilterKind.BILATERAL: bilateral_filter,
    FilterKind.BANDPASS: bandpass_filter,
    FilterKind.CHAMBOLLE_TV: chambolle_tv_denoise,
}

DEFAULT_PARAMS: dict[FilterKind, dict[str, float]] = {
    FilterKind.HIST_EQ: {"clip_threshold": 10000},
    FilterKind.CLAHE: {"tile_grid": 8, "clip_limit": 2.0},
    FilterKind.MEDIAN: {"kernel": 3},
    FilterKind.BILATERAL: {"diameter": 4, "sigma_spatial": 35.0, "sigma_range": 35.0},
    FilterKind.BANDPASS: {"radius_low": 0.0, "radius_high": 87.0},
    FilterKind.CHAMBOLLE_TV: {"weight": 4.0, "max_iters": 100, "tol": 1e-4},
}

_INT_PARAMS = {"tile_grid", "kernel", "diameter", "max_iters"}


@dataclass
class FilterSpec:
    kind: FilterKind
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = FilterKind.parse(self.kind) if isinstance(self.kind, str) else FilterKind(self.kind)
        defaults = DEFAULT_PARAMS[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise FilterError(f"{self.kind.value}: unknown parameters {sorted(unknown)}")
        merged = dict(defaults)
        if self.kind is FilterKind.BILATERAL and "sigma_range" not in self.params and "sigma_spatial" in self.params:
            merged["sigma_range"] = self.params["sigma_spatial"]
        merged.update(self.params)
        self.params = {k: (int(v) if k in _INT_PARAMS else float(v)) for k, v in merged.items()}

    def __call__(self, img: ImageBuffer) -> ImageBuffer:
        return _FILTERS[self.kind](img, **self.params)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "FilterSpec":
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, d)


@dataclass
class FilterChain:
    stages: list[FilterSpec] = field(default_factory=list)

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.stages]

    @classmethod
    def from_list(cls, items: list[dict]) -> "FilterChain":
        return cls([FilterSpec.from_dict(d) for d in items])

    def describe(self) -> str:
        return " + ".join(s.kind.value for s in self.stages) or "identity"


def default_chain() -> FilterChain:
    return FilterChain(
        [
            FilterSpec(FilterKind.CHAMBOLLE_TV, {"weight": 4.0}),
            FilterSpec(FilterKind.HIST_EQ, {"clip_threshold": 10000}),
            FilterSpec(FilterKind.MEDIAN, {"kernel": 3}),
        ]
    )


def apply_chain(chain: FilterChain, img: ImageBuffer) -> ImageBuffer:
    """Apply stages left to right; a non-empty chain always ends in 8 bits."""
    if not chain.stages:
        return img
    out = img
    for i, stage in enumerate(chain.stages):
        try:
            out = stage(out)
        except FilterError as exc:
            raise ChainStageError(i, stage.kind.value, exc) from exc
    return to_8bit(out)
