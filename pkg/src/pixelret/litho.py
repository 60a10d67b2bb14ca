"""Toy lithography forward model.

A mask grid is blurred with a nonnegative unit-sum kernel to form an aerial
intensity image; a constant resist threshold turns intensity into the
printed shape.  Two independent convolution routes are provided (direct
summation and FFT) so one can check the other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .errors import (
    ChecksumError,
    DimMismatch,
    FormatError,
    ParamError,
    RangeError,
    ResolutionMismatch,
)
from .grid import RasterGrid, read_graymap, sha256_bytes, write_graymap

KERNEL_SIDECAR_VERSION = 1


@dataclass
class Kernel:
    """Odd-sided square convolution kernel with nonnegative finite weights.

    px_per_nm ties the kernel sample spacing to grid resolution; convolving
    a grid with a kernel of different resolution is rejected.
    """

    values: np.ndarray = field(repr=False)
    px_per_nm: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ParamError(f"kernel must be square 2D, got shape {v.shape}")
        if v.shape[0] % 2 != 1:
            raise ParamError(f"kernel side must be odd, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ParamError("kernel has non-finite weights")
        if np.any(v < 0):
            raise ParamError("kernel weights must be nonnegative")
        if self.px_per_nm <= 0:
            raise ParamError(f"px_per_nm must be > 0, got {self.px_per_nm}")
        self.values = v

    @property
    def side(self) -> int:
        return self.values.shape[0]

    @property
    def radius_px(self) -> int:
        return self.side // 2

    @property
    def radius_nm(self) -> float:
        return self.radius_px / self.px_per_nm

    def checksum(self) -> str:
        head = f"{self.side}:{self.px_per_nm!r}:".encode()
        return sha256_bytes(head + self.values.tobytes())


def make_gaussian_kernel(sigma_nm: float, radius_nm: float, px_per_nm: float) -> Kernel:
    """Isotropic Gaussian sampled at pixel centers, truncated to a disc of
    radius_nm, normalized to unit sum (so a fully open mask images to 1.0).
    """
    if sigma_nm <= 0:
        raise ParamError(f"sigma_nm must be > 0, got {sigma_nm}")
    if radius_nm <= 0:
        raise ParamError(f"radius_nm must be > 0, got {radius_nm}")
    if px_per_nm <= 0:
        raise ParamError(f"px_per_nm must be > 0, got {px_per_nm}")
    r = int(round(radius_nm * px_per_nm))
    if r < 1:
        raise ParamError("kernel radius rounds to zero pixels")
    coords = np.arange(-r, r + 1, dtype=np.float64) / px_per_nm
    xx, yy = np.meshgrid(coords, coords)
    rr2 = xx * xx + yy * yy
    v = np.exp(-rr2 / (2.0 * sigma_nm * sigma_nm))
    v[rr2 > radius_nm * radius_nm] = 0.0
    return Kernel(v / v.sum(), px_per_nm)


# ---------------------------------------------------------------------------
# Convolution, two routes
# ---------------------------------------------------------------------------

def convolve_direct(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """True 2D convolution by explicit summation over kernel taps.

    Same-size output, zero padding outside the image.  Slow but transform
    free; serves as the independent oracle for convolve_fft.
    """
    img = np.asarray(img, dtype=np.float64)
    ker = np.asarray(kernel, dtype=np.float64)
    if img.ndim != 2 or ker.ndim != 2:
        raise DimMismatch("convolve_direct expects 2D arrays")
    kh, kw = ker.shape
    if kh % 2 != 1 or kw % 2 != 1:
        raise DimMismatch(f"kernel dims must be odd, got {ker.shape}")
    h, w = img.shape
    ch, cw = kh // 2, kw // 2
    padded = np.zeros((h + 2 * ch, w + 2 * cw), dtype=np.float64)
    padded[ch : ch + h, cw : cw + w] = img
    out = np.zeros((h, w), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            wgt = ker[u, v]
            if wgt == 0.0:
                continue
            out += wgt * padded[2 * ch - u : 2 * ch - u + h, 2 * cw - v : 2 * cw - v + w]
    return out


def convolve_fft(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """True 2D convolution via FFT, same-size output, zero padding."""
    img = np.asarray(img, dtype=np.float64)
    ker = np.asarray(kernel, dtype=np.float64)
    if img.ndim != 2 or ker.ndim != 2:
        raise DimMismatch("convolve_fft expects 2D arrays")
    if ker.shape[0] % 2 != 1 or ker.shape[1] % 2 != 1:
        raise DimMismatch(f"kernel dims must be odd, got {ker.shape}")
    return fftconvolve(img, ker, mode="same")


def convolve(img: np.ndarray, kernel: np.ndarray, method: str = "auto") -> np.ndarray:
    """Dispatch between the two routes; "auto" picks FFT except for tiny
    inputs where direct summation is cheaper than transform setup.
    """
    if method == "direct":
        return convolve_direct(img, kernel)
    if method == "fft":
        return convolve_fft(img, kernel)
    if method != "auto":
        raise ParamError(f"unknown convolution method {method!r}")
    if img.size * np.asarray(kernel).size <= 4096:
        return convolve_direct(img, kernel)
    return convolve_fft(img, kernel)


# ---------------------------------------------------------------------------
# Forward model
# ---------------------------------------------------------------------------

@dataclass
class LithoConfig:
    """Parameters of the toy projection + resist model."""

    sigma_nm: float = 25.0
    radius_nm: float = 75.0
    resist_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.resist_threshold < 1.0:
            raise ParamError(
                f"resist_threshold must be in (0, 1), got {self.resist_threshold}"
            )
        if self.radius_nm < self.sigma_nm:
            raise ParamError("kernel radius below one sigma truncates too much")

    def kernel(self, px_per_nm: float) -> Kernel:
        return make_gaussian_kernel(self.sigma_nm, self.radius_nm, px_per_nm)


def aerial_image(mask: RasterGrid, kernel: Kernel, method: str = "auto") -> RasterGrid:
    """Blur a mask grid (values in [0, 1]) into an intensity grid.

    Output shares the mask geometry; intensities are clipped to [0, 1] to
    absorb FFT round-off at the 1e-13 level.
    """
    if kernel.px_per_nm != mask.px_per_nm:
        raise ResolutionMismatch(
            f"kernel at {kernel.px_per_nm} px/nm, mask at {mask.px_per_nm}"
        )
    v = mask.values
    if v.min() < 0.0 or v.max() > 1.0:
        raise RangeError("mask values must lie in [0, 1]")
    out = convolve(v.astype(np.float64), kernel.values, method)
    return mask.with_values(np.clip(out, 0.0, 1.0))


def print_image(aerial: RasterGrid, resist_threshold: float) -> RasterGrid:
    """Constant-threshold resist: 1 where intensity >= threshold."""
    if not 0.0 < resist_threshold < 1.0:
        raise ParamError(f"resist_threshold must be in (0, 1), got {resist_threshold}")
    return aerial.with_values((aerial.values >= resist_threshold).astype(np.uint8))


def simulate_print(mask: RasterGrid, cfg: LithoConfig, kernel: Kernel | None = None) -> RasterGrid:
    """Aerial image then resist threshold in one step."""
    k = kernel if kernel is not None else cfg.kernel(mask.px_per_nm)
    return print_image(aerial_image(mask, k), cfg.resist_threshold)


# ---------------------------------------------------------------------------
# Kernel inspection export
# ---------------------------------------------------------------------------

def export_kernel(kernel: Kernel, path: str | Path) -> None:
    """Write a kernel as a peak-normalized graymap plus a JSON sidecar
    (<path>.json) holding the exact peak scale and resolution.

    The graymap is 8-bit and therefore lossy; it is an inspection artifact,
    not a storage format for computation.
    """
    path = Path(path)
    peak = float(kernel.values.max())
    if peak <= 0:
        raise ParamError("cannot export an all-zero kernel")
    g = RasterGrid(
        kernel.side, kernel.side,
        (-kernel.radius_px / kernel.px_per_nm, -kernel.radius_px / kernel.px_per_nm),
        kernel.px_per_nm, kernel.values / peak,
    )
    write_graymap(g, path)
    sidecar = {
        "format": "kernel-graymap",
        "version": KERNEL_SIDECAR_VERSION,
        "px_per_nm": kernel.px_per_nm,
        "side": kernel.side,
        "peak": peak,
        "payload_sha256": sha256_bytes(path.read_bytes()),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def import_kernel(path: str | Path) -> Kernel:
    """Rebuild a kernel from export_kernel output (8-bit precision)."""
    path = Path(path)
    try:
        sidecar = json.loads(Path(str(path) + ".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable kernel sidecar {path}.json: {exc}") from exc
    if sidecar.get("format") != "kernel-graymap":
        raise FormatError(f"{path}.json is not a kernel sidecar")
    if sidecar.get("version") != KERNEL_SIDECAR_VERSION:
        raise FormatError(f"unsupported kernel sidecar version {sidecar.get('version')}")
    try:
        px_per_nm = sidecar["px_per_nm"]
        side = sidecar["side"]
        peak = sidecar["peak"]
        digest = sidecar["payload_sha256"]
    except KeyError as exc:
        raise FormatError(f"kernel sidecar missing field {exc}") from exc
    if sha256_bytes(path.read_bytes()) != digest:
        raise ChecksumError(f"kernel graymap {path} does not match its sidecar digest")
    g = read_graymap(path, origin=(0.0, 0.0), px_per_nm=px_per_nm)
    if g.width != side or g.height != side:
        raise FormatError(f"kernel graymap is {g.width}x{g.height}, sidecar says {side}")
    return Kernel(g.values * peak, px_per_nm)
