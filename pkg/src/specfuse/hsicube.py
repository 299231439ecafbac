"""Hypercube data model, degradation operators, synthetic scenes and file I/O.

A HyperCube stores reflectance band-sequentially (one full spatial plane
per band, row-major within a plane). The unfolded PixelMatrix view puts
one spectral vector per row, in row-major pixel scan order.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegradationError, DimensionError, GeneratorError, ParseError

HSRC_MAGIC = b"HSRC"
HSRF_MAGIC = b"HSRF"
FORMAT_VERSION = 1


@dataclass
class HyperCube:
    """width x height x bands reflectance volume, float64."""

    width: int
    height: int
    bands: int
    data: np.ndarray  # shape (bands, height, width)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        expected = (self.bands, self.height, self.width)
        if self.data.shape != expected:
            raise DimensionError(
                f"cube data shape {self.data.shape} != (bands, height, width) {expected}"
            )

    def copy(self):
        return HyperCube(self.width, self.height, self.bands, self.data.copy())


@dataclass
class PixelMatrix:
    """pixels x bands matrix; one spectral vector per row."""

    values: np.ndarray  # shape (pixels, bands)
    width: int
    height: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"pixel matrix must be 2-D, got {self.values.ndim}-D")
        if self.values.shape[0] != self.width * self.height:
            raise DimensionError(
                f"pixel count {self.values.shape[0]} != width*height "
                f"{self.width}*{self.height}"
            )

    @property
    def pixels(self):
        return self.values.shape[0]

    @property
    def bands(self):
        return self.values.shape[1]


@dataclass
class SpectralResponse:
    """L x l nonnegative sensor response matrix (HSI bands -> MSI bands)."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DimensionError("spectral response must be a 2-D matrix")
        L, l = self.matrix.shape
        if L <= l:
            raise DimensionError(f"spectral response needs L > l, got {L}x{l}")
        if np.any(self.matrix < 0):
            raise DimensionError("spectral response entries must be nonnegative")
        if np.any(self.matrix.sum(axis=0) <= 0):
            raise DimensionError("every spectral response column needs a positive entry")

    @property
    def hsi_bands(self):
        return self.matrix.shape[0]

    @property
    def msi_bands(self):
        return self.matrix.shape[1]


@dataclass
class SceneSpec:
    """Parameters for the synthetic linear-mixing scene generator."""

    width: int
    height: int
    endmembers: np.ndarray  # (c, L)
    blur_radius: int = 2
    seed: int = 0

    def __post_init__(self):
        self.endmembers = np.asarray(self.endmembers, dtype=np.float64)
        if self.endmembers.ndim != 2:
            raise DimensionError("endmembers must be a c x L matrix")

    @property
    def n_endmembers(self):
        return self.endmembers.shape[0]

    @property
    def bands(self):
        return self.endmembers.shape[1]


def unfold(cube):
    """Cube -> pixels x bands matrix; row p is the spectrum of pixel p."""
    # (bands, height, width) -> (height*width, bands)
    values = cube.data.reshape(cube.bands, -1).T.copy()
    return PixelMatrix(values, cube.width, cube.height)


def fold(m, width=None, height=None):
    """Exact inverse of unfold."""
    width = m.width if width is None else width
    height = m.height if height is None else height
    if m.pixels != width * height:
        raise DimensionError(
            f"cannot fold {m.pixels} pixels into {width}x{height}"
        )
    data = m.values.T.reshape(m.bands, height, width).copy()
    return HyperCube(width, height, m.bands, data)


def block_downsample(cube, sr):
    """Average disjoint sr x sr blocks per band."""
    if sr <= 0:
        raise DimensionError(f"sr factor must be positive, got {sr}")
    if cube.width % sr or cube.height % sr:
        raise DimensionError(
            f"cube {cube.width}x{cube.height} not divisible by sr={sr}"
        )
    w, h = cube.width // sr, cube.height // sr
    d = cube.data.reshape(cube.bands, h, sr, w, sr)
    return HyperCube(w, h, cube.bands, d.mean(axis=(2, 4)))


def block_upsample(cube, sr):
    """Replicate each pixel into an sr x sr block (baseline upsampling)."""
    d = np.repeat(np.repeat(cube.data, sr, axis=1), sr, axis=2)
    return HyperCube(cube.width * sr, cube.height * sr, cube.bands, d)


def apply_srf(m, srf):
    """Project HSI spectra to MSI bands: output = m @ R."""
    if m.bands != srf.hsi_bands:
        raise DimensionError(
            f"pixel matrix has {m.bands} bands, spectral response expects {srf.hsi_bands}"
        )
    return PixelMatrix(m.values @ srf.matrix, m.width, m.height)


def rotate_crop(cube, degrees, crop_area_frac, interpolation="bilinear"):
    """Rotate every band about the cube center, then crop a centered window.

    The window side is floor(dim * sqrt(1 - crop_area_frac)) per dimension,
    so the retained area shrinks by the crop fraction. Samples that fall
    outside the source support are invalid; if any survive the crop, a
    DegradationError asks for a larger crop.
    """
    if not 0 <= crop_area_frac < 1:
        raise DimensionError(f"crop_area_frac must be in [0, 1), got {crop_area_frac}")
    scale = np.sqrt(1.0 - crop_area_frac)
    out_w = int(np.floor(cube.width * scale))
    out_h = int(np.floor(cube.height * scale))
    if out_w < 1 or out_h < 1:
        raise DegradationError("crop removes the whole image")

    theta = np.deg2rad(degrees)
    cx, cy = (cube.width - 1) / 2.0, (cube.height - 1) / 2.0

    # inverse map: destination pixel centers (window centered exactly on the
    # cube center, possibly at half-pixel offsets) back to source coordinates
    xs = np.arange(out_w) - (out_w - 1) / 2.0
    ys = np.arange(out_h) - (out_h - 1) / 2.0
    gx, gy = np.meshgrid(xs, ys)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_x = cos_t * gx + sin_t * gy + cx
    src_y = -sin_t * gx + cos_t * gy + cy

    eps = 1e-9
    invalid = (
        (src_x < -eps)
        | (src_x > cube.width - 1 + eps)
        | (src_y < -eps)
        | (src_y > cube.height - 1 + eps)
    )
    if invalid.any():
        raise DegradationError(
            f"{int(invalid.sum())} cropped pixels fall outside the rotated support; "
            f"increase crop_area_frac above {crop_area_frac}"
        )

    sx = np.clip(src_x, 0, cube.width - 1)
    sy = np.clip(src_y, 0, cube.height - 1)
    if interpolation == "nearest":
        ix = np.rint(sx).astype(int)
        iy = np.rint(sy).astype(int)
        out = cube.data[:, iy, ix]
    elif interpolation == "bilinear":
        x0 = np.clip(np.floor(sx).astype(int), 0, cube.width - 1)
        y0 = np.clip(np.floor(sy).astype(int), 0, cube.height - 1)
        x1 = np.minimum(x0 + 1, cube.width - 1)
        y1 = np.minimum(y0 + 1, cube.height - 1)
        fx = sx - x0
        fy = sy - y0
        d = cube.data
        out = (
            d[:, y0, x0] * (1 - fx) * (1 - fy)
            + d[:, y0, x1] * fx * (1 - fy)
            + d[:, y1, x0] * (1 - fx) * fy
            + d[:, y1, x1] * fx * fy
        )
    else:
        raise DimensionError(f"unknown interpolation '{interpolation}'")
    return HyperCube(out_w, out_h, cube.bands, out)


def min_crop_fraction(degrees):
    """Smallest area fraction to remove so a centered square window of a
    square image rotated by `degrees` contains no out-of-support samples.

    For |theta| <= 45 deg the largest valid window side is
    dim / (cos + sin), so the removed area fraction is 1 - 1/(cos+sin)^2.
    """
    theta = np.deg2rad(abs(degrees) % 90)
    if theta > np.pi / 4:
        theta = np.pi / 2 - theta
    denom = np.cos(theta) + np.sin(theta)
    return 1.0 - 1.0 / (denom * denom)


def _box_blur(plane, radius):
    """Separable box blur with edge clamping (window 2*radius+1)."""
    if radius <= 0:
        return plane
    k = 2 * radius + 1
    padded = np.pad(plane, radius, mode="edge")
    # horizontal then vertical running means
    cs = np.cumsum(padded, axis=1)
    cs = np.concatenate([np.zeros((cs.shape[0], 1)), cs], axis=1)
    h = (cs[:, k:] - cs[:, :-k]) / k
    cs = np.cumsum(h, axis=0)
    cs = np.concatenate([np.zeros((1, cs.shape[1])), cs], axis=0)
    v = (cs[k:, :] - cs[:-k, :]) / k
    return v


def synth_scene(spec):
    """Generate a linear-mixing scene: cube = fold(S @ D).

    Abundances S come from c independent heavy-tailed random fields,
    box-blurred and normalized per pixel to sum to one. Every endmember
    must dominate (> 0.5) somewhere; the draw is retried up to 100 times.
    """
    if spec.n_endmembers < 2:
        raise GeneratorError("need at least 2 endmembers")
    if spec.width < 4 or spec.height < 4:
        raise GeneratorError("scene must be at least 4x4")
    rng = np.random.default_rng(spec.seed)
    c = spec.n_endmembers
    for _ in range(100):
        # heavy-tailed fields so each material dominates some region
        fields = np.exp(3.0 * rng.standard_normal((c, spec.height, spec.width)))
        fields = np.stack([_box_blur(f, spec.blur_radius) for f in fields])
        flat = fields.reshape(c, -1).T  # (pixels, c)
        abund = flat / flat.sum(axis=1, keepdims=True)
        if np.all(abund.max(axis=0) > 0.5):
            break
    else:
        raise GeneratorError(
            "no draw had every endmember dominant after 100 attempts; "
            "reduce blur_radius or endmember count"
        )
    abundances = PixelMatrix(abund, spec.width, spec.height)
    cube = fold(
        PixelMatrix(abund @ spec.endmembers, spec.width, spec.height)
    )
    return cube, abundances


def make_endmembers(c, bands, seed=0, min_angle_deg=5.0):
    """Smooth random nonnegative spectra with pairwise angle > min_angle_deg."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        raw = rng.uniform(0.05, 1.0, size=(c, bands))
        spectra = np.stack([_box_blur(r.reshape(1, -1), 2).ravel() for r in raw])
        norms = np.linalg.norm(spectra, axis=1)
        cosines = (spectra @ spectra.T) / np.outer(norms, norms)
        np.fill_diagonal(cosines, 0.0)
        if np.degrees(np.arccos(np.clip(cosines.max(), -1, 1))) > min_angle_deg:
            return spectra
    raise GeneratorError(f"could not draw {c} endmembers {min_angle_deg} degrees apart")


def make_gaussian_srf(hsi_bands, msi_bands):
    """Synthetic broad-band response: Gaussian integration profiles with
    centers evenly spaced over [0, L-1], sigma = L/(2l), columns sum to 1."""
    L, l = hsi_bands, msi_bands
    centers = np.linspace(0, L - 1, l)
    sigma = L / (2.0 * l)
    idx = np.arange(L)[:, None]
    R = np.exp(-0.5 * ((idx - centers[None, :]) / sigma) ** 2)
    R /= R.sum(axis=0, keepdims=True)
    return SpectralResponse(R)


def zero_mean(m):
    """Subtract the per-band mean over all pixels; returns (centered, mean)."""
    if m.pixels < 1:
        raise DimensionError("zero_mean needs at least one pixel")
    mean = m.values.mean(axis=0)
    centered = PixelMatrix(m.values - mean, m.width, m.height)
    return centered, mean


def add_mean(m, mean):
    mean = np.asarray(mean, dtype=np.float64).ravel()
    if mean.size != m.bands:
        raise DimensionError(f"mean has {mean.size} bands, matrix has {m.bands}")
    return PixelMatrix(m.values + mean, m.width, m.height)


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise ParseError(f"truncated file reading {what}", offset=f.tell() - len(data))
    return data


def store_cube(cube, path):
    with open(path, "wb") as f:
        f.write(HSRC_MAGIC)
        f.write(struct.pack("<BIII", FORMAT_VERSION, cube.width, cube.height, cube.bands))
        f.write(cube.data.astype("<f4").tobytes())


def load_cube(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != HSRC_MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {HSRC_MAGIC!r}", offset=0)
        version, width, height, bands = struct.unpack(
            "<BIII", _read_exact(f, 13, "header")
        )
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported version {version}", offset=4)
        count = width * height * bands
        payload = _read_exact(f, 4 * count, f"{count} float32 values")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return HyperCube(width, height, bands, data.reshape(bands, height, width))


def store_srf(srf, path):
    with open(path, "wb") as f:
        f.write(HSRF_MAGIC)
        f.write(struct.pack("<BII", FORMAT_VERSION, srf.hsi_bands, srf.msi_bands))
        f.write(srf.matrix.astype("<f4").tobytes())


def load_srf(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != HSRF_MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {HSRF_MAGIC!r}", offset=0)
        version, L, l = struct.unpack("<BII", _read_exact(f, 9, "header"))
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported version {version}", offset=4)
        payload = _read_exact(f, 4 * L * l, f"{L * l} float32 values")
    matrix = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(L, l)
    return SpectralResponse(matrix)
