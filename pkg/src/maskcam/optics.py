"""Wave-optics core: spherical illumination, bandlimited angular-spectrum
propagation, programmable-mask rasterization, and intensity-PSF synthesis.

Conventions
-----------
* Spatial grids put the optical axis at index ``(H//2, W//2)``: the sample at
  index ``(i, j)`` sits at physical coordinate ``((i - H//2)*pitch_y,
  (j - W//2)*pitch_x)`` in meters.
* Frequency grids follow the DFT layout (``np.fft.fftfreq``), cycles/meter.
* Propagation is a pure spectral filter on the unpadded grid (periodic
  boundary); the aperture crop keeps energy away from the frame edge.
* The transfer function is phase-only exp(j*(2*pi/wl)*d2*sqrt(1-||wl*u||^2))
  inside the per-axis window |u| <= sqrt((d2/S)^2+1)/wl and inside the
  propagating circle ||wl*u|| <= 1; zero outside both (hard evanescent cut).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .tensorio import load_tensor, save_tensor

# IMX477R sensor: 1.55 um pixels, 3040 x 4056 -> 4.712 mm x 6.287 mm plane.
SENSOR_PIXEL_PITCH = 1.55e-6  # [m]
SENSOR_RESOLUTION = (3040, 4056)
SENSOR_EXTENT = (
    SENSOR_RESOLUTION[0] * SENSOR_PIXEL_PITCH,
    SENSOR_RESOLUTION[1] * SENSOR_PIXEL_PITCH,
)  # [m]

FULL_GRID = (380, 507)  # 8x-downsampled sensor, 12.4 um pitch
DESK_GRID = (96, 128)  # reduced grid, same physical plane size

# RGB treated as three monochromatic design wavelengths (R, G, B order).
RGB_WAVELENGTHS = (640e-9, 550e-9, 460e-9)  # [m]

# ST7735R LCD: sub-pixel pitch 73 um x 220 um; stripes touch laterally, so the
# open aperture is 60 um x 220 um and the area fill factor is 60/73 = 0.822.
ST7735R_SUBPIXEL_PITCH = (73e-6, 220e-6)  # [m]
ST7735R_SUBPIXEL_SIZE = (60e-6, 220e-6)  # [m]


def grid_pitch(shape, extent=SENSOR_EXTENT):
    """Per-axis sample pitch [m] for a grid spanning the given plane extent."""
    return (extent[0] / shape[0], extent[1] / shape[1])


def plane_coords(shape, pitch):
    """Physical sample coordinates (ys, xs) with the axis at (H//2, W//2)."""
    ys = (np.arange(shape[0]) - shape[0] // 2) * pitch[0]
    xs = (np.arange(shape[1]) - shape[1] // 2) * pitch[1]
    return ys, xs


@dataclass(frozen=True)
class ComplexField:
    """2-D complex amplitude on a uniform grid.

    Parameters
    ----------
    values : complex 2-D array
    pitch_y, pitch_x : float
        Sample spacing [m].
    wavelength : float
        Design wavelength [m].
    """

    values: np.ndarray
    pitch_y: float
    pitch_x: float
    wavelength: float

    def __post_init__(self):
        if self.pitch_y <= 0 or self.pitch_x <= 0:
            raise ValueError("pitch must be positive")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")

    @property
    def plane_size(self):
        """Physical extent (Sy, Sx) [m] of the simulation plane."""
        h, w = self.values.shape
        return (h * self.pitch_y, w * self.pitch_x)


def fresnel_number(aperture_a, distance_d, wavelength):
    """N_F = a^2 / (d * wl); near or below 1 means diffraction dominates."""
    if aperture_a <= 0 or distance_d <= 0 or wavelength <= 0:
        raise ValueError("aperture, distance and wavelength must all be positive")
    return aperture_a**2 / (distance_d * wavelength)


def spherical_wavefront(shape, pitch, d1, wavelength):
    """Field of a point source at distance d1 [m]: exp(j*k*sqrt(||x||^2+d1^2)).

    Unit magnitude everywhere (amplitude decay folded into the overall scale).
    """
    if d1 <= 0:
        raise ValueError("d1 must be positive")
    if np.isscalar(pitch):
        pitch = (pitch, pitch)
    ys, xs = plane_coords(shape, pitch)
    r = np.sqrt(ys[:, None] ** 2 + xs[None, :] ** 2 + d1**2)
    vals = np.exp(1j * (2 * np.pi / wavelength) * r)
    return ComplexField(vals, pitch[0], pitch[1], wavelength)


def bandlimit_frequency(plane_extent, d2, wavelength):
    """Per-axis window edge [cycles/m]: sqrt((d2/S)^2 + 1) / wl."""
    return np.sqrt((d2 / plane_extent) ** 2 + 1.0) / wavelength


def transfer_values(shape, plane_size, d2, wavelength):
    """Free-space frequency response sampled on the DFT grid (plain array)."""
    if d2 <= 0:
        raise ValueError("d2 must be positive")
    uy = np.fft.fftfreq(shape[0], d=plane_size[0] / shape[0])
    ux = np.fft.fftfreq(shape[1], d=plane_size[1] / shape[1])
    lam_u2 = (wavelength * uy[:, None]) ** 2 + (wavelength * ux[None, :]) ** 2
    inside = lam_u2 <= 1.0
    inside &= np.abs(uy[:, None]) <= bandlimit_frequency(plane_size[0], d2, wavelength)
    inside &= np.abs(ux[None, :]) <= bandlimit_frequency(plane_size[1], d2, wavelength)
    phase = np.zeros(shape)
    np.sqrt(1.0 - lam_u2, out=phase, where=inside)
    h = np.exp(1j * (2 * np.pi / wavelength) * d2 * phase)
    h[~inside] = 0.0
    return h


def free_space_transfer(shape, plane_size, d2, wavelength):
    """Bandlimited angular-spectrum transfer function as a frequency-domain field.

    ``values[k, l]`` corresponds to frequency ``(fftfreq(H)[k]/pitch_y, ...)``;
    the stored pitch is the spatial pitch of the matching spatial grid.
    """
    vals = transfer_values(shape, plane_size, d2, wavelength)
    return ComplexField(vals, plane_size[0] / shape[0], plane_size[1] / shape[1], wavelength)


def propagate(field: ComplexField, d2):
    """Angular-spectrum propagation over distance d2 [m] (unpadded grid)."""
    h = transfer_values(field.values.shape, field.plane_size, d2, field.wavelength)
    out = np.fft.ifft2(np.fft.fft2(field.values) * h)
    return replace(field, values=out)


# --------------------------------------------------------------------- masks


@dataclass(frozen=True)
class MaskGeometry:
    """Programmable-mask sub-pixel lattice, centered on the optical axis.

    Sub-pixel k = i*cols + j (row-major) has its aperture centered at
    ((i - (rows-1)/2) * py, (j - (cols-1)/2) * px); column j transmits only
    the color channel ``color_pattern[j % 3]``.
    """

    subpixel_pitch: tuple  # (py, px) [m]
    subpixel_size: tuple  # (ay, ax) [m], aperture within each cell
    grid: tuple  # (rows, cols) of active sub-pixels
    color_pattern: str = "RGB"
    crop_fraction: float = 0.8

    def __post_init__(self):
        py, px = self.subpixel_pitch
        ay, ax = self.subpixel_size
        if not (0 < ay <= py and 0 < ax <= px):
            raise ValueError("aperture must be positive and no larger than the pitch")
        if sorted(self.color_pattern) != ["B", "G", "R"]:
            raise ValueError("color_pattern must be a permutation of RGB")

    @property
    def fill_factor(self) -> float:
        py, px = self.subpixel_pitch
        ay, ax = self.subpixel_size
        return (ay * ax) / (py * px)

    @property
    def num_subpixels(self) -> int:
        return self.grid[0] * self.grid[1]

    def subpixel_centers(self):
        """Aperture center coordinates (ys[rows], xs[cols]) in meters."""
        rows, cols = self.grid
        ys = (np.arange(rows) - (rows - 1) / 2) * self.subpixel_pitch[0]
        xs = (np.arange(cols) - (cols - 1) / 2) * self.subpixel_pitch[1]
        return ys, xs

    def column_channels(self):
        """Color channel index (0=R,1=G,2=B) for each sub-pixel column."""
        order = {ch: i for i, ch in enumerate("RGB")}
        return np.array([order[self.color_pattern[j % 3]] for j in range(self.grid[1])])

    def digest(self) -> str:
        tag = repr((self.subpixel_pitch, self.subpixel_size, self.grid,
                    self.color_pattern, self.crop_fraction)).encode()
        return hashlib.sha256(tag).hexdigest()[:16]


def crop_aperture(geometry: MaskGeometry, crop_fraction, sensor_extent=SENSOR_EXTENT):
    """Active sub-pixel grid exposing the given fraction of the sensor, centered.

    Per-axis count = floor(fraction * sensor_extent / pitch).
    """
    if not 0 < crop_fraction <= 1:
        raise ValueError(f"crop_fraction must be in (0, 1], got {crop_fraction}")
    rows = int(crop_fraction * sensor_extent[0] / geometry.subpixel_pitch[0])
    cols = int(crop_fraction * sensor_extent[1] / geometry.subpixel_pitch[1])
    if rows < 1 or cols < 1:
        raise ValueError("crop fraction leaves no active sub-pixels")
    return replace(geometry, grid=(rows, cols), crop_fraction=crop_fraction)


def st7735r_geometry(crop_fraction=0.8) -> MaskGeometry:
    """Default LCD mask over the sensor (51 x 22 = 1122 sub-pixels at 0.8)."""
    base = MaskGeometry(
        subpixel_pitch=ST7735R_SUBPIXEL_PITCH,
        subpixel_size=ST7735R_SUBPIXEL_SIZE,
        grid=(1, 1),
        color_pattern="RGB",
        crop_fraction=crop_fraction,
    )
    return crop_aperture(base, crop_fraction)


def footprint_slices(geometry: MaskGeometry, fine_shape, plane_size):
    """Snapped fine-grid footprint of every sub-pixel.

    Returns (channel[K], row_slices, col_slices) where row/col slices are
    (start, stop) index pairs per mask row / column.  Footprint edges are
    snapped to the nearest sample boundary; a sample belongs to at most one
    sub-pixel because apertures never exceed the cell pitch.
    """
    fy, fx = plane_size[0] / fine_shape[0], plane_size[1] / fine_shape[1]
    ay, ax = geometry.subpixel_size
    cy, cx = geometry.subpixel_centers()

    def axis_ranges(centers, half, pitch, n, label):
        # 1e-9-sample guard: exactly aligned edges must snap consistently
        # instead of falling to either side of float rounding noise.
        lo = np.floor((centers - half) / pitch + n // 2 + 1e-9).astype(int) + 1
        hi = np.floor((centers + half) / pitch + n // 2 + 1e-9).astype(int) + 1
        if np.any(hi <= lo):
            raise ValueError(
                f"fine grid too coarse to resolve the {label} aperture "
                f"({half * 2:.3g} m vs {pitch:.3g} m samples)"
            )
        return np.clip(lo, 0, n), np.clip(hi, 0, n)

    row_lo, row_hi = axis_ranges(cy, ay / 2, fy, fine_shape[0], "row")
    col_lo, col_hi = axis_ranges(cx, ax / 2, fx, fine_shape[1], "column")
    return geometry.column_channels(), (row_lo, row_hi), (col_lo, col_hi)


def rasterize_mask(geometry: MaskGeometry, weights, fine_shape, plane_size, dtype=np.float64):
    """Per-channel amplitude grids (3 x H x W) with w_k on each footprint.

    Deadspace and foreign color channels stay exactly zero; each grid sample
    carries the weight of at most one sub-pixel (linear in w).
    """
    w = np.asarray(weights, dtype=np.float64).reshape(geometry.grid)
    channels, (row_lo, row_hi), (col_lo, col_hi) = footprint_slices(
        geometry, fine_shape, plane_size
    )
    grids = np.zeros((3,) + tuple(fine_shape), dtype=dtype)
    for i in range(geometry.grid[0]):
        for j in range(geometry.grid[1]):
            grids[channels[j], row_lo[i] : row_hi[i], col_lo[j] : col_hi[j]] = w[i, j]
    return grids


def rasterize_amplitude(mask, feature_size, fine_shape, plane_size, dtype=np.float64):
    """Colorless amplitude mask of contiguous square features, centered.

    mask is an (n_y, n_x) transmission matrix whose feature (i, j) covers a
    half-open physical cell of the given feature_size (fy, fx) [m]; cell
    edges are snapped to the nearest fine-grid sample boundary and samples
    outside the mask extent stay zero.  Returns an (H, W) amplitude grid.
    """
    mask = np.asarray(mask, dtype=np.float64)
    fy, fx = plane_size[0] / fine_shape[0], plane_size[1] / fine_shape[1]

    def axis_edges(n_feat, feat, pitch, n, label):
        if feat < pitch:
            raise ValueError(
                f"fine grid too coarse to resolve the {label} feature "
                f"({feat:.3g} m vs {pitch:.3g} m samples)"
            )
        pos = (np.arange(n_feat + 1) - n_feat / 2) * feat
        # 1e-9-sample guard: a sample exactly on a cell edge belongs to the
        # cell whose lower edge it is (half-open cells tile without gaps).
        return np.clip(np.ceil(pos / pitch + n // 2 - 1e-9).astype(int), 0, n)

    rows = axis_edges(mask.shape[0], feature_size[0], fy, fine_shape[0], "row")
    cols = axis_edges(mask.shape[1], feature_size[1], fx, fine_shape[1], "column")
    out = np.zeros(fine_shape, dtype=dtype)
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            out[rows[i] : rows[i + 1], cols[j] : cols[j + 1]] = mask[i, j]
    return out


# ----------------------------------------------------------------------- psf


@dataclass(frozen=True)
class IntensityPsf:
    """Per-channel intensity point spread function with its provenance."""

    values: np.ndarray  # (C, H, W), >= 0
    wavelengths: tuple  # [m], channel order
    d1: float  # scene-to-mask distance [m]
    d2: float  # mask-to-sensor distance [m]
    pitch: tuple  # (py, px) [m]
    geometry_hash: str = ""

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("intensity PSF must be non-negative")


def simulate_psf(
    geometry: MaskGeometry,
    weights,
    d1,
    d2,
    wavelengths=RGB_WAVELENGTHS,
    grid=DESK_GRID,
    plane_size=SENSOR_EXTENT,
    dtype=np.float64,
) -> IntensityPsf:
    """Intensity PSF of the masked aperture under point-source illumination.

    Per wavelength: rasterize the mask, multiply by the spherical wavefront
    from distance d1, propagate d2 to the sensor, take |.|^2.
    """
    if d1 <= 0 or d2 <= 0:
        raise ValueError("d1 and d2 must be positive")
    pitch = grid_pitch(grid, plane_size)
    masks = rasterize_mask(geometry, weights, grid, plane_size, dtype=dtype)
    out = np.empty((len(wavelengths),) + tuple(grid), dtype=dtype)
    for c, wl in enumerate(wavelengths):
        sph = spherical_wavefront(grid, pitch, d1, wl).values
        field = ComplexField(sph * masks[c], pitch[0], pitch[1], wl)
        u2 = propagate(field, d2).values
        out[c] = np.abs(u2) ** 2
    return IntensityPsf(
        values=out,
        wavelengths=tuple(wavelengths),
        d1=d1,
        d2=d2,
        pitch=pitch,
        geometry_hash=geometry.digest(),
    )


def simulate_psf_from_amplitude(
    amplitude,
    d1,
    d2,
    wavelengths=RGB_WAVELENGTHS,
    plane_size=SENSOR_EXTENT,
) -> IntensityPsf:
    """Intensity PSF of a colorless amplitude mask already on the fine grid.

    Same chain as simulate_psf — spherical illumination from d1, bandlimited
    propagation over d2, |.|^2 — but the mask transmits every color channel
    identically (no sub-pixel color filters or deadspace).
    """
    if d1 <= 0 or d2 <= 0:
        raise ValueError("d1 and d2 must be positive")
    amplitude = np.asarray(amplitude, dtype=np.float64)
    grid = amplitude.shape
    pitch = grid_pitch(grid, plane_size)
    out = np.empty((len(wavelengths),) + tuple(grid))
    for c, wl in enumerate(wavelengths):
        sph = spherical_wavefront(grid, pitch, d1, wl).values
        field = ComplexField(sph * amplitude, pitch[0], pitch[1], wl)
        out[c] = np.abs(propagate(field, d2).values) ** 2
    tag = hashlib.sha256(amplitude.tobytes()).hexdigest()[:16]
    return IntensityPsf(
        values=out,
        wavelengths=tuple(wavelengths),
        d1=d1,
        d2=d2,
        pitch=pitch,
        geometry_hash=tag,
    )


def save_psf(psf: IntensityPsf, path_stem) -> None:
    """Write <stem>.ltns plus a <stem>.meta key=value sidecar."""
    path_stem = str(path_stem)
    save_tensor(np.asarray(psf.values, dtype=np.float64), path_stem + ".ltns")
    lines = [
        f"d1={psf.d1!r}",
        f"d2={psf.d2!r}",
        f"pitch_y={psf.pitch[0]!r}",
        f"pitch_x={psf.pitch[1]!r}",
        "wavelengths=" + ",".join(repr(w) for w in psf.wavelengths),
        f"geometry_hash={psf.geometry_hash}",
    ]
    with open(path_stem + ".meta", "w") as f:
        f.write("\n".join(lines) + "\n")


def load_psf(path_stem) -> IntensityPsf:
    path_stem = str(path_stem)
    values = load_tensor(path_stem + ".ltns")
    meta = {}
    with open(path_stem + ".meta") as f:
        for line in f:
            key, _, val = line.strip().partition("=")
            if key:
                meta[key] = val
    return IntensityPsf(
        values=values,
        wavelengths=tuple(float(w) for w in meta["wavelengths"].split(",")),
        d1=float(meta["d1"]),
        d2=float(meta["d2"]),
        pitch=(float(meta["pitch_y"]), float(meta["pitch_x"])),
        geometry_hash=meta.get("geometry_hash", ""),
    )


# ------------------------------------------------------------ coded aperture

# Fibonacci LFSR tap sets (polynomial exponents below nbits), all-ones seed.
_LFSR_TAPS = {6: (5,)}


def mls_sequence(nbits=6) -> np.ndarray:
    """Maximum-length sequence of 2^nbits - 1 bits from a ring-buffer LFSR."""
    taps = _LFSR_TAPS[nbits]
    state = [1] * nbits
    length = (1 << nbits) - 1
    seq = np.empty(length, dtype=np.int8)
    idx = 0
    for i in range(length):
        feedback = state[idx]
        seq[i] = feedback
        for t in taps:
            feedback ^= state[(t + idx) % nbits]
        state[idx] = feedback
        idx = (idx + 1) % nbits
    return seq


def generate_mls_coded_aperture() -> np.ndarray:
    """126 x 126 binary mask: length-63 MLS tiled to 126, outer product."""
    tiled = np.tile(mls_sequence(6), 2).astype(np.float64)
    return np.outer(tiled, tiled)
