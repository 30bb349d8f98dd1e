"""Synthetic multi-scanner data: phantoms, frame-based scan simulation, crops.

Five scanner profiles mirror real acquisition geometry (resolution and voxel
spacing); noise level and PSF width are simulation knobs that differ per
scanner to create a cross-scanner distribution shift. Each profile also has
a "mini" twin scaled to fit in 32^3 so experiments stay desk-sized.

A scan session produces six frames of the same subject; the short scan is
frame one alone, the long scan (ground truth) is the mean of all six.
"""

import os
import re
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimensionError
from .volumeio import load_volume, save_volume


@dataclass(frozen=True)
class ScannerProfile:
    id: int
    resolution: tuple
    voxel_spacing: tuple
    noise_scale: float
    psf_sigma: float

    def __post_init__(self):
        if any(d <= 0 for d in self.resolution) or any(s <= 0 for s in self.voxel_spacing):
            raise ConfigError(f"scanner {self.id}: dims and spacings must be positive")


# Full-scale acquisition geometry of the five scanners.
SCANNER_TABLE = {
    1: ScannerProfile(1, (192, 192, 136), (1.21875, 1.21875, 1.21875), 0.05, 0.5),
    2: ScannerProfile(2, (192, 192, 128), (1.21875, 1.21875, 1.21875), 0.07, 0.75),
    3: ScannerProfile(3, (224, 224, 81), (1.01821, 1.01821, 2.02699), 0.10, 1.0),
    4: ScannerProfile(4, (128, 128, 90), (2.0, 2.0, 2.0), 0.12, 1.25),
    5: ScannerProfile(5, (128, 128, 63), (2.05941, 2.05941, 2.425), 0.15, 1.5),
}

MINI_MAX_EDGE = 32


def mini_profile(profile):
    """Shrink a profile so its longest edge is MINI_MAX_EDGE, keeping aspect ratio."""
    factor = max(profile.resolution) / MINI_MAX_EDGE
    resolution = tuple(max(8, round(d / factor)) for d in profile.resolution)
    spacing = tuple(s * factor for s in profile.voxel_spacing)
    return ScannerProfile(profile.id, resolution, spacing, profile.noise_scale, profile.psf_sigma)


def get_profile(scanner_id, mini=True):
    if scanner_id not in SCANNER_TABLE:
        raise ConfigError(f"unknown scanner id {scanner_id}; known: {sorted(SCANNER_TABLE)}")
    profile = SCANNER_TABLE[scanner_id]
    return mini_profile(profile) if mini else profile


@dataclass
class VolumeSample:
    """One simulated subject: first frame vs six-frame average, plus provenance."""

    short_scan: np.ndarray
    long_scan: np.ndarray
    scanner_id: int
    phantom_seed: int


def generate_phantom(seed, size):
    """Sum of 3-8 random anisotropic Gaussian blobs, rescaled to exactly [0, 1]."""
    dims = (size, size, size) if np.isscalar(size) else tuple(size)
    if min(dims) < 8:
        raise ConfigError(f"phantom size must be >= 8 per axis, got {dims}")
    rng = np.random.default_rng(seed)
    vol = np.zeros(dims)
    coords = [np.arange(n, dtype=np.float64) for n in dims]
    for _ in range(int(rng.integers(3, 9))):
        center = [rng.uniform(0.2 * n, 0.8 * n) for n in dims]
        sigma = [rng.uniform(0.06 * n, 0.22 * n) for n in dims]
        amp = rng.uniform(0.4, 1.0)
        parts = [np.exp(-0.5 * ((c - mu) / sg) ** 2) for c, mu, sg in zip(coords, center, sigma)]
        vol += amp * parts[0][:, None, None] * parts[1][None, :, None] * parts[2][None, None, :]
    lo, hi = vol.min(), vol.max()
    return (vol - lo) / (hi - lo)


def blur_to_scanner(phantom, profile):
    """Separable Gaussian PSF; this is the noise-free 'clean' acquisition."""
    return gaussian_filter(phantom, sigma=profile.psf_sigma, mode="nearest")


def simulate_scan(phantom, profile, n_frames=6, seed=0):
    """Simulate one session: per-frame additive Gaussian noise, clamped to [0, 1]."""
    clean = blur_to_scanner(phantom, profile)
    rng = np.random.default_rng(seed)
    frames = [
        np.clip(clean + rng.normal(0.0, profile.noise_scale, size=clean.shape), 0.0, 1.0)
        for _ in range(n_frames)
    ]
    long_scan = np.mean(frames, axis=0)
    return VolumeSample(frames[0], long_scan, profile.id, seed)


def crop_normalize(sample, crop_size, seed=0):
    """Apply one random crop window to both scans; intensities stay in [0, 1]."""
    dims = sample.short_scan.shape
    crop = (crop_size, crop_size, crop_size) if np.isscalar(crop_size) else tuple(crop_size)
    if any(c > d for c, d in zip(crop, dims)):
        raise DimensionError(f"crop {crop} exceeds volume {dims}")
    rng = np.random.default_rng(seed)
    offs = [int(rng.integers(0, d - c + 1)) for c, d in zip(crop, dims)]
    window = tuple(slice(o, o + c) for o, c in zip(offs, crop))
    return VolumeSample(
        sample.short_scan[window].copy(),
        sample.long_scan[window].copy(),
        sample.scanner_id,
        sample.phantom_seed,
    )


def make_dataset(profile, n_samples, crop_size=16, seed=0, n_frames=6):
    """Deterministic list of cropped VolumeSamples for one scanner."""
    root = np.random.SeedSequence(seed)
    samples = []
    for child in root.spawn(n_samples):
        phantom_seed, scan_seed, crop_seed = [int(s.generate_state(1)[0]) for s in child.spawn(3)]
        phantom = generate_phantom(phantom_seed, profile.resolution)
        sample = simulate_scan(phantom, profile, n_frames=n_frames, seed=scan_seed)
        samples.append(crop_normalize(sample, crop_size, seed=crop_seed))
    return samples


def save_dataset(directory, samples):
    """Write samples as paired volume files (NNNN.short.vol / NNNN.long.vol)."""
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        save_volume(os.path.join(directory, f"{i:04d}.short.vol"), s.short_scan, scanner_id=s.scanner_id)
        save_volume(os.path.join(directory, f"{i:04d}.long.vol"), s.long_scan, scanner_id=s.scanner_id)


def load_dataset(directory):
    names = sorted(f for f in os.listdir(directory) if re.fullmatch(r"\d+\.short\.vol", f))
    samples = []
    for name in names:
        stem = name[: -len(".short.vol")]
        short, header = load_volume(os.path.join(directory, name))
        long_scan, _ = load_volume(os.path.join(directory, f"{stem}.long.vol"))
        samples.append(VolumeSample(short, long_scan, header["scanner_id"], -1))
    return samples
