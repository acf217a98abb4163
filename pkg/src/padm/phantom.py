"""Synthetic cardiac-like slice phantoms and reproducible datasets.

A phantom is a torso ellipse filled with soft tissue, a myocardium annulus
carrying the tracer, an optional angular defect sector that multiplies the
annulus activity, and a low uniform background inside the torso.  Dataset
assembly samples phantom geometry from per-field intervals, reconstructs each
pair through the projector, and writes a JSON manifest next to the tensor
files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from padm import projector
from padm.harness import io as hio

DEFAULT_MU_VALUES = {"soft": 0.15, "lung": 0.04, "bone": 0.25}


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and tissue description of one phantom slice.

    Lengths are cm, activities arbitrary units, angles degrees.  The defect
    is (start_deg, extent_deg, multiplier) or None.
    """

    grid_size: int = 32
    pixel_spacing: float = 0.8
    torso_center: tuple = (0.0, 0.0)
    torso_axes: tuple = (10.0, 8.5)
    myo_center: tuple = (-1.5, 0.5)
    myo_r_inner: float = 1.4
    myo_r_outer: float = 2.8
    myo_activity: float = 1.0
    defect: tuple | None = None
    background_activity: float = 0.1
    mu_values: dict = field(default_factory=lambda: dict(DEFAULT_MU_VALUES))
    seed: int = 0

    def validate(self) -> None:
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        if self.pixel_spacing <= 0:
            raise ValueError("pixel_spacing must be positive")
        if min(self.torso_axes) <= 0:
            raise ValueError("torso semi-axes must be positive")
        if not 0 < self.myo_r_inner < self.myo_r_outer:
            raise ValueError("need 0 < inner radius < outer radius")
        if self.myo_activity < 0 or self.background_activity < 0:
            raise ValueError("activity levels must be nonnegative")
        if any(v < 0 for v in self.mu_values.values()):
            raise ValueError("attenuation coefficients must be nonnegative")
        if self.defect is not None:
            start, extent, mult = self.defect
            if not 0 <= mult <= 1:
                raise ValueError("defect multiplier must lie in [0, 1]")
            if extent <= 0:
                raise ValueError("defect extent must be positive")
        half = self.grid_size * self.pixel_spacing / 2.0
        cx, cy = self.torso_center
        ax, ay = self.torso_axes
        if abs(cx) + ax > half or abs(cy) + ay > half:
            raise ValueError("torso ellipse exceeds the grid")
        mx, my = self.myo_center
        if np.hypot(mx - cx, my - cy) + self.myo_r_outer > max(ax, ay):
            raise ValueError("myocardium extends outside the torso")


def _pixel_coords(n: int, px: float):
    c = (n - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(n), np.arange(n))
    return (jj - c) * px, (ii - c) * px


def make_phantom(spec: PhantomSpec, jitter_rng=None):
    """Rasterize a spec to (emission, mu) float64 grids.

    With a generator, structure centers get a uniform sub-pixel jitter (up to
    half a pixel per axis) for placement diversity; geometry sizes always
    come straight from the spec.  Output is a pure function of the spec and
    the generator state.
    """
    spec.validate()
    jt = jb = (0.0, 0.0)
    if jitter_rng is not None:
        half_px = spec.pixel_spacing / 2.0
        jt = tuple(jitter_rng.uniform(-half_px, half_px, size=2))
        jb = tuple(jitter_rng.uniform(-half_px, half_px, size=2))
    x, y = _pixel_coords(spec.grid_size, spec.pixel_spacing)
    cx, cy = spec.torso_center[0] + jt[0], spec.torso_center[1] + jt[1]
    ax, ay = spec.torso_axes
    torso = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0
    mx, my = spec.myo_center[0] + jb[0], spec.myo_center[1] + jb[1]
    r = np.hypot(x - mx, y - my)
    annulus = (r >= spec.myo_r_inner) & (r <= spec.myo_r_outer) & torso

    emission = np.zeros((spec.grid_size, spec.grid_size), dtype=np.float64)
    emission[torso] = spec.background_activity
    emission[annulus] = spec.myo_activity
    if spec.defect is not None:
        start, extent, mult = spec.defect
        theta = np.degrees(np.arctan2(y - my, x - mx)) % 360.0
        span = (theta - start) % 360.0
        sector = annulus & (span <= extent)
        emission[sector] *= mult

    mu = np.zeros_like(emission)
    mu[torso] = spec.mu_values["soft"]
    return emission, mu


@dataclass(frozen=True)
class SpecRanges:
    """Per-field closed intervals the dataset sampler draws from."""

    torso_ax: tuple = (8.5, 10.5)
    torso_ay: tuple = (7.0, 9.0)
    torso_cx: tuple = (-1.0, 1.0)
    torso_cy: tuple = (-1.0, 1.0)
    myo_dx: tuple = (-2.5, 0.5)
    myo_dy: tuple = (-1.0, 2.0)
    myo_r_inner: tuple = (1.2, 1.9)
    myo_wall: tuple = (1.1, 1.7)
    myo_activity: tuple = (0.85, 1.15)
    background_activity: tuple = (0.05, 0.15)
    defect_prob: float = 0.5
    defect_start: tuple = (0.0, 360.0)
    defect_extent: tuple = (40.0, 110.0)
    defect_mult: tuple = (0.2, 0.7)

    def validate(self) -> None:
        for name, val in asdict(self).items():
            if isinstance(val, tuple):
                lo, hi = val
                if lo > hi:
                    raise ValueError(f"invalid interval {name}: lo > hi")
        if not 0.0 <= self.defect_prob <= 1.0:
            raise ValueError("defect_prob must lie in [0, 1]")


def sample_spec(ranges: SpecRanges, rng, grid_size: int = 32, pixel_spacing: float = 0.8, seed: int = 0) -> PhantomSpec:
    """Draw one concrete phantom spec from the ranges."""
    ranges.validate()
    u = lambda pair: float(rng.uniform(*pair))
    cx, cy = u(ranges.torso_cx), u(ranges.torso_cy)
    defect = None
    # draw the defect fields unconditionally so the stream layout is fixed
    d_start, d_extent, d_mult = u(ranges.defect_start), u(ranges.defect_extent), u(ranges.defect_mult)
    has_defect = rng.uniform() < ranges.defect_prob
    if has_defect:
        defect = (d_start, d_extent, d_mult)
    return PhantomSpec(
        grid_size=grid_size,
        pixel_spacing=pixel_spacing,
        torso_center=(cx, cy),
        torso_axes=(u(ranges.torso_ax), u(ranges.torso_ay)),
        myo_center=(cx + u(ranges.myo_dx), cy + u(ranges.myo_dy)),
        myo_r_inner=(ri := u(ranges.myo_r_inner)),
        myo_r_outer=ri + u(ranges.myo_wall),
        myo_activity=u(ranges.myo_activity),
        defect=defect,
        background_activity=u(ranges.background_activity),
        seed=seed,
    )


def split_sizes(count: int, fractions=(0.6, 0.2)) -> tuple[int, int, int]:
    """Train/val/test counts: floor the first two fractions, remainder to test."""
    n_train = int(count * fractions[0])
    n_val = int(count * fractions[1])
    return n_train, n_val, count - n_train - n_val


def item_seed(dataset_seed: int, index: int) -> int:
    """Stable per-item seed derived by counter, independent of worker order."""
    ss = np.random.SeedSequence([int(dataset_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_dataset(
    count: int,
    spec_ranges: SpecRanges,
    seed: int,
    out_dir,
    grid_size: int = 32,
    pixel_spacing: float = 0.8,
    n_angles: int = 16,
    mlem_iters: int = 20,
    orientation: str = "SA",
) -> dict:
    """Generate phantoms, reconstruct NAC/AC pairs, and write a manifest.

    Returns the manifest dict; the same content lands in out_dir/manifest.json.
    The split rule (floors for train and val, remainder to test) is recorded
    in the manifest itself.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    spec_ranges.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geom = projector.Geometry(
        n_angles=n_angles,
        n_bins=grid_size,
        image_side=grid_size,
        pixel_spacing=pixel_spacing,
    )
    n_train, n_val, n_test = split_sizes(count)
    entries = []
    ac_max = 0.0
    mu_max = 0.0
    for idx in range(count):
        iseed = item_seed(seed, idx)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(idx)]))
        spec = sample_spec(
            spec_ranges, rng, grid_size=grid_size, pixel_spacing=pixel_spacing, seed=iseed
        )
        emission, mu = make_phantom(spec, jitter_rng=rng)
        nac, ac = projector.make_nac_ac_pair(emission, mu, geom, iters=mlem_iters)
        split = "train" if idx < n_train else ("val" if idx < n_train + n_val else "test")
        item_id = f"{idx:05d}"
        paths = {}
        for name, arr in (("emission", emission), ("mu", mu), ("nac", nac), ("ac", ac)):
            rel = f"{item_id}_{name}.padt"
            hio.write_tensor(out / rel, np.asarray(arr, dtype=np.float32))
            paths[name] = rel
        ac_max = max(ac_max, float(ac.max()))
        mu_max = max(mu_max, float(mu.max()))
        entries.append({"id": item_id, "seed": iseed, "split": split, "orientation": orientation, "paths": paths})
    manifest = {
        "count": count,
        "seed": int(seed),
        "grid_size": grid_size,
        "pixel_spacing": pixel_spacing,
        "n_angles": n_angles,
        "mlem_iters": mlem_iters,
        "split_rule": "train = floor(0.6 n), val = floor(0.2 n), remainder test, assigned by index order",
        "split_sizes": {"train": n_train, "val": n_val, "test": n_test},
        "normalization": {"ac_max": ac_max, "mu_max": mu_max},
        "spec_ranges": asdict(spec_ranges),
        "items": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return json.loads(p.read_text())
