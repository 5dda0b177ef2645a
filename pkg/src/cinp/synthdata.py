"""Synthetic paired cohorts: 3D volumes, BOLD series, connectivity networks.

The generative model ties both modalities to a shared class and a shared
per-subject latent scalar, so cross-modal alignment is learnable but not
trivial:

* each class has a volume prototype (a smoothed random blob field) and a
  block-structured target correlation matrix over ROIs;
* each subject draws a latent u in [0, 1] that scales a class-independent
  intensity pattern in the volume and blends the class correlation matrix
  toward the identity in the BOLD covariance;
* per-subject smooth structured noise plus white noise sit on top, so a
  random projection of the volume is a poor classifier while a trained
  encoder can still recover class and latent.

All randomness is drawn from named streams of the cohort seed; identical
seeds reproduce cohorts bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import BadCohortSpec, BadRatio, ZeroVarianceRoi
from .seeds import stream_rng

Array = np.ndarray

COHORT_MANIFEST = "cohort.json"
COHORT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class Volume3D:
    """A dense 3D intensity volume stored as a flat row-major f64 array."""

    dims: tuple[int, int, int]
    voxels: Array
    subject_id: str = ""

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise BadCohortSpec(f"Volume3D: bad dims {self.dims}")
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float64).ravel()
        if self.voxels.size != self.dims[0] * self.dims[1] * self.dims[2]:
            raise BadCohortSpec(
                f"Volume3D: {self.voxels.size} voxels for dims {self.dims}")
        if not np.all(np.isfinite(self.voxels)):
            raise BadCohortSpec("Volume3D: non-finite voxel intensities")

    @property
    def n_voxels(self) -> int:
        return self.voxels.size

    def as_3d(self) -> Array:
        return self.voxels.reshape(self.dims)


@dataclass
class BoldSeries:
    """Per-ROI time series, shape (n_rois, n_timepoints)."""

    n_rois: int
    n_timepoints: int
    signals: Array

    def __post_init__(self):
        self.signals = np.ascontiguousarray(self.signals, dtype=np.float64)
        if self.n_timepoints < 2:
            raise BadCohortSpec("BoldSeries: need at least 2 timepoints")
        if self.signals.shape != (self.n_rois, self.n_timepoints):
            raise BadCohortSpec(
                f"BoldSeries: signal shape {self.signals.shape} != "
                f"({self.n_rois}, {self.n_timepoints})")
        if not np.all(np.isfinite(self.signals)):
            raise BadCohortSpec("BoldSeries: non-finite signals")


@dataclass
class Fcn:
    """Functional connectivity: symmetric correlation matrix, unit diagonal."""

    n_rois: int
    matrix: Array

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (self.n_rois, self.n_rois):
            raise BadCohortSpec(
                f"Fcn: matrix shape {self.matrix.shape} != ({self.n_rois},) * 2")
        if np.max(np.abs(self.matrix - self.matrix.T)) >= 1e-12:
            raise BadCohortSpec("Fcn: matrix not symmetric")
        if np.max(np.abs(np.diag(self.matrix) - 1.0)) != 0.0:
            raise BadCohortSpec("Fcn: diagonal entries must equal 1")
        if np.max(np.abs(self.matrix)) > 1.0:
            raise BadCohortSpec("Fcn: entries outside [-1, 1]")


@dataclass
class PairedSample:
    """One subject: volume, BOLD series, derived FCN, class label."""

    volume: Volume3D
    bold: BoldSeries
    fcn: Fcn
    label: int
    subject_id: str


@dataclass(frozen=True)
class MaskSpec:
    """Voxel masking: fraction of voxels to zero, and the draw seed."""

    ratio: float = 0.30
    seed: int = 0


@dataclass(frozen=True)
class AugmentCfg:
    """Image augmentation: flips, intensity scale/shift, additive noise."""

    noise_sigma: float = 0.05
    flip_prob: float = 0.5
    intensity_scale_range: tuple[float, float] = (0.9, 1.1)
    intensity_shift_range: tuple[float, float] = (-0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise BadCohortSpec("AugmentCfg: noise_sigma must be >= 0")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise BadCohortSpec("AugmentCfg: flip_prob must be in [0, 1]")
        for name in ("intensity_scale_range", "intensity_shift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise BadCohortSpec(f"AugmentCfg: {name} has lo > hi")


# ---------------------------------------------------------------------------
# FCN construction
# ---------------------------------------------------------------------------

def bold_to_fcn(bold: BoldSeries) -> Fcn:
    """Pairwise Pearson correlation of ROI rows, diagonal forced to 1."""
    sig = bold.signals
    if np.any(sig.std(axis=1) == 0.0):
        rows = np.flatnonzero(sig.std(axis=1) == 0.0)
        raise ZeroVarianceRoi(f"bold_to_fcn: constant signal in ROI rows {rows.tolist()}")
    c = np.corrcoef(sig)
    c = (c + c.T) / 2.0
    np.clip(c, -1.0, 1.0, out=c)
    np.fill_diagonal(c, 1.0)
    return Fcn(n_rois=bold.n_rois, matrix=c)


def fcn_node_features(fcn: Fcn) -> Array:
    """Node features: row i of the FCN matrix is node i's feature vector."""
    return fcn.matrix.copy()


# ---------------------------------------------------------------------------
# masking / augmentation / resizing
# ---------------------------------------------------------------------------

def _fisher_yates_indices(n: int, count: int, seed: int) -> Array:
    """Uniform draw of ``count`` distinct indices from range(n).

    Partial Fisher-Yates shuffle; the draw sequence is the reproducibility
    contract: with rng = np.random.default_rng(seed), pre-draw
    u = rng.random(count); then for i = 0 .. count-1, swap position i of
    idx = [0 .. n-1] with position i + floor(u[i] * (n - i)); the masked
    set is idx[:count].
    """
    rng = np.random.default_rng(seed)
    u = rng.random(count)
    idx = list(range(n))
    for i in range(count):
        j = i + int(u[i] * (n - i))
        idx[i], idx[j] = idx[j], idx[i]
    return np.asarray(idx[:count], dtype=np.intp)


def mask_count(ratio: float, n_voxels: int) -> int:
    """floor(ratio * n_voxels), with a 1e-9 guard against f64 round-off."""
    return int(math.floor(ratio * n_voxels + 1e-9))


def mask_volume(v: Volume3D, spec: MaskSpec) -> tuple[Volume3D, Array]:
    """Zero a uniformly drawn fraction of voxels; returns (masked, mask)."""
    if not (0.0 < spec.ratio < 1.0):
        raise BadRatio(f"mask_volume: ratio must be in (0, 1), got {spec.ratio}")
    count = mask_count(spec.ratio, v.n_voxels)
    chosen = _fisher_yates_indices(v.n_voxels, count, spec.seed)
    mask = np.zeros(v.n_voxels, dtype=bool)
    mask[chosen] = True
    voxels = v.voxels.copy()
    voxels[mask] = 0.0
    return Volume3D(v.dims, voxels, v.subject_id), mask


def augment_volume(v: Volume3D, cfg: AugmentCfg) -> Volume3D:
    """Flip / scale / shift / add noise, in that order, seeded by cfg.seed.

    Draw order from np.random.default_rng(cfg.seed): three flip uniforms
    (one per axis), the intensity scale, the intensity shift, then the
    noise field.
    """
    rng = np.random.default_rng(cfg.seed)
    flips = rng.random(3) < cfg.flip_prob
    s = rng.uniform(*cfg.intensity_scale_range)
    t = rng.uniform(*cfg.intensity_shift_range)
    vol = v.as_3d()
    axes = tuple(int(a) for a in np.flatnonzero(flips))
    if axes:
        vol = np.flip(vol, axis=axes)
    out = vol.ravel() * s + t
    if cfg.noise_sigma > 0:
        out = out + rng.standard_normal(v.n_voxels) * cfg.noise_sigma
    return Volume3D(v.dims, out, v.subject_id)


def resize_volume(v: Volume3D, target_dims: tuple[int, int, int]) -> Volume3D:
    """Trilinear resize with corner-aligned sampling (0 -> 0, M-1 -> N-1)."""
    target_dims = tuple(int(d) for d in target_dims)
    if any(d < 1 for d in target_dims):
        raise BadCohortSpec(f"resize_volume: bad target dims {target_dims}")
    if target_dims == v.dims:
        return Volume3D(v.dims, v.voxels.copy(), v.subject_id)

    vol = v.as_3d()
    lo_idx, hi_idx, fracs = [], [], []
    for m, n in zip(target_dims, v.dims):
        if m == 1:
            coords = np.array([(n - 1) / 2.0])
        else:
            coords = np.arange(m) * ((n - 1) / (m - 1))
        i0 = np.minimum(np.floor(coords).astype(np.intp), max(n - 2, 0))
        i1 = np.minimum(i0 + 1, n - 1)
        lo_idx.append(i0)
        hi_idx.append(i1)
        fracs.append(coords - i0)

    fd = fracs[0][:, None, None]
    fh = fracs[1][None, :, None]
    fw = fracs[2][None, None, :]
    out = np.zeros(target_dims, dtype=np.float64)
    for bd, wd in ((lo_idx[0], 1.0 - fd), (hi_idx[0], fd)):
        for bh, wh in ((lo_idx[1], 1.0 - fh), (hi_idx[1], fh)):
            for bw, ww in ((lo_idx[2], 1.0 - fw), (hi_idx[2], fw)):
                out += vol[np.ix_(bd, bh, bw)] * (wd * wh * ww)
    return Volume3D(target_dims, out.ravel(), v.subject_id)


# ---------------------------------------------------------------------------
# cohort generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CohortKnobs:
    """Amplitudes and correlation-structure knobs of the generative model.

    The latent u traces a piecewise-linear path through a sequence of
    anchors in both modalities (flip-symmetric intensity patterns in the
    volume, block-correlation structures in the BOLD covariance). The many-
    anchor path makes cross-modal similarity fall off quickly away from the
    matching u, so fine-grained subject matching is learnable; the class
    part of each modality is a separate fixed structure, so group-level
    differences stay dominant.
    """

    class_amp: float = 0.4           # class blob field in the volume
    latent_amp: float = 0.6          # anchor-path latent pattern
    smooth_noise_amp: float = 0.45   # per-subject structured clutter
    white_noise_amp: float = 0.08
    smooth_sigma: float = 2.0        # Gaussian blur of all blob fields
    n_latent_anchors: int = 12       # waypoints of the latent path
    latent_levels: int = 12          # distinct latent values (grid over [0, 1])
    block_count: int = 2             # ROI blocks per correlation structure
    block_rho: float = 0.70          # within-block target correlation
    class_lam: float = 0.55          # weight of the fixed class structure
    latent_lam: float = 0.35         # weight of the latent path structure


def _unit_rms_field(rng: np.random.Generator, dims, sigma: float) -> Array:
    field = gaussian_filter(rng.standard_normal(dims), sigma=sigma, mode="wrap")
    return field / math.sqrt(float(np.mean(field * field)))


def _flip_symmetrize(field: Array) -> Array:
    """Average a field over all 8 axis-flip combinations.

    The latent intensity pattern is made flip-invariant so that the
    per-subject scalar stays readable from a volume regardless of the flip
    augmentations applied during training.
    """
    acc = np.zeros_like(field)
    for mask in range(8):
        axes = tuple(a for a in range(3) if mask >> a & 1)
        acc += np.flip(field, axis=axes) if axes else field
    acc /= 8.0
    return acc / math.sqrt(float(np.mean(acc * acc)))


def _class_correlation(rng: np.random.Generator, n_rois: int,
                       block_count: int, rho: float) -> Array:
    """Block-structured correlation target: rho within blocks, 0 across."""
    perm = rng.permutation(n_rois)
    bounds = np.linspace(0, n_rois, block_count + 1).astype(int)
    c = np.eye(n_rois)
    for b in range(block_count):
        members = perm[bounds[b]:bounds[b + 1]]
        for i in members:
            for j in members:
                if i != j:
                    c[i, j] = rho
    return c


def _path_weights(u: float, n_anchors: int) -> Array:
    """Hat weights of a piecewise-linear path through n_anchors waypoints."""
    pos = u * (n_anchors - 1)
    lo = min(int(pos), n_anchors - 2)
    frac = pos - lo
    w = np.zeros(n_anchors)
    w[lo] = 1.0 - frac
    w[lo + 1] = frac
    return w


def gen_paired_cohort(n_subjects: int, k_classes: int,
                      dims: tuple[int, int, int], n_rois: int,
                      n_timepoints: int, seed: int,
                      knobs: CohortKnobs = CohortKnobs()) -> list[PairedSample]:
    """Deterministically generate a near-balanced paired cohort.

    Subject i gets label i mod k_classes (class sizes differ by at most 1).
    Per-subject randomness is drawn from streams keyed by (seed, i), so the
    cohort content at index i does not depend on n_subjects.
    """
    if k_classes < 2 or n_subjects < k_classes:
        raise BadCohortSpec(
            f"gen_paired_cohort: need n_subjects >= k_classes >= 2, "
            f"got {n_subjects}, {k_classes}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise BadCohortSpec(f"gen_paired_cohort: bad dims {dims}")
    if n_rois < knobs.block_count or n_rois < 2:
        raise BadCohortSpec(f"gen_paired_cohort: n_rois {n_rois} too small")
    if n_timepoints < 2:
        raise BadCohortSpec("gen_paired_cohort: n_timepoints must be >= 2")

    if knobs.class_lam + knobs.latent_lam >= 1.0:
        raise BadCohortSpec("gen_paired_cohort: class_lam + latent_lam must be < 1")
    m = knobs.n_latent_anchors
    if m < 2 or knobs.latent_levels < 2:
        raise BadCohortSpec("gen_paired_cohort: need >= 2 latent anchors and levels")

    # prototypes and anchors are flip-symmetric so the class and latent
    # signals survive flip augmentation; per-subject clutter stays raw
    vol_protos = [
        _flip_symmetrize(_unit_rms_field(stream_rng(seed, "volproto", c), dims,
                                         knobs.smooth_sigma))
        for c in range(k_classes)
    ]
    latent_fields = [
        _flip_symmetrize(_unit_rms_field(stream_rng(seed, "latentpattern", a),
                                         dims, knobs.smooth_sigma))
        for a in range(m)
    ]
    class_corrs = [
        _class_correlation(stream_rng(seed, "fcnproto", c), n_rois,
                           knobs.block_count, knobs.block_rho)
        for c in range(k_classes)
    ]
    latent_corrs = [
        _class_correlation(stream_rng(seed, "latentfcn", a), n_rois,
                           knobs.block_count, knobs.block_rho)
        for a in range(m)
    ]
    eye = np.eye(n_rois)
    base_lam = 1.0 - knobs.class_lam - knobs.latent_lam

    samples: list[PairedSample] = []
    for i in range(n_subjects):
        label = i % k_classes
        rng = stream_rng(seed, "subject", i)
        # the latent is shared by both modalities; drawing it from a grid
        # keeps fine-grained cross-modal matching learnable at desk scale
        u = float(rng.integers(0, knobs.latent_levels)) / (knobs.latent_levels - 1)
        w = _path_weights(u, m)

        clutter = _unit_rms_field(rng, dims, knobs.smooth_sigma)
        latent = sum(w[a] * latent_fields[a] for a in range(m) if w[a] != 0.0)
        voxels = (knobs.class_amp * vol_protos[label]
                  + knobs.latent_amp * latent
                  + knobs.smooth_noise_amp * clutter).ravel()
        voxels = voxels + knobs.white_noise_amp * rng.standard_normal(voxels.size)

        path = sum(w[a] * latent_corrs[a] for a in range(m) if w[a] != 0.0)
        corr = (knobs.class_lam * class_corrs[label]
                + knobs.latent_lam * path + base_lam * eye)
        chol = np.linalg.cholesky(corr)
        signals = chol @ rng.standard_normal((n_rois, n_timepoints))

        sid = f"s{i:04d}"
        bold = BoldSeries(n_rois=n_rois, n_timepoints=n_timepoints, signals=signals)
        samples.append(PairedSample(
            volume=Volume3D(dims, voxels, sid),
            bold=bold,
            fcn=bold_to_fcn(bold),
            label=label,
            subject_id=sid,
        ))
    return samples


# ---------------------------------------------------------------------------
# cohort directory I/O
# ---------------------------------------------------------------------------

def save_cohort(directory: str | Path, samples: list[PairedSample],
                seed: int | None = None) -> Path:
    """Write manifest plus one little-endian f64 raw file per modality."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise BadCohortSpec("save_cohort: empty cohort")
    first = samples[0]
    manifest = {
        "format": "cinp-cohort",
        "version": COHORT_FORMAT_VERSION,
        "dims": list(first.volume.dims),
        "n_rois": first.bold.n_rois,
        "n_timepoints": first.bold.n_timepoints,
        "k_classes": int(max(s.label for s in samples)) + 1,
        "dtype": "float64",
        "byte_order": "little",
        "volume_layout": "row-major (D, H, W)",
        "bold_layout": "row-major (n_rois, n_timepoints)",
        "seed": seed,
        "subjects": [
            {
                "id": s.subject_id,
                "label": int(s.label),
                "volume_file": f"{s.subject_id}.vol",
                "bold_file": f"{s.subject_id}.bold",
            }
            for s in samples
        ],
    }
    for s in samples:
        (directory / f"{s.subject_id}.vol").write_bytes(
            s.volume.voxels.astype("<f8").tobytes())
        (directory / f"{s.subject_id}.bold").write_bytes(
            s.bold.signals.astype("<f8").tobytes())
    (directory / COHORT_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_cohort(directory: str | Path) -> list[PairedSample]:
    """Read a cohort directory; FCNs are recomputed from the BOLD files."""
    directory = Path(directory)
    manifest = json.loads((directory / COHORT_MANIFEST).read_text())
    if manifest.get("format") != "cinp-cohort" or manifest.get("version") != COHORT_FORMAT_VERSION:
        raise BadCohortSpec(f"load_cohort: unsupported manifest in {directory}")
    dims = tuple(manifest["dims"])
    n_rois = manifest["n_rois"]
    n_t = manifest["n_timepoints"]
    samples = []
    for entry in manifest["subjects"]:
        vox = np.frombuffer((directory / entry["volume_file"]).read_bytes(), dtype="<f8")
        sig = np.frombuffer((directory / entry["bold_file"]).read_bytes(), dtype="<f8")
        bold = BoldSeries(n_rois=n_rois, n_timepoints=n_t,
                          signals=sig.reshape(n_rois, n_t))
        samples.append(PairedSample(
            volume=Volume3D(dims, vox.copy(), entry["id"]),
            bold=bold,
            fcn=bold_to_fcn(bold),
            label=int(entry["label"]),
            subject_id=entry["id"],
        ))
    return samples
