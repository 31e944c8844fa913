"""Specimen ingestion, byte featurization, split assignment, and synthetic data.

Featurization schemes:
  byte_image_32x32   -- bytes rastered at a fixed width of 256, area-averaged
                        down to a 32x32 grayscale image, flattened, scaled 1/255
  byte_histogram_256 -- normalized count of each byte value

Both are pure functions of the payload, so featurization parallelizes
trivially and identical payloads always map to identical vectors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from oodgate.errors import UserError
from oodgate.seeding import sub_seed

OOD_SENTINEL = "OOD-unknown"
SPLITS = ("train", "val", "test")
SCHEMES = ("byte_image_32x32", "byte_histogram_256")

RASTER_WIDTH = 256
IMAGE_SIDE = 32


@dataclass
class SampleRecord:
    id: str
    family: str
    split: str = "test"
    payload: bytes | None = None
    features: np.ndarray | None = None
    source: str = "inline"

    def __post_init__(self):
        if (self.payload is None) == (self.features is None):
            raise UserError(f"sample {self.id}: exactly one of payload/features required")
        if not self.family:
            raise UserError(f"sample {self.id}: family must be nonempty")
        if self.split not in SPLITS:
            raise UserError(f"sample {self.id}: bad split {self.split!r}")


@dataclass
class DatasetManifest:
    samples: list[SampleRecord]
    families: list[str]  # in-distribution, order defines class index
    ood_families: list[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if len(set(self.families)) != len(self.families):
            raise UserError("duplicate in-distribution family names")
        known = set(self.families) | set(self.ood_families)
        ids = set()
        for s in self.samples:
            if s.id in ids:
                raise UserError(f"duplicate sample id {s.id!r}")
            ids.add(s.id)
            if s.family not in known:
                raise UserError(f"sample {s.id}: unknown family {s.family!r}")
            if s.family in self.ood_families and s.split != "test":
                raise UserError(f"OOD sample {s.id} assigned split {s.split!r}")

    def class_index(self, family: str) -> int:
        return self.families.index(family)

    def by_split(self, split: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == split]


@dataclass
class SynthSpec:
    n_families: int
    dim: int
    samples_per_family: int
    centroid_separation: float
    intra_family_sigma: float
    n_ood_families: int = 0

    def __post_init__(self):
        if min(self.n_families, self.dim, self.samples_per_family) < 1:
            raise UserError("synthetic spec counts must be >= 1")
        if self.centroid_separation <= 0 or self.intra_family_sigma <= 0:
            raise UserError("separation and sigma must be positive")
        if self.n_ood_families >= self.n_families:
            raise UserError("need at least one in-distribution family")


def featurize_bytes(payload: bytes, scheme: str) -> np.ndarray:
    """Map raw bytes to a fixed-length feature vector in [0, 1]."""
    if len(payload) == 0:
        raise UserError("empty payload")
    if scheme == "byte_histogram_256":
        counts = np.bincount(np.frombuffer(payload, dtype=np.uint8), minlength=256)
        return counts.astype(np.float64) / len(payload)
    if scheme == "byte_image_32x32":
        raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
        n_rows = -(-len(raw) // RASTER_WIDTH)
        raster = np.zeros((n_rows, RASTER_WIDTH))
        raster.ravel()[: len(raw)] = raw
        img = _area_average(_area_average(raster, IMAGE_SIDE, axis=0), IMAGE_SIDE, axis=1)
        return img.ravel() / 255.0
    raise UserError(f"unknown featurization scheme {scheme!r}")


def _area_average(a: np.ndarray, target: int, axis: int) -> np.ndarray:
    """Exact area-average resampling of a step function along one axis."""
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    # integral of the step signal at fractional positions, per column
    cum = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)])
    edges = np.linspace(0.0, n, target + 1)
    lo, frac = np.floor(edges).astype(int), edges - np.floor(edges)
    lo = np.minimum(lo, n)
    hi = np.minimum(lo + 1, n)
    integ = cum[lo] + frac[:, None] * (cum[hi] - cum[lo]) if a.ndim > 1 else cum[lo] + frac * (cum[hi] - cum[lo])
    widths = np.diff(edges)
    out = np.diff(integ, axis=0) / (widths[:, None] if a.ndim > 1 else widths)
    return np.moveaxis(out, 0, axis)


def ingest_directory(path: str, label_rule=None) -> tuple[DatasetManifest, list[str]]:
    """Build a manifest from a directory tree, one family per subdirectory.

    Returns (manifest, errors); unreadable files are collected as error
    strings while ingestion continues.
    """
    if not os.path.isdir(path):
        raise UserError(f"not a directory: {path}")
    label_rule = label_rule or {}
    samples, errors, families = [], [], []
    for sub in sorted(os.listdir(path)):
        subpath = os.path.join(path, sub)
        if not os.path.isdir(subpath):
            continue
        family = label_rule.get(sub, sub)
        for fname in sorted(os.listdir(subpath)):
            fpath = os.path.join(subpath, fname)
            if not os.path.isfile(fpath):
                continue
            try:
                with open(fpath, "rb") as f:
                    payload = f.read()
                if not payload:
                    raise OSError("empty file")
            except OSError as exc:
                errors.append(f"{fpath}: {exc}")
                continue
            if family not in families:
                families.append(family)
            samples.append(SampleRecord(id=f"{sub}/{fname}", family=family,
                                        payload=payload, source=fpath))
    if not samples:
        raise UserError(f"no samples found under {path}")
    return DatasetManifest(samples=samples, families=families), errors


def split_dataset(manifest: DatasetManifest, ratios: tuple[float, float, float],
                  seed: int) -> DatasetManifest:
    """Assign stratified train/val/test splits; OOD families go entirely to test."""
    if min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise UserError(f"split ratios must be positive and sum to 1, got {ratios}")
    by_family: dict[str, list[SampleRecord]] = {}
    for s in manifest.samples:
        by_family.setdefault(s.family, []).append(s)

    new_samples: dict[str, SampleRecord] = {}
    for family in manifest.families:
        recs = by_family.get(family, [])
        if len(recs) < 3:
            raise UserError(f"family {family!r} has {len(recs)} samples; need >= 3 to stratify")
        order = np.random.default_rng(sub_seed(seed, f"split:{family}")).permutation(len(recs))
        n = len(recs)
        n_train, n_val = int(ratios[0] * n), int(ratios[1] * n)
        for pos, idx in enumerate(order):
            split = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
            new_samples[recs[idx].id] = replace(recs[idx], split=split)
    for family in manifest.ood_families:
        for rec in by_family.get(family, []):
            new_samples[rec.id] = replace(rec, split="test")

    ordered = [new_samples[s.id] for s in manifest.samples]
    return DatasetManifest(samples=ordered, families=list(manifest.families),
                           ood_families=list(manifest.ood_families), seed=seed)


@dataclass
class SynthResult:
    manifest: DatasetManifest
    features: np.ndarray  # one row per manifest sample
    centroids: np.ndarray  # in rescaled feature space, one row per family
    sigma: float  # intra-family sigma in rescaled space


def generate_synthetic(spec: SynthSpec, seed: int) -> SynthResult:
    """Draw isotropic Gaussian families around well-separated centroids.

    Centroids sit on scaled coordinate axes so all pairwise distances equal
    centroid_separation * intra_family_sigma exactly; the whole cloud is then
    rescaled into [0, 1] by a single global affine map, which preserves the
    separation-to-sigma ratio.
    """
    if spec.dim < spec.n_families:
        raise UserError(
            f"dim={spec.dim} too small to place {spec.n_families} centroids "
            f"at separation {spec.centroid_separation}")
    rng = np.random.default_rng(sub_seed(seed, "synth"))
    # basis placement: ||c_i - c_j|| = r*sqrt(2) for i != j
    r = spec.centroid_separation * spec.intra_family_sigma / np.sqrt(2.0)
    centroids = np.zeros((spec.n_families, spec.dim))
    centroids[:, : spec.n_families] = np.eye(spec.n_families) * r

    rows = []
    for k in range(spec.n_families):
        rows.append(centroids[k] + spec.intra_family_sigma
                    * rng.standard_normal((spec.samples_per_family, spec.dim)))
    raw = np.vstack(rows)

    lo, hi = raw.min(), raw.max()
    scale = hi - lo
    features = (raw - lo) / scale
    centroids_scaled = (centroids - lo) / scale

    n_id = spec.n_families - spec.n_ood_families
    names = [f"fam{k:02d}" for k in range(spec.n_families)]
    samples = []
    for k, name in enumerate(names):
        for j in range(spec.samples_per_family):
            samples.append(SampleRecord(
                id=f"{name}-{j:04d}", family=name, split="test",
                features=features[k * spec.samples_per_family + j]))
    manifest = DatasetManifest(samples=samples, families=names[:n_id],
                               ood_families=names[n_id:], seed=seed)
    return SynthResult(manifest=manifest, features=features,
                       centroids=centroids_scaled,
                       sigma=spec.intra_family_sigma / scale)


# ---------------------------------------------------------------------------
# File formats (tab-separated, line-delimited; see README)

def write_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w") as f:
        f.write(f"#families={','.join(manifest.families)}\n")
        f.write(f"#ood_families={','.join(manifest.ood_families)}\n")
        f.write(f"#seed={manifest.seed}\n")
        for s in manifest.samples:
            src = s.source if s.payload is not None else "inline"
            f.write(f"{s.id}\t{s.family}\t{s.split}\t{src}\n")


def read_manifest(path: str, features: dict[str, np.ndarray] | None = None) -> DatasetManifest:
    """Read a manifest; inline samples take their vectors from `features`."""
    header = {"families": [], "ood_families": [], "seed": 0}
    samples = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition("=")
                if key == "seed":
                    header["seed"] = int(val)
                else:
                    header[key] = [x for x in val.split(",") if x]
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise UserError(f"{path}: malformed manifest line {line!r}")
            sid, family, split, src = parts
            if features is not None and sid in features:
                samples.append(SampleRecord(id=sid, family=family, split=split,
                                            features=features[sid], source=src))
            elif src != "inline":
                with open(src, "rb") as fh:
                    samples.append(SampleRecord(id=sid, family=family, split=split,
                                                payload=fh.read(), source=src))
            else:
                raise UserError(f"{path}: no feature vector for inline sample {sid!r}")
    return DatasetManifest(samples=samples, families=header["families"],
                           ood_families=header["ood_families"], seed=header["seed"])


def write_features(path: str, ids: list[str], matrix: np.ndarray, scheme: str) -> None:
    with open(path, "w") as f:
        f.write(f"dim={matrix.shape[1]} scheme={scheme}\n")
        for sid, row in zip(ids, matrix):
            f.write(sid + "\t" + ",".join(repr(float(v)) for v in row) + "\n")


def read_features(path: str) -> tuple[dict[str, np.ndarray], str]:
    if not os.path.exists(path):
        raise UserError(f"feature file not found: {path}")
    with open(path) as f:
        head = f.readline().strip()
        try:
            dim_part, scheme_part = head.split()
            dim = int(dim_part.split("=")[1])
            scheme = scheme_part.split("=")[1]
        except (ValueError, IndexError):
            raise UserError(f"{path}: malformed feature header {head!r}") from None
        out = {}
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            sid, _, vals = line.partition("\t")
            vec = np.array([float(v) for v in vals.split(",")])
            if len(vec) != dim:
                raise UserError(f"{path}: sample {sid!r} has {len(vec)} values, expected {dim}")
            out[sid] = vec
    return out, scheme
