"""Patient records, the on-disk dataset layout, preprocessing and the phantom generator.

Layout under a dataset root::

    manifest.json              {"patients": [id, ...]}
    <id>/meta.json             label, severity?, clinical{...}, side, slice_count, infected?
    <id>/slice_<n>.raw         side*side float32 little-endian, row-major
    <id>/mask_<n>.raw          side*side uint8 in {0, 1}

All JSON is canonical (sorted keys, compact separators, UTF-8).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import CLASS_NAMES, jsonio
from .errors import ConfigurationError, DataError
from .seeding import stream

SYMPTOMS = ("cough", "fever", "dyspnea", "chest_pain", "fatigue")


@dataclass(frozen=True)
class ClinicalFeatures:
    sex: str
    age: float
    weight: float
    cough: bool = False
    fever: bool = False
    dyspnea: bool = False
    chest_pain: bool = False
    fatigue: bool = False

    def __post_init__(self):
        if self.sex not in ("male", "female"):
            raise DataError(f"sex must be 'male' or 'female', got {self.sex!r}")
        if not 0 <= self.age <= 130:
            raise DataError(f"age {self.age} outside [0, 130]")
        if not 0 < self.weight <= 400:
            raise DataError(f"weight {self.weight} outside (0, 400]")

    def to_dict(self) -> dict:
        d = {"sex": self.sex, "age": self.age, "weight": self.weight}
        d.update({s: bool(getattr(self, s)) for s in SYMPTOMS})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClinicalFeatures":
        unknown = set(d) - {"sex", "age", "weight", *SYMPTOMS}
        if unknown:
            raise DataError(f"unknown clinical fields {sorted(unknown)}")
        try:
            return cls(sex=d["sex"], age=float(d["age"]), weight=float(d["weight"]),
                       **{s: bool(d.get(s, False)) for s in SYMPTOMS})
        except KeyError as exc:
            raise DataError(f"clinical record missing {exc}") from exc

    def raw_vector(self) -> np.ndarray:
        """``[sex(male=1), age, weight, cough, fever, dyspnea, chest_pain, fatigue]``."""
        return np.array([self.sex == "male", self.age, self.weight,
                         *(getattr(self, s) for s in SYMPTOMS)], dtype=np.float64)


@dataclass(eq=False)
class PatientRecord:
    id: str
    label: str
    clinical: ClinicalFeatures
    slices: np.ndarray
    masks: np.ndarray
    severity: int | None = None
    infected: np.ndarray | None = None

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.label not in CLASS_NAMES:
            raise DataError(f"patient {self.id}: invalid label {self.label!r}")
        if self.slices.ndim != 3 or self.slices.shape[1] != self.slices.shape[2]:
            raise DataError(f"patient {self.id}: slices must be a stack of square grids, "
                            f"got {self.slices.shape}")
        if self.slices.shape != self.masks.shape:
            raise DataError(f"patient {self.id}: {self.slices.shape[0]} slices of "
                            f"{self.slices.shape[1:]} vs {self.masks.shape[0]} masks of "
                            f"{self.masks.shape[1:]}")
        if self.masks.size and self.masks.max() > 1:
            raise DataError(f"patient {self.id}: masks must be binary")
        if self.severity is not None:
            if self.label != "covid":
                raise DataError(f"patient {self.id}: severity only applies to covid patients")
            if self.severity not in (1, 2, 3, 4):
                raise DataError(f"patient {self.id}: severity {self.severity} outside 1..4")
        if self.infected is not None:
            self.infected = np.asarray(self.infected, dtype=bool)
            if self.infected.shape != (self.slices.shape[0],):
                raise DataError(f"patient {self.id}: {self.infected.shape[0]} infection flags for "
                                f"{self.slices.shape[0]} slices")

    @property
    def label_index(self) -> int:
        return CLASS_NAMES.index(self.label)

    @property
    def side(self) -> int:
        return self.slices.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        flags_equal = (self.infected is None and other.infected is None) or (
            self.infected is not None and other.infected is not None
            and np.array_equal(self.infected, other.infected))
        return (self.id == other.id and self.label == other.label
                and self.severity == other.severity and self.clinical == other.clinical
                and flags_equal and np.array_equal(self.slices, other.slices)
                and np.array_equal(self.masks, other.masks))


# disk format -----------------------------------------------------------------

def write_dataset(records, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids")
    jsonio.write(root / "manifest.json", {"patients": sorted(ids)})
    for r in records:
        pdir = root / r.id
        pdir.mkdir(exist_ok=True)
        meta = {"label": r.label, "clinical": r.clinical.to_dict(), "side": r.side,
                "slice_count": int(r.slices.shape[0])}
        if r.severity is not None:
            meta["severity"] = int(r.severity)
        if r.infected is not None:
            meta["infected"] = [bool(x) for x in r.infected]
        jsonio.write(pdir / "meta.json", meta)
        for n in range(r.slices.shape[0]):
            (pdir / f"slice_{n}.raw").write_bytes(r.slices[n].astype("<f4").tobytes())
            (pdir / f"mask_{n}.raw").write_bytes(r.masks[n].astype(np.uint8).tobytes())


def _read_grid(path: Path, side: int, dtype: str) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file {path}")
    raw = path.read_bytes()
    expected = side * side * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: {len(raw)} bytes, expected {expected} for a {side}x{side} grid")
    return np.frombuffer(raw, dtype=dtype).reshape(side, side)


def load_patient(pdir) -> PatientRecord:
    pdir = Path(pdir)
    meta_path = pdir / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"missing file {meta_path}")
    meta = jsonio.read(meta_path)
    unknown = set(meta) - {"label", "severity", "clinical", "side", "slice_count", "infected"}
    if unknown:
        raise DataError(f"{meta_path}: unknown fields {sorted(unknown)}")
    try:
        side, count = int(meta["side"]), int(meta["slice_count"])
        label, clinical = meta["label"], ClinicalFeatures.from_dict(meta["clinical"])
    except KeyError as exc:
        raise DataError(f"{meta_path}: missing field {exc}") from exc
    except DataError as exc:
        raise DataError(f"{meta_path}: {exc}") from exc
    n_slices = len(list(pdir.glob("slice_*.raw")))
    n_masks = len(list(pdir.glob("mask_*.raw")))
    if not n_slices == n_masks == count:
        raise DataError(f"patient {pdir.name}: meta declares {count} slices, found {n_slices} "
                        f"slice files and {n_masks} mask files")
    slices = np.stack([_read_grid(pdir / f"slice_{n}.raw", side, "<f4") for n in range(count)]) \
        if count else np.zeros((0, side, side), np.float32)
    masks = np.stack([_read_grid(pdir / f"mask_{n}.raw", side, "u1") for n in range(count)]) \
        if count else np.zeros((0, side, side), np.uint8)
    try:
        return PatientRecord(pdir.name, label, clinical, slices, masks, meta.get("severity"),
                             meta.get("infected"))
    except DataError as exc:
        raise DataError(f"{pdir}: {exc}") from exc


def load_dataset(root) -> list[PatientRecord]:
    """Load and validate every patient in the manifest, ordered by id."""
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise DataError(f"missing file {manifest}")
    ids = jsonio.read(manifest).get("patients")
    if not isinstance(ids, list):
        raise DataError(f"{manifest}: 'patients' must be a list of ids")
    return [load_patient(root / pid) for pid in sorted(ids)]


# preprocessing ---------------------------------------------------------------

def area_weights(src: int, dst: int) -> np.ndarray:
    """``dst x src`` matrix averaging source cells over each destination cell."""
    edges = np.arange(dst + 1) * (src / dst)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(src)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def area_resize(grid: np.ndarray, side: int) -> np.ndarray:
    h, w = grid.shape
    return area_weights(h, side) @ grid @ area_weights(w, side).T


def preprocess_slice(grid, mask, side: int) -> np.ndarray:
    """Zero out-of-lung pixels, rescale lung intensities to [0, 1], area-resize to ``side``."""
    grid = np.asarray(grid, dtype=np.float64)
    mask = np.asarray(mask)
    if grid.shape != mask.shape or grid.ndim != 2:
        raise DataError(f"slice {grid.shape} and mask {mask.shape} must be matching 2-D grids")
    if not np.isin(mask, (0, 1)).all():
        raise DataError("mask must be binary")
    inside = mask.astype(bool)
    out = np.zeros_like(grid)
    if inside.any():
        lo, hi = grid[inside].min(), grid[inside].max()
        if hi > lo:
            out[inside] = (grid[inside] - lo) / (hi - lo)
    return out if grid.shape == (side, side) else area_resize(out, side)


def preprocess_record(record: PatientRecord, side: int) -> np.ndarray:
    return np.stack([preprocess_slice(s, m, side) for s, m in zip(record.slices, record.masks)])


# phantom ---------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomConfig:
    patients_per_class: int = 30
    slices_per_patient: int = 24
    side: int = 64
    seed: int = 0
    blob_intensity: tuple[float, float] = (0.35, 0.6)
    blob_sigma: tuple[float, float] = (1.5, 3.0)
    consolidation_radius: tuple[float, float] = (5.0, 8.0)
    consolidation_intensity: tuple[float, float] = (0.45, 0.7)
    noise: float = 0.04
    clinical_strength: float = 0.5
    subtle_fraction: float = 0.0
    subtle_intensity: float = 0.02
    candidate_count: int = 10

    def __post_init__(self):
        if self.side < 32:
            raise ConfigurationError(f"phantom side must be at least 32, got {self.side}")
        if self.slices_per_patient < self.candidate_count:
            raise ConfigurationError(f"{self.slices_per_patient} slices per patient is fewer than "
                                     f"the {self.candidate_count} candidates")
        if self.patients_per_class < 1:
            raise ConfigurationError("need at least one patient per class")
        for name in ("blob_intensity", "blob_sigma", "consolidation_radius",
                     "consolidation_intensity"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigurationError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        if not 0 <= self.clinical_strength <= 1 or not 0 <= self.subtle_fraction <= 1:
            raise ConfigurationError("clinical_strength and subtle_fraction must lie in [0, 1]")
        lung_w, lung_h = _lung_axes(self.side, 0.75)
        if 2 * self.blob_sigma[1] > lung_w:
            raise ConfigurationError(f"blob sigma {self.blob_sigma[1]} too large for side {self.side}")
        if self.consolidation_radius[1] > lung_h:
            raise ConfigurationError(f"consolidation radius {self.consolidation_radius[1]} too large "
                                     f"for side {self.side}")


@dataclass
class PhantomDataset:
    records: list[PatientRecord]
    config: PhantomConfig
    lesions: dict[str, np.ndarray] = field(default_factory=dict)


def _lung_axes(side: int, zscale: float) -> tuple[float, float]:
    return 0.17 * side * zscale, 0.28 * side * zscale


# symptom direction per class: +1 common, -1 rare (cough, fever, dyspnea, chest_pain, fatigue)
_SYMPTOM_PATTERN = {
    "covid": (-1, -1, -1, -1, +1),
    "cap": (+1, +1, -1, -1, -1),
    "normal": (-1, -1, +1, +1, -1),
}
_MALE_PATTERN = {"covid": +1, "cap": +1, "normal": -1}
_AGE_OFFSET = {"covid": 0.0, "cap": 15.0, "normal": -15.0}
_WEIGHT_OFFSET = {"covid": 10.0, "cap": -10.0, "normal": 0.0}


def _sample_clinical(label: str, strength: float, rng: np.random.Generator) -> ClinicalFeatures:
    def bern(direction):
        return bool(rng.random() < 0.5 + strength * 0.45 * direction)

    sex = "male" if bern(_MALE_PATTERN[label]) else "female"
    age = float(np.clip(np.round(50.0 + strength * _AGE_OFFSET[label] + 12.0 * rng.normal()), 18, 95))
    weight = float(np.clip(np.round(75.0 + strength * _WEIGHT_OFFSET[label] + 10.0 * rng.normal()),
                           40, 140))
    symptoms = {s: bern(d) for s, d in zip(SYMPTOMS, _SYMPTOM_PATTERN[label])}
    return ClinicalFeatures(sex, age, weight, **symptoms)


def _anatomy(side: int, z: int, n: int, jitter: np.ndarray):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = side / 2
    body = ((xx - c) / (0.46 * side)) ** 2 + ((yy - c) / (0.40 * side)) ** 2 <= 1
    zscale = 0.75 + 0.25 * math.sin(math.pi * (z + 0.5) / n)
    lungs = []
    for k, sign in enumerate((-1, 1)):
        a, b = _lung_axes(side, zscale * jitter[k])
        cx, cy = c + sign * 0.22 * side, c
        lungs.append((cx, cy, a, b))
    mask = np.zeros((side, side), dtype=bool)
    for cx, cy, a, b in lungs:
        mask |= ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1
    return xx, yy, body, mask, lungs


def _patient(pid: str, label: str, subtle: bool, cfg: PhantomConfig):
    rng = stream(cfg.seed, "phantom", pid)
    n, side = cfg.slices_per_patient, cfg.side
    jitter = rng.uniform(0.95, 1.05, size=2)
    infected = np.zeros(n, dtype=bool)
    if label == "covid":
        count = int(rng.integers(1, 3)) if subtle else int(
            rng.integers(cfg.candidate_count, max(cfg.candidate_count, round(0.75 * n)) + 1))
        infected[rng.choice(n, size=count, replace=False)] = True
    elif label == "cap":
        count = int(rng.integers(cfg.candidate_count, max(cfg.candidate_count, round(0.75 * n)) + 1))
        start = int(rng.integers(0, n - count + 1))
        infected[start:start + count] = True
    slices = np.zeros((n, side, side))
    masks = np.zeros((n, side, side), dtype=np.uint8)
    lesions = np.zeros((n, side, side), dtype=bool)
    blob_counts = []
    for z in range(n):
        xx, yy, body, lung, lungs = _anatomy(side, z, n, jitter)
        img = np.where(body, 0.55, 0.0)
        img[lung] = 0.12
        lesion = np.zeros((side, side))
        region = np.zeros((side, side), dtype=bool)
        if infected[z] and label == "covid":
            blobs = int(rng.integers(1, 3)) if subtle else int(rng.integers(2, 6))
            blob_counts.append(blobs)
            for _ in range(blobs):
                cx, cy, a, b = lungs[int(rng.integers(0, 2))]
                theta, rho = rng.uniform(0, 2 * math.pi), rng.uniform(0.55, 0.8)
                bx, by = cx + rho * a * math.cos(theta), cy + rho * b * math.sin(theta)
                amp = cfg.subtle_intensity if subtle else rng.uniform(*cfg.blob_intensity)
                sigma = rng.uniform(*cfg.blob_sigma)
                r2 = (xx - bx) ** 2 + (yy - by) ** 2
                lesion += amp * np.exp(-r2 / (2 * sigma**2))
                region |= r2 <= (1.5 * sigma) ** 2
        elif infected[z] and label == "cap":
            cx, cy, a, b = lungs[int(rng.integers(0, 2))]
            bx, by = cx + rng.uniform(-0.3, 0.3) * a, cy + 0.5 * b
            radius = rng.uniform(*cfg.consolidation_radius)
            amp = rng.uniform(*cfg.consolidation_intensity)
            r = np.sqrt((xx - bx) ** 2 + (yy - by) ** 2)
            lesion += amp / (1.0 + np.exp((r - radius) / 1.2))
            region |= r <= radius
        img = img + np.where(lung, lesion, 0.0) + cfg.noise * rng.normal(size=(side, side))
        slices[z] = img
        masks[z] = lung
        lesions[z] = region & lung
    severity = None
    if label == "covid":
        if subtle:
            severity = 1
        else:
            involvement = infected.mean() * np.mean(blob_counts) / 5.0
            severity = int(np.clip(math.ceil(4 * involvement), 1, 4))
    clinical = _sample_clinical(label, cfg.clinical_strength, rng)
    record = PatientRecord(pid, label, clinical, slices.astype(np.float32), masks, severity, infected)
    return record, lesions


def generate_phantom(config: PhantomConfig, out_dir=None) -> PhantomDataset:
    """Deterministic synthetic cohort; written to ``out_dir`` when given.

    Normal patients have two elliptical lung fields plus noise. COVID-19
    patients carry 2-5 soft peripheral blobs on a random subset of slices; CAP
    patients one large lower-zone consolidation over a contiguous run of
    slices. A ``subtle_fraction`` of COVID-19 patients get one or two faint
    lesions only, the phantom's counterpart of cases without clear imaging
    findings.
    """
    rng = stream(config.seed, "phantom", "roster")
    labels = np.repeat(np.arange(len(CLASS_NAMES)), config.patients_per_class)
    labels = labels[rng.permutation(labels.size)]
    covid_slots = np.flatnonzero(labels == CLASS_NAMES.index("covid"))
    n_subtle = int(round(config.subtle_fraction * covid_slots.size))
    subtle = set(rng.choice(covid_slots, size=n_subtle, replace=False).tolist()) if n_subtle else set()
    records, lesions = [], {}
    for i, li in enumerate(labels):
        pid = f"pt{i:04d}"
        record, lesion = _patient(pid, CLASS_NAMES[li], i in subtle, config)
        records.append(record)
        lesions[pid] = lesion
    if out_dir is not None:
        write_dataset(records, out_dir)
    return PhantomDataset(records, config, lesions)
