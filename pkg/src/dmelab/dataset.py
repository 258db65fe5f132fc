"""Eye-image records, manifest CSV I/O, thickness labels and patient splits."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

HARDEX_LOCATIONS = ("none", "500um", "1dd", "2dd", "beyond")
EYES = ("L", "R")
SPLITS = ("train", "tune", "validation")

BASE_COLUMNS = [
    "patient_id",
    "eye",
    "image_path",
    "cpt_um",
    "cst_um",
    "srf",
    "irf",
    "fovea_x",
    "fovea_y",
    "disc_x",
    "disc_y",
    "disc_diameter_px",
]
GRADER_FIELDS = ("gradable", "hardex_loc", "dme")
_GRADER_COLUMN = re.compile(r"^(g\d+)_(gradable|hardex_loc|dme)$")


class ManifestError(ValueError):
    """Raised for malformed manifests; carries the offending row and column."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class OCTLabels:
    center_point_thickness: Optional[float] = None
    central_subfield_thickness: Optional[float] = None
    srf_present: Optional[int] = None
    irf_present: Optional[int] = None

    def __post_init__(self):
        if self.center_point_thickness is None and self.central_subfield_thickness is None:
            raise ValueError("at least one thickness field is required")
        for name in ("center_point_thickness", "central_subfield_thickness"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class GraderAssessment:
    grader_id: str
    gradable: bool
    hard_exudate_location: Optional[str] = None
    dme_judgment: Optional[int] = None


@dataclass(frozen=True)
class Landmarks:
    """Fovea and optic-disc annotations in continuous pixel coordinates.

    Pixel ``(row i, col j)`` covers ``[j, j+1) x [i, i+1)`` so its center is
    at ``(j + 0.5, i + 0.5)``.
    """

    fovea_center: tuple[float, float]
    disc_center: tuple[float, float]
    disc_diameter: float

    def __post_init__(self):
        if not self.disc_diameter > 0:
            raise ValueError(f"disc_diameter must be > 0, got {self.disc_diameter}")

    def check_bounds(self, height: int, width: int) -> None:
        for name in ("fovea_center", "disc_center"):
            x, y = getattr(self, name)
            if not (0 <= x <= width and 0 <= y <= height):
                raise ValueError(f"{name} {(x, y)} outside a {height}x{width} image")

    def scaled(self, sx: float, sy: float) -> "Landmarks":
        """Landmarks after resizing the image by ``sx`` horizontally and ``sy`` vertically."""
        fx, fy = self.fovea_center
        dx, dy = self.disc_center
        return Landmarks((fx * sx, fy * sy), (dx * sx, dy * sy), self.disc_diameter * (sx + sy) / 2)


@dataclass(frozen=True)
class EyeImageRecord:
    patient_id: str
    eye: str
    image_path: str
    labels: OCTLabels
    graders: tuple[GraderAssessment, ...] = ()
    landmarks: Optional[Landmarks] = None

    @property
    def image_id(self) -> str:
        return f"{self.patient_id}_{self.eye}"

    def grader(self, grader_id: str) -> Optional[GraderAssessment]:
        for g in self.graders:
            if g.grader_id == grader_id:
                return g
        return None


@dataclass
class Manifest:
    records: list[EyeImageRecord]
    dataset_id: str = "manifest"
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen_eyes = set()
        seen_paths = set()
        for i, r in enumerate(self.records):
            if not r.patient_id:
                raise ManifestError("empty patient_id", row=i + 1)
            key = (r.patient_id, r.eye)
            if key in seen_eyes:
                raise ManifestError(f"duplicate record for patient {r.patient_id!r} eye {r.eye}", row=i + 1)
            if r.image_path in seen_paths:
                raise ManifestError(f"duplicate image path {r.image_path!r}", row=i + 1)
            seen_eyes.add(key)
            seen_paths.add(r.image_path)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def patient_ids(self) -> list[str]:
        return sorted({r.patient_id for r in self.records})

    @property
    def grader_ids(self) -> list[str]:
        ids = {g.grader_id for r in self.records for g in r.graders}
        return sorted(ids, key=lambda s: (len(s), s))

    def resolve(self, record: EyeImageRecord) -> Path:
        path = Path(record.image_path)
        return path if path.is_absolute() else self.root / path

    def subset(self, records: Iterable[EyeImageRecord]) -> "Manifest":
        return Manifest(list(records), self.dataset_id, self.root)


def _parse_float(text: str, row: int, column: str) -> Optional[float]:
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise ManifestError(f"not a number: {text!r}", row, column) from None
    if not np.isfinite(value):
        raise ManifestError(f"non-finite value {text!r}", row, column)
    return value


def _parse_binary(text: str, row: int, column: str) -> Optional[int]:
    if text == "":
        return None
    if text not in ("0", "1"):
        raise ManifestError(f"expected 0 or 1, got {text!r}", row, column)
    return int(text)


def _grader_blocks(header: Sequence[str]) -> list[str]:
    blocks: dict[str, set] = {}
    for name in header[len(BASE_COLUMNS):]:
        m = _GRADER_COLUMN.match(name)
        if not m:
            raise ManifestError(f"unexpected column {name!r}", row=0, column=name)
        blocks.setdefault(m.group(1), set()).add(m.group(2))
    for gid, fields in blocks.items():
        missing = set(GRADER_FIELDS) - fields
        if missing:
            raise ManifestError(f"grader {gid} lacks columns {sorted(missing)}", row=0)
    return list(blocks)


def _parse_row(row: dict, rownum: int, grader_ids: list[str]) -> EyeImageRecord:
    patient_id = row["patient_id"].strip()
    if not patient_id:
        raise ManifestError("empty patient_id", rownum, "patient_id")
    eye = row["eye"]
    if eye not in EYES:
        raise ManifestError(f"eye must be L or R, got {eye!r}", rownum, "eye")
    if not row["image_path"]:
        raise ManifestError("empty image_path", rownum, "image_path")

    cpt = _parse_float(row["cpt_um"], rownum, "cpt_um")
    cst = _parse_float(row["cst_um"], rownum, "cst_um")
    if cpt is None and cst is None:
        raise ManifestError("both cpt_um and cst_um are empty", rownum, "cpt_um")
    for value, column in ((cpt, "cpt_um"), (cst, "cst_um")):
        if value is not None and value <= 0:
            raise ManifestError(f"thickness must be > 0, got {value}", rownum, column)
    labels = OCTLabels(cpt, cst, _parse_binary(row["srf"], rownum, "srf"), _parse_binary(row["irf"], rownum, "irf"))

    lm_cols = ["fovea_x", "fovea_y", "disc_x", "disc_y", "disc_diameter_px"]
    lm = [_parse_float(row[c], rownum, c) for c in lm_cols]
    if all(v is None for v in lm):
        landmarks = None
    else:
        for v, c in zip(lm, lm_cols):
            if v is None:
                raise ManifestError("partial landmarks", rownum, c)
        if lm[4] <= 0:
            raise ManifestError("disc diameter must be > 0", rownum, "disc_diameter_px")
        landmarks = Landmarks((lm[0], lm[1]), (lm[2], lm[3]), lm[4])

    graders = []
    for gid in grader_ids:
        gradable = _parse_binary(row[f"{gid}_gradable"], rownum, f"{gid}_gradable")
        loc = row[f"{gid}_hardex_loc"]
        dme = _parse_binary(row[f"{gid}_dme"], rownum, f"{gid}_dme")
        if gradable is None:
            if loc or dme is not None:
                raise ManifestError("grade given without gradability", rownum, f"{gid}_gradable")
            continue
        if loc and loc not in HARDEX_LOCATIONS:
            raise ManifestError(f"unknown hard exudate location {loc!r}", rownum, f"{gid}_hardex_loc")
        graders.append(GraderAssessment(gid, bool(gradable), loc or None, dme))
    return EyeImageRecord(patient_id, eye, row["image_path"], labels, tuple(graders), landmarks)


def load_manifest(path, dataset_id: Optional[str] = None) -> Manifest:
    """Read a manifest CSV. Relative image paths resolve against the CSV's directory."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("empty file", row=0) from None
        if header[: len(BASE_COLUMNS)] != BASE_COLUMNS:
            raise ManifestError(f"header must start with {','.join(BASE_COLUMNS)}", row=0)
        grader_ids = _grader_blocks(header)
        records = []
        seen = {}
        for rownum, cells in enumerate(reader, start=1):
            if len(cells) != len(header):
                raise ManifestError(f"expected {len(header)} cells, got {len(cells)}", rownum)
            record = _parse_row(dict(zip(header, cells)), rownum, grader_ids)
            key = (record.patient_id, record.eye)
            if key in seen:
                raise ManifestError(
                    f"duplicate record for patient {key[0]!r} eye {key[1]} (first at row {seen[key]})",
                    rownum,
                    "eye",
                )
            seen[key] = rownum
            records.append(record)
    return Manifest(records, dataset_id or path.stem, path.parent)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(manifest: Manifest, path) -> None:
    grader_ids = manifest.grader_ids
    header = list(BASE_COLUMNS)
    for gid in grader_ids:
        header += [f"{gid}_{f}" for f in GRADER_FIELDS]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in manifest.records:
            lab = r.labels
            lm = r.landmarks
            row = [
                r.patient_id,
                r.eye,
                r.image_path,
                _fmt(lab.center_point_thickness),
                _fmt(lab.central_subfield_thickness),
                _fmt(lab.srf_present),
                _fmt(lab.irf_present),
            ]
            if lm is None:
                row += [""] * 5
            else:
                row += [_fmt(float(v)) for v in (*lm.fovea_center, *lm.disc_center, lm.disc_diameter)]
            for gid in grader_ids:
                g = r.grader(gid)
                if g is None:
                    row += ["", "", ""]
                else:
                    row += [str(int(g.gradable)), g.hard_exudate_location or "", _fmt(g.dme_judgment)]
            writer.writerow(row)


def derive_cidme(labels: OCTLabels, rule: str = "cpt", threshold: float = 250.0) -> int:
    """Binary ci-DME label: 1 iff the selected thickness is >= ``threshold`` micrometers."""
    if rule == "cpt":
        value = labels.center_point_thickness
    elif rule == "cst":
        value = labels.central_subfield_thickness
    else:
        raise ValueError(f"unknown thickness rule {rule!r}")
    if value is None:
        raise ValueError(f"thickness for rule {rule!r} is absent")
    return int(value >= threshold)


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[str, str]

    def __getitem__(self, patient_id: str) -> str:
        return self.assignment[patient_id]

    def patients(self, split: str) -> list[str]:
        return sorted(p for p, s in self.assignment.items() if s == split)

    def records(self, manifest: Manifest, split: str) -> Manifest:
        return manifest.subset(r for r in manifest.records if self.assignment[r.patient_id] == split)


def split_by_patient(manifest: Manifest, fractions: Sequence[float] = (0.8, 0.0, 0.2), seed: int = 0) -> SplitAssignment:
    """Shuffle patient ids with ``seed`` and cut by cumulative fraction of patient count."""
    if len(manifest) == 0:
        raise ValueError("cannot split an empty manifest")
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or (fractions < 0).any() or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions.tolist()}")
    patients = manifest.patient_ids
    order = np.random.default_rng(seed).permutation(len(patients))
    n = len(patients)
    bounds = np.floor(np.cumsum(fractions) * n + 0.5).astype(int)
    bounds[-1] = n
    assignment = {}
    start = 0
    for split, stop in zip(SPLITS, bounds):
        for i in order[start:stop]:
            assignment[patients[i]] = split
        start = max(start, stop)
    return SplitAssignment(assignment)


def write_splits(splits: SplitAssignment, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "split"])
        for pid in sorted(splits.assignment):
            writer.writerow([pid, splits.assignment[pid]])


def load_splits(path) -> SplitAssignment:
    assignment = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rownum, row in enumerate(reader, start=1):
            if row["split"] not in SPLITS:
                raise ManifestError(f"unknown split {row['split']!r}", rownum, "split")
            if row["patient_id"] in assignment:
                raise ManifestError(f"patient {row['patient_id']!r} assigned twice", rownum, "patient_id")
            assignment[row["patient_id"]] = row["split"]
    return SplitAssignment(assignment)


def filter_gradable(manifest: Manifest, grader_id) -> Manifest:
    """Keep records marked gradable by ``grader_id``, or by every grader if a list is given."""
    grader_ids = [grader_id] if isinstance(grader_id, str) else list(grader_id)
    known = set(manifest.grader_ids)
    for gid in grader_ids:
        if gid not in known:
            raise ValueError(f"unknown grader {gid!r}; manifest has {sorted(known)}")
    kept = []
    for r in manifest.records:
        if all((g := r.grader(gid)) is not None and g.gradable for gid in grader_ids):
            kept.append(r)
    return manifest.subset(kept)
