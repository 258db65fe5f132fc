"""End-to-end experiments and their reports.

Five experiments share one pipeline: train/evaluate against graders, the
data-fraction sweep, the fovea/disc crop sweep, ground-truth threshold
re-labelling of fixed scores, and scoring a secondary (CST-labelled,
low-prevalence) set. Every number is a function of an :class:`ExperimentConfig`
and its seed; per-experiment seeds are derived from ``(seed, experiment id)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import HARDEX_LOCATIONS, Landmarks, Manifest, SplitAssignment, derive_cidme, load_manifest, \
    split_by_patient, write_splits
from .evaluation import (
    METRIC_NAMES,
    ScoredCases,
    auc,
    binary_error_thickness_profile,
    binary_metrics,
    bootstrap_metrics,
    match_operating_point,
    metric_function,
    permutation_test,
    roc_and_auc,
)
from .imageops import AugmentConfig, CropSpec, circular_mask, read_ppm, resize_bilinear
from .model import HEADS, NetworkConfig, TrainConfig, TrainResult, predict_batch, save_checkpoint, train
from .synthgen import SynthConfig, generate_dataset

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPERIMENT_IDS = ("train_eval", "sweep_fraction", "sweep_crop", "sweep_threshold", "eval_secondary")
HARDEX_CRITERIA = ("500um", "1dd", "2dd")
THICKNESS_BINS = tuple(float(v) for v in range(150, 651, 25))


def derive_seed(seed: int, name: str) -> int:
    """Stable 31-bit seed for one experiment (or sub-stream) of a run."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return sha256_bytes(canonical_json(obj).encode())


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, numpy scalars become Python numbers, tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


# -- configuration --------------------------------------------------------------

def _augment_from_dict(d: Optional[dict]) -> Optional[AugmentConfig]:
    if d is None:
        return None
    d = dict(d)
    for k in ("saturation_range", "contrast_range"):
        if k in d:
            d[k] = tuple(d[k])
    return AugmentConfig(**d)


DESK_NET = NetworkConfig(input_size=64, global_average_pool=False)
DESK_TRAIN = TrainConfig(learning_rate=0.01, ema_decay=0.98, total_steps=1000)
SWEEP_NET = NetworkConfig(input_size=32, blocks=((16, 3, 1), (32, 3, 1), (32, 3, 1)), global_average_pool=False)
SWEEP_TRAIN = TrainConfig(learning_rate=0.01, ema_decay=0.98, total_steps=400)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a suite run depends on.

    The defaults are the desk-scale preset: 1,250 synthetic patients (2,000
    training / 500 validation images at an 80/20 patient split), a 64-pixel
    network for the main run and a 32-pixel one for the sweeps. Set
    ``manifest`` / ``secondary_manifest`` to use existing data instead of the
    generator.
    """

    synth: SynthConfig = field(default_factory=lambda: SynthConfig(image_size=64))
    n_patients: int = 1250
    secondary_synth: Optional[SynthConfig] = None  # None: ``synth.secondary()``
    secondary_patients: int = 500
    manifest: Optional[str] = None
    secondary_manifest: Optional[str] = None
    split_fractions: tuple = (0.8, 0.0, 0.2)
    net: NetworkConfig = DESK_NET
    train: TrainConfig = DESK_TRAIN
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    sweep_net: NetworkConfig = SWEEP_NET
    sweep_train: TrainConfig = SWEEP_TRAIN
    label_rule: str = "cpt"
    label_cut: float = 250.0
    match: str = "sensitivity"
    fractions: tuple = (0.125, 0.25, 0.5, 1.0)
    crop_centers: tuple = ("fovea", "disc")
    crop_radii: tuple = (0.05, 0.125, 0.25, 0.5, 1.0, 2.5)
    crop_mask_training: bool = True
    thresholds: tuple = (250.0, 280.0, 300.0, 320.0)
    secondary_rule: str = "cst"
    secondary_cut: float = 300.0
    replicates: int = 2000
    permutations: int = 2000
    experiments: tuple = EXPERIMENT_IDS
    seed: int = 0

    def __post_init__(self):
        for name in ("split_fractions", "fractions", "crop_centers", "crop_radii", "thresholds", "experiments"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = set(self.experiments) - set(EXPERIMENT_IDS)
        if unknown:
            raise ValueError(f"unknown experiments {sorted(unknown)}; choose from {EXPERIMENT_IDS}")
        if self.match not in ("sensitivity", "specificity"):
            raise ValueError("match must be 'sensitivity' or 'specificity'")
        if self.n_patients < 2 or self.secondary_patients < 2:
            raise ValueError("need at least two patients per dataset")
        if self.replicates < 1 or self.permutations < 1:
            raise ValueError("replicates and permutations must be >= 1")
        sweeps = {"sweep_fraction": "fractions", "sweep_threshold": "thresholds"}
        for exp, name in sweeps.items():
            if exp in self.experiments and not getattr(self, name):
                raise ValueError(f"{name} must be nonempty when {exp} is requested")
        if "sweep_crop" in self.experiments and not (self.crop_centers and self.crop_radii):
            raise ValueError("crop_centers and crop_radii must be nonempty when sweep_crop is requested")
        _check_fractions(self.fractions)
        for c in self.crop_centers:
            CropSpec(c, 1.0)
        for r in self.crop_radii:
            CropSpec("fovea", r)

    @property
    def secondary(self) -> SynthConfig:
        return self.secondary_synth if self.secondary_synth is not None else self.synth.secondary()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["synth"] = self.synth.to_dict()
        d["secondary_synth"] = self.secondary.to_dict()
        for k in ("net", "sweep_net", "train", "sweep_train"):
            d[k] = getattr(self, k).to_dict()
        d["augment"] = asdict(self.augment) if self.augment is not None else None
        return _clean(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ExperimentConfig fields {sorted(unknown)}")
        for k in ("synth", "secondary_synth"):
            if d.get(k) is not None:
                d[k] = SynthConfig.from_dict(d[k])
        for k in ("net", "sweep_net"):
            if k in d:
                d[k] = NetworkConfig.from_dict(d[k])
        for k in ("train", "sweep_train"):
            if k in d:
                d[k] = TrainConfig.from_dict(d[k])
        if "augment" in d:
            d["augment"] = _augment_from_dict(d["augment"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _check_fractions(fractions):
    f = list(fractions)
    if any(not 0.0 < x <= 1.0 for x in f):
        raise ValueError(f"fractions must lie in (0, 1], got {f}")
    if f != sorted(f) or len(set(f)) != len(f):
        raise ValueError(f"fractions must be strictly ascending, got {f}")


# -- data -----------------------------------------------------------------------

@dataclass
class EyeData:
    """Model-ready arrays for a set of eye images, aligned by row."""

    images: np.ndarray          # (N, S, S, 3) float32 in [0, 1]
    labels: np.ndarray          # (N, 3) float64, NaN where absent
    thickness: np.ndarray       # (N,) thickness used for the ci-DME label
    patient_id: np.ndarray
    image_id: np.ndarray
    landmarks: list
    grader_ids: tuple
    gradable: np.ndarray        # (N, G) bool
    dme: np.ndarray             # (N, G) int8, 0 where ungradable
    hardex: np.ndarray          # (N, G) str

    def __len__(self) -> int:
        return len(self.images)

    def take(self, idx) -> "EyeData":
        idx = np.asarray(idx)
        return EyeData(self.images[idx], self.labels[idx], self.thickness[idx], self.patient_id[idx],
                       self.image_id[idx], [self.landmarks[i] for i in np.arange(len(self))[idx]],
                       self.grader_ids, self.gradable[idx], self.dme[idx], self.hardex[idx])

    def select_patients(self, patients) -> "EyeData":
        return self.take(np.isin(self.patient_id, list(patients)))

    def cases(self, head: int = 0, scores: Optional[np.ndarray] = None) -> ScoredCases:
        """Scored cases for one head over the rows where that head's label exists."""
        present = ~np.isnan(self.labels[:, head])
        score = np.zeros(len(self)) if scores is None else np.asarray(scores, dtype=np.float64)
        return ScoredCases(self.patient_id[present], self.image_id[present], score[present],
                           self.labels[present, head].astype(np.int8), self.thickness[present])


def load_eye_data(manifest: Manifest, input_size: int, rule: str = "cpt", cut: float = 250.0) -> EyeData:
    """Read, resize and label every record; landmarks are rescaled to the new size."""
    n = len(manifest)
    if n == 0:
        raise ValueError(f"manifest {manifest.dataset_id!r} has no records")
    images = np.empty((n, input_size, input_size, 3), dtype=np.float32)
    labels = np.full((n, 3), np.nan)
    thickness = np.full(n, np.nan)
    landmarks = []
    grader_ids = tuple(manifest.grader_ids)
    gradable = np.zeros((n, len(grader_ids)), dtype=bool)
    dme = np.zeros((n, len(grader_ids)), dtype=np.int8)
    hardex = np.full((n, len(grader_ids)), "none", dtype=object)
    for i, rec in enumerate(manifest.records):
        img = read_ppm(manifest.resolve(rec), dtype=np.float32)
        h, w = img.shape[:2]
        if (h, w) != (input_size, input_size):
            img = resize_bilinear(img, input_size, input_size).astype(np.float32)
        images[i] = img
        try:
            labels[i, 0] = derive_cidme(rec.labels, rule, cut)
        except ValueError as exc:
            raise ValueError(f"image {rec.image_id}: {exc}") from None
        thickness[i] = rec.labels.center_point_thickness if rule == "cpt" else rec.labels.central_subfield_thickness
        for j, v in enumerate((rec.labels.srf_present, rec.labels.irf_present), start=1):
            if v is not None:
                labels[i, j] = v
        landmarks.append(None if rec.landmarks is None else rec.landmarks.scaled(input_size / w, input_size / h))
        for k, gid in enumerate(grader_ids):
            g = rec.grader(gid)
            if g is not None and g.gradable:
                gradable[i, k] = True
                dme[i, k] = int(g.dme_judgment or 0)
                hardex[i, k] = g.hard_exudate_location or "none"
    return EyeData(images, labels, thickness, np.array([r.patient_id for r in manifest.records]),
                   np.array([r.image_id for r in manifest.records]), landmarks, grader_ids, gradable, dme,
                   hardex.astype(str))


# -- records and reports ----------------------------------------------------------

@dataclass
class RunRecord:
    """One experiment's results, plot tables (CSV name -> rows) and artifact paths."""

    experiment_id: str
    config_hash: str
    seed: int
    results: dict
    tables: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean({"experiment_id": self.experiment_id, "config_hash": self.config_hash, "seed": self.seed,
                       "results": self.results, "artifacts": self.artifacts})


def _fmt_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


def write_csv(path, rows: Sequence[dict], extra: Optional[dict] = None) -> None:
    if not rows:
        raise ValueError(f"no rows for {path}")
    extra = extra or {}
    columns = list(rows[0]) + list(extra)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            merged = {**row, **extra}
            writer.writerow([_fmt_cell(merged[c]) for c in columns])


def emit_report(records: Sequence[RunRecord], out_dir, config: dict, provenance: Optional[dict] = None,
                extra_files: Sequence[str] = ()) -> dict:
    """Write ``report.json``, one CSV per plot table and ``hashes.json``.

    Records are sorted by experiment id; every CSV row carries the config
    hash and seed. ``hashes.json`` lists the SHA-256 of every report file and
    of every artifact the records point at (plus ``extra_files``, relative to
    ``out_dir``). Returns the hash map.
    """
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.experiment_id)
    chash = config_hash(config)
    seeds = sorted({r.seed for r in records})
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": chash,
        "seed": seeds[0] if len(seeds) == 1 else seeds,
        "config": config,
        "records": [r.to_dict() for r in records],
    }
    files = ["report.json"]
    (out / "report.json").write_text(json.dumps(_clean(doc), sort_keys=True, indent=1, allow_nan=False) + "\n")
    for r in records:
        for name, rows in sorted(r.tables.items()):
            if rows:
                write_csv(out / name, rows, {"config_hash": r.config_hash, "seed": r.seed})
                files.append(name)
    for r in records:
        files.extend(r.artifacts.values())
    files.extend(extra_files)
    if provenance is not None:
        (out / "provenance.json").write_text(json.dumps(_clean(provenance), sort_keys=True, indent=1) + "\n")
        files.append("provenance.json")
    hashes = {name: sha256_file(out / name) for name in sorted(set(files))}
    (out / "hashes.json").write_text(json.dumps(hashes, sort_keys=True, indent=1) + "\n")
    return hashes


# -- shared evaluation ------------------------------------------------------------

def _metric_fns() -> dict:
    """Metrics of binary calls stored as scores; a negative score marks an ungradable image and is skipped."""
    fns = {}
    for name in METRIC_NAMES:
        f = metric_function(name)

        def fn(c, f=f):
            keep = c.score >= 0
            return f(c.score[keep] >= 0.5, c.truth[keep]) if keep.any() else math.nan

        fns[name] = fn
    return fns


def _ci_dict(res: dict) -> dict:
    return {k: v.to_dict() for k, v in res.items()}


def _auc_ci(cases: ScoredCases, replicates: int, seed: int) -> dict:
    res = bootstrap_metrics(cases, {"auc": auc}, replicates, seed, strict=False)["auc"].to_dict()
    res["positives"] = int(cases.truth.sum())
    return res


def head_aucs(data: EyeData, scores: np.ndarray, replicates: int, seed: int) -> dict:
    """AUC with bootstrap CI for each head whose labels are present (and two-class)."""
    out = {}
    for h, head in enumerate(HEADS):
        cases = data.cases(h, scores[:, h])
        if len(cases) == 0:
            out[head] = "not available"
        elif cases.truth.min() == cases.truth.max():
            out[head] = "single class"
        else:
            out[head] = _auc_ci(cases, replicates, seed)
    return out


def _roc_rows(cases: ScoredCases, **keys) -> list:
    curve, _ = roc_and_auc(cases)
    return [{**keys, "fpr": f, "tpr": t, "score_threshold": s} for f, t, s in curve]


def _grader_points(data: EyeData, gi: int, truth: np.ndarray) -> list:
    """(sensitivity, specificity) of one grader under the judgement and each hard-exudate criterion."""
    ok = data.gradable[:, gi]
    rows = []
    variants = {"judgement": data.dme[ok, gi].astype(bool)}
    for crit in HARDEX_CRITERIA:
        inner = HARDEX_LOCATIONS[1:HARDEX_LOCATIONS.index(crit) + 1]
        variants[f"hardex_within_{crit}"] = np.isin(data.hardex[ok, gi], inner)
    for name, pred in variants.items():
        m = binary_metrics(pred, truth[ok])
        rows.append({"grader": data.grader_ids[gi], "criterion": name, "sensitivity": m["sensitivity"],
                     "specificity": m["specificity"], "n": int(ok.sum())})
    return rows


class UndefinedComparison(ValueError):
    """The grader's matched metric has no value, so there is nothing to match."""


def compare_with_grader(cases: ScoredCases, grader_pred: np.ndarray, mask: np.ndarray, match: str,
                        replicates: int, permutations: int, seed: int, model_on_subset: bool = False) -> dict:
    """Model at an operating point matched to one grader, against that grader.

    The grader is assessed on ``mask`` (its gradable images). The model's
    threshold matches the grader's sensitivity (or specificity) and, unless
    ``model_on_subset``, the model is assessed on every image. Paired
    permutation tests use the images both were assessed on.
    """
    mask = np.asarray(mask, dtype=bool)
    sub = cases.take(mask)
    grader_pred = np.asarray(grader_pred).astype(bool)
    graded = binary_metrics(grader_pred, sub.truth)
    if not np.isfinite(graded[match]):
        raise UndefinedComparison(f"grader {match} undefined: its images hold a single ci-DME class")
    model_cases = sub if model_on_subset else cases
    op = match_operating_point(model_cases, match, graded[match])
    model_binary = (model_cases.score >= op.threshold).astype(float)
    fns = _metric_fns()
    model_ci = bootstrap_metrics(model_cases.with_scores(model_binary), fns, replicates, seed, strict=False)
    # grader CIs resample the same patients as the model's; ungradable images drop out per replicate
    encoded = np.full(len(model_cases), -1.0)
    encoded[mask[mask] if model_on_subset else mask] = grader_pred
    grader_ci = bootstrap_metrics(model_cases.with_scores(encoded), fns, replicates, seed, strict=False)
    grader_ci = {k: replace(v, n=len(sub)) for k, v in grader_ci.items()}
    paired_model = (sub.score >= op.threshold).astype(np.int8)
    pvalues = {}
    for name in METRIC_NAMES:
        res = permutation_test(paired_model, grader_pred, sub.truth, metric_function(name), permutations, seed)
        pvalues[name] = {"difference": res.observed_difference, "p_value": res.p_value}
    return {
        "match": match,
        "target": graded[match],
        "threshold": op.threshold,
        "attained": op.attained,
        "model": _ci_dict(model_ci),
        "grader": _ci_dict(grader_ci),
        "permutation": pvalues,
        "n_model": len(model_cases),
        "n_grader": len(sub),
    }


def _comparison_rows(name: str, comp: dict) -> list:
    rows = []
    for who in ("model", "grader"):
        for metric in METRIC_NAMES:
            m = comp[who][metric]
            rows.append({"comparison": name, "who": who, "metric": metric, "value": m["value"],
                         "ci_low": m["ci_low"], "ci_high": m["ci_high"],
                         "p_value": comp["permutation"][metric]["p_value"], "threshold": comp["threshold"]})
    return rows


def _histogram_rows(source: str, profile: dict) -> list:
    edges = np.array((-np.inf,) + THICKNESS_BINS + (np.inf,))
    rows = []
    for kind in ("fp", "fn"):
        counts, _ = np.histogram(profile[f"{kind}_thickness"], bins=edges)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            rows.append({"source": source, "error": kind, "bin_low": lo, "bin_high": hi, "count": int(c)})
    return rows


def majority_grades(data: EyeData) -> tuple[np.ndarray, np.ndarray]:
    """Majority-vote judgement over gradable graders (ties refer) and the mask of images with any grade."""
    n_ok = data.gradable.sum(axis=1)
    n_pos = (data.dme.astype(bool) & data.gradable).sum(axis=1)
    return (2 * n_pos >= n_ok) & (n_ok > 0), n_ok > 0


def evaluate_scores(data: EyeData, scores: np.ndarray, match: str, replicates: int, permutations: int,
                    seed: int, graders: Optional[Sequence[str]] = None) -> tuple[dict, dict]:
    """Per-head AUCs plus the grader comparison tables for a scored validation set."""
    results = {"heads": head_aucs(data, scores, replicates, seed), "n_images": len(data),
               "n_patients": int(len(np.unique(data.patient_id)))}
    tables = {"roc.csv": []}
    for h, head in enumerate(HEADS):
        if isinstance(results["heads"][head], dict):
            tables["roc.csv"] += _roc_rows(data.cases(h, scores[:, h]), head=head)
    if np.isnan(data.labels[:, 0]).any():
        raise ValueError("every evaluated image needs a ci-DME label")
    cases = data.cases(0, scores[:, 0])
    truth = cases.truth
    graders = list(data.grader_ids if graders is None else graders)
    missing = set(graders) - set(data.grader_ids)
    if missing:
        raise ValueError(f"unknown graders {sorted(missing)}; data has {list(data.grader_ids)}")
    comparisons, points, ops = {}, [], []
    for gid in graders:
        gi = data.grader_ids.index(gid)
        ok = data.gradable[:, gi]
        if ok.sum() == 0:
            comparisons[gid] = "no gradable images"
            continue
        try:
            comp = compare_with_grader(cases, data.dme[ok, gi], ok, match, replicates, permutations,
                                       derive_seed(seed, gid))
            ops += _comparison_rows(gid, comp)
        except UndefinedComparison as exc:
            comp = str(exc)
        comparisons[gid] = comp
        points += _grader_points(data, gi, truth)
    if len(graders) > 1:
        everyone = data.gradable[:, [data.grader_ids.index(g) for g in graders]].all(axis=1)
        for gid in graders:
            gi = data.grader_ids.index(gid)
            name = f"{gid}@all_gradable"
            if everyone.sum() == 0:
                continue
            try:
                comp = compare_with_grader(cases, data.dme[everyone, gi], everyone, match, replicates,
                                           permutations, derive_seed(seed, name), model_on_subset=True)
                ops += _comparison_rows(name, comp)
            except UndefinedComparison as exc:
                comp = str(exc)
            comparisons[name] = comp
    if graders:
        sub = data.take(np.arange(len(data)))
        sub.gradable = data.gradable[:, [data.grader_ids.index(g) for g in graders]]
        sub.dme = data.dme[:, [data.grader_ids.index(g) for g in graders]]
        vote, any_ok = majority_grades(sub)
        try:
            comp = compare_with_grader(cases, vote[any_ok], any_ok, match, replicates, permutations,
                                       derive_seed(seed, "majority")) if any_ok.any() else None
        except UndefinedComparison as exc:
            comparisons["majority"], comp = str(exc), None
        if comp is not None:
            comparisons["majority"] = comp
            ops += _comparison_rows("majority", comp)
            m = binary_metrics(vote[any_ok], truth[any_ok])
            points.append({"grader": "majority", "criterion": "judgement", "sensitivity": m["sensitivity"],
                           "specificity": m["specificity"], "n": int(any_ok.sum())})
            model_prof = binary_error_thickness_profile(cases.score >= comp["threshold"], truth, cases.thickness)
            grader_prof = binary_error_thickness_profile(vote[any_ok], truth[any_ok], cases.thickness[any_ok])
            results["error_thickness"] = {
                "model": {k: model_prof[k] for k in ("fp_fraction_above", "fn_fraction_below", "n_fp", "n_fn")},
                "majority": {k: grader_prof[k] for k in ("fp_fraction_above", "fn_fraction_below", "n_fp", "n_fn")},
                "fp_cut": model_prof["fp_cut"], "fn_cut": model_prof["fn_cut"],
            }
            tables["error_thickness.csv"] = _histogram_rows("model", model_prof) + \
                _histogram_rows("majority", grader_prof)
    results["comparisons"] = comparisons
    tables["operating_points.csv"] = ops
    tables["grader_points.csv"] = points
    return results, tables


# -- experiments ------------------------------------------------------------------

@dataclass
class TrainedModel:
    net: NetworkConfig
    result: TrainResult
    checkpoint: Optional[Path] = None

    @property
    def params(self):
        return self.result.ema_params

    def scores(self, images: np.ndarray) -> np.ndarray:
        return predict_batch(self.params, self.net, images)


def fit(net: NetworkConfig, train_cfg: TrainConfig, augment: Optional[AugmentConfig], data: EyeData,
        seed: int) -> TrainedModel:
    cfg = replace(train_cfg, seed=seed)
    logger.info("training %d images for %d steps (seed %d)", len(data), cfg.total_steps, seed)
    return TrainedModel(net, train(data.images, data.labels, net, cfg, augment))


def scores_hash(scores: np.ndarray) -> str:
    return sha256_bytes(np.ascontiguousarray(scores, dtype="<f8").tobytes())


def run_train_eval(config: ExperimentConfig, train_data: EyeData, val_data: EyeData,
                   work_dir=None) -> tuple[RunRecord, TrainedModel, np.ndarray]:
    """Train on ``train_data`` and evaluate every head and every grader on ``val_data``."""
    _check_disjoint(train_data, val_data)
    seed = derive_seed(config.seed, "train_eval")
    model = fit(config.net, config.train, config.augment, train_data, seed)
    artifacts = {}
    results = {}
    if work_dir is not None:
        path = Path(work_dir) / "checkpoints" / "train_eval.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, config.net, model.result, replace(config.train, seed=seed))
        model.checkpoint = path
        artifacts["checkpoint"] = str(path.relative_to(work_dir))
        results["checkpoint_sha256"] = sha256_file(path)
    scores = model.scores(val_data.images)
    evaluated, tables = evaluate_scores(val_data, scores, config.match, config.replicates, config.permutations,
                                        seed)
    results.update(evaluated)
    results.update(n_train_images=len(train_data), n_train_patients=int(len(np.unique(train_data.patient_id))),
                   final_loss=float(np.mean(model.result.loss_history[-50:])) if model.result.loss_history else None,
                   scores_sha256=scores_hash(scores))
    return RunRecord("train_eval", config.hash, config.seed, results, tables, artifacts), model, scores


def _check_disjoint(a: EyeData, b: EyeData):
    shared = set(a.patient_id) & set(b.patient_id)
    if shared:
        raise ValueError(f"train and validation share patients: {sorted(shared)[:5]}")


def nested_subsamples(patients: Sequence[str], fractions: Sequence[float], seed: int) -> list:
    """Patient subsets, one per fraction, each contained in every larger one."""
    _check_fractions(fractions)
    patients = sorted(patients)
    order = [patients[i] for i in np.random.default_rng(seed).permutation(len(patients))]
    subsets = []
    for f in fractions:
        k = int(math.floor(f * len(patients) + 0.5))
        if k == 0:
            raise ValueError(f"fraction {f} of {len(patients)} patients yields zero patients")
        subsets.append(sorted(order[:k]))
    return subsets


def sweep_fraction(config: ExperimentConfig, train_data: EyeData, val_data: EyeData,
                   fractions: Optional[Sequence[float]] = None) -> RunRecord:
    """One model per nested fraction of training patients, all with the same seed, on a fixed validation set."""
    fractions = tuple(config.fractions if fractions is None else fractions)
    _check_disjoint(train_data, val_data)
    seed = derive_seed(config.seed, "sweep_fraction")
    subsets = nested_subsamples(np.unique(train_data.patient_id), fractions, derive_seed(seed, "subsample"))
    points, rows = [], []
    for f, patients in zip(fractions, subsets):
        data = train_data.select_patients(patients)
        model = fit(config.sweep_net, config.sweep_train, config.augment, data, seed)
        scores = model.scores(val_data.images)
        heads = head_aucs(val_data, scores, config.replicates, derive_seed(seed, "bootstrap"))
        membership = sha256_bytes("\n".join(patients).encode())
        points.append({"fraction": f, "n_patients": len(patients), "n_images": len(data), "heads": heads,
                       "membership_sha256": membership})
        row = {"fraction": f, "n_patients": len(patients), "n_images": len(data)}
        for head in HEADS:
            h = heads[head]
            row[f"auc_{head}"] = h["value"] if isinstance(h, dict) else math.nan
        c = heads["cidme"]
        row.update(ci_low=c["ci_low"], ci_high=c["ci_high"], membership_sha256=membership)
        rows.append(row)
    return RunRecord("sweep_fraction", config.hash, config.seed, {"points": points},
                     {"auc_vs_fraction.csv": rows})


def _masked(data: EyeData, spec: Optional[CropSpec]) -> EyeData:
    if spec is None:
        return data
    out = data.take(np.arange(len(data)))
    out.images = np.stack([circular_mask(img, lm, spec) for img, lm in zip(data.images, data.landmarks)])
    return out


def _require_landmarks(*datasets: EyeData):
    missing = [iid for d in datasets for iid, lm in zip(d.image_id, d.landmarks) if lm is None]
    if missing:
        raise ValueError(f"landmarks missing for {len(missing)} images: {', '.join(missing[:20])}")


def sweep_crop(config: ExperimentConfig, train_data: EyeData, val_data: EyeData,
               specs: Optional[Sequence[CropSpec]] = None) -> RunRecord:
    """Fresh model per crop (plus an unmasked baseline), same seed throughout."""
    if specs is None:
        specs = [CropSpec(c, r) for c in config.crop_centers for r in config.crop_radii]
    if not specs:
        raise ValueError("no crop specs")
    _require_landmarks(train_data, val_data)
    seed = derive_seed(config.seed, "sweep_crop")
    boot = derive_seed(seed, "bootstrap")

    def run(spec):
        tr = _masked(train_data, spec) if config.crop_mask_training else train_data
        model = fit(config.sweep_net, config.sweep_train, config.augment, tr, seed)
        val = _masked(val_data, spec)
        return head_aucs(val, model.scores(val.images), config.replicates, boot)

    baseline = run(None)
    points, rows = [], []
    for spec in specs:
        heads = run(spec)
        points.append({"center": spec.center, "radius_dd": spec.radius_dd, "heads": heads})
        c = heads["cidme"]
        rows.append({"center": spec.center, "radius_dd": spec.radius_dd,
                     "auc": c["value"] if isinstance(c, dict) else math.nan,
                     "ci_low": c["ci_low"] if isinstance(c, dict) else math.nan,
                     "ci_high": c["ci_high"] if isinstance(c, dict) else math.nan})
    return RunRecord("sweep_crop", config.hash, config.seed,
                     {"full_image": baseline, "points": points, "mask_training": config.crop_mask_training},
                     {"auc_vs_radius.csv": rows})


def sweep_threshold(cases: ScoredCases, thresholds: Sequence[float], checkpoint_sha256: Optional[str] = None,
                    replicates: int = 2000, seed: int = 0, config_id: str = "", config_seed: int = 0) -> RunRecord:
    """Relabel fixed scores at each thickness threshold and recompute ROC/AUC; no retraining.

    ``cases.thickness`` supplies the thickness. A threshold leaving a single
    class is flagged and skipped.
    """
    if cases.thickness is None:
        raise ValueError("threshold sweep needs per-case thickness")
    if not thresholds:
        raise ValueError("thresholds must be nonempty")
    s_hash = scores_hash(cases.score)
    points, rows = [], []
    for t in thresholds:
        truth = (cases.thickness >= t).astype(np.int8)
        point = {"threshold_um": float(t), "scores_sha256": s_hash, "checkpoint_sha256": checkpoint_sha256,
                 "positives": int(truth.sum()), "n": len(cases)}
        if truth.min() == truth.max():
            point["status"] = "degenerate: single class"
        else:
            relabelled = cases.with_truth(truth)
            point.update(status="ok", auc=_auc_ci(relabelled, replicates, seed))
            rows += _roc_rows(relabelled, threshold_um=float(t))
        points.append(point)
    return RunRecord("sweep_threshold", config_id, config_seed, {"points": points},
                     {"threshold_roc.csv": rows})


def evaluate_secondary(model: TrainedModel, data: EyeData, match: str = "sensitivity", replicates: int = 2000,
                       permutations: int = 2000, seed: int = 0, reference_prevalence: Optional[float] = None,
                       config_id: str = "", config_seed: int = 0) -> RunRecord:
    """Score a secondary set without retraining and compare against its graders."""
    scores = model.scores(data.images)
    results, tables = evaluate_scores(data, scores, match, replicates, permutations, seed)
    prevalence = float(np.mean(data.labels[:, 0]))
    results["prevalence"] = prevalence
    note = f"ci-DME prevalence {prevalence:.3f}"
    if reference_prevalence is not None:
        results["reference_prevalence"] = reference_prevalence
        note += f" vs {reference_prevalence:.3f} in the development validation set; PPV/NPV reflect the shift"
    results["prevalence_note"] = note
    results["scores_sha256"] = scores_hash(scores)
    if model.checkpoint is not None:
        results["checkpoint_sha256"] = sha256_file(model.checkpoint)
    tables = {f"secondary_{k}": v for k, v in tables.items()}
    return RunRecord("eval_secondary", config_id, config_seed, results, tables)


# -- suite --------------------------------------------------------------------------

def _dataset(config: ExperimentConfig, work: Path, name: str) -> Manifest:
    explicit = config.manifest if name == "primary" else config.secondary_manifest
    if explicit is not None:
        return load_manifest(explicit)
    synth = config.synth if name == "primary" else config.secondary
    n = config.n_patients if name == "primary" else config.secondary_patients
    return generate_dataset(synth, n, work / "data" / name, dataset_id=name)


def run_suite(config: ExperimentConfig, out_dir, timings: Optional[dict] = None) -> list[RunRecord]:
    """Run every requested experiment and write the report into ``out_dir``.

    ``timings``, when given, receives wall-clock seconds per phase; they are
    kept out of the report so its hashes stay reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {} if timings is None else timings
    wanted = set(config.experiments)
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    manifest = _dataset(config, out, "primary")
    splits = split_by_patient(manifest, config.split_fractions, derive_seed(config.seed, "split"))
    write_splits(splits, out / "splits.csv")
    cache = {}

    def data(split, size):
        if (split, size) not in cache:
            cache[(split, size)] = load_eye_data(splits.records(manifest, split), size, config.label_rule,
                                                 config.label_cut)
        return cache[(split, size)]

    records = []
    model = None
    val_scores = None
    if wanted & {"train_eval", "sweep_threshold", "eval_secondary"}:
        rec, model, val_scores = run_train_eval(config, data("train", config.net.input_size),
                                                data("validation", config.net.input_size), out)
        if "train_eval" in wanted:
            records.append(rec)
        lap("train_eval")
    if "sweep_threshold" in wanted:
        val = data("validation", config.net.input_size)
        cases = ScoredCases(val.patient_id, val.image_id, val_scores[:, 0], val.labels[:, 0].astype(np.int8),
                            val.thickness)
        records.append(sweep_threshold(cases, config.thresholds, sha256_file(model.checkpoint), config.replicates,
                                       derive_seed(config.seed, "sweep_threshold"), config.hash, config.seed))
    if "eval_secondary" in wanted:
        sec = load_eye_data(_dataset(config, out, "secondary"), config.net.input_size, config.secondary_rule,
                            config.secondary_cut)
        ref = float(np.mean(data("validation", config.net.input_size).labels[:, 0]))
        records.append(evaluate_secondary(model, sec, config.match, config.replicates, config.permutations,
                                          derive_seed(config.seed, "eval_secondary"), ref, config.hash,
                                          config.seed))
    lap("evaluation")
    size = config.sweep_net.input_size
    if "sweep_fraction" in wanted:
        records.append(sweep_fraction(config, data("train", size), data("validation", size)))
    if "sweep_crop" in wanted:
        records.append(sweep_crop(config, data("train", size), data("validation", size)))
    lap("sweeps")
    extra = ["splits.csv"] + [str(p.relative_to(out)) for p in sorted((out / "data").glob("*/manifest.csv"))]
    emit_report(records, out, config.to_dict(), {"kind": "suite", "config": config.to_dict()}, extra)
    return records


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    mismatches: tuple
    checked: int


def compare_hashes(expected: dict, actual: dict) -> VerifyResult:
    mismatches = tuple(sorted(k for k in set(expected) | set(actual) if expected.get(k) != actual.get(k)))
    return VerifyResult(not mismatches, mismatches, len(expected))


def verify_suite(report_dir, work_dir=None) -> VerifyResult:
    """Re-run a suite from the config recorded in ``report_dir`` and compare file hashes.

    The re-derived files go to ``work_dir`` when given (and are kept there for
    inspection), otherwise to a temporary directory that is removed.
    """
    report = Path(report_dir)
    provenance = json.loads((report / "provenance.json").read_text())
    if provenance.get("kind") != "suite":
        raise ValueError(f"{report} was not produced by a suite run")
    expected = json.loads((report / "hashes.json").read_text())
    config = ExperimentConfig.from_dict(provenance["config"])
    tmp = Path(work_dir) if work_dir is not None else Path(tempfile.mkdtemp(prefix="dmelab-verify-"))
    try:
        run_suite(config, tmp)
        actual = json.loads((tmp / "hashes.json").read_text())
    finally:
        if work_dir is None:
            shutil.rmtree(tmp, ignore_errors=True)
    return compare_hashes(expected, actual)
