"""Procedural fundus-like images with known thickness, fluid and exudate latents.

Every case is a pure function of ``(config.seed, case_index)``. Disease
features are drawn only inside ``lesion_radius_dd`` disc diameters of the
fovea; everything else (illumination, vessels, disc, decoy exudates) is
nuisance that does not depend on thickness.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .dataset import EyeImageRecord, GraderAssessment, Landmarks, Manifest, OCTLabels, write_manifest
from .imageops import write_ppm

logger = logging.getLogger(__name__)


def negative_rate(marginal: float, prevalence: float, positive_rate: float) -> float:
    """Rate among non-ci-DME eyes that yields ``marginal`` given the rate among ci-DME eyes."""
    if prevalence >= 1.0:
        return 0.0
    return (marginal - prevalence * positive_rate) / (1.0 - prevalence)


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    prevalence_cidme: float = 0.283
    prevalence_srf: float = 0.157
    prevalence_irf: float = 0.455
    # fluid rates among ci-DME eyes; rates among the rest are solved from the marginals
    srf_rate_if_cidme: float = 0.45
    irf_rate_if_cidme: float = 0.85
    cpt_healthy_mean: float = 230.0
    cpt_healthy_sd: float = 20.0
    cpt_diseased_mean: float = 350.0
    cpt_diseased_sd: float = 80.0
    cidme_threshold: float = 250.0
    lesion_gain: float = 0.004
    lesion_radius_dd: float = 1.0
    srf_amplitude: float = 0.16
    irf_amplitude: float = 0.22
    true_exudate_rate: float = 0.8
    decoy_exudate_rate: float = 0.4
    grader_noise: tuple = ((0.05, 0.08), (0.05, 0.08), (0.08, 0.05))
    ungradable_rate: float = 0.03
    thickness_field: str = "cpt"
    cst_offset_um: float = 50.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grader_noise", tuple(tuple(float(v) for v in g) for g in self.grader_noise))
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        for name in ("prevalence_cidme", "prevalence_srf", "prevalence_irf", "srf_rate_if_cidme",
                     "irf_rate_if_cidme", "true_exudate_rate", "decoy_exudate_rate", "ungradable_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.cpt_healthy_sd <= 0 or self.cpt_diseased_sd <= 0:
            raise ValueError("thickness sds must be > 0")
        if self.lesion_gain < 0:
            raise ValueError("lesion_gain must be >= 0")
        if self.thickness_field not in ("cpt", "cst"):
            raise ValueError("thickness_field must be 'cpt' or 'cst'")
        for miss, false_alarm in self.grader_noise:
            if not (0 <= miss <= 1 and 0 <= false_alarm <= 1):
                raise ValueError("grader noise rates must be in [0, 1]")
        for fluid in ("srf", "irf"):
            rate = self.fluid_rates(fluid)[1]
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{fluid} marginal unreachable with the configured ci-DME rate (needs {rate:.3f})")

    def fluid_rates(self, fluid: str) -> tuple[float, float]:
        """(rate if ci-DME, rate otherwise) for ``fluid`` in {'srf', 'irf'}."""
        pos = getattr(self, f"{fluid}_rate_if_cidme")
        return pos, negative_rate(getattr(self, f"prevalence_{fluid}"), self.prevalence_cidme, pos)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grader_noise"] = [list(g) for g in self.grader_noise]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def secondary(self, **overrides) -> "SynthConfig":
        """A CST-labelled, single-grader, low-prevalence variant for generalisation checks."""
        base = dict(prevalence_cidme=0.078, thickness_field="cst", grader_noise=((0.35, 0.05),),
                    seed=self.seed + 7919)
        base.update(overrides)
        return replace(self, **base)


@dataclass(frozen=True)
class SynthLatents:
    cpt: float
    srf: int
    irf: int
    eye: str
    fovea_center: tuple[float, float]
    disc_center: tuple[float, float]
    disc_diameter: float
    # (x, y) positions; true ones sit inside the lesion radius, decoys anywhere within 2 DD
    exudates: tuple = ()
    nuisance_seed: int = 0

    @property
    def landmarks(self) -> Landmarks:
        return Landmarks(self.fovea_center, self.disc_center, self.disc_diameter)


def _truncated_normal(u: float, mean: float, sd: float, lo: float, hi: float) -> float:
    a, b = ndtr((lo - mean) / sd), ndtr((hi - mean) / sd)
    x = mean + sd * ndtri(a + u * (b - a))
    return float(np.clip(x, lo, np.nextafter(hi, -np.inf)))


def sample_latents(config: SynthConfig, case_index: int) -> SynthLatents:
    rng = np.random.default_rng([config.seed, case_index, 0])
    # fixed draw order: every value is drawn whether or not it is used
    u_status, u_cpt, u_srf, u_irf = rng.random(4)
    fovea_jitter = rng.normal(0.0, 0.02, 2)
    dd_jitter, dist_jitter, disc_dy = rng.normal(0.0, [0.05, 0.04, 0.1])
    true_present, decoy_present = rng.random(2)
    n_true, n_decoy = rng.integers(3, 9, 2)
    true_pos = rng.random((8, 2))
    decoy_pos = rng.random((8, 2))
    nuisance_seed = int(rng.integers(2**62))

    t = config.cidme_threshold
    diseased = u_status < config.prevalence_cidme
    if diseased:
        cpt = _truncated_normal(u_cpt, config.cpt_diseased_mean, config.cpt_diseased_sd, t, np.inf)
    else:
        cpt = _truncated_normal(u_cpt, config.cpt_healthy_mean, config.cpt_healthy_sd, 1.0, t)
    srf_pos, srf_neg = config.fluid_rates("srf")
    irf_pos, irf_neg = config.fluid_rates("irf")
    srf = int(u_srf < (srf_pos if diseased else srf_neg))
    irf = int(u_irf < (irf_pos if diseased else irf_neg))

    s = config.image_size
    eye = "R" if case_index % 2 == 0 else "L"
    fovea = s / 2 + s * fovea_jitter
    dd = 0.14 * s * (1.0 + dd_jitter)
    # right-eye photographs show the disc to the right of the fovea
    side = 1.0 if eye == "R" else -1.0
    disc = fovea + np.array([side * 2.5 * dd * (1.0 + dist_jitter), disc_dy * dd])

    def scatter(unit, n, r_lo, r_hi):
        angle = 2 * np.pi * unit[:n, 0]
        radius = dd * np.sqrt(r_lo**2 + unit[:n, 1] * (r_hi**2 - r_lo**2))
        return [(float(fovea[0] + r * np.cos(a)), float(fovea[1] + r * np.sin(a))) for a, r in zip(angle, radius)]

    exudates = []
    if diseased and true_present < config.true_exudate_rate:
        exudates += scatter(true_pos, n_true, 0.1, 0.8 * config.lesion_radius_dd)
    if decoy_present < config.decoy_exudate_rate:
        exudates += scatter(decoy_pos, n_decoy, 0.3, 2.0)

    return SynthLatents(
        cpt=cpt,
        srf=srf,
        irf=irf,
        eye=eye,
        fovea_center=(float(fovea[0]), float(fovea[1])),
        disc_center=(float(disc[0]), float(disc[1])),
        disc_diameter=float(dd),
        exudates=tuple(exudates),
        nuisance_seed=nuisance_seed,
    )


def exudate_proxy(latents: SynthLatents) -> tuple[int, str]:
    """Noise-free hard-exudate reading: (any exudate within 1 DD of the fovea, location class)."""
    if not latents.exudates:
        return 0, "none"
    fx, fy = latents.fovea_center
    d = min(np.hypot(x - fx, y - fy) for x, y in latents.exudates) / latents.disc_diameter
    # 500 um is taken as one third of a disc diameter
    if d <= 1 / 3:
        loc = "500um"
    elif d <= 1.0:
        loc = "1dd"
    elif d <= 2.0:
        loc = "2dd"
    else:
        loc = "beyond"
    return int(d <= 1.0), loc


def _bump(d, radius):
    """Compactly supported (1 - (d/r)^2)^2 profile."""
    q = np.clip(1.0 - (d / radius) ** 2, 0.0, None)
    return q * q


def _polyline_distance(x, y, pts):
    best = np.full(x.shape, np.inf)
    for px, py in pts:
        np.minimum(best, (x - px) ** 2 + (y - py) ** 2, out=best)
    return np.sqrt(best)


def render_fundus(latents: SynthLatents, config: SynthConfig) -> np.ndarray:
    s = config.image_size
    rng = np.random.default_rng(latents.nuisance_seed)
    illum = rng.uniform(0.85, 1.1)
    tint = rng.normal(0.0, 0.03, 3)
    vessel_bulge = rng.uniform(1.4, 1.9, 2)
    vessel_reach = rng.uniform(4.0, 5.0, 2)
    nasal_angles = rng.uniform(0.2, 0.5, 2) * np.pi
    irf_phase = rng.uniform(0, 2 * np.pi)
    noise = rng.normal(0.0, 0.012, (s, s, 3))

    y, x = np.mgrid[0:s, 0:s] + 0.5
    fx, fy = latents.fovea_center
    dx0, dy0 = latents.disc_center
    dd = latents.disc_diameter
    d_fovea = np.hypot(x - fx, y - fy)

    r = np.hypot(x - s / 2, y - s / 2) / (0.47 * s)
    inside = r <= 1.0
    base = np.array([0.78, 0.36, 0.16]) + tint
    img = base * (illum * (1.0 - 0.35 * r**2))[..., None]
    img *= (1.0 - 0.35 * np.exp(-((d_fovea / dd) ** 2) / (2 * 0.45**2)))[..., None]

    # optic disc with a soft rim
    q = np.hypot((x - dx0) / (0.5 * dd), (y - dy0) / (0.55 * dd))
    w = np.clip((1.0 - q) / 0.15, 0.0, 1.0)[..., None]
    img = img * (1 - w) + w * np.array([0.98, 0.88, 0.62]) * illum

    # vessel arcades toward the fovea plus two short nasal branches
    side = np.sign(fx - dx0) or 1.0
    width = max(0.07 * dd, 0.6)
    dark = np.zeros((s, s))
    n_pts = max(24, int(6 * dd))
    t = np.linspace(0.0, 1.0, n_pts)
    for k, sign in enumerate((-1.0, 1.0)):
        px = dx0 + side * vessel_reach[k] * dd * t
        py = dy0 + sign * vessel_bulge[k] * dd * np.sin(0.8 * np.pi * t)
        dark = np.maximum(dark, np.exp(-(_polyline_distance(x, y, zip(px, py)) ** 2) / (2 * width**2)))
        ang = nasal_angles[k]
        px = dx0 - side * 2.0 * dd * t * np.cos(ang)
        py = dy0 + sign * 2.0 * dd * t * np.sin(ang)
        dark = np.maximum(dark, np.exp(-(_polyline_distance(x, y, zip(px, py)) ** 2) / (2 * width**2)))
    img *= 1.0 - dark[..., None] * np.array([0.35, 0.55, 0.55])
    img += noise

    # exudates: bright yellow dots, truncated at three sigma
    sigma = max(0.06 * dd, 0.5)
    for ex, ey in latents.exudates:
        d2 = (x - ex) ** 2 + (y - ey) ** 2
        g = np.where(d2 <= (3 * sigma) ** 2, np.exp(-d2 / (2 * sigma**2)), 0.0)[..., None]
        img += 0.6 * g * (np.array([0.95, 0.92, 0.35]) - img)

    radius = config.lesion_radius_dd * dd
    amplitude = config.lesion_gain * max(0.0, latents.cpt - config.cidme_threshold)
    if amplitude > 0:
        img += amplitude * _bump(d_fovea, radius)[..., None] * np.array([0.55, 0.5, 0.05])
    if latents.srf:
        img += config.srf_amplitude * _bump(d_fovea, 0.45 * radius)[..., None] * np.array([-0.6, -0.1, 0.9])
    if latents.irf:
        cysts = np.zeros((s, s))
        for k in range(8):
            a = irf_phase + k * np.pi / 4
            cx, cy = fx + 0.5 * radius * np.cos(a), fy + 0.5 * radius * np.sin(a)
            cysts += _bump(np.hypot(x - cx, y - cy), 0.16 * radius)
        img -= config.irf_amplitude * cysts[..., None] * np.array([1.0, 0.8, 0.6])

    img = np.where(inside[..., None], img, 0.0)
    return np.clip(img, 0.0, 1.0)


def simulate_graders(latents: SynthLatents, config: SynthConfig, case_index: int) -> tuple[GraderAssessment, ...]:
    """Noisy readings of the exudate proxy, one per configured (miss, false-alarm) pair."""
    rng = np.random.default_rng([config.seed, case_index, 2])
    proxy, loc = exudate_proxy(latents)
    grades = []
    for k, (miss, false_alarm) in enumerate(config.grader_noise, start=1):
        u_grade, u_flip = rng.random(2)
        gid = f"g{k}"
        if u_grade < config.ungradable_rate:
            grades.append(GraderAssessment(gid, False))
            continue
        flip = u_flip < (miss if proxy else false_alarm)
        if not flip:
            grades.append(GraderAssessment(gid, True, loc, proxy))
        elif proxy:
            grades.append(GraderAssessment(gid, True, "none", 0))
        else:
            grades.append(GraderAssessment(gid, True, "1dd", 1))
    return tuple(grades)


def make_record(latents: SynthLatents, config: SynthConfig, patient_id: str, image_path: str,
                graders: tuple[GraderAssessment, ...]) -> EyeImageRecord:
    cpt = latents.cpt
    if config.thickness_field == "cpt":
        labels = OCTLabels(center_point_thickness=cpt, srf_present=latents.srf, irf_present=latents.irf)
    else:
        labels = OCTLabels(central_subfield_thickness=cpt + config.cst_offset_um)
    return EyeImageRecord(patient_id, latents.eye, image_path, labels, graders, latents.landmarks)


def generate_dataset(config: SynthConfig, n_patients: int, out_dir, dataset_id: Optional[str] = None) -> Manifest:
    """Write two eyes per patient as PPM images plus ``manifest.csv`` and ``synth_config.json``."""
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for p in range(n_patients):
        pid = f"P{p:05d}"
        for e in range(2):
            case_index = 2 * p + e
            latents = sample_latents(config, case_index)
            rel = f"images/{pid}_{latents.eye}.ppm"
            write_ppm(out_dir / rel, render_fundus(latents, config))
            graders = simulate_graders(latents, config, case_index)
            records.append(make_record(latents, config, pid, rel, graders))
        if (p + 1) % 200 == 0:
            logger.info("generated %d/%d patients", p + 1, n_patients)
    manifest = Manifest(records, dataset_id or out_dir.name, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    (out_dir / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest
