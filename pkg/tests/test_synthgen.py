import hashlib
from dataclasses import replace

import numpy as np
import pytest

from dmelab.dataset import load_manifest
from dmelab.evaluation import auc
from dmelab.synthgen import (
    SynthConfig,
    exudate_proxy,
    generate_dataset,
    negative_rate,
    render_fundus,
    sample_latents,
    simulate_graders,
)


def test_prevalences_match_targets():
    cfg = SynthConfig()
    lat = [sample_latents(cfg, i) for i in range(10_000)]
    assert abs(np.mean([l.cpt >= 250 for l in lat]) - 0.283) <= 0.02
    assert abs(np.mean([l.srf for l in lat]) - 0.157) <= 0.02
    assert abs(np.mean([l.irf for l in lat]) - 0.455) <= 0.02
    assert all(l.cpt > 0 for l in lat)


def test_fluid_rates_solve_marginals():
    cfg = SynthConfig()
    for fluid, marginal in (("srf", 0.157), ("irf", 0.455)):
        pos, neg = cfg.fluid_rates(fluid)
        assert 0.283 * pos + 0.717 * neg == pytest.approx(marginal)
    assert negative_rate(0.5, 0.0, 0.9) == 0.5
    with pytest.raises(ValueError, match="srf"):
        SynthConfig(prevalence_cidme=0.9, srf_rate_if_cidme=0.01)


def test_latents_deterministic():
    cfg = SynthConfig(seed=5)
    assert sample_latents(cfg, 17) == sample_latents(cfg, 17)
    assert sample_latents(cfg, 17) != sample_latents(cfg, 18)
    assert sample_latents(cfg, 17) != sample_latents(replace(cfg, seed=6), 17)


def test_zero_prevalence_stays_healthy():
    cfg = SynthConfig(prevalence_cidme=0.0, srf_rate_if_cidme=0.0, irf_rate_if_cidme=0.0)
    trials = 100
    below = 0
    for t in range(trials):
        c = replace(cfg, seed=t)
        below += max(sample_latents(c, i).cpt for i in range(1000)) < 250
    assert below / trials >= 0.99


def test_landmarks_inside_retina():
    cfg = SynthConfig(image_size=64)
    for i in range(200):
        lat = sample_latents(cfg, i)
        lat.landmarks.check_bounds(64, 64)
        for cx, cy in (lat.fovea_center, lat.disc_center):
            assert np.hypot(cx - 32, cy - 32) < 0.47 * 64
        # right eyes show the disc on the right
        assert (lat.disc_center[0] > lat.fovea_center[0]) == (lat.eye == "R")


def test_render_deterministic_and_in_range():
    cfg = SynthConfig(image_size=48)
    lat = sample_latents(cfg, 3)
    a, b = render_fundus(lat, cfg), render_fundus(lat, cfg)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (48, 48, 3) and a.min() >= 0 and a.max() <= 1


def _healthy(lat, cpt):
    return replace(lat, cpt=cpt, srf=0, irf=0)


def test_below_threshold_render_equals_healthy():
    cfg = SynthConfig(image_size=64)
    lat = _healthy(sample_latents(cfg, 11), 230.0)
    np.testing.assert_array_equal(render_fundus(lat, cfg), render_fundus(replace(lat, cpt=249.9), cfg))


def test_lesion_is_local_to_fovea():
    cfg = SynthConfig(image_size=96)
    for i in range(5):
        lat = sample_latents(cfg, i)
        healthy = render_fundus(_healthy(lat, 230.0), cfg)
        thick = render_fundus(_healthy(lat, 400.0), cfg)
        diff = np.abs(thick - healthy).sum(axis=-1)
        y, x = np.mgrid[0:96, 0:96] + 0.5
        d = np.hypot(x - lat.fovea_center[0], y - lat.fovea_center[1]) / lat.disc_diameter
        assert diff[d <= 1.0].mean() > 0
        assert np.all(diff[d > 2.5] == 0)
        for fluid in ("srf", "irf"):
            wet = render_fundus(replace(_healthy(lat, 230.0), **{fluid: 1}), cfg)
            assert np.all(np.abs(wet - healthy).sum(axis=-1)[d > 2.5] == 0)


def test_pixel_oracle_separates_cidme():
    cfg = SynthConfig(image_size=64)
    y, x = np.mgrid[0:64, 0:64] + 0.5
    scores, truth = [], []
    for i in range(1000):
        lat = sample_latents(cfg, i)
        img = render_fundus(lat, cfg)
        d = np.hypot(x - lat.fovea_center[0], y - lat.fovea_center[1]) / lat.disc_diameter
        centre = img[d <= 0.3][:, 1].mean()
        ring = img[(d >= 1.2) & (d <= 1.8)][:, 1].mean()
        scores.append(centre - 0.7 * ring)
        truth.append(int(lat.cpt >= 250))
    assert auc((np.array(scores), np.array(truth))) > 0.9


def test_exudate_proxy_locations():
    lat = sample_latents(SynthConfig(), 0)
    fx, fy = lat.fovea_center
    dd = lat.disc_diameter
    for r, expected in ((0.2, (1, "500um")), (0.9, (1, "1dd")), (1.5, (0, "2dd")), (3.0, (0, "beyond"))):
        assert exudate_proxy(replace(lat, exudates=((fx + r * dd, fy),))) == expected
    assert exudate_proxy(replace(lat, exudates=())) == (0, "none")


def test_zero_noise_graders_equal_proxy():
    cfg = SynthConfig(grader_noise=((0.0, 0.0), (0.0, 0.0)), ungradable_rate=0.0)
    for i in range(300):
        lat = sample_latents(cfg, i)
        proxy, loc = exudate_proxy(lat)
        for g in simulate_graders(lat, cfg, i):
            assert g.gradable and g.dme_judgment == proxy and g.hard_exudate_location == loc


def test_grader_noise_rates():
    cfg = SynthConfig(grader_noise=((0.3, 0.1),), ungradable_rate=0.0)
    flips = {0: [], 1: []}
    for i in range(4000):
        lat = sample_latents(cfg, i)
        proxy, _ = exudate_proxy(lat)
        flips[proxy].append(simulate_graders(lat, cfg, i)[0].dme_judgment != proxy)
    assert abs(np.mean(flips[1]) - 0.3) < 0.04
    assert abs(np.mean(flips[0]) - 0.1) < 0.02


def test_generate_dataset(tmp_path):
    cfg = SynthConfig(image_size=32, seed=2)
    m = generate_dataset(cfg, 100, tmp_path / "a")
    assert len(m) == 200 and len(m.patient_ids) == 100
    back = load_manifest(tmp_path / "a" / "manifest.csv")
    assert back.records == m.records
    generate_dataset(cfg, 100, tmp_path / "b")
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
    assert digest(tmp_path / "a" / "manifest.csv") == digest(tmp_path / "b" / "manifest.csv")
    assert digest(tmp_path / "a" / "images" / "P00007_L.ppm") == digest(tmp_path / "b" / "images" / "P00007_L.ppm")
    assert SynthConfig.from_json(tmp_path / "a" / "synth_config.json") == cfg
    with pytest.raises(ValueError):
        generate_dataset(cfg, 0, tmp_path / "c")


def test_secondary_variant(tmp_path):
    cfg = SynthConfig(image_size=32).secondary()
    m = generate_dataset(cfg, 5, tmp_path)
    for r in m.records:
        assert r.labels.center_point_thickness is None and r.labels.srf_present is None
        assert r.labels.central_subfield_thickness > 50
    assert cfg.prevalence_cidme == 0.078 and len(cfg.grader_noise) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(prevalence_cidme=1.5)
    with pytest.raises(ValueError):
        SynthConfig(cpt_healthy_sd=0)
    with pytest.raises(ValueError):
        SynthConfig(lesion_gain=-1)
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"bogus": 1})
