import json

import numpy as np
import pytest

from swiftreg.correlate import WhiteningParams, correlate
from swiftreg.synth import (Phantom, SynthSpec, brute_force_correlate, clutter_pair,
                            evaluate_alignment, generate_stack, read_truth, render_section, rng_for,
                            warp_walk, write_truth)
from swiftreg.transform import AffineTransform, compose

SMALL = dict(sections=6, width=128, height=128)
FLAT = dict(speckle_amplitude=0.0, clutter_amplitude=0.0, noise_sigma=0.0, max_rotation_deg=0.0,
            max_scale_dev=0.0, max_shear=0.0, max_translation=0.0)


def ncc(a, b):
    a, b = a - a.mean(), b - b.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(width=40, height=40)
    with pytest.raises(ValueError):
        SynthSpec(sections=4, damaged={5: "blank"})
    with pytest.raises(ValueError):
        SynthSpec(damaged={1: "smudge"})


def test_spec_json_roundtrip():
    spec = SynthSpec(damaged={3: "blank"}, seed=9)
    back = SynthSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert back == spec


def test_flat_identity_sections_are_phantom_slices():
    spec = SynthSpec(**SMALL, **FLAT, tube_fraction=0.0, seed=1)
    stack = generate_stack(spec)
    ph = Phantom.generate(spec)
    m = ph.margin
    for k, img in enumerate(stack.images):
        expect = np.clip(ph.slice(float(k))[m:m + 128, m:m + 128], 0, 1)
        np.testing.assert_allclose(img.pixels, expect, atol=1e-12)
    s = [im.pixels for im in stack.images]
    assert ncc(s[2], s[3]) > ncc(s[2], s[4]) > abs(ncc(s[2], np.random.default_rng(0).permuted(s[3].ravel()).reshape(s[3].shape)))


def test_z_autocorrelation_decays():
    spec = SynthSpec(sections=10, width=256, height=256, **FLAT, seed=2)
    s = [im.pixels for im in generate_stack(spec).images]
    adj = np.mean([ncc(s[k], s[k + 1]) for k in range(9)])
    two = np.mean([ncc(s[k], s[k + 2]) for k in range(8)])
    far = np.mean([ncc(s[k], s[k + 7]) for k in range(3)])
    assert adj > two > far


def test_generate_deterministic(tmp_path):
    spec = SynthSpec(**SMALL, seed=3)
    a, b = generate_stack(spec), generate_stack(spec)
    for x, y in zip(a.images, b.images):
        assert x.pixels.tobytes() == y.pixels.tobytes()
    assert [t.to_list() for t in a.truth] == [t.to_list() for t in b.truth]
    generate_stack(spec, tmp_path / "s")
    names = sorted(p.name for p in (tmp_path / "s").iterdir())
    assert names == ["manifest.json"] + [f"section_{k:04d}.swr" for k in range(6)] + ["truth.json"]


def test_single_section_regenerates_identically():
    spec = SynthSpec(**SMALL, seed=4)
    assert rng_for(4, 2, 3).random() == rng_for(4, 2, 3).random()
    assert rng_for(4, 2, 3).random() != rng_for(4, 2, 4).random()
    full = generate_stack(spec).images[4]
    alone = render_section(spec, Phantom.generate(spec), 4, warp_walk(spec)[4])
    assert full.pixels.tobytes() == alone.pixels.tobytes()


def test_damage_injection():
    spec = SynthSpec(**SMALL, damaged={5: "blank", 1: "tear-band", 2: "intensity-drop"}, seed=5)
    stack = generate_stack(spec)
    assert np.ptp(stack.images[5].pixels) == 0
    assert all(np.ptp(im.pixels) > 0 for im in stack.images[:5])
    rows_zero = np.flatnonzero((stack.images[1].pixels == 0).all(axis=1))
    assert len(rows_zero) >= 128 // 12
    assert stack.manifest.statuses() == ["ok", "damaged", "damaged", "ok", "ok", "damaged"]
    undamaged = generate_stack(SynthSpec(**SMALL, seed=5)).images[2].pixels
    np.testing.assert_allclose(stack.images[2].pixels, np.clip(undamaged * 0.5, 0, 1), atol=1e-12)


def test_warp_walk_bounded():
    for seed in range(10):
        spec = SynthSpec(sections=64, seed=seed)
        center = ((spec.width - 1) / 2, (spec.height - 1) / 2)
        for t in warp_walk(spec):
            lin = t.linear
            rot = np.degrees(np.arctan2(lin[1, 0], lin[0, 0]))
            assert abs(rot) <= spec.max_rotation_deg + 1e-9
            sc = np.hypot(lin[0, 0], lin[1, 0])
            assert abs(sc - 1) <= spec.max_scale_dev + 1e-9
            moved = t.apply(center) - np.array(center)
            assert np.all(np.abs(moved) <= spec.max_translation + 1e-9)


def test_brute_force_impulse():
    a = np.zeros((16, 16))
    a[3, 5] = 1
    v = brute_force_correlate(a, a).values
    m = 1 / 256
    # mean-subtracted impulse: peak (1-m)^2 + 255 m^2, elsewhere 2 m (m - 1) + 254 m^2
    assert v[8, 8] == pytest.approx((1 - m) ** 2 + 255 * m * m)
    assert v[0, 0] == pytest.approx(2 * m * (m - 1) + 254 * m * m)


def test_brute_force_shift():
    a = np.random.default_rng(6).random((20, 24))
    b = np.roll(a, (1, 2), axis=(0, 1))
    v = brute_force_correlate(a, b).values
    r, c = np.unravel_index(np.argmax(v), v.shape)
    assert (c - 12, r - 10) == (2, 1)


def test_brute_force_vs_fft_32():
    rng = np.random.default_rng(7)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    slow = brute_force_correlate(a, b).values
    fast = correlate(a, b, WhiteningParams(0.0), taper_frac=0).values
    assert np.abs(fast - slow).max() <= 1e-4 * np.abs(slow).max()


def test_brute_force_size_limit():
    with pytest.raises(ValueError):
        brute_force_correlate(np.zeros((65, 65)), np.zeros((65, 65)))


def _truth(n=6, seed=0):
    return warp_walk(SynthSpec(sections=n, seed=seed))


def test_evaluate_exact_and_gauge():
    truth = _truth()
    assert evaluate_alignment(truth, truth, (512, 512)).max < 1e-9
    g = AffineTransform.from_params(5.0, 1.1, 0.05, (30, -12))
    rec = [compose(g, t) for t in truth]
    for mode in ("best", "first"):
        assert evaluate_alignment(rec, truth, (512, 512), gauge=mode).max < 1e-6


def test_evaluate_single_section_error():
    truth = _truth()
    rec = list(truth)
    rec[3] = compose(AffineTransform.translation(1.0, 0.0), truth[3])
    stats = evaluate_alignment(rec, truth, (512, 512), gauge="first")
    assert stats.per_section[3] == pytest.approx(1.0, abs=0.05)
    assert np.delete(stats.per_section, 3).max() < 1e-6


def test_evaluate_left_factor_invariance():
    truth = _truth(seed=1)
    rng = np.random.default_rng(8)
    rec = [compose(AffineTransform.translation(*rng.normal(0, 1, 2)), t) for t in truth]
    g = AffineTransform.from_params(-3.0, 0.95, 0.02, (4, 9))
    a = evaluate_alignment(rec, truth, (512, 512))
    b = evaluate_alignment([compose(g, r) for r in rec], [compose(g, t) for t in truth], (512, 512))
    np.testing.assert_allclose(a.per_section, b.per_section, atol=1e-6)


def test_evaluate_errors():
    truth = _truth()
    with pytest.raises(ValueError):
        evaluate_alignment(truth[:2], truth, (512, 512))
    with pytest.raises(ValueError):
        evaluate_alignment(truth, [AffineTransform(0, 0, 0, 0, 0, 0)] * 6, (512, 512))
    with pytest.raises(ValueError):
        evaluate_alignment(truth, truth, (512, 512), gauge="bogus")


def test_truth_io(tmp_path):
    truth = _truth()
    write_truth(tmp_path / "t.json", truth)
    assert read_truth(tmp_path / "t.json") == truth


def test_clutter_pair_shift_sign():
    a, b, (dx, dy) = clutter_pair(3, clutter_amplitude=0.0, noise_sigma=0.0)
    res = correlate(a, b, WhiteningParams(1.0))
    v = res.values
    r, c = np.unravel_index(np.argmax(v), v.shape)
    assert (c - 64, r - 64) == (dx, dy)
