import numpy as np
import pytest

from radartwin import localize as loc
from radartwin.errors import CompatibilityError, ConfigurationError


# ---------------------------------------------------------------------------
# ArgMax
# ---------------------------------------------------------------------------


def test_argmax_single_pixel():
    power = np.zeros((64, 64))
    power[17, 40] = 5.0
    est = loc.argmax_localize(power)
    assert (est.range_bin, est.doppler_bin) == (17.0, 40.0)


def test_argmax_uniform_tie_breaks_low():
    est = loc.argmax_localize(np.ones((8, 8)))
    assert (est.range_bin, est.doppler_bin) == (0.0, 0.0)


def test_argmax_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        power = rng.uniform(size=(16, 16))
        est = loc.argmax_localize(power)
        best, best_idx = -1.0, None
        for r in range(16):
            for d in range(16):
                if power[r, d] > best:
                    best, best_idx = power[r, d], (r, d)
        assert (est.range_bin, est.doppler_bin) == best_idx


def test_argmax_invariant_under_monotone_transform():
    rng = np.random.default_rng(4)
    for _ in range(20):
        power = rng.uniform(0.1, 10.0, size=(12, 9))
        a = loc.argmax_localize(power)
        b = loc.argmax_localize(np.log10(power + 1e-12))
        c = loc.argmax_localize(power**3)
        assert (a.range_bin, a.doppler_bin) == (b.range_bin, b.doppler_bin)
        assert (a.range_bin, a.doppler_bin) == (c.range_bin, c.doppler_bin)


# ---------------------------------------------------------------------------
# CFAR
# ---------------------------------------------------------------------------


def test_cfar_empty_on_zero_map():
    assert loc.CfarDetector().detect(np.zeros((64, 64))) == []


def test_cfar_single_strong_pixel_hand_threshold():
    floor = 2.0
    power = np.full((64, 64), floor)
    power[30, 20] = 100.0 * floor
    det = loc.CfarDetector(train_cells=6, guard_cells=2, scale=10.0)
    # hand check: the training ring around any neighbor still averages ~floor,
    # so the threshold there is ~10*floor and only the spike exceeds it
    found = det.detect(power)
    assert len(found) == 1
    assert (round(found[0].range_bin), round(found[0].doppler_bin)) == (30, 20)


def test_cfar_two_separated_pixels():
    floor = 1.0
    power = np.full((64, 64), floor)
    power[10, 10] = 50.0
    power[50, 40] = 60.0
    found = loc.CfarDetector(train_cells=6, guard_cells=2, scale=10.0).detect(power)
    assert len(found) == 2
    coords = {(round(d.range_bin), round(d.doppler_bin)) for d in found}
    assert coords == {(10, 10), (50, 40)}


def test_cfar_window_must_fit():
    with pytest.raises(ConfigurationError):
        loc.CfarDetector(train_cells=40).detect(np.ones((32, 32)))


def test_cfar_detections_respect_merge_radius():
    rng = np.random.default_rng(5)
    power = rng.exponential(size=(64, 64))
    power[20, 20] = 500.0
    power[20, 22] = 400.0  # inside the merge radius of the first
    det = loc.CfarDetector(train_cells=6, guard_cells=2, scale=8.0, merge_radius=3.0)
    found = det.detect(power)
    for i, a in enumerate(found):
        for b in found[i + 1:]:
            assert max(abs(a.range_bin - b.range_bin),
                       abs(a.doppler_bin - b.doppler_bin)) > det.merge_radius


def test_cfar_false_alarm_rate_on_exponential_noise():
    # complex-Gaussian power -> exponential; exceedance count should match
    # the CA-CFAR theory within 3 sigma binomial
    det = loc.CfarDetector(train_cells=5, guard_cells=1, scale=8.0,
                           range_mode="wrap", doppler_mode="wrap")
    rng = np.random.default_rng(11)
    n_cells = 0
    n_alarms = 0
    for _ in range(40):
        power = rng.exponential(size=(64, 64))
        n_alarms += int(det.exceedance_mask(power).sum())
        n_cells += power.size
    pfa = det.theoretical_pfa
    expected = n_cells * pfa
    sigma = (n_cells * pfa * (1 - pfa)) ** 0.5
    assert abs(n_alarms - expected) <= 3.0 * sigma


def test_cfar_point_estimate_falls_back_to_argmax():
    power = np.ones((64, 64))
    power[5, 6] = 1.2  # too weak for any threshold crossing
    det = loc.CfarDetector()
    est = det.point_estimate(power)
    assert (est.range_bin, est.doppler_bin) == (5.0, 6.0)


# ---------------------------------------------------------------------------
# Preprocessing + k-fold
# ---------------------------------------------------------------------------


def test_preprocess_normalizes_to_unit_interval():
    rng = np.random.default_rng(6)
    maps = rng.exponential(size=(3, 32, 16)) * 1e6
    out = loc.preprocess_maps(maps, (32, 16))
    assert out.shape == (3, loc.N_MAP_CHANNELS, 32, 16)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_preprocess_downsamples_integer_factors():
    maps = np.ones((2, 64, 32))
    out = loc.preprocess_maps(maps, (32, 16))
    assert out.shape == (2, loc.N_MAP_CHANNELS, 32, 16)


def test_preprocess_rejects_fractional_factor():
    with pytest.raises(CompatibilityError):
        loc.preprocess_maps(np.ones((1, 48, 32)), (32, 16))


def test_kfold_partition_disjoint_exhaustive():
    splits = loc.kfold_split(100, 5, seed=0)
    assert len(splits) == 5
    all_val = np.concatenate([v for _, v in splits])
    assert len(all_val) == 100
    assert len(np.unique(all_val)) == 100
    for train, val in splits:
        assert len(val) == 20
        assert len(np.intersect1d(train, val)) == 0


def test_kfold_single_fold_is_80_20():
    (train, val), = loc.kfold_split(100, 1, seed=0)
    assert len(val) == 20
    assert len(train) == 80


def test_kfold_assignment_hash_stable():
    h1 = loc.fold_assignment_hash(loc.kfold_split(60, 5, seed=9))
    h2 = loc.fold_assignment_hash(loc.kfold_split(60, 5, seed=9))
    h3 = loc.fold_assignment_hash(loc.kfold_split(60, 5, seed=10))
    assert h1 == h2
    assert h1 != h3


def test_kfold_too_small_rejected():
    with pytest.raises(ConfigurationError):
        loc.kfold_split(3, 5, seed=0)


# ---------------------------------------------------------------------------
# CNN localizer
# ---------------------------------------------------------------------------


def _bump_maps(n, shape=(32, 16), seed=0):
    rng = np.random.default_rng(seed)
    maps = rng.exponential(0.05, size=(n, *shape))
    truths = np.zeros((n, 2))
    for i in range(n):
        r, d = rng.integers(0, shape[0]), rng.integers(0, shape[1])
        maps[i, r, d] += 30.0
        truths[i] = (r, d)
    return maps, truths


def small_localizer(**kw):
    params = dict(input_shape=(32, 16), epochs=2, batch_size=4, seed=1)
    params.update(kw)
    return loc.CnnLocalizer(**params)


def test_predict_requires_fit():
    with pytest.raises(CompatibilityError):
        small_localizer().predict(np.ones((1, 32, 16)))


def test_predict_clamps_to_bounds():
    maps, truths = _bump_maps(8)
    model = small_localizer().fit(maps, truths)
    rng = np.random.default_rng(2)
    wild = rng.exponential(100.0, size=(5, 32, 16))
    est = model.predict(wild)
    assert np.all(est[:, 0] >= 0) and np.all(est[:, 0] <= 31)
    assert np.all(est[:, 1] >= 0) and np.all(est[:, 1] <= 15)


def test_overfit_single_sample_returns_its_truth():
    maps, truths = _bump_maps(1, seed=3)
    model = small_localizer(epochs=150, batch_size=1,
                            augment_rolls=False).fit(maps, truths)
    est = model.predict(maps)[0]
    assert abs(est[0] - truths[0, 0]) <= 1.0
    assert abs(est[1] - truths[0, 1]) <= 1.0


def test_fit_fixed_seed_reproducible():
    maps, truths = _bump_maps(8)
    a = small_localizer().fit(maps, truths)
    b = small_localizer().fit(maps, truths)
    assert a.history_.train == b.history_.train
    x = np.random.default_rng(4).exponential(size=(2, 32, 16))
    assert np.array_equal(a.predict(x), b.predict(x))


def test_feature_maps_shapes_and_export(tmp_path):
    maps, truths = _bump_maps(6)
    model = small_localizer().fit(maps, truths)
    grids = model.feature_maps(maps[0], 0)
    assert grids.shape[0] == 8  # first conv block channel count
    assert grids.ndim == 3
    manifest = model.export_feature_maps(maps[0], 0, tmp_path / "fm")
    assert len(manifest["channels"]) == grids.shape[0]
    from radartwin.io import read_raw_array
    ch0 = read_raw_array(tmp_path / "fm" / manifest["channels"][0]["file"],
                         grids.shape[1:], np.float32)
    assert np.array_equal(ch0, grids[0])


def test_feature_maps_zero_input_untrained_is_zero():
    # coordinate channels off: a pure conv stack with zero biases maps an
    # all-zero input to all-zero activations
    model = small_localizer(epochs=0, coord_channels=False)
    model.fit(np.random.default_rng(0).exponential(size=(4, 32, 16)),
              np.ones((4, 2)))
    grids = model.feature_maps(np.zeros((32, 16)), 0)
    assert np.allclose(grids, 0.0)


def test_feature_maps_rejects_non_conv_index():
    maps, truths = _bump_maps(4)
    model = small_localizer().fit(maps, truths)
    with pytest.raises(ConfigurationError):
        model.feature_maps(maps[0], 99)


def test_save_load_round_trip(tmp_path):
    maps, truths = _bump_maps(8)
    model = small_localizer().fit(maps, truths)
    model.save(tmp_path / "model")
    loaded = loc.CnnLocalizer.load(tmp_path / "model")
    x = np.random.default_rng(5).exponential(size=(3, 32, 16))
    assert np.array_equal(loaded.predict(x), model.predict(x))
    assert loaded.preprocessing_hash == model.preprocessing_hash


def test_load_rejects_tampered_preprocessing(tmp_path):
    import json
    maps, truths = _bump_maps(8)
    model = small_localizer().fit(maps, truths)
    model.save(tmp_path / "model")
    sidecar = json.loads((tmp_path / "model" / "model.json").read_text())
    sidecar["preprocessing_hash"] = "0" * 64
    (tmp_path / "model" / "model.json").write_text(json.dumps(sidecar))
    with pytest.raises(CompatibilityError):
        loc.CnnLocalizer.load(tmp_path / "model")


def test_predict_incompatible_shape_raises():
    maps, truths = _bump_maps(8)
    model = small_localizer().fit(maps, truths)
    with pytest.raises(CompatibilityError):
        model.predict(np.ones((1, 48, 16)))


def test_cross_validate_runs_per_fold():
    maps, truths = _bump_maps(20)
    results, fold_hash = loc.cross_validate(
        maps, truths, folds=4, seed=0,
        localizer_params=dict(input_shape=(32, 16), epochs=1, batch_size=4),
    )
    assert len(results) == 4
    assert len(fold_hash) == 64
    for fr in results:
        assert fr.report.n == len(fr.val_indices)
