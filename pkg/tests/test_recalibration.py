import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rsdebias.dataset import BBox, BinningConfig, dataset_from_coco
from rsdebias.errors import DegenerateLayoutError, PlacementError
from rsdebias.recalibration import (
    INJECTED,
    MOVED,
    SEED,
    Layout,
    LayoutEntry,
    LayoutPriors,
    RecalibConfig,
    jitter_vertical,
    materialize_bbox,
    new_class_probabilities,
    recalibrate_layout,
    rng_for,
    sample_new_class,
    sample_size_position,
    size_position_probabilities,
)

from conftest import make_synthetic_coco, make_table


def exact_eq3(rs_flat, tau, eps):
    """Brute-force enumeration of the bin grid."""
    weights = [(r + eps) ** (-tau) for r in rs_flat]
    z = math.fsum(weights)
    return [w / z for w in weights]


def exact_eq5(mean_rs, present, kappa, tau, eps):
    weights = [(kappa if c in present else 1.0) * (r + eps) ** (-tau) for c, r in enumerate(mean_rs)]
    z = math.fsum(weights)
    return [w / z for w in weights]


def empirical(draws, n):
    return np.bincount(draws, minlength=n) / len(draws)


def test_two_bin_example():
    t = make_table([[0.1, 0.3]], s_bins=1, u_bins=2)
    p = size_position_probabilities(0, t, RecalibConfig(tau=1, epsilon=0.01)).ravel()
    assert p == pytest.approx([0.738095, 0.261905], abs=1e-6)
    assert p == pytest.approx(exact_eq3([0.1, 0.3], 1, 0.01), abs=1e-15)


def test_tau_zero_uniform():
    t = make_table([[0.0, 0.5, 0.9, 0.01, 0.2, 0.3, 0.4, 0.6, 0.7]])
    p = size_position_probabilities(0, t, RecalibConfig(tau=0)).ravel()
    assert p == pytest.approx([1 / 9] * 9, abs=1e-15)


def test_large_tau_prefers_empty_bin():
    rs = [0.0] + [0.5] * 8
    t = make_table([rs])
    p = size_position_probabilities(0, t, RecalibConfig(tau=8, epsilon=0.01)).ravel()
    exact = exact_eq3(rs, 8, 0.01)
    assert p == pytest.approx(exact, abs=1e-15)
    assert p[0] > 1 - 1e-12


def test_sampler_matches_exact_distribution():
    rs = [0.02, 0.3, 0.1, 0.0, 0.05, 0.2, 0.15, 0.01, 0.08]
    t = make_table([rs])
    cfg = RecalibConfig(tau=1.0, epsilon=0.01)
    rng = np.random.default_rng(3)
    n = 50_000
    draws = [s * 3 + u for s, u in (sample_size_position(0, t, cfg, rng) for _ in range(n))]
    tv = 0.5 * np.abs(empirical(draws, 9) - np.array(exact_eq3(rs, 1.0, 0.01))).sum()
    assert tv < 0.01


@given(
    rs=st.lists(st.floats(0, 1), min_size=9, max_size=9),
    idx=st.integers(0, 8),
    drop=st.floats(0, 1),
    tau=st.floats(0, 5),
)
def test_monotone_in_rs(rs, idx, drop, tau):
    cfg = RecalibConfig(tau=tau)
    before = size_position_probabilities(0, make_table([rs]), cfg).ravel()[idx]
    lowered = list(rs)
    lowered[idx] = rs[idx] * drop
    after = size_position_probabilities(0, make_table([lowered]), cfg).ravel()[idx]
    assert after >= before - 1e-12


def test_new_class_example():
    p = new_class_probabilities([0.2, 0.2], {0}, kappa=2, tau=1, epsilon=0.0)
    assert p == pytest.approx([2 / 3, 1 / 3], abs=1e-15)


def test_new_class_kappa_one_and_tau_zero():
    mean_rs = [0.1, 0.5, 0.05, 0.3]
    assert new_class_probabilities(mean_rs, {0, 1}, 1, 1, 0.01) == pytest.approx(
        new_class_probabilities(mean_rs, set(), 1, 1, 0.01), abs=1e-15)
    assert new_class_probabilities(mean_rs, {2}, 1, 0, 0.01) == pytest.approx([0.25] * 4)


def test_new_class_sampler_matches_exact():
    rs = [[0.01 * (c + 1)] * 9 for c in range(10)]
    t = make_table(rs)
    present = {0, 3, 7}
    cfg = RecalibConfig(kappa=2, tau=1, epsilon=0.01)
    rng = np.random.default_rng(11)
    draws = [sample_new_class(present, t, cfg, rng) for _ in range(50_000)]
    exact = exact_eq5([t.class_mean_rs[c] for c in range(10)], present, 2, 1, 0.01)
    assert 0.5 * np.abs(empirical(draws, 10) - exact).sum() < 0.01


def test_jitter_zero_sigma_is_identity():
    rng = np.random.default_rng(0)
    assert jitter_vertical(37.25, RecalibConfig(sigma_y=0), rng, 100) == 37.25


def test_jitter_mean_within_clt_bound():
    cfg = RecalibConfig(sigma_y=2.0)
    rng = np.random.default_rng(5)
    n = 100_000
    # far from the edges so clamping never triggers
    deltas = np.array([jitter_vertical(500.0, cfg, rng, 1000) - 500.0 for _ in range(n)])
    assert abs(deltas.mean()) <= 4 * 2.0 / math.sqrt(n)
    assert deltas.std() == pytest.approx(2.0, rel=0.02)


def test_jitter_clamped_near_edge():
    cfg = RecalibConfig(sigma_y=500.0)
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = jitter_vertical(1.0, cfg, rng, 100, half_extent=10)
        assert 10 <= v <= 90


def test_default_sigma_is_five_percent_of_height():
    assert RecalibConfig().sigma_for(480) == pytest.approx(24.0)


def test_config_validation():
    for bad in (dict(epsilon=0), dict(tau=-1), dict(kappa=0.5), dict(recalib_fraction=1.5),
                dict(max_new_instances=-1), dict(sigma_y=-1)):
        with pytest.raises(ValueError):
            RecalibConfig(**bad)


BINNING = BinningConfig()


@settings(max_examples=200, deadline=None)
@given(s=st.integers(0, 2), u=st.integers(0, 2), v=st.floats(0, 300), seed=st.integers(0, 10**6))
def test_materialize_respects_bins(s, u, v, seed):
    rng = np.random.default_rng(seed)
    try:
        box = materialize_bbox(0, s, u, v, LayoutPriors(), BINNING, rng, 300, 300)
    except PlacementError:
        return
    assert box.is_valid(300, 300)
    assert BINNING.size_bin(box.area) == s
    assert BINNING.pos_bin(box.center[0], 300) == u


def test_materialize_small_bin_and_band():
    rng = np.random.default_rng(0)
    for _ in range(200):
        box = materialize_bbox(0, 0, 2, 150, LayoutPriors(), BINNING, rng, 300, 300)
        assert box.area < 1024
        assert 200 <= box.center[0] < 300


def test_materialize_uses_class_aspect_ratio():
    priors = LayoutPriors({0: np.array([2.0])})
    rng = np.random.default_rng(0)
    box = materialize_bbox(0, 1, 1, 150, priors, BINNING, rng, 300, 300)
    assert box.width / box.height == pytest.approx(2.0)


def test_materialize_degenerate_canvas():
    with pytest.raises(PlacementError):
        materialize_bbox(0, 2, 0, 5, LayoutPriors(), BINNING, np.random.default_rng(0), 10, 10)


def seed_layout():
    return Layout(7, 300, 200, [
        LayoutEntry(0, BBox(10, 80, 30, 120), SEED, 1),
        LayoutEntry(1, BBox(100, 60, 200, 140), SEED, 2),
        LayoutEntry(2, BBox(250, 90, 260, 110), SEED, 3),
        LayoutEntry(0, BBox(150, 95, 160, 105), SEED, 4),
    ])


def table3():
    rng = np.random.default_rng(0)
    return make_table([rng.uniform(0, 0.2, 9).tolist() for _ in range(3)])


def test_identity_configuration():
    seed = seed_layout()
    out = recalibrate_layout(seed, LayoutPriors(), table3(),
                             RecalibConfig(recalib_fraction=0, max_new_instances=0))
    assert out.entries == seed.entries
    assert out.placement_failures == 0


def test_recalibration_contracts():
    seed = seed_layout()
    t = table3()
    cfg = RecalibConfig(recalib_fraction=0.5, max_new_instances=3, rng_seed=42)
    a = recalibrate_layout(seed, LayoutPriors(), t, cfg)
    b = recalibrate_layout(seed, LayoutPriors(), t, cfg)
    assert a.to_json() == b.to_json()
    a.validate(3)
    by_source = {e.source_instance_id: e for e in seed.entries}
    for e in a.entries:
        if e.provenance == MOVED:
            assert e.class_id == by_source[e.source_instance_id].class_id
        elif e.provenance == SEED:
            assert e == by_source[e.source_instance_id]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), frac=st.floats(0, 1), n_new=st.integers(0, 4))
def test_recalibration_properties(seed, frac, n_new):
    layout = seed_layout()
    cfg = RecalibConfig(recalib_fraction=frac, max_new_instances=n_new, rng_seed=seed)
    out = recalibrate_layout(layout, LayoutPriors(), table3(), cfg)
    out.validate(3)
    n_move = math.ceil(frac * len(layout.entries))
    moved = sum(e.provenance == MOVED for e in out.entries)
    kept = sum(e.provenance == SEED for e in out.entries)
    injected = sum(e.provenance == INJECTED for e in out.entries)
    assert kept == len(layout.entries) - n_move
    assert moved + injected + out.placement_failures >= n_move
    assert injected <= n_new
    for e in out.entries:
        if e.provenance != SEED:
            assert BINNING.size_bin(e.bbox.area) in range(3)


def test_moved_boxes_land_in_sampled_bins():
    # replay the rng stream to recover the bins sampled for each moved entry
    layout = seed_layout()
    t = table3()
    cfg = RecalibConfig(recalib_fraction=1.0, max_new_instances=0, sigma_y=0, rng_seed=9)
    out = recalibrate_layout(layout, LayoutPriors(), t, cfg)
    assert out.placement_failures == 0
    rng = rng_for(9, layout.image_id)
    rng.choice(4, size=4, replace=False)
    for seed_entry, e in zip(layout.entries, out.entries):
        s, u = sample_size_position(e.class_id, t, cfg, rng)
        assert BINNING.size_bin(e.bbox.area) == s
        assert BINNING.pos_bin(e.bbox.center[0], layout.width) == u
        replay = materialize_bbox(e.class_id, s, u, seed_entry.bbox.center[1], LayoutPriors(),
                                  BINNING, rng, 300, 200)
        assert replay == e.bbox


def test_tau_zero_bins_uniform_and_centers_preserved():
    # seeds centered vertically so the vertical clamp never moves them
    layout = Layout(1, 400, 400, [LayoutEntry(0, BBox(10, 190, 30, 210), SEED, 1)])
    t = make_table([[0.0, 0.9, 0.1, 0.5, 0.3, 0.2, 0.05, 0.4, 0.7]])
    counts = np.zeros(9)
    runs = 10_000
    for i in range(runs):
        cfg = RecalibConfig(tau=0, sigma_y=0, recalib_fraction=1, max_new_instances=0, rng_seed=i)
        out = recalibrate_layout(layout, LayoutPriors(), t, cfg)
        if not out.entries:
            continue
        (e,) = out.entries
        assert e.class_id == 0
        assert e.bbox.center[1] == pytest.approx(200.0, abs=1e-9)
        counts[BINNING.size_bin(e.bbox.area) * 3 + BINNING.pos_bin(e.bbox.center[0], 400)] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_degenerate_layout_error():
    layout = Layout(3, 10, 10, [LayoutEntry(0, BBox(1, 1, 9, 9), SEED, 1)])
    # only the large bin has weight, and it cannot fit on a 10x10 canvas
    t = make_table([[1.0] * 6 + [0.0] * 3])
    cfg = RecalibConfig(tau=50, recalib_fraction=1, max_new_instances=0)
    with pytest.raises(DegenerateLayoutError):
        recalibrate_layout(layout, LayoutPriors(), t, cfg)


def test_injected_vertical_center_from_priors():
    priors = LayoutPriors(vcenter={0: np.array([0.5])})
    empty = Layout(1, 400, 400, [])
    t = make_table([[0.0, 0.0, 0.0, 1, 1, 1, 1, 1, 1]])
    cfg = RecalibConfig(max_new_instances=5, tau=40)
    for seed in range(30):
        out = recalibrate_layout(empty, priors, t, RecalibConfig(**{**cfg.to_dict(), "rng_seed": seed}))
        for e in out.entries:
            assert e.provenance == INJECTED
            assert e.bbox.center[1] == pytest.approx(200.0)


def test_priors_from_dataset():
    ds = dataset_from_coco(make_synthetic_coco())
    priors = LayoutPriors.from_dataset(ds)
    rng = np.random.default_rng(0)
    for c in range(ds.num_classes):
        if c in priors.aspect:
            assert priors.draw_aspect(c, rng) > 0
            assert 0 <= priors.draw_vcenter(c, 1, rng) <= 1
    assert priors.draw_aspect(99, rng) == 1.0
    assert 25 <= priors.draw_vcenter(99, 100, rng) <= 75


def test_layout_roundtrip():
    lay = seed_layout()
    assert Layout.from_dict(lay.to_dict()) == lay


def test_rng_for_stable():
    assert rng_for(5, 10).random() == rng_for(5, 10).random()
    assert rng_for(5, 10).random() != rng_for(5, 11).random()
