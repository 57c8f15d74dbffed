import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandcert.certification import CertifyConfig
from bandcert.errors import ContractError
from bandcert.model import plan_windows
from bandcert.oracles import (attention_equivalence,
                              check_certificate_soundness,
                              empirical_patch_attack, exhaustive_flip_bitmask,
                              fd_gradient_report, intersection_sweep,
                              max_band_patch_intersections, patch_locations,
                              random_vote_tables, worst_case_flip)
from bandcert.smoothing import BandSpec


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.data())
def test_intersection_count_closed_form(w, data):
    b = data.draw(st.integers(1, w))
    m = data.draw(st.integers(1, max(1, w - b + 1)))
    assert max_band_patch_intersections(w, b, m) == m + b - 1


def test_intersection_sweep_small():
    cases, failures = intersection_sweep(max_width=16)
    assert failures == []
    assert cases == sum(w * (w + 1) // 2 for w in range(1, 17))


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 6), st.integers(2, 3), st.integers(1, 2),
       st.integers(1, 2), st.integers(0, 10_000))
def test_worst_case_flip_matches_exhaustive(w, c, m, b, seed):
    rng = np.random.default_rng(seed)
    vs = rng.random((w, c)) < 0.5
    fast = worst_case_flip(vs, m, b)
    slow = exhaustive_flip_bitmask(vs, m, b)
    assert fast == slow


def test_exhaustive_guard_refuses_large_tables():
    vs = np.zeros((32, 10), dtype=bool)
    with pytest.raises(ContractError):
        exhaustive_flip_bitmask(vs, 4, 4)


def test_soundness_on_seeded_tables():
    tables = random_vote_tables(50, image_width=16, num_classes=4, seed=0)
    for vs in tables:
        for delta in range(1, 9):
            res = check_certificate_soundness(vs, patch_width=1, band_width=delta)
            assert res["sound"]


def test_soundness_check_catches_a_too_generous_bound():
    """With a deliberately understated delta, some near-boundary table must
    certify yet flip, proving the checker can fail at all."""
    tables = random_vote_tables(300, image_width=16, num_classes=3, seed=1,
                                near_boundary_margin=4)
    bad = 0
    for vs in tables:
        res = check_certificate_soundness(vs, patch_width=2, band_width=2,
                                          delta_fn=lambda m, b: 1)
        bad += not res["sound"]
    assert bad > 0


def test_margin_exactly_two_delta_is_overturnable():
    """Sharpness: margin == 2 delta certifies nothing, and the adversary can
    actually reach a tie that flips the argmax."""
    for delta in (1, 2, 3):
        w = 4 * delta
        vs = np.zeros((w, 3), dtype=bool)
        vs[:2 * delta, 1] = True  # class 1 wins by exactly 2 delta
        res = check_certificate_soundness(vs, patch_width=1, band_width=delta)
        assert res["margin"] == 2 * delta
        assert not res["certified"]
        assert res["flippable"]


def test_patch_locations_grid():
    locs = patch_locations(16, (2, 2), 16)
    assert len(locs) == 16
    assert len(set(locs)) == 16
    for r, c in locs:
        assert 0 <= r <= 14 and 0 <= c <= 14
    assert (0, 0) in locs and (14, 14) in locs


def test_patch_locations_caps_at_requested_count():
    locs = patch_locations(8, (3, 3), 5)
    assert len(locs) <= 5


def test_attention_equivalence_tight_in_f64(small_params):
    params = small_params
    rng = np.random.default_rng(7)
    imgs = rng.random((3, 3, 8, 8))
    for pos in (0, 5):
        diffs = attention_equivalence(params, imgs, BandSpec(pos, 3))
        assert diffs["tokens"] < 1e-10
        assert diffs["logits"] < 1e-10


def test_attention_equivalence_f32(small_params):
    params = small_params.cast(np.float32)
    imgs = np.random.default_rng(8).random((2, 3, 8, 8))
    diffs = attention_equivalence(params, imgs, BandSpec(2, 4))
    assert diffs["logits"] < 1e-5


def test_fd_gradient_report_probes_everything():
    report = fd_gradient_report(seed=0, probes=2)
    assert "matmul" in report and "encoder_block" in report
    assert len(report) >= 15
    for name, err in report.items():
        assert err < 1e-4, f"{name}: relative error {err}"


def test_empirical_attack_smoke(small_params):
    params = small_params.cast(np.float32)
    cfg = params.cfg
    plan = plan_windows(cfg, 2)
    ccfg = CertifyConfig(band_width=2)
    rng = np.random.default_rng(9)
    img = rng.random((3, 8, 8))
    before = img.copy()
    report = empirical_patch_attack(img, params, plan, ccfg,
                                    patch_shape=(2, 2),
                                    locations=[(0, 0), (3, 3)],
                                    trials=5, seed=0, image_id=3)
    np.testing.assert_array_equal(img, before)  # input left untouched
    assert report.image_id == 3
    assert report.locations == 2 and report.trials_per_location == 5
    assert report.positions_rescored <= min(8, 2 + 2 - 1)
    assert report.flips >= 0
    assert report.min_margin_seen <= 8


def test_empirical_attack_certified_image_never_flips(small_params):
    """Hand a synthetic scorer to force a hugely certified table, then check
    the attack bookkeeping honors it."""
    params = small_params.cast(np.float32)
    cfg = params.cfg
    plan = plan_windows(cfg, 2)
    ccfg = CertifyConfig(band_width=2)
    img = np.random.default_rng(10).random((3, 8, 8))
    report = empirical_patch_attack(img, params, plan, ccfg,
                                    patch_shape=(1, 1),
                                    locations=[(0, 0)], trials=3, seed=1)
    if report.certified:
        assert report.flips == 0
