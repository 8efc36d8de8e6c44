import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exemseg.clicks import (Click, check_click_bounds, mask_center_voxel,
                            simulate_correction_click, simulate_initial_click)
from exemseg.evaluation import (EvalConfig, component_sizes, connected_components,
                                dsc, fill_holes, lesion_match, remove_small_components,
                                run_lesionwise_eval, select_largest)
from exemseg.volume import Volume

from oracles import (dsc_reference, fill_holes_reference, flood_fill_components,
                     lesion_match_reference)


# -- connected components -----------------------------------------------------------


def test_cc_exhaustive_tiny_grids():
    for bits in itertools.product((0, 1), repeat=9):
        mask = np.array(bits, dtype=bool).reshape(3, 3, 1)
        for conn in (6, 26):
            got, n = connected_components(mask, conn)
            want = flood_fill_components(mask, conn)
            np.testing.assert_array_equal(got, want)
            assert n == want.max()


def test_cc_random_8cubed(rng):
    for _ in range(120):
        mask = rng.random((8, 8, 8)) > rng.uniform(0.4, 0.85)
        for conn in (6, 18, 26):
            got, n = connected_components(mask, conn)
            want = flood_fill_components(mask, conn)
            np.testing.assert_array_equal(got, want)


def test_cc_2d_connectivities(rng):
    diag = np.zeros((2, 2), dtype=bool)
    diag[0, 0] = diag[1, 1] = True
    assert connected_components(diag, 4)[1] == 2
    assert connected_components(diag, 8)[1] == 1
    for _ in range(40):
        mask = rng.random((9, 9)) > 0.6
        for conn in (4, 8):
            got, _ = connected_components(mask, conn)
            np.testing.assert_array_equal(got, flood_fill_components(mask, conn))


def test_cc_rejects_unknown_connectivity():
    with pytest.raises(ValueError, match="connectivity"):
        connected_components(np.zeros((2, 2, 2), dtype=bool), 10)


def test_cc_labels_follow_scan_order():
    mask = np.zeros((1, 7, 1), dtype=bool)
    mask[0, [1, 3, 5], 0] = True
    labels, n = connected_components(mask, 6)
    assert n == 3
    assert labels[0, 1, 0] == 1 and labels[0, 3, 0] == 2 and labels[0, 5, 0] == 3


def test_select_largest_tie_break():
    sizes = [5, 9, 9, 2]
    labels = np.zeros((sum(sizes), 1, 1), dtype=np.int32)
    start = 0
    for lab, s in enumerate(sizes, start=1):
        labels[start:start + s - 1, 0, 0] = lab   # leave gaps so components separate
        start += s
    # build an actual mask with those sizes in label order
    mask = np.zeros((40, 1, 1), dtype=bool)
    pos = 0
    for s in sizes:
        mask[pos:pos + s, 0, 0] = True
        pos += s + 1
    lab, n = connected_components(mask, 6)
    assert component_sizes(lab, n).tolist() == sizes
    assert select_largest(lab, n, 2) == [2, 3]
    assert select_largest(lab, n, 99) == [2, 3, 1, 4]


def test_remove_small_components_threshold_edge():
    # at 0.62 x 0.62 x 7.8 mm spacing, 1000 mm^3 is 333.5 voxels
    spacing = (0.62, 0.62, 7.8)
    mask = np.zeros((40, 20, 2), dtype=bool)
    mask[:, :, 0].flat[:334] = True          # rows 0..16 of slice 0
    mask[:, :, 1].flat[400:733] = True       # rows 20..36 of slice 1, disjoint in-plane
    out = remove_small_components(mask, spacing, 1000.0, connectivity=6)
    assert out[:, :, 0].sum() == 334
    assert out[:, :, 1].sum() == 0


def test_remove_small_keeps_empty_empty():
    out = remove_small_components(np.zeros((4, 4, 4), dtype=bool), (1, 1, 1), 1000.0)
    assert not out.any()


def test_fill_holes_donut_and_oracle(rng):
    donut = np.zeros((7, 7, 1), dtype=bool)
    donut[1:6, 1:6, 0] = True
    donut[3, 3, 0] = False
    filled = fill_holes(donut)
    assert filled[3, 3, 0]
    assert filled.sum() == 25
    for _ in range(50):
        m = (rng.random((9, 9, 2)) > 0.55)
        got = fill_holes(m)
        for d in range(2):
            np.testing.assert_array_equal(got[:, :, d], fill_holes_reference(m[:, :, d]))


def test_fill_holes_open_to_border_not_filled():
    m = np.zeros((5, 5, 1), dtype=bool)
    m[1:4, 1:4, 0] = True
    m[2, 2, 0] = False
    m[0:3, 2, 0] = False     # channel from the hole to the border
    filled = fill_holes(m)
    assert not filled[2, 2, 0]


# -- metrics -------------------------------------------------------------------------


def test_dsc_edge_cases():
    a = np.zeros((3, 3, 1), dtype=bool)
    b = np.zeros((3, 3, 1), dtype=bool)
    assert dsc(a, b) == 1.0
    b[0, 0, 0] = True
    assert dsc(a, b) == 0.0
    assert dsc(b, b) == 1.0


def test_dsc_matches_set_oracle(rng):
    for _ in range(60):
        shape = tuple(rng.integers(1, 12, size=3))
        p = rng.random(shape) > 0.5
        g = rng.random(shape) > 0.5
        assert abs(dsc(p, g) - dsc_reference(p, g)) <= 1e-12


def test_lesion_match_one_of_two_found():
    gt = np.zeros((20, 10, 1), dtype=bool)
    gt[1:5, 1:5, 0] = True         # lesion 1
    gt[10:14, 1:5, 0] = True       # lesion 2
    pred = np.zeros_like(gt)
    pred[1:5, 1:3, 0] = True       # IoU vs lesion 1 = 8/16 = 0.5
    res = lesion_match(pred, gt, iou_threshold=0.1, connectivity=26)
    assert (res.tp, res.fp, res.fn) == (1, 0, 1)
    assert res.f1 == pytest.approx(2 / 3)
    assert res.lesionwise_dsc == pytest.approx(2 * 8 / (8 + 16))
    assert res.table[0]["gt_label"] == 1


def test_lesion_match_empty_cases():
    z = np.zeros((4, 4, 2), dtype=bool)
    full = lesion_match(z, z)
    assert full.f1 == 1.0 and full.lesionwise_dsc is None
    gt = z.copy()
    gt[0, 0, 0] = True
    res = lesion_match(z, gt)
    assert res.f1 == 0.0 and res.tp == 0 and res.fn == 1 and res.lesionwise_dsc is None


def test_lesion_match_union_of_fragments():
    gt = np.zeros((10, 10, 1), dtype=bool)
    gt[2:8, 2:8, 0] = True                      # 36 voxels
    pred = np.zeros_like(gt)
    pred[2:8, 2:4, 0] = True                    # fragment A, 12 voxels
    pred[2:8, 6:8, 0] = True                    # fragment B, 12 voxels
    res = lesion_match(pred, gt, iou_threshold=0.1)
    assert res.tp == 1 and res.fp == 0
    assert res.table[0]["pred_labels"] == [1, 2]
    assert res.lesionwise_dsc == pytest.approx(2 * 24 / (24 + 36))


def test_lesion_match_matches_reference(rng):
    for _ in range(40):
        shape = tuple(rng.integers(4, 14, size=3))
        p = rng.random(shape) > rng.uniform(0.55, 0.9)
        g = rng.random(shape) > rng.uniform(0.55, 0.9)
        got = lesion_match(p, g, iou_threshold=0.1, connectivity=26)
        want = lesion_match_reference(p, g, iou_thr=0.1, connectivity=26)
        assert (got.tp, got.fp, got.fn) == (want["tp"], want["fp"], want["fn"])
        assert abs(got.f1 - want["f1"]) <= 1e-12
        if want["lesionwise_dsc"] is None:
            assert got.lesionwise_dsc is None
        else:
            assert abs(got.lesionwise_dsc - want["lesionwise_dsc"]) <= 1e-12


# -- click simulation ------------------------------------------------------------------


def test_initial_click_plus_shape_center():
    m = np.zeros((5, 5, 1), dtype=bool)
    m[2, 1:4, 0] = True
    m[1:4, 2, 0] = True
    c = simulate_initial_click(m, (1, 1, 1))
    assert (c.y, c.x, c.slice, c.label) == (2, 2, 0, 1)


def test_initial_click_projects_into_mask():
    m = np.zeros((5, 7, 1), dtype=bool)
    m[0, 1:6, 0] = True      # U shape: centre of mass falls in the gap
    m[1:4, 1, 0] = True
    m[1:4, 5, 0] = True
    c = simulate_initial_click(m, (1, 1, 1))
    assert m[c.y, c.x, c.slice]


def test_projection_uses_spacing():
    m = np.zeros((5, 5, 3), dtype=bool)
    m[2, 2, 1] = True    # one column from the rounded centre (2, 3, 1)
    m[2, 3, 0] = True    # one slice from it
    m[2, 4, 1] = True    # one column from it
    # centre of mass (2, 3, 2/3) rounds to background voxel (2, 3, 1)
    thick = mask_center_voxel(m, (1.0, 1.0, 10.0))
    assert thick == (2, 2, 1)    # in-plane wins; scan order breaks the tie with (2, 4, 1)
    thin = mask_center_voxel(m, (1.0, 1.0, 0.1))
    assert thin == (2, 3, 0)     # out-of-plane neighbour is nearest in mm


def test_projection_tie_breaks_scan_order():
    m = np.zeros((3, 3, 1), dtype=bool)
    m[0, 1, 0] = True
    m[2, 1, 0] = True
    center = mask_center_voxel(m, (1, 1, 1))   # centre (1,1) background, both at distance 1
    assert center == (0, 1, 0)


def test_correction_click_labels():
    gt = np.zeros((8, 8, 1), dtype=bool)
    gt[1:4, 1:4, 0] = True
    pred = np.zeros_like(gt)
    c = simulate_correction_click(pred, gt, (1, 1, 1))
    assert c.label == 1 and gt[c.y, c.x, c.slice]

    pred2 = gt.copy()
    pred2[5:8, 5:8, 0] = True   # extra blob -> false positive region
    c2 = simulate_correction_click(pred2, gt, (1, 1, 1))
    assert c2.label == 0 and pred2[c2.y, c2.x, c2.slice] and not gt[c2.y, c2.x, c2.slice]


def test_correction_click_largest_region_wins():
    gt = np.zeros((10, 10, 1), dtype=bool)
    gt[0:2, 0:2, 0] = True       # small FN (4 voxels)
    pred = np.zeros_like(gt)
    pred[5:10, 5:10, 0] = True   # big FP (25 voxels)
    c = simulate_correction_click(pred, gt, (1, 1, 1))
    assert c.label == 0 and c.y >= 5 and c.x >= 5


def test_correction_click_converged_returns_none():
    gt = np.zeros((4, 4, 1), dtype=bool)
    gt[1:3, 1:3, 0] = True
    assert simulate_correction_click(gt.copy(), gt, (1, 1, 1)) is None


def test_click_bounds_check():
    with pytest.raises(ValueError, match="outside"):
        check_click_bounds(Click(x=5, y=0, slice=0, label=1), (4, 4, 2))
    with pytest.raises(ValueError, match="label"):
        Click(x=0, y=0, slice=0, label=3)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30)
def test_correction_click_always_inside_error(seed):
    r = np.random.default_rng(seed)
    pred = r.random((6, 6, 3)) > 0.6
    gt = r.random((6, 6, 3)) > 0.6
    c = simulate_correction_click(pred, gt, (1, 1, 2))
    if c is None:
        np.testing.assert_array_equal(pred, gt)
    else:
        assert (pred ^ gt)[c.y, c.x, c.slice]
        assert c.label == (1 if gt[c.y, c.x, c.slice] else 0)


# -- harness with stubs ---------------------------------------------------------------


class PerfectStub:
    """Returns the exact GT component containing any positive click."""

    def __init__(self, gt, connectivity=26):
        self.gt = np.asarray(gt, dtype=bool)
        self.connectivity = connectivity
        self.masks = {}

    def begin(self, volume):
        self.labels, _ = connected_components(self.gt, self.connectivity)

    def add_click(self, lesion_id, click):
        lab = self.labels[click.key()]
        if click.label == 1 and lab > 0:
            self.masks[lesion_id] = self.labels == lab

    def lesion_mask(self, lesion_id):
        return self.masks.get(lesion_id, np.zeros(self.gt.shape, dtype=bool))

    def semantic_mask(self):
        return None


class EmptyStub:
    def begin(self, volume):
        self.shape = volume.shape

    def add_click(self, lesion_id, click):
        pass

    def lesion_mask(self, lesion_id):
        return np.zeros(self.shape, dtype=bool)

    def semantic_mask(self):
        return None


def two_lesion_case():
    gt = np.zeros((30, 30, 4), dtype=bool)
    gt[2:12, 2:12, 0:3] = True
    gt[18:26, 18:28, 1:4] = True
    vol = Volume(gt.astype(np.float32), (2.0, 2.0, 2.0))
    return vol, gt


def test_harness_perfect_stub_scores_one():
    vol, gt = two_lesion_case()
    cfg = EvalConfig(max_lesions=2, clicks_per_lesion=3, min_component_mm3=100.0)
    report = run_lesionwise_eval(PerfectStub(gt), vol, gt, cfg)
    assert report.scan_dsc == 1.0
    assert report.lesion_f1 == 1.0
    assert report.lesionwise_dsc == 1.0
    assert all(len(c) == 1 for c in report.clicks)   # converges after one click


def test_harness_empty_stub_scores_zero():
    vol, gt = two_lesion_case()
    cfg = EvalConfig(max_lesions=2, clicks_per_lesion=3, min_component_mm3=100.0)
    report = run_lesionwise_eval(EmptyStub(), vol, gt, cfg)
    assert report.scan_dsc == 0.0
    assert report.lesion_f1 == 0.0
    assert report.lesionwise_dsc is None
    assert all(len(c) == cfg.clicks_per_lesion for c in report.clicks)


def test_harness_respects_lesion_budget():
    vol, gt = two_lesion_case()
    cfg = EvalConfig(max_lesions=1, clicks_per_lesion=2, min_component_mm3=100.0)
    report = run_lesionwise_eval(PerfectStub(gt), vol, gt, cfg)
    assert len(report.chosen_gt_labels) == 1
    assert report.chosen_gt_labels[0] == 1   # the 10x10x3 lesion is largest
