import numpy as np
import pytest

from cardiogcn.anatomy import (AnatomyReport, background_pockets, check_keypoints, check_mask, count_incorrect,
                               ring_crossing_free, rings_intersect_free)
from cardiogcn.imaging import BG, LA, LV, MYO
from cardiogcn.keypoints import from_displacement, to_displacement

from defects import EXPECTED, base_case, make_defect, multi_atria

# removing the whole myocardium makes enclosure vacuous and opens the pockets it walled in
VACUOUS = {("myo_gap", "myo_absent"): {"myo_band_encloses_lv"},
           ("inter_structure_hole", "myo_absent"): {"no_inter_structure_holes"}}


def test_phantoms_pass(phantoms):
    for _, mask, kps in phantoms:
        assert check_mask(mask).overall
        assert check_keypoints(kps).overall


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_defect_breaks_exactly_its_criterion(name):
    assert check_mask(make_defect(name)).failed() == [EXPECTED[name]]


def test_multi_atria():
    assert check_mask(multi_atria()).failed() == ["single_component_la"]


def test_monotone_under_defect_corpus():
    _, base, _, _ = base_case()
    masks = {n: make_defect(n) for n in EXPECTED}
    for a, ma in masks.items():
        failed_a = set(check_mask(ma).failed())
        for b, mb in masks.items():
            if a == b:
                continue
            both = ma.copy()
            both[(mb != base) & (ma == base) & (mb == BG)] = BG
            lost = failed_a - set(check_mask(both).failed())
            assert lost == VACUOUS.get((a, b), set()), (a, b)


def test_swapped_rings_flagged(phantom):
    kps = phantom[2]
    swapped = kps.copy(endo=kps.epi.copy(), epi=kps.endo.copy())
    assert not ring_crossing_free(swapped)
    assert not check_keypoints(swapped).overall


def test_identical_rings_flagged(phantom):
    kps = phantom[2]
    same = kps.copy(epi=kps.endo.copy())
    assert not ring_crossing_free(same)
    assert not rings_intersect_free(same)


def test_displacement_output_crossing_free(phantoms):
    for _, _, kps in phantoms:
        assert ring_crossing_free(from_displacement(to_displacement(kps)))


def test_crossed_polylines_flagged(phantom):
    kps = phantom[2]
    epi = kps.epi.copy()
    epi[10] = kps.endo[30]
    bent = kps.copy(epi=epi)
    assert not rings_intersect_free(bent)


def test_sector_excludes_outside_islands():
    m = np.zeros((20, 20), np.uint8)
    m[2:18, 2:18] = MYO
    m[5:12, 5:12] = LV
    m[13:17, 5:12] = LA
    m[3, 3] = BG  # pocket inside the myocardium
    assert check_mask(m).no_holes_myo is False
    sector = np.ones_like(m, bool)
    sector[3, 3] = False
    assert check_mask(m, sector).no_holes_myo is True
    assert len(background_pockets(m)) == 1


def test_report_fields_and_count():
    rep = AnatomyReport()
    assert rep.overall and rep.failed() == []
    assert set(rep.to_dict()) == set(rep.criteria) | {"overall"}
    bad = AnatomyReport(no_holes_la=False)
    assert count_incorrect([rep, bad, bad]) == 2
