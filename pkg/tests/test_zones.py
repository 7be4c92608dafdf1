import pytest

import reference39 as ref
from acfdi.network import parse_case
from acfdi.zones import ZoneError, build_zone, validate_zone

CHAIN_CASE = """function mpc = chain4
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0 0 0 0 1 1.0 0 345 1 1.06 0.94;
    2 1 10 5 0 0 1 1.0 0 345 1 1.06 0.94;
    3 1 0 0 0 0 1 1.0 0 345 1 1.06 0.94;
    4 1 20 8 0 0 1 1.0 0 345 1 1.06 0.94;
];
mpc.gen = [
    1 30 0 300 -300 1.0 100 1 500 0;
];
mpc.branch = [
    1 2 0.01 0.1 0 250 250 250 0 0 1;
    2 3 0.01 0.1 0 250 250 250 0 0 1;
    3 4 0.01 0.1 0 250 250 250 0 0 1;
];
"""


def test_focal_17_expands_to_its_injecting_neighbors(case39):
    zone = build_zone(case39, {17})
    assert zone.interior == {17}
    assert zone.boundary == {16, 18, 27}


def test_chain_zero_injection_middle_bus():
    # A - B - C chain with zero-injection B: one-step expansion stops at A, C
    case = parse_case(CHAIN_CASE)
    zone = build_zone(case, {3})
    assert zone.interior == {3}
    assert zone.boundary == {2, 4}


def test_reference_focal_set_expands_to_declared_interior(case39):
    zone = build_zone(case39, {18, 26, 27, 28})
    assert zone.interior == {17, 18, 26, 27, 28}
    assert zone.boundary == {3, 16, 25, 29}


def test_reference_zone_validates_with_inert_buses(case39, zone39):
    assert zone39.interior == ref.ZONE_INTERIOR
    assert zone39.boundary == ref.ZONE_BOUNDARY
    assert zone39.inert_boundary == ref.INERT_BOUNDARY
    assert {(b.from_bus, b.to_bus) for b in zone39.interior_lines} == {
        (3, 18), (16, 17), (17, 18), (17, 27), (25, 26),
        (26, 27), (26, 28), (26, 29), (28, 29),
    }
    assert {(b.from_bus, b.to_bus) for b in zone39.frozen_lines} == {
        (15, 16), (16, 21), (16, 24),
    }
    assert {(b.from_bus, b.to_bus) for b in zone39.tie_lines} == {
        (2, 3), (2, 25), (3, 4), (14, 15), (16, 19),
        (21, 22), (23, 24), (25, 37), (29, 38),
    }


def test_incomplete_boundary_rejected_naming_the_leak(case39):
    with pytest.raises(ZoneError, match="bus 27 is an exterior neighbor of interior bus 17"):
        validate_zone(case39, {17}, {16, 18})


def test_empty_zone_rejected(case39):
    with pytest.raises(ZoneError, match="empty zone"):
        validate_zone(case39, set(), set())
    with pytest.raises(ZoneError, match="empty focal"):
        build_zone(case39, set())


def test_slack_exclusion(case39):
    with pytest.raises(ZoneError, match="slack"):
        build_zone(case39, {31})
    with pytest.raises(ZoneError, match="slack"):
        validate_zone(case39, {31}, {6})


def test_expansion_reaching_slack_rejected(case39):
    # bus 6 sits in a pocket of zero-injection buses whose closure touches the
    # slack bus through the 6-31 transformer
    with pytest.raises(ZoneError, match="reached the slack bus"):
        build_zone(case39, {6})


def test_zero_injection_boundary_rejected(case39):
    # bus 17 carries no load and no generator, so it cannot seal a boundary
    with pytest.raises(ZoneError, match="boundary bus 17 has zero injection"):
        validate_zone(case39, {18}, {3, 17})


def test_unknown_bus_rejected(case39):
    with pytest.raises(Exception, match="unknown bus id 99"):
        build_zone(case39, {99})


def test_build_zone_output_passes_validate_zone(case39):
    for focal in ({17}, {18, 26, 27, 28}, {26}):
        zone = build_zone(case39, focal)
        again = validate_zone(case39, zone.interior, zone.boundary)
        assert again.interior == zone.interior
        assert again.boundary == zone.boundary
        assert again.inert_boundary == zone.inert_boundary


def test_expansion_is_order_independent(case39):
    import itertools

    focal = (18, 26, 27, 28)
    zones = [build_zone(case39, set(perm)) for perm in itertools.permutations(focal)]
    assert all(z.interior == zones[0].interior for z in zones)
    assert all(z.boundary == zones[0].boundary for z in zones)


def test_zero_injection_interior_listing(case39, zone39):
    assert zone39.zero_injection_interior(case39) == (17,)


def test_zone_serialization_fields(zone39):
    doc = zone39.to_dict()
    assert doc["interior"] == sorted(ref.ZONE_INTERIOR)
    assert doc["inert_boundary"] == sorted(ref.INERT_BOUNDARY)
    assert [26, 27] in doc["interior_lines"]
