import statistics
import zlib

import pytest

from parasink import (
    EventGenerator,
    ProductSchema,
    Tier,
    ValidationError,
    WorkloadProfile,
    generate_events,
    load_profile,
    save_profile,
)
from parasink.events import parse_flat_config, profile_from_config

from conftest import make_profile


def one_product_profile(n_events, *, mean=512, dispersion=0.3, compressibility=0.7, seed=5):
    return WorkloadProfile(
        schemas=(ProductSchema("p", Tier.RECO, mean, dispersion, compressibility),),
        events_total=n_events,
        seed=seed,
    )


def test_zero_events_yields_empty_stream():
    profile = one_product_profile(0)
    assert list(generate_events(profile)) == []


def test_same_seed_twice_is_byte_identical():
    profile = make_profile(events_total=30, seed=42)
    a = [e.products for e in generate_events(profile)]
    b = [e.products for e in generate_events(profile)]
    assert a == b


def test_different_seed_changes_bytes():
    base = make_profile(events_total=5, seed=1)
    other = base.with_overrides(seed=2)
    a = next(iter(generate_events(base)))
    b = next(iter(generate_events(other)))
    assert a.products != b.products


def test_event_ids_dense_from_zero():
    profile = make_profile(events_total=25)
    assert [e.event_id for e in generate_events(profile)] == list(range(25))


def test_random_access_matches_iteration():
    profile = make_profile(events_total=10, seed=9)
    gen = EventGenerator(profile)
    streamed = list(gen)
    assert gen.event(7).products == streamed[7].products
    assert gen.event(0).products == streamed[0].products


def test_products_match_schema_names(tiny_profile):
    event = next(iter(generate_events(tiny_profile)))
    assert set(event.products) == set(tiny_profile.product_names)


def test_payload_lengths_within_bounds():
    profile = one_product_profile(500, mean=64, dispersion=1.2)
    for event in generate_events(profile):
        n = len(event.products["p"])
        assert 1 <= n <= 16 * 64


def test_fully_patterned_payload_compresses_below_ten_percent():
    # corpus ratio measured at 0.011 on the reference codec before freezing
    profile = one_product_profile(50, mean=4096, dispersion=0.0, compressibility=1.0)
    raw = comp = 0
    for event in generate_events(profile):
        payload = event.products["p"]
        raw += len(payload)
        comp += len(zlib.compress(payload, 6))
    assert comp / raw < 0.10


def test_size_law_sample_mean_within_5_percent():
    profile = one_product_profile(10_000, mean=512, dispersion=0.5)
    mean = statistics.fmean(len(e.products["p"]) for e in generate_events(profile))
    assert abs(mean - 512) / 512 < 0.05


def test_compressibility_monotonicity():
    ratios = []
    for c in (0.0, 0.25, 0.5, 0.75, 1.0):
        profile = one_product_profile(1000, mean=1024, dispersion=0.3, compressibility=c)
        raw = comp = 0
        for event in generate_events(profile):
            payload = event.products["p"]
            raw += len(payload)
            comp += len(zlib.compress(payload, 6))
        ratios.append(comp / raw)
    assert all(a >= b for a, b in zip(ratios, ratios[1:])), ratios


@pytest.mark.parametrize(
    "kwargs, needle",
    [
        (dict(mean_bytes=0), "mean_bytes"),
        (dict(dispersion=-0.1), "dispersion"),
        (dict(compressibility=1.5), "compressibility"),
        (dict(name=""), "name"),
    ],
)
def test_schema_validation_names_offending_field(kwargs, needle):
    base = dict(name="x", tier=Tier.AOD, mean_bytes=10, dispersion=0.0, compressibility=0.5)
    base.update(kwargs)
    with pytest.raises(ValidationError, match=needle):
        ProductSchema(**base)


def test_profile_rejects_duplicate_product_names():
    s = ProductSchema("same", Tier.RECO, 10)
    with pytest.raises(ValidationError, match="duplicate"):
        WorkloadProfile(schemas=(s, s), events_total=1)


def test_profile_rejects_empty_schemas():
    with pytest.raises(ValidationError, match="schemas"):
        WorkloadProfile(schemas=(), events_total=1)


def test_profile_file_roundtrip(tmp_path, tiny_profile):
    path = tmp_path / "workload.conf"
    save_profile(tiny_profile, path)
    assert load_profile(path) == tiny_profile


def test_flat_config_parsing_errors():
    with pytest.raises(ValidationError, match="line 2"):
        parse_flat_config("a = 1\nnot a pair\n")
    with pytest.raises(ValidationError, match="duplicate key"):
        parse_flat_config("a = 1\na = 2\n")


def test_profile_from_config_reports_bad_values():
    kv = {
        "events_total": "10",
        "schema.0.name": "x",
        "schema.0.tier": "NOPE",
        "schema.0.mean_bytes": "10",
    }
    with pytest.raises(ValidationError, match="tier"):
        profile_from_config(kv)
    kv["schema.0.tier"] = "AOD"
    kv["schema.0.mean_bytes"] = "ten"
    with pytest.raises(ValidationError, match="mean_bytes"):
        profile_from_config(kv)
