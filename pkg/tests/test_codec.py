import io
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parasink import (
    Basket,
    ColumnStore,
    ContainerAppender,
    CorruptionError,
    Event,
    FlushPolicy,
    FormatError,
    LifecycleError,
    SchemaMismatchError,
    ValidationError,
    compress_basket,
    decompress_basket,
    read_container,
    write_container,
)
from parasink.codec import EVENT_ID_COLUMN, MAGIC


def ev(event_id, **products):
    return Event(event_id, products)


def basket_of(payloads, name="col", first_entry=0):
    raw = b"".join(payloads)
    offsets = []
    pos = 0
    for p in payloads:
        pos += len(p)
        offsets.append(pos)
    return Basket(name, first_entry, len(payloads), raw, tuple(offsets))


# --- flush policy / column store -------------------------------------------


def test_flush_policy_requires_a_criterion():
    with pytest.raises(ValidationError):
        FlushPolicy()


def test_small_appends_stay_pending():
    store = ColumnStore(["a", "b"], FlushPolicy(basket_target_bytes=1 << 20), include_event_id=False)
    out = store.append_event(ev(0, a=b"x" * 10, b=b"y" * 10))
    assert out == []
    assert store.pending_bytes() == 20


def test_byte_target_cuts_on_second_append():
    store = ColumnStore(["a"], FlushPolicy(basket_target_bytes=100), include_event_id=False)
    assert store.append_event(ev(0, a=b"x" * 60)) == []
    (basket,) = store.append_event(ev(1, a=b"y" * 60))
    assert basket.entry_count == 2
    assert basket.first_entry == 0
    assert basket.raw_bytes == b"x" * 60 + b"y" * 60
    assert basket.entry_offsets == (60, 120)


def test_flush_every_event_returns_basket_per_column():
    store = ColumnStore(["a", "b"], FlushPolicy(flush_every_n_events=1), include_event_id=False)
    for i in range(3):
        baskets = store.append_event(ev(i, a=b"aa", b=b"b"))
        assert sorted(b.column_name for b in baskets) == ["a", "b"]
        assert all(b.first_entry == i and b.entry_count == 1 for b in baskets)


def test_unknown_product_is_schema_mismatch():
    store = ColumnStore(["a"], FlushPolicy(basket_target_bytes=10), include_event_id=False)
    with pytest.raises(SchemaMismatchError, match="unknown"):
        store.append_event(ev(0, a=b"x", zz=b"y"))
    with pytest.raises(SchemaMismatchError, match="missing"):
        store.append_event(ev(0))


def test_event_id_column_tracks_ids():
    store = ColumnStore(["a"], FlushPolicy(flush_every_n_events=2))
    store.append_event(ev(7, a=b"x"))
    baskets = store.append_event(ev(9, a=b"y"))
    id_basket = next(b for b in baskets if b.column_name == EVENT_ID_COLUMN)
    assert id_basket.raw_bytes == struct.pack("<QQ", 7, 9)


def test_flush_bound_holds_for_random_sizes():
    import random

    rng = random.Random(3)
    target = 256
    store = ColumnStore(["a"], FlushPolicy(basket_target_bytes=target), include_event_id=False)
    max_payload = 0
    for i in range(300):
        payload = b"q" * rng.randint(1, 97)
        max_payload = max(max_payload, len(payload))
        for basket in store.append_event(ev(i, a=payload)):
            assert len(basket.raw_bytes) <= target + max_payload


def test_reconstruction_from_baskets():
    import random

    rng = random.Random(5)
    store = ColumnStore(["a"], FlushPolicy(basket_target_bytes=128), include_event_id=False)
    originals = []
    baskets = []
    for i in range(100):
        payload = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 40)))
        originals.append(payload)
        baskets.extend(store.append_event(ev(i, a=payload)))
    baskets.extend(store.flush_all())
    rebuilt = []
    for basket in sorted(baskets, key=lambda b: b.first_entry):
        roundtrip = decompress_basket(compress_basket(basket, 4))
        rebuilt.extend(roundtrip.split_entries())
    assert rebuilt == originals


# --- compression -------------------------------------------------------------


def test_level_zero_stores_raw_bit_identical():
    basket = basket_of([b"hello", b"world"])
    cb = compress_basket(basket, 0)
    assert cb.payload == basket.raw_bytes
    assert cb.compressed_len == cb.raw_len == 10


def test_pattern_data_compresses_below_ten_percent():
    # 64 KiB of repeating pattern measured at ratio 0.005 before freezing
    basket = basket_of([bytes(range(64)) * 1024])
    cb = compress_basket(basket, 6)
    assert cb.compressed_len < 0.1 * cb.raw_len


def test_empty_basket_roundtrips():
    basket = basket_of([])
    cb = compress_basket(basket, 6)
    assert cb.raw_len == 0
    assert decompress_basket(cb) == basket


def test_invalid_level_rejected():
    with pytest.raises(ValidationError, match="level"):
        compress_basket(basket_of([b"x"]), 10)


@settings(max_examples=60, deadline=None)
@given(
    payloads=st.lists(st.binary(max_size=200), min_size=0, max_size=8),
    level=st.integers(min_value=0, max_value=9),
)
def test_roundtrip_identity_property(payloads, level):
    basket = basket_of(payloads)
    assert decompress_basket(compress_basket(basket, level)) == basket


def test_flipped_bit_is_corruption_error():
    cb = compress_basket(basket_of([b"some compressible payload" * 40]), 6)
    corrupt = bytearray(cb.payload)
    corrupt[len(corrupt) // 2] ^= 0x10
    bad = type(cb)(**{**cb.__dict__, "payload": bytes(corrupt)})
    with pytest.raises(CorruptionError):
        decompress_basket(bad)


def test_flipped_bit_in_stored_mode_is_corruption_error():
    cb = compress_basket(basket_of([b"abcdef"]), 0)
    corrupt = bytearray(cb.payload)
    corrupt[0] ^= 0x01
    bad = type(cb)(**{**cb.__dict__, "payload": bytes(corrupt)})
    with pytest.raises(CorruptionError, match="checksum"):
        decompress_basket(bad)


def test_forged_raw_len_is_format_error():
    cb = compress_basket(basket_of([b"payload bytes here"]), 6)
    bad = type(cb)(
        **{
            **cb.__dict__,
            "raw_len": cb.raw_len + 1,
            "entry_offsets": (cb.entry_offsets[0] + 1,),
        }
    )
    with pytest.raises(FormatError, match="raw_len"):
        decompress_basket(bad)


def test_truncated_payload_is_format_error():
    cb = compress_basket(basket_of([b"payload bytes here"]), 6)
    bad = type(cb)(**{**cb.__dict__, "payload": cb.payload[:-3]})
    with pytest.raises(FormatError, match="truncated"):
        decompress_basket(bad)


# --- container ---------------------------------------------------------------


def test_empty_container_roundtrip():
    buf = io.BytesIO()
    write_container(buf, [], total_events=0)
    baskets, trailer = read_container(io.BytesIO(buf.getvalue()))
    assert baskets == []
    assert trailer.total_events == 0
    assert trailer.index == {}


def test_container_roundtrip_three_baskets_two_columns():
    cbs = [
        compress_basket(basket_of([b"a1"], name="a", first_entry=0), 1),
        compress_basket(basket_of([b"b1", b"b2"], name="b", first_entry=0), 6),
        compress_basket(basket_of([b"a2"], name="a", first_entry=1), 0),
    ]
    buf = io.BytesIO()
    write_container(buf, cbs, total_events=2)
    got, trailer = read_container(io.BytesIO(buf.getvalue()))
    assert got == cbs
    assert trailer.total_events == 2
    assert [e.first_entry for e in trailer.index["a"]] == [0, 1]
    assert len(trailer.index["b"]) == 1


def test_merged_halves_match_single_container_oracle():
    def half(first_entry, ids):
        return compress_basket(
            basket_of([b"payload-%d" % i for i in ids], name="a", first_entry=first_entry), 3
        )

    whole = io.BytesIO()
    write_container(whole, [half(0, [0, 1]), half(2, [2, 3])], total_events=4)

    merged = io.BytesIO()
    appender = ContainerAppender(merged)
    appender.append_baskets([half(0, [0, 1])], rebase=appender.total_events)
    appender.bump_events(2)
    appender.append_baskets([half(0, [2, 3])], rebase=appender.total_events)
    appender.bump_events(2)
    appender.finalize()

    got_w, trailer_w = read_container(io.BytesIO(whole.getvalue()))
    got_m, trailer_m = read_container(io.BytesIO(merged.getvalue()))
    assert trailer_m.total_events == trailer_w.total_events == 4
    assert got_m == got_w
    assert merged.getvalue() == whole.getvalue()


def test_bad_magic_rejected():
    with pytest.raises(FormatError, match="magic"):
        read_container(io.BytesIO(b"NOTMAGIC" + b"\x00" * 40))


def test_truncated_file_rejected():
    buf = io.BytesIO()
    write_container(buf, [compress_basket(basket_of([b"x"]), 1)], total_events=1)
    data = buf.getvalue()[:-5]
    with pytest.raises(FormatError):
        read_container(io.BytesIO(data))


def test_index_offset_mismatch_rejected():
    buf = io.BytesIO()
    write_container(buf, [compress_basket(basket_of([b"x"]), 1)], total_events=1)
    data = bytearray(buf.getvalue())
    # corrupt the index offset in the footer
    struct.pack_into("<Q", data, len(data) - 16, 2)
    with pytest.raises(FormatError):
        read_container(io.BytesIO(bytes(data)))


def test_double_finalize_is_lifecycle_error():
    appender = ContainerAppender(io.BytesIO())
    appender.finalize()
    with pytest.raises(LifecycleError):
        appender.finalize()
    with pytest.raises(LifecycleError):
        appender.append_baskets([compress_basket(basket_of([b"x"]), 1)])


def test_container_magic_is_stable():
    buf = io.BytesIO()
    write_container(buf, [], total_events=0)
    data = buf.getvalue()
    assert data[:8] == MAGIC == b"PSNK0001"
    assert data[-8:] == MAGIC
