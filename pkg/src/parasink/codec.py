"""Columnar serialization: per-column buffers, basket cutting, compression,
and the container file format.

Container layout (all integers little-endian):

    magic                      8 bytes  b"PSNK0001"
    basket records             length-prefixed, see _encode_record
    index                      per-column basket directory + total event count
    footer                     u64 index offset + magic repeat (16 bytes)

The footer-at-end design means merged output can be produced append-only:
records from many sources are concatenated and the index is written once at
finalize time.
"""

from __future__ import annotations

import io
import struct
import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

from .errors import (
    CorruptionError,
    FormatError,
    LifecycleError,
    SchemaMismatchError,
    ValidationError,
)
from .events import Event

MAGIC = b"PSNK0001"
EVENT_ID_COLUMN = "__event_id__"
CODEC_LEVEL_MIN = 0
CODEC_LEVEL_MAX = 9

_FIXED_HEADER = struct.Struct("<QIQQIB")  # first_entry, entry_count, raw_len, compressed_len, checksum, level
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_FOOTER = struct.Struct("<Q8s")
_INDEX_ENTRY = struct.Struct("<QQI")  # file offset, first_entry, entry_count


@dataclass(frozen=True)
class FlushPolicy:
    """When to cut a column's pending bytes into a basket.

    At least one criterion must be set; both may be. A column is cut right
    after an append once pending bytes reach ``basket_target_bytes`` or the
    pending entry count reaches ``flush_every_n_events``.
    """

    basket_target_bytes: int | None = None
    flush_every_n_events: int | None = None

    def __post_init__(self):
        if self.basket_target_bytes is None and self.flush_every_n_events is None:
            raise ValidationError("flush policy: at least one criterion must be set")
        if self.basket_target_bytes is not None and self.basket_target_bytes < 1:
            raise ValidationError(f"basket_target_bytes: must be >= 1, got {self.basket_target_bytes}")
        if self.flush_every_n_events is not None and self.flush_every_n_events < 1:
            raise ValidationError(f"flush_every_n_events: must be >= 1, got {self.flush_every_n_events}")

    def due(self, pending_bytes: int, pending_entries: int) -> bool:
        if self.basket_target_bytes is not None and pending_bytes >= self.basket_target_bytes:
            return True
        if self.flush_every_n_events is not None and pending_entries >= self.flush_every_n_events:
            return True
        return False


@dataclass(frozen=True)
class Basket:
    """One column's bytes for a contiguous span of entries (pre-compression).

    ``entry_offsets[i]`` is the end offset of entry i within ``raw_bytes``;
    offsets are non-decreasing and the last equals ``len(raw_bytes)``.
    """

    column_name: str
    first_entry: int
    entry_count: int
    raw_bytes: bytes
    entry_offsets: tuple[int, ...]

    def split_entries(self) -> list[bytes]:
        out = []
        start = 0
        for end in self.entry_offsets:
            out.append(self.raw_bytes[start:end])
            start = end
        return out


@dataclass(frozen=True)
class CompressedBasket:
    """A basket after compression; immutable and freely shareable."""

    column_name: str
    first_entry: int
    entry_count: int
    raw_len: int
    compressed_len: int
    checksum: int
    codec_level: int
    entry_offsets: tuple[int, ...]
    payload: bytes

    def rebased(self, delta: int) -> "CompressedBasket":
        if delta == 0:
            return self
        return CompressedBasket(
            column_name=self.column_name,
            first_entry=self.first_entry + delta,
            entry_count=self.entry_count,
            raw_len=self.raw_len,
            compressed_len=self.compressed_len,
            checksum=self.checksum,
            codec_level=self.codec_level,
            entry_offsets=self.entry_offsets,
            payload=self.payload,
        )


class ColumnBuffer:
    """Pending bytes for one column. Owned by exactly one writer at a time."""

    __slots__ = ("column_name", "pending", "entry_offsets", "first_entry")

    def __init__(self, column_name: str):
        self.column_name = column_name
        self.pending = bytearray()
        self.entry_offsets: list[int] = []
        self.first_entry = 0

    @property
    def pending_bytes(self) -> int:
        return len(self.pending)

    @property
    def pending_entries(self) -> int:
        return len(self.entry_offsets)

    def append(self, payload: bytes) -> None:
        self.pending += payload
        self.entry_offsets.append(len(self.pending))

    def cut(self) -> Basket:
        basket = Basket(
            column_name=self.column_name,
            first_entry=self.first_entry,
            entry_count=len(self.entry_offsets),
            raw_bytes=bytes(self.pending),
            entry_offsets=tuple(self.entry_offsets),
        )
        self.first_entry += basket.entry_count
        self.pending.clear()
        self.entry_offsets.clear()
        return basket


class ColumnStore:
    """Ordered set of column buffers fed from events.

    With ``include_event_id`` a synthetic leading column stores each event's
    id as 8 bytes, which is what output verification reads back.
    Not thread-safe: one writer at a time.
    """

    def __init__(self, product_names: Sequence[str], policy: FlushPolicy, *, include_event_id: bool = True):
        names = list(product_names)
        if include_event_id:
            if EVENT_ID_COLUMN in names:
                raise ValidationError(f"{EVENT_ID_COLUMN!r} is reserved")
            names = [EVENT_ID_COLUMN] + names
        if len(set(names)) != len(names):
            raise ValidationError("duplicate column names")
        self.policy = policy
        self.include_event_id = include_event_id
        self._columns = {name: ColumnBuffer(name) for name in names}
        self._product_names = frozenset(product_names)
        self.events_appended = 0
        self.peak_pending_bytes = 0

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(self._columns)

    def pending_bytes(self) -> int:
        return sum(c.pending_bytes for c in self._columns.values())

    def append_event(self, event: Event) -> list[Basket]:
        got = set(event.products)
        if got != self._product_names:
            unknown = sorted(got - self._product_names)
            missing = sorted(self._product_names - got)
            parts = []
            if unknown:
                parts.append(f"unknown products {unknown}")
            if missing:
                parts.append(f"missing products {missing}")
            raise SchemaMismatchError(f"event {event.event_id}: " + ", ".join(parts))
        if self.include_event_id:
            self._columns[EVENT_ID_COLUMN].append(_U64.pack(event.event_id))
        for name, payload in event.products.items():
            self._columns[name].append(payload)
        self.events_appended += 1
        pending = self.pending_bytes()
        if pending > self.peak_pending_bytes:
            self.peak_pending_bytes = pending
        cut = []
        for col in self._columns.values():
            if col.pending_entries and self.policy.due(col.pending_bytes, col.pending_entries):
                cut.append(col.cut())
        return cut

    def flush_all(self) -> list[Basket]:
        """Cut every non-empty column regardless of the policy."""
        return [col.cut() for col in self._columns.values() if col.pending_entries]


def compress_basket(basket: Basket, level: int) -> CompressedBasket:
    """Compress one basket; level 0 stores the raw bytes verbatim."""
    if not CODEC_LEVEL_MIN <= level <= CODEC_LEVEL_MAX:
        raise ValidationError(f"codec level: must be in [{CODEC_LEVEL_MIN}, {CODEC_LEVEL_MAX}], got {level}")
    payload = basket.raw_bytes if level == 0 else zlib.compress(basket.raw_bytes, level)
    return CompressedBasket(
        column_name=basket.column_name,
        first_entry=basket.first_entry,
        entry_count=basket.entry_count,
        raw_len=len(basket.raw_bytes),
        compressed_len=len(payload),
        checksum=zlib.crc32(basket.raw_bytes) & 0xFFFFFFFF,
        codec_level=level,
        entry_offsets=basket.entry_offsets,
        payload=payload,
    )


def decompress_basket(cb: CompressedBasket) -> Basket:
    """Invert :func:`compress_basket`, verifying lengths and checksum."""
    if cb.compressed_len != len(cb.payload):
        raise FormatError(
            f"basket {cb.column_name!r}@{cb.first_entry}: payload truncated "
            f"({len(cb.payload)} bytes, header says {cb.compressed_len})"
        )
    if cb.entry_count != len(cb.entry_offsets):
        raise FormatError(f"basket {cb.column_name!r}@{cb.first_entry}: entry_count/offsets mismatch")
    if any(b > a for a, b in zip(cb.entry_offsets[1:], cb.entry_offsets)) or (
        cb.entry_offsets and cb.entry_offsets[-1] != cb.raw_len
    ):
        raise FormatError(f"basket {cb.column_name!r}@{cb.first_entry}: bad entry offsets")
    if cb.codec_level == 0:
        raw = cb.payload
    else:
        try:
            raw = zlib.decompress(cb.payload)
        except zlib.error as exc:
            raise CorruptionError(
                f"basket {cb.column_name!r}@{cb.first_entry}: corrupt compressed payload ({exc})"
            ) from exc
    if len(raw) != cb.raw_len:
        raise FormatError(
            f"basket {cb.column_name!r}@{cb.first_entry}: decompressed size {len(raw)} "
            f"!= header raw_len {cb.raw_len}"
        )
    if zlib.crc32(raw) & 0xFFFFFFFF != cb.checksum:
        raise CorruptionError(f"basket {cb.column_name!r}@{cb.first_entry}: checksum mismatch")
    return Basket(
        column_name=cb.column_name,
        first_entry=cb.first_entry,
        entry_count=cb.entry_count,
        raw_bytes=raw,
        entry_offsets=cb.entry_offsets,
    )


# --- record / index encoding ---------------------------------------------

def _encode_record(cb: CompressedBasket) -> bytes:
    name = cb.column_name.encode()
    body = b"".join(
        (
            _U16.pack(len(name)),
            name,
            _FIXED_HEADER.pack(
                cb.first_entry, cb.entry_count, cb.raw_len, cb.compressed_len, cb.checksum, cb.codec_level
            ),
            struct.pack(f"<{cb.entry_count}Q", *cb.entry_offsets),
            cb.payload,
        )
    )
    return _U32.pack(len(body)) + body


def _decode_record(buf: bytes, pos: int) -> tuple[CompressedBasket, int]:
    if pos + 4 > len(buf):
        raise FormatError(f"truncated record length at offset {pos}")
    (body_len,) = _U32.unpack_from(buf, pos)
    end = pos + 4 + body_len
    if end > len(buf):
        raise FormatError(f"truncated record at offset {pos}")
    p = pos + 4
    (name_len,) = _U16.unpack_from(buf, p)
    p += 2
    name = buf[p : p + name_len].decode()
    p += name_len
    first_entry, entry_count, raw_len, compressed_len, checksum, level = _FIXED_HEADER.unpack_from(buf, p)
    p += _FIXED_HEADER.size
    offsets = struct.unpack_from(f"<{entry_count}Q", buf, p)
    p += 8 * entry_count
    payload = buf[p : p + compressed_len]
    if p + compressed_len != end:
        raise FormatError(f"record at offset {pos}: length mismatch")
    cb = CompressedBasket(
        column_name=name,
        first_entry=first_entry,
        entry_count=entry_count,
        raw_len=raw_len,
        compressed_len=compressed_len,
        checksum=checksum,
        codec_level=level,
        entry_offsets=tuple(offsets),
        payload=payload,
    )
    return cb, end


@dataclass(frozen=True)
class IndexEntry:
    offset: int
    first_entry: int
    entry_count: int


@dataclass(frozen=True)
class ContainerTrailer:
    """File-level metadata: total event count and the per-column basket index."""

    total_events: int
    index: dict[str, tuple[IndexEntry, ...]]


def _encode_index(trailer: ContainerTrailer) -> bytes:
    parts = [_U32.pack(len(trailer.index))]
    for name, entries in trailer.index.items():
        enc = name.encode()
        parts.append(_U16.pack(len(enc)))
        parts.append(enc)
        parts.append(_U32.pack(len(entries)))
        for e in entries:
            parts.append(_INDEX_ENTRY.pack(e.offset, e.first_entry, e.entry_count))
    parts.append(_U64.pack(trailer.total_events))
    return b"".join(parts)


def _decode_index(buf: bytes, pos: int, end: int) -> ContainerTrailer:
    (n_columns,) = _U32.unpack_from(buf, pos)
    pos += 4
    index: dict[str, tuple[IndexEntry, ...]] = {}
    for _ in range(n_columns):
        (name_len,) = _U16.unpack_from(buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode()
        pos += name_len
        (n_baskets,) = _U32.unpack_from(buf, pos)
        pos += 4
        entries = []
        for _ in range(n_baskets):
            off, first, count = _INDEX_ENTRY.unpack_from(buf, pos)
            pos += _INDEX_ENTRY.size
            entries.append(IndexEntry(off, first, count))
        index[name] = tuple(entries)
    (total_events,) = _U64.unpack_from(buf, pos)
    pos += 8
    if pos != end:
        raise FormatError("index size mismatch")
    return ContainerTrailer(total_events=total_events, index=index)


class ContainerAppender:
    """Streaming, append-only container writer.

    Appends are serialized by an internal lock; ``exclusive()`` additionally
    hands out an ownership token so tests can assert that merges never
    interleave. ``finalize`` writes the index and footer exactly once.
    """

    def __init__(self, sink: BinaryIO | str, *, close_sink: bool | None = None):
        if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
            self._sink: BinaryIO = open(sink, "wb")
            self._close_sink = True if close_sink is None else close_sink
        else:
            self._sink = sink
            self._close_sink = bool(close_sink)
        self._lock = threading.RLock()
        self._offset = 0
        self._index: dict[str, list[IndexEntry]] = {}
        self._finalized = False
        self.total_events = 0
        self._exclusive_holders = 0
        self.max_exclusive_holders = 0
        self._write(MAGIC)

    def _write(self, data: bytes) -> None:
        self._sink.write(data)
        self._offset += len(data)

    @contextmanager
    def exclusive(self):
        with self._lock:
            self._exclusive_holders += 1
            if self._exclusive_holders > self.max_exclusive_holders:
                self.max_exclusive_holders = self._exclusive_holders
            try:
                yield self
            finally:
                self._exclusive_holders -= 1

    def append_baskets(self, baskets: Iterable[CompressedBasket], *, rebase: int | None = None) -> None:
        with self._lock:
            if self._finalized:
                raise LifecycleError("append after finalize")
            for cb in baskets:
                if rebase:
                    cb = cb.rebased(rebase)
                entry = IndexEntry(self._offset, cb.first_entry, cb.entry_count)
                self._write(_encode_record(cb))
                self._index.setdefault(cb.column_name, []).append(entry)

    def bump_events(self, n: int) -> None:
        with self._lock:
            if self._finalized:
                raise LifecycleError("bump_events after finalize")
            self.total_events += n

    def finalize(self) -> ContainerTrailer:
        with self._lock:
            if self._finalized:
                raise LifecycleError("container already finalized")
            self._finalized = True
            trailer = ContainerTrailer(
                total_events=self.total_events,
                index={name: tuple(entries) for name, entries in self._index.items()},
            )
            index_offset = self._offset
            self._write(_encode_index(trailer))
            self._write(_FOOTER.pack(index_offset, MAGIC))
            self._sink.flush()
            if self._close_sink:
                self._sink.close()
            return trailer


def write_container(sink: BinaryIO | str, baskets: Iterable[CompressedBasket], total_events: int) -> ContainerTrailer:
    """One-shot container write for an in-memory basket stream."""
    appender = ContainerAppender(sink)
    appender.append_baskets(baskets)
    appender.bump_events(total_events)
    return appender.finalize()


def read_container(source: BinaryIO | str) -> tuple[list[CompressedBasket], ContainerTrailer]:
    """Read a whole container; validates magic, footer, and record/index agreement."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            buf = fh.read()
    else:
        buf = source.read()
    min_size = len(MAGIC) + _FOOTER.size
    if len(buf) < min_size:
        raise FormatError(f"container too small ({len(buf)} bytes)")
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {buf[:len(MAGIC)]!r}")
    index_offset, tail_magic = _FOOTER.unpack_from(buf, len(buf) - _FOOTER.size)
    if tail_magic != MAGIC:
        raise FormatError("bad footer magic (truncated file?)")
    if not len(MAGIC) <= index_offset <= len(buf) - _FOOTER.size:
        raise FormatError(f"index offset {index_offset} out of range")
    trailer = _decode_index(buf, index_offset, len(buf) - _FOOTER.size)
    baskets = []
    by_offset = {}
    pos = len(MAGIC)
    while pos < index_offset:
        record_offset = pos
        cb, pos = _decode_record(buf, pos)
        baskets.append(cb)
        by_offset[record_offset] = cb
    indexed = 0
    for name, entries in trailer.index.items():
        for e in entries:
            cb = by_offset.get(e.offset)
            if cb is None or cb.column_name != name or cb.first_entry != e.first_entry or cb.entry_count != e.entry_count:
                raise FormatError(f"index/offset mismatch for column {name!r} at offset {e.offset}")
            indexed += 1
    if indexed != len(baskets):
        raise FormatError(f"index covers {indexed} baskets but file holds {len(baskets)}")
    return baskets, trailer
