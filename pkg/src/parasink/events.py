"""Synthetic event workloads: product schemas, deterministic payload generation.

An event carries one byte payload per named product. Payload sizes follow a
log-normal law per product; a configurable fraction of each payload is a
repeating low-entropy pattern so compression cost/benefit can be dialed.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import ValidationError

_MASK64 = (1 << 64) - 1
_PATTERN_LEN = 64
_SIZE_CAP_FACTOR = 16


class Tier(enum.Enum):
    """Output-tier label of a product (decreasing size order)."""

    RECO = "RECO"
    AOD = "AOD"
    MINIAOD = "MINIAOD"


@dataclass(frozen=True)
class ProductSchema:
    """Static description of one data product.

    ``compressibility`` is the fraction of each payload drawn from a
    low-entropy repeating pattern; the remainder is pseudo-random.
    """

    name: str
    tier: Tier
    mean_bytes: int
    dispersion: float = 0.0
    compressibility: float = 0.5

    def __post_init__(self):
        if not self.name:
            raise ValidationError("schema name: must be non-empty")
        if self.mean_bytes < 1:
            raise ValidationError(f"schema {self.name!r} mean_bytes: must be >= 1, got {self.mean_bytes}")
        if self.dispersion < 0:
            raise ValidationError(f"schema {self.name!r} dispersion: must be >= 0, got {self.dispersion}")
        if not 0.0 <= self.compressibility <= 1.0:
            raise ValidationError(
                f"schema {self.name!r} compressibility: must be in [0, 1], got {self.compressibility}"
            )


@dataclass(frozen=True)
class Event:
    """One unit of work: an id plus a payload per product."""

    event_id: int
    products: Mapping[str, bytes]

    def raw_size(self) -> int:
        return sum(len(v) for v in self.products.values())


@dataclass(frozen=True)
class WorkloadProfile:
    """Full description of a synthetic workload.

    The same (profile, seed) always yields a byte-identical event stream.
    ``cpu_work_per_event`` is the simulated processing cost in abstract work
    units burned by producer modules.
    """

    schemas: tuple[ProductSchema, ...]
    events_total: int
    seed: int = 0
    cpu_work_per_event: int = 0

    def __post_init__(self):
        if not self.schemas:
            raise ValidationError("schemas: must be non-empty")
        names = [s.name for s in self.schemas]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"schemas: duplicate product names {dupes}")
        if self.events_total < 0:
            raise ValidationError(f"events_total: must be >= 0, got {self.events_total}")
        if self.seed < 0:
            raise ValidationError(f"seed: must be >= 0, got {self.seed}")
        if self.cpu_work_per_event < 0:
            raise ValidationError(f"cpu_work_per_event: must be >= 0, got {self.cpu_work_per_event}")

    @property
    def product_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.schemas)

    def with_overrides(self, **kwargs) -> "WorkloadProfile":
        current = dict(
            schemas=self.schemas,
            events_total=self.events_total,
            seed=self.seed,
            cpu_work_per_event=self.cpu_work_per_event,
        )
        current.update(kwargs)
        return WorkloadProfile(**current)


def _pattern_for(seed: int, name: str) -> bytes:
    """Deterministic 64-byte repeating pattern, unique per (seed, product)."""
    h = hashlib.sha256(f"pattern:{seed}:{name}".encode()).digest()
    return (h * ((_PATTERN_LEN // len(h)) + 1))[:_PATTERN_LEN]


class EventGenerator:
    """Deterministic event source for a profile.

    Immutable after construction and safe to share across threads; each call
    to :meth:`event` derives payloads from a counter-based RNG keyed on
    (seed, event_id), so events can be produced in any order or concurrently.
    """

    def __init__(self, profile: WorkloadProfile):
        self.profile = profile
        self._names = profile.product_names
        means = np.array([s.mean_bytes for s in profile.schemas], dtype=np.float64)
        sigmas = np.array([s.dispersion for s in profile.schemas], dtype=np.float64)
        # mu chosen so the (untruncated) log-normal mean equals mean_bytes
        self._mu = np.log(means) - 0.5 * sigmas**2
        self._sigma = sigmas
        self._caps = (means * _SIZE_CAP_FACTOR).astype(np.int64)
        self._compress_frac = np.array([s.compressibility for s in profile.schemas], dtype=np.float64)
        self._tiles = [
            _pattern_for(profile.seed, s.name) * (int(cap) // _PATTERN_LEN + 1)
            for s, cap in zip(profile.schemas, self._caps)
        ]

    def event(self, event_id: int) -> Event:
        if not 0 <= event_id < self.profile.events_total:
            raise IndexError(f"event_id {event_id} outside [0, {self.profile.events_total})")
        rng = np.random.Generator(
            np.random.Philox(key=np.array([self.profile.seed & _MASK64, event_id], dtype=np.uint64))
        )
        sizes = rng.lognormal(mean=self._mu, sigma=self._sigma)
        sizes = np.clip(np.rint(sizes), 1, self._caps).astype(np.int64)
        n_low = np.rint(sizes * self._compress_frac).astype(np.int64)
        n_rand = sizes - n_low
        blob = rng.bytes(int(n_rand.sum()))
        products = {}
        pos = 0
        for i, name in enumerate(self._names):
            lo, ra = int(n_low[i]), int(n_rand[i])
            products[name] = self._tiles[i][:lo] + blob[pos : pos + ra]
            pos += ra
        return Event(event_id=event_id, products=products)

    def __iter__(self) -> Iterator[Event]:
        for eid in range(self.profile.events_total):
            yield self.event(eid)

    def __len__(self) -> int:
        return self.profile.events_total


def generate_events(profile: WorkloadProfile) -> Iterator[Event]:
    """Yield the profile's events in id order (ids are dense from 0)."""
    return iter(EventGenerator(profile))


# --- flat key/value configuration files ---------------------------------

def parse_flat_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValidationError(f"config line {lineno}: empty key")
        if key in out:
            raise ValidationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _want_int(kv: dict[str, str], key: str, default: int | None = None) -> int:
    if key not in kv:
        if default is None:
            raise ValidationError(f"missing required config key {key!r}")
        return default
    try:
        return int(kv[key])
    except ValueError as exc:
        raise ValidationError(f"config key {key!r}: expected integer, got {kv[key]!r}") from exc


def _want_float(kv: dict[str, str], key: str, default: float) -> float:
    if key not in kv:
        return default
    try:
        return float(kv[key])
    except ValueError as exc:
        raise ValidationError(f"config key {key!r}: expected number, got {kv[key]!r}") from exc


def profile_from_config(kv: dict[str, str]) -> WorkloadProfile:
    """Build a profile from flat config keys.

    Recognized keys: ``events_total``, ``seed``, ``cpu_work_per_event`` and
    per-schema ``schema.<i>.name/.tier/.mean_bytes/.dispersion/.compressibility``.
    Keys outside this family (e.g. a module graph) are left untouched.
    """
    indices = sorted(
        {int(k.split(".")[1]) for k in kv if k.startswith("schema.") and k.split(".")[1].isdigit()}
    )
    if not indices:
        raise ValidationError("no schema.<i>.* keys found")
    if indices != list(range(len(indices))):
        raise ValidationError(f"schema indices must be dense from 0, got {indices}")
    schemas = []
    for i in indices:
        prefix = f"schema.{i}."
        name = kv.get(prefix + "name")
        if name is None:
            raise ValidationError(f"missing required config key {prefix}name")
        tier_raw = kv.get(prefix + "tier", Tier.RECO.value)
        try:
            tier = Tier(tier_raw)
        except ValueError as exc:
            raise ValidationError(
                f"config key {prefix}tier: expected one of {[t.value for t in Tier]}, got {tier_raw!r}"
            ) from exc
        schemas.append(
            ProductSchema(
                name=name,
                tier=tier,
                mean_bytes=_want_int(kv, prefix + "mean_bytes"),
                dispersion=_want_float(kv, prefix + "dispersion", 0.0),
                compressibility=_want_float(kv, prefix + "compressibility", 0.5),
            )
        )
    return WorkloadProfile(
        schemas=tuple(schemas),
        events_total=_want_int(kv, "events_total"),
        seed=_want_int(kv, "seed", 0),
        cpu_work_per_event=_want_int(kv, "cpu_work_per_event", 0),
    )


def load_profile(path) -> WorkloadProfile:
    with open(path, "r", encoding="utf-8") as fh:
        return profile_from_config(parse_flat_config(fh.read()))


def save_profile(profile: WorkloadProfile, path) -> None:
    lines = [
        f"events_total = {profile.events_total}",
        f"seed = {profile.seed}",
        f"cpu_work_per_event = {profile.cpu_work_per_event}",
    ]
    for i, s in enumerate(profile.schemas):
        lines += [
            f"schema.{i}.name = {s.name}",
            f"schema.{i}.tier = {s.tier.value}",
            f"schema.{i}.mean_bytes = {s.mean_bytes}",
            f"schema.{i}.dispersion = {s.dispersion}",
            f"schema.{i}.compressibility = {s.compressibility}",
        ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
