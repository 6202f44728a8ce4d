"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import hashlib
import struct

import pytest

from image.hashing import (
    HashPlan,
    HashRangeKind,
    SkipReason,
    authenticode_plan,
    feed,
    linear_plan,
)
from image.headers import RawFile, parse_and_verify
from image.sections import read_section_table
from tests.support.builder import FixtureSpec, SectionSpec, build_fixture, build_layout
from tests.support.corpus import load_corpus
from tests.support.mutations import Mutation, config_for, mutated_fixture, random_spec
from tests.support.oracles import classify_hash_bytes
from utils.generic import CertTableMalformed, HashOverlapRefused, TeNotHashable

TWO_SECTIONS = FixtureSpec(
    sections=(SectionSpec(0x800, 0x200, fill=1, name=".text"), SectionSpec(0x200, 0x200, fill=2)),
)


class RecordingSink:
    def __init__(self):
        self.chunks = []

    def update(self, data):
        self.chunks.append(bytes(data))


def plan_for(raw: RawFile, cfg):
    ctx = parse_and_verify(raw, cfg)
    return ctx, authenticode_plan(raw, ctx, read_section_table(raw, ctx), cfg)


def patched(spec, patch) -> RawFile:
    data, layout = build_layout(spec)
    patch(data, layout)
    return RawFile(bytes(data))


def test_plan_partitions_the_file(rng):
    for _ in range(200):
        spec = random_spec(rng, formats=("PE32", "PE32PLUS"))
        raw = build_fixture(spec)
        ctx, plan = plan_for(raw, config_for(spec))
        hashed, skipped = classify_hash_bytes(ctx.fs, plan)
        assert hashed.max() <= 1
        assert ((hashed + skipped) == 1).all()
        reasons = {s.reason: len(s) for s in plan.skipped}
        assert reasons[SkipReason.CHECKSUM_FIELD] == 4
        assert reasons[SkipReason.SECDIR_ENTRY] == 8
        assert reasons.get(SkipReason.CERT_TABLE, 0) == spec.cert_table_size
        assert plan.total_bytes == ctx.fs - 12 - spec.cert_table_size


def test_minimal_plan_listing():
    spec = FixtureSpec()
    _, plan = plan_for(build_fixture(spec), config_for(spec))
    assert plan.lines() == [
        "0x00000000 0x00000098 HEADER_CHUNK",
        "0x0000009C 0x000000E8 HEADER_CHUNK",
        "0x000000F0 0x00000200 HEADER_CHUNK",
        "0x00000200 0x00000400 SECTION_DATA",
        "SKIP 0x00000098 0x0000009C CHECKSUM_FIELD",
        "SKIP 0x000000E8 0x000000F0 SECDIR_ENTRY",
    ]


def test_sections_are_hashed_by_raw_offset():
    def swap_raw_offsets(data, layout):
        struct.pack_into("<I", data, layout.section_headers[0] + 20, layout.raw_offsets[1])
        struct.pack_into("<I", data, layout.section_headers[1] + 20, layout.raw_offsets[0])

    raw = patched(TWO_SECTIONS, swap_raw_offsets)
    _, plan = plan_for(raw, config_for(TWO_SECTIONS))
    section_ranges = [(r.start, r.end) for r in plan.ranges if r.kind is HashRangeKind.SECTION_DATA]
    assert section_ranges == [(0x200, 0x400), (0x400, 0x600)]


def test_overlapping_raw_data(rng):
    raw, spec, cfg = mutated_fixture(Mutation.OverlapRawSections, rng)
    with pytest.raises(HashOverlapRefused):
        plan_for(raw, cfg)
    ctx, plan = plan_for(raw, config_for(spec, refuse_hash_overlap=False))
    hashed, _ = classify_hash_bytes(ctx.fs, plan)
    assert hashed.max() == 2


def test_trailing_data_is_hashed_around_certificate():
    spec = FixtureSpec(cert_table_size=0x40)
    raw = patched(spec, lambda data, layout: struct.pack_into("<I", data, layout.data_directories + 36, 0x38))
    ctx, plan = plan_for(raw, config_for(spec))
    assert [(r.start, r.end, r.kind) for r in plan.ranges[-1:]] == [(ctx.fs - 8, ctx.fs, HashRangeKind.TRAILING)]
    assert [s for s in plan.skipped if s.reason is SkipReason.CERT_TABLE][0].end == ctx.fs - 8


def test_certificate_inside_hashed_data():
    spec = FixtureSpec(cert_table_size=0x40)
    raw = patched(spec, lambda data, layout: struct.pack_into("<I", data, layout.data_directories + 32, 0x200))
    with pytest.raises(CertTableMalformed):
        plan_for(raw, config_for(spec))


def test_certificate_beyond_file(rng):
    raw, _, cfg = mutated_fixture(Mutation.CertBeyondFile, rng)
    with pytest.raises(CertTableMalformed):
        plan_for(raw, cfg)
    ctx = parse_and_verify(raw, cfg)
    with pytest.raises(CertTableMalformed):
        linear_plan(raw, ctx)


def test_pad_trailing():
    data, _ = build_layout(FixtureSpec())
    raw = RawFile(bytes(data) + b"abc")
    cfg = config_for(FixtureSpec(), pad_trailing=True)
    _, plan = plan_for(raw, cfg)
    assert plan.ranges[-1].kind is HashRangeKind.TRAILING and len(plan.ranges[-1]) == 3
    assert plan.trailing_padding == 5
    assert plan.lines()[len(plan.ranges)] == "PAD 5"
    sink = RecordingSink()
    result = feed(plan, raw, sink)
    assert sink.chunks[-1] == bytes(5)
    assert result.bytes_fed == plan.total_bytes
    _, unpadded = plan_for(raw, config_for(FixtureSpec()))
    assert unpadded.trailing_padding == 0


def test_te_is_not_hashable():
    spec = FixtureSpec(format="TE")
    raw = build_fixture(spec)
    ctx = parse_and_verify(raw, config_for(spec))
    with pytest.raises(TeNotHashable):
        authenticode_plan(raw, ctx, read_section_table(raw, ctx), config_for(spec))
    assert linear_plan(raw, ctx).ranges[0].end == ctx.fs


def test_linear_plan():
    for name in ("PE32PLUS_MINIMAL", "PE32_HIGHLOW"):
        entry = next(e for e in load_corpus() if e.name == name)
        raw = build_fixture(entry.spec)
        ctx = parse_and_verify(raw, entry.config())
        plan = linear_plan(raw, ctx)
        assert plan.ranges[0].start == 0
        assert plan.ranges[0].kind is HashRangeKind.FILE_PREFIX
        if ctx.has_cert_table:
            assert plan.ranges[0].end == ctx.cert_table_offset
            assert plan.skipped[0].reason is SkipReason.CERT_TABLE
        else:
            assert plan.ranges[0].end == ctx.fs
            assert plan.skipped == ()


def test_linear_plan_requires_trailing_certificate():
    spec = FixtureSpec(cert_table_size=0x40)
    raw = patched(spec, lambda data, layout: struct.pack_into("<I", data, layout.data_directories + 36, 0x38))
    with pytest.raises(CertTableMalformed):
        linear_plan(raw, parse_and_verify(raw, config_for(spec)))


@pytest.mark.parametrize("cert_offset", [0x10, 0xE8, 0x1FC, 0x300, 0x3F8])
def test_linear_plan_refuses_certificate_inside_image_data(cert_offset):
    spec = FixtureSpec(cert_table_size=0x40)

    def move_certificate(data, layout):
        struct.pack_into("<II", data, layout.data_directories + 32, cert_offset, len(data) - cert_offset)

    raw = patched(spec, move_certificate)
    ctx = parse_and_verify(raw, config_for(spec))
    assert ctx.cert_table_offset == cert_offset and ctx.cert_table_offset + ctx.cert_table_size == ctx.fs
    with pytest.raises(CertTableMalformed):
        linear_plan(raw, ctx)
    with pytest.raises(CertTableMalformed):
        linear_plan(raw, ctx, read_section_table(raw, ctx))


def test_linear_plan_covers_headers_and_sections():
    spec = FixtureSpec(cert_table_size=0x40)
    raw = build_fixture(spec)
    ctx = parse_and_verify(raw, config_for(spec))
    plan = linear_plan(raw, ctx)
    assert [(r.start, r.end) for r in plan.ranges] == [(0, 0x400)]
    assert plan.ranges[0].end >= ctx.secdir_entry_offset + 8


def test_feed_emits_ranges_in_order(rng):
    for _ in range(50):
        spec = random_spec(rng, formats=("PE32", "PE32PLUS"))
        raw = build_fixture(spec)
        _, plan = plan_for(raw, config_for(spec))
        sink = RecordingSink()
        result = feed(plan, raw, sink)
        assert sink.chunks == [raw.data[r.start:r.end] for r in plan.ranges]
        assert result.updates == len(plan.ranges)
        assert result.bytes_fed == plan.total_bytes


def test_feed_empty_plan():
    sink = RecordingSink()
    result = feed(HashPlan(()), RawFile(b"MZ"), sink)
    assert (result.bytes_fed, result.updates) == (0, 0)
    assert sink.chunks == []


def test_identical_sinks_get_identical_digests():
    entry = next(e for e in load_corpus() if e.name == "PE32PLUS_SIGNED")
    raw = build_fixture(entry.spec)
    _, plan = plan_for(raw, entry.config())
    first, second = hashlib.sha256(), hashlib.sha256()
    feed(plan, raw, first)
    feed(plan, raw, second)
    assert first.digest() == second.digest()
    expected = hashlib.sha256(b"".join(raw.data[r.start:r.end] for r in plan.ranges))
    assert first.digest() == expected.digest()
