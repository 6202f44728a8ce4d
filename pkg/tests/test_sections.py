"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import logging
import struct
from dataclasses import replace

from image.headers import ImageContext, RawFile, parse_and_verify
from image.sections import read_section_table, verify_sections
from tests.support.builder import FixtureSpec, SectionSpec, build_fixture, build_layout
from tests.support.corpus import load_corpus
from tests.support.mutations import MUTATIONS, Mutation, config_for, mutated_fixture, random_spec
from utils.generic import ViolationCode

TWO_SECTIONS = FixtureSpec(
    sections=(SectionSpec(0x800, 0x200, fill=1, name=".text"), SectionSpec(0x200, 0x200, fill=2)),
)


def corpus_entry(name):
    return next(entry for entry in load_corpus() if entry.name == name)


def verified(raw: RawFile, cfg):
    ctx = parse_and_verify(raw, cfg)
    assert isinstance(ctx, ImageContext), ctx
    table = read_section_table(raw, ctx)
    return ctx, table, verify_sections(ctx, table, cfg)


def with_section_va(spec: FixtureSpec, index: int, va: int) -> RawFile:
    data, layout = build_layout(spec)
    struct.pack_into("<I", data, layout.section_headers[index] + 12, va)
    return RawFile(bytes(data))


def test_read_section_table():
    entry = corpus_entry("PE32PLUS_SIGNED")
    raw = build_fixture(entry.spec)
    ctx = parse_and_verify(raw, entry.config())
    table = read_section_table(raw, ctx)
    assert [section.display_name for section in table] == [".text", ".rdata", ".init", ".reloc"]
    assert [section.discardable for section in table] == [False, False, True, True]
    assert table[0].va == 0x1000 and table[0].vs == 0x900 and table[0].rs == 0xA00
    assert table[0].o == ctx.hs
    assert len(table) == ctx.num_sections
    assert table[0].as_dict()["name"] == ".text"


def test_te_raw_start_subtracts_stripped_delta():
    entry = corpus_entry("TE_DIR64")
    raw = build_fixture(entry.spec)
    ctx, table, report = verified(raw, entry.config())
    assert report.accepted
    assert table[0].raw_start(ctx) == table[0].o - ctx.te_stripped_offset
    assert table[0].raw_start(ctx) >= ctx.hs


def test_section_without_raw_data_is_accepted():
    entry = corpus_entry("TE_DIR64")
    ctx, table, report = verified(build_fixture(entry.spec), entry.config())
    bss = table[1]
    assert bss.rs == 0 and bss.o == 0
    assert report.accepted


def test_random_images_are_accepted(rng):
    for _ in range(200):
        spec = random_spec(rng)
        raw = build_fixture(spec)
        for strict in (True, False):
            _, _, report = verified(raw, config_for(spec, strict_section_layout=strict))
            assert report.accepted, (spec, report.codes())


def test_first_section_at_zero_is_accepted():
    spec = FixtureSpec(zero_first_va=True)
    for strict in (True, False):
        ctx, table, report = verified(build_fixture(spec), config_for(spec, strict_section_layout=strict))
        assert table[0].va == 0
        assert report.accepted


def test_strict_rejects_unaligned_gap():
    raw = with_section_va(TWO_SECTIONS, 1, 0x2010)
    _, _, report = verified(raw, config_for(TWO_SECTIONS))
    assert ViolationCode.SectionNotContiguous in report.codes()


def test_strict_rejects_first_section_in_headers():
    raw = with_section_va(FixtureSpec(), 0, 0x800)
    _, _, report = verified(raw, config_for(FixtureSpec()))
    assert report.codes() == [ViolationCode.SectionOverlapsImage]


def test_relaxed_accepts_gap(rng, caplog):
    raw, spec, cfg = mutated_fixture(Mutation.BreakContiguity, rng)
    _, _, strict = verified(raw, cfg)
    assert strict.codes() == [ViolationCode.SectionNotContiguous]
    with caplog.at_level(logging.WARNING, logger="image.sections"):
        _, _, relaxed = verified(raw, config_for(spec, strict_section_layout=False))
    assert relaxed.accepted
    assert "relaxed mode only" in caplog.text


def test_relaxed_rejects_overlapping_memory():
    raw = with_section_va(TWO_SECTIONS, 1, 0x1010)
    _, _, report = verified(raw, config_for(TWO_SECTIONS, strict_section_layout=False))
    assert report.codes() == [ViolationCode.SectionOverlapsImage]


def test_relaxed_rejects_unsorted(rng):
    raw, spec, _ = mutated_fixture(Mutation.UnsortSections, rng)
    _, _, report = verified(raw, config_for(spec, strict_section_layout=False))
    assert ViolationCode.SectionUnsorted in report.codes()


def test_size_of_image_too_small_for_sections(rng):
    for _ in range(20):
        raw, _, cfg = mutated_fixture(Mutation.ShrinkSizeOfImage, rng)
        _, _, report = verified(raw, cfg)
        assert report.codes() == [ViolationCode.SizeOfImageTooSmall]


def test_raw_range_violations(rng):
    for mutation in (Mutation.RawBeyondFile, Mutation.RawInHeaders):
        for _ in range(20):
            raw, _, cfg = mutated_fixture(mutation, rng)
            for strict in (True, False):
                _, _, report = verified(raw, replace(cfg, strict_section_layout=strict))
                assert report.codes() == [MUTATIONS[mutation].code]


def test_every_violation_is_collected():
    data, layout = build_layout(TWO_SECTIONS)
    struct.pack_into("<I", data, layout.section_headers[1] + 12, 0x1010)
    struct.pack_into("<I", data, layout.section_headers[0] + 16, 0x10000)
    raw = RawFile(bytes(data))
    _, _, report = verified(raw, config_for(TWO_SECTIONS, strict_section_layout=False))
    assert report.codes() == [ViolationCode.SectionOverlapsImage, ViolationCode.SectionRawOutOfFile]


def test_strict_acceptance_implies_relaxed_acceptance(rng):
    mutations = [m for m, info in MUTATIONS.items() if info.predicate in ("correctSA", "validMemS")]
    for _ in range(300):
        if rng.random() < 0.5:
            spec = random_spec(rng)
            raw = build_fixture(spec)
        else:
            raw, spec, _ = mutated_fixture(mutations[int(rng.integers(len(mutations)))], rng)
        ctx = parse_and_verify(raw, config_for(spec))
        if not isinstance(ctx, ImageContext):
            continue
        table = read_section_table(raw, ctx)
        strict = verify_sections(ctx, table, config_for(spec))
        relaxed = verify_sections(ctx, table, config_for(spec, strict_section_layout=False))
        if strict.accepted:
            assert relaxed.accepted
