"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import logging
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

from image.format_model import TargetConfig, align_up, checked_add
from image.headers import SECTION_HEADER_SIZE, ImageContext, RawFile, effective_header_size
from utils.generic import ArithmeticOverflow, VerifyReport, ViolationCode

logger = logging.getLogger(__name__)

IMAGE_SCN_MEM_DISCARDABLE = 0x02000000

_SECTION_HEADER = struct.Struct("<8sIIIIIIHHI")


@dataclass(frozen=True)
class SectionHeader:
    name: bytes
    va: int
    vs: int
    o: int
    rs: int
    characteristics: int

    @property
    def discardable(self) -> bool:
        return bool(self.characteristics & IMAGE_SCN_MEM_DISCARDABLE)

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("ascii", errors="replace")

    def raw_start(self, ctx: ImageContext) -> int:
        """Offset of the section data in the raw file, TE offsets minus the stripped delta"""
        return self.o - ctx.te_stripped_offset

    def loaded_end(self, sa: int) -> int:
        return align_up(checked_add(self.va, self.vs), sa)

    def as_dict(self) -> dict:
        return {
            "name": self.display_name,
            "va": self.va,
            "vs": self.vs,
            "o": self.o,
            "rs": self.rs,
            "characteristics": self.characteristics,
        }


@dataclass(frozen=True)
class SectionTable:
    entries: Tuple[SectionHeader, ...]

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[SectionHeader]:
        return iter(self.entries)

    def __getitem__(self, index) -> SectionHeader:
        return self.entries[index]


def read_section_table(raw: RawFile, ctx: ImageContext) -> SectionTable:
    """
    Reads ctx.num_sections section headers starting at ctx.so
    Bounds are guaranteed by parse_and_verify
    """
    entries = []
    for index in range(ctx.num_sections):
        offset = ctx.so + index * SECTION_HEADER_SIZE
        (name, vs, va, rs, o, _, _, _, _, characteristics) = _SECTION_HEADER.unpack(
            raw.bytes_at(offset, SECTION_HEADER_SIZE)
        )
        entries.append(SectionHeader(name, va, vs, o, rs, characteristics))
    return SectionTable(tuple(entries))


def verify_sections(
    ctx: ImageContext, table: SectionTable, cfg: Optional[TargetConfig] = None
) -> VerifyReport:
    """
    Checks the Section Table against the image layout rules, collecting every violation
    Strict mode demands contiguous sections aligned to SectionAlignment, relaxed mode only
    ascending and separated section memory
    :param ctx: verified ImageContext
    :param table: SectionTable read for ctx
    :param cfg: target configuration, defaults to settings.ini
    :return: VerifyReport
    """
    cfg = cfg if cfg is not None else TargetConfig.from_settings()
    report = VerifyReport()
    try:
        if cfg.strict_section_layout:
            _verify_contiguous(ctx, table, report)
        else:
            _verify_separated(ctx, table, report)
            if report.accepted:
                strict = VerifyReport()
                _verify_contiguous(ctx, table, strict)
                if not strict.accepted:
                    logger.warning(
                        "Section layout accepted in relaxed mode only: %s",
                        ", ".join(code.value for code in strict.codes()),
                    )
        _verify_raw_ranges(ctx, table, report)
    except ArithmeticOverflow as e:
        report.add(ViolationCode.ArithmeticOverflow, e.message, e.offset)
    return report


def _verify_contiguous(ctx: ImageContext, table: SectionTable, report: VerifyReport):
    headers_end = align_up(effective_header_size(ctx), ctx.sa)
    first = table[0]
    if first.va not in (0, headers_end):
        if first.va < headers_end:
            report.add(
                ViolationCode.SectionOverlapsImage,
                f"first section at 0x{first.va:X} overlaps the headers ending at 0x{headers_end:X}",
                first.va,
            )
        else:
            report.add(
                ViolationCode.SectionNotContiguous,
                f"first section at 0x{first.va:X}, expected 0x{headers_end:X}",
                first.va,
            )
    for previous, current in zip(table, table[1:]):
        expected = previous.loaded_end(ctx.sa)
        if current.va <= previous.va and current.va != expected:
            report.add(
                ViolationCode.SectionUnsorted,
                f"section at 0x{current.va:X} follows section at 0x{previous.va:X}",
                current.va,
            )
        elif current.va != expected:
            report.add(
                ViolationCode.SectionNotContiguous,
                f"section at 0x{current.va:X}, expected 0x{expected:X}",
                current.va,
            )
    end = table[-1].loaded_end(ctx.sa)
    if end > ctx.is_:
        report.add(
            ViolationCode.SizeOfImageTooSmall,
            f"sections end at 0x{end:X} beyond SizeOfImage 0x{ctx.is_:X}",
            end,
        )


def _verify_separated(ctx: ImageContext, table: SectionTable, report: VerifyReport):
    headers_end = effective_header_size(ctx)
    first = table[0]
    if 0 < first.va < headers_end:
        report.add(
            ViolationCode.SectionOverlapsImage,
            f"first section at 0x{first.va:X} overlaps the headers ending at 0x{headers_end:X}",
            first.va,
        )
    for previous, current in zip(table, table[1:]):
        if current.va <= previous.va:
            report.add(
                ViolationCode.SectionUnsorted,
                f"section at 0x{current.va:X} follows section at 0x{previous.va:X}",
                current.va,
            )
        elif current.va < previous.loaded_end(ctx.sa):
            report.add(
                ViolationCode.SectionOverlapsImage,
                f"section at 0x{current.va:X} overlaps its predecessor",
                current.va,
            )
    end = max(section.loaded_end(ctx.sa) for section in table)
    if end > ctx.is_:
        report.add(
            ViolationCode.SizeOfImageTooSmall,
            f"sections end at 0x{end:X} beyond SizeOfImage 0x{ctx.is_:X}",
            end,
        )


def _verify_raw_ranges(ctx: ImageContext, table: SectionTable, report: VerifyReport):
    for section in table:
        if not section.rs:
            continue
        start = section.raw_start(ctx)
        if start < ctx.hs:
            report.add(
                ViolationCode.SectionRawInHeaders,
                f"raw data of {section.display_name!r} at 0x{start:X} lies inside the headers",
                start,
            )
        elif checked_add(start, section.rs) > ctx.fs:
            report.add(
                ViolationCode.SectionRawOutOfFile,
                f"raw data of {section.display_name!r} ends beyond file size 0x{ctx.fs:X}",
                start,
            )
