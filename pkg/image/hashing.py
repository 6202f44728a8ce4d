"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import enum
import logging
from dataclasses import dataclass
from typing import List, Optional, Protocol, Tuple

from image.format_model import TargetConfig, checked_add
from image.headers import ImageContext, ImageFormat, RawFile
from image.sections import SectionTable, read_section_table
from utils.generic import CertTableMalformed, HashOverlapRefused, TeNotHashable

logger = logging.getLogger(__name__)

AUTHENTICODE_PAD_QUANTUM = 8


class HashSink(Protocol):
    """Anything with hashlib's update(), e.g. hashlib.sha256()"""

    def update(self, data) -> None:
        ...


@enum.unique
class HashRangeKind(enum.Enum):
    HEADER_CHUNK = "HEADER_CHUNK"
    SECTION_DATA = "SECTION_DATA"
    TRAILING = "TRAILING"
    FILE_PREFIX = "FILE_PREFIX"


@enum.unique
class SkipReason(enum.Enum):
    CHECKSUM_FIELD = "CHECKSUM_FIELD"
    SECDIR_ENTRY = "SECDIR_ENTRY"
    CERT_TABLE = "CERT_TABLE"
    UNHASHED_GAP = "UNHASHED_GAP"


@dataclass(frozen=True)
class HashRange:
    start: int
    end: int
    kind: HashRangeKind

    def __len__(self):
        return self.end - self.start


@dataclass(frozen=True)
class SkippedRange:
    start: int
    end: int
    reason: SkipReason

    def __len__(self):
        return self.end - self.start


@dataclass(frozen=True)
class HashPlan:
    """
    Raw file ranges in emission order plus every byte range deliberately left out
    trailing_padding zero bytes follow the last range when set
    """

    ranges: Tuple[HashRange, ...]
    skipped: Tuple[SkippedRange, ...] = ()
    trailing_padding: int = 0

    @property
    def total_bytes(self) -> int:
        return sum(len(r) for r in self.ranges) + self.trailing_padding

    def lines(self) -> List[str]:
        """Machine-parseable listing, one range per line"""
        listing = [f"0x{r.start:08X} 0x{r.end:08X} {r.kind.value}" for r in self.ranges]
        if self.trailing_padding:
            listing.append(f"PAD {self.trailing_padding}")
        listing.extend(
            f"SKIP 0x{s.start:08X} 0x{s.end:08X} {s.reason.value}" for s in self.skipped
        )
        return listing


@dataclass(frozen=True)
class FeedResult:
    bytes_fed: int
    updates: int


def _add(ranges: list, start: int, end: int, kind: HashRangeKind):
    if end > start:
        ranges.append(HashRange(start, end, kind))


def _cert_range(ctx: ImageContext) -> Optional[Tuple[int, int]]:
    if not ctx.has_cert_table:
        return None
    end = checked_add(ctx.cert_table_offset, ctx.cert_table_size)
    if end > ctx.fs:
        raise CertTableMalformed(
            f"certificate table ends at 0x{end:X} beyond file size 0x{ctx.fs:X}",
            ctx.cert_table_offset,
        )
    return ctx.cert_table_offset, end


def authenticode_plan(
    raw: RawFile, ctx: ImageContext, table: SectionTable, cfg: Optional[TargetConfig] = None
) -> HashPlan:
    """
    Authenticode byte order: headers without the checksum and security entry, sections sorted
    by raw offset, then the trailing data without the certificate table
    :param raw: raw file
    :param ctx: verified ImageContext
    :param table: verified SectionTable
    :param cfg: target configuration, defaults to settings.ini
    :return: HashPlan
    """
    cfg = cfg if cfg is not None else TargetConfig.from_settings()
    if ctx.format is ImageFormat.TE:
        raise TeNotHashable("TE images have no Authenticode header layout")

    ranges = []
    skipped = []
    checksum = ctx.checksum_field_offset
    _add(ranges, 0, checksum, HashRangeKind.HEADER_CHUNK)
    skipped.append(SkippedRange(checksum, checksum + 4, SkipReason.CHECKSUM_FIELD))
    if ctx.secdir_entry_offset is not None:
        secdir = ctx.secdir_entry_offset
        _add(ranges, checksum + 4, secdir, HashRangeKind.HEADER_CHUNK)
        skipped.append(SkippedRange(secdir, secdir + 8, SkipReason.SECDIR_ENTRY))
        _add(ranges, secdir + 8, ctx.hs, HashRangeKind.HEADER_CHUNK)
    else:
        _add(ranges, checksum + 4, ctx.hs, HashRangeKind.HEADER_CHUNK)

    hashed_end = ctx.hs
    for section in sorted((s for s in table if s.rs), key=lambda s: s.raw_start(ctx)):
        start = section.raw_start(ctx)
        end = checked_add(start, section.rs)
        if start < hashed_end:
            if cfg.refuse_hash_overlap:
                raise HashOverlapRefused(
                    f"raw data of {section.display_name!r} overlaps earlier section data", start
                )
            logger.warning("Hashing overlapping raw data of %r", section.display_name)
        elif start > hashed_end:
            skipped.append(SkippedRange(hashed_end, start, SkipReason.UNHASHED_GAP))
        ranges.append(HashRange(start, end, HashRangeKind.SECTION_DATA))
        hashed_end = max(hashed_end, end)

    trailing = []
    cert = _cert_range(ctx)
    if cert is not None:
        cert_start, cert_end = cert
        if cert_start < hashed_end:
            raise CertTableMalformed(
                f"certificate table at 0x{cert_start:X} overlaps hashed data", cert_start
            )
        _add(trailing, hashed_end, cert_start, HashRangeKind.TRAILING)
        skipped.append(SkippedRange(cert_start, cert_end, SkipReason.CERT_TABLE))
        _add(trailing, cert_end, ctx.fs, HashRangeKind.TRAILING)
    else:
        _add(trailing, hashed_end, ctx.fs, HashRangeKind.TRAILING)
    ranges.extend(trailing)

    padding = 0
    trailing_size = sum(len(r) for r in trailing)
    if cfg.pad_trailing and trailing_size % AUTHENTICODE_PAD_QUANTUM:
        padding = AUTHENTICODE_PAD_QUANTUM - trailing_size % AUTHENTICODE_PAD_QUANTUM

    plan = HashPlan(tuple(ranges), tuple(sorted(skipped, key=lambda s: s.start)), padding)
    logger.debug("Authenticode plan: %d ranges, %d bytes", len(plan.ranges), plan.total_bytes)
    return plan


def linear_plan(raw: RawFile, ctx: ImageContext, table: Optional[SectionTable] = None) -> HashPlan:
    """
    All bytes from the start of the file up to the certificate table
    The certificate table must be trailing and start after the headers and every section's raw data
    :param table: SectionTable of ctx, read from raw when omitted
    """
    cert = _cert_range(ctx)
    if cert is None:
        return HashPlan((HashRange(0, ctx.fs, HashRangeKind.FILE_PREFIX),))
    cert_start, cert_end = cert
    if cert_end != ctx.fs:
        raise CertTableMalformed(
            f"certificate table [0x{cert_start:X}, 0x{cert_end:X}) is not trailing", cert_start
        )
    table = table if table is not None else read_section_table(raw, ctx)
    data_end = max([ctx.hs] + [checked_add(s.raw_start(ctx), s.rs) for s in table if s.rs])
    if cert_start < data_end:
        raise CertTableMalformed(
            f"certificate table at 0x{cert_start:X} overlaps image data ending at 0x{data_end:X}",
            cert_start,
        )
    ranges = []
    _add(ranges, 0, cert_start, HashRangeKind.FILE_PREFIX)
    return HashPlan(tuple(ranges), (SkippedRange(cert_start, cert_end, SkipReason.CERT_TABLE),))


def feed(plan: HashPlan, raw: RawFile, sink: HashSink) -> FeedResult:
    """
    Feeds the planned byte ranges to sink in order. The sink is never finalized
    :return: FeedResult
    """
    view = raw.view
    fed = updates = 0
    for hash_range in plan.ranges:
        sink.update(view[hash_range.start:hash_range.end])
        fed += len(hash_range)
        updates += 1
    if plan.trailing_padding:
        sink.update(bytes(plan.trailing_padding))
        fed += plan.trailing_padding
        updates += 1
    return FeedResult(fed, updates)
