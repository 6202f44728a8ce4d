"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import enum
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

from image.format_model import (
    U64_MAX,
    RelocKind,
    TargetConfig,
    checked_add,
    is_aligned,
    reloc_type_info,
)
from image.loader import LoadedImage, image_access
from utils.configloader import CHECK_INVARIANTS
from utils.generic import (
    ArithmeticOverflow,
    BookkeepingInconsistent,
    RelocDirModified,
    RelocsStripped,
    RuntimeValueMismatch,
    StructureRejected,
    UnsupportedRelocType,
    VerifyReport,
    ViolationCode,
)

logger = logging.getLogger(__name__)

BLOCK_HEADER_SIZE = 8
ENTRY_SIZE = 2
BLOCK_ALIGNMENT = 4

TARGET_SIZE = {RelocKind.HIGHLOW: 4, RelocKind.DIR64: 8, RelocKind.ARM_MOV32T: 8}
TARGET_ALIGN = {RelocKind.HIGHLOW: 1, RelocKind.DIR64: 1, RelocKind.ARM_MOV32T: 4}


@dataclass(frozen=True)
class BaseRelocEntry:
    t: int
    o: int
    kind: RelocKind


@dataclass(frozen=True)
class BaseRelocBlock:
    va: int
    bs: int
    entries: Tuple[BaseRelocEntry, ...]


@dataclass(frozen=True)
class RelocationWalk:
    blocks: Tuple[BaseRelocBlock, ...]
    total_size: int
    rdv: Optional[int] = None

    def targets(self) -> Iterator[Tuple[int, RelocKind]]:
        """(image offset, kind) of every non-ABSOLUTE entry in order of appearance"""
        for block in self.blocks:
            for entry in block.entries:
                if entry.kind is not RelocKind.ABSOLUTE:
                    yield block.va + entry.o, entry.kind


@dataclass(frozen=True)
class BookkeepingRecord:
    image_offset: int
    reloc_type: RelocKind
    original_value: int


@dataclass
class RuntimeBookkeeping:
    """
    Original target values recorded while relocating
    original_base is the image base the originals were read at
    """

    original_base: Optional[int] = None
    records: List[BookkeepingRecord] = field(default_factory=list)


@enum.unique
class RuntimePolicy(enum.Enum):
    STRICT = "STRICT"
    SKIP_CHANGED = "SKIP_CHANGED"


@dataclass(frozen=True)
class RelocationResult:
    applied: int
    delta: int


@dataclass(frozen=True)
class RuntimeRelocationResult:
    applied: int
    delta: int
    skipped_count: int = 0
    skipped_offsets: Tuple[int, ...] = ()


@dataclass(frozen=True)
class WalkSummary:
    blocks: int
    entries: int
    by_kind: Dict[str, int]

    def as_dict(self) -> dict:
        return {"blocks": self.blocks, "entries": self.entries, "by_kind": dict(self.by_kind)}


def verify_reloc_dir(
    img: LoadedImage, cfg: Optional[TargetConfig] = None
) -> Union[RelocationWalk, VerifyReport]:
    """
    Verifies the Relocation Directory of a loaded image
    Directory and block structure stop at the first violation, entry targets are all checked
    :param img: LoadedImage
    :param cfg: target configuration, defaults to settings.ini
    :return: RelocationWalk on success, VerifyReport otherwise
    """
    cfg = cfg if cfg is not None else TargetConfig.from_settings()
    ctx = img.ctx
    if not ctx.has_reloc_dir:
        return RelocationWalk((), 0)
    report = VerifyReport()
    try:
        blocks = _walk_blocks(img, cfg, report)
    except StructureRejected as e:
        report.add(e.code, e.message, e.offset)
        return report
    except ArithmeticOverflow as e:
        report.add(ViolationCode.ArithmeticOverflow, e.message, e.offset)
        return report
    if not report.accepted:
        return report
    logger.debug("Relocation directory holds %d blocks", len(blocks))
    return RelocationWalk(tuple(blocks), ctx.rds, ctx.rdv)


def _walk_blocks(img: LoadedImage, cfg: TargetConfig, report: VerifyReport) -> List[BaseRelocBlock]:
    ctx = img.ctx
    rdv, rds = ctx.rdv, ctx.rds
    if not is_aligned(rdv, BLOCK_ALIGNMENT):
        raise StructureRejected(
            ViolationCode.RelocDirMisaligned,
            f"relocation directory at 0x{rdv:X} is not {BLOCK_ALIGNMENT}-byte aligned",
            rdv,
        )
    end = checked_add(rdv, rds)
    if end > ctx.is_:
        raise StructureRejected(
            ViolationCode.RelocDirOutOfImage,
            f"relocation directory ends at 0x{end:X} beyond SizeOfImage 0x{ctx.is_:X}",
            rdv,
        )

    blocks = []
    position = rdv
    while position < end:
        if end - position < BLOCK_HEADER_SIZE:
            raise StructureRejected(
                ViolationCode.BlockSizeInvalid,
                f"{end - position} trailing bytes cannot hold a block header",
                position,
            )
        va, bs = struct.unpack("<II", image_access(img, position, BLOCK_HEADER_SIZE, 4).tobytes())
        if bs < BLOCK_HEADER_SIZE or not is_aligned(bs, BLOCK_ALIGNMENT) or bs > end - position:
            raise StructureRejected(
                ViolationCode.BlockSizeInvalid,
                f"block size 0x{bs:X} at 0x{position:X}",
                position,
            )
        count = (bs - BLOCK_HEADER_SIZE) // ENTRY_SIZE
        raw_entries = struct.unpack(
            f"<{count}H",
            image_access(img, position + BLOCK_HEADER_SIZE, count * ENTRY_SIZE).tobytes(),
        )
        entries = []
        for index, value in enumerate(raw_entries):
            entry_offset = position + BLOCK_HEADER_SIZE + index * ENTRY_SIZE
            info = reloc_type_info(value >> 12, cfg)
            entry = BaseRelocEntry(value >> 12, value & 0xFFF, info.reloc_type)
            entries.append(entry)
            if info.reloc_type is RelocKind.ABSOLUTE:
                continue
            if not info.supported:
                report.add(
                    ViolationCode.UnsupportedRelocType,
                    f"relocation type {entry.t} is not supported",
                    entry_offset,
                )
                continue
            _check_target(ctx, checked_add(va, entry.o), info.target_size, info.target_align, report)
        blocks.append(BaseRelocBlock(va, bs, tuple(entries)))
        position += bs
    return blocks


def _check_target(ctx, target: int, size: int, align: int, report: VerifyReport):
    target_end = checked_add(target, size)
    if target_end > ctx.is_:
        report.add(
            ViolationCode.TargetOutOfImage,
            f"relocation target [0x{target:X}, 0x{target_end:X}) exceeds SizeOfImage",
            target,
        )
    elif not is_aligned(target, align):
        report.add(
            ViolationCode.TargetMisaligned,
            f"relocation target 0x{target:X} is not aligned to {align}",
            target,
        )
    elif target < ctx.rdv + ctx.rds and ctx.rdv < target_end:
        report.add(
            ViolationCode.TargetOverlapsRelocDir,
            f"relocation target 0x{target:X} overlaps the relocation directory",
            target,
        )


def _thumb_mov_imm16(hw1: int, hw2: int) -> int:
    imm4 = hw1 & 0xF
    i = (hw1 >> 10) & 0x1
    imm3 = (hw2 >> 12) & 0x7
    imm8 = hw2 & 0xFF
    return (imm4 << 12) | (i << 11) | (imm3 << 8) | imm8


def _thumb_mov_encode(hw1: int, hw2: int, imm16: int) -> Tuple[int, int]:
    hw1 = (hw1 & ~0x040F) | ((imm16 >> 12) & 0xF) | (((imm16 >> 11) & 0x1) << 10)
    hw2 = (hw2 & ~0x70FF) | (((imm16 >> 8) & 0x7) << 12) | (imm16 & 0xFF)
    return hw1 & 0xFFFF, hw2 & 0xFFFF


def apply_one(kind: RelocKind, target_bytes: bytes, delta: int) -> bytes:
    """
    Adds delta to a relocation target, wrapping at the target width
    :param kind: relocation kind
    :param target_bytes: current target bytes, TARGET_SIZE[kind] long
    :param delta: signed base difference
    :return: patched bytes
    """
    if kind not in TARGET_SIZE:
        raise UnsupportedRelocType(f"{kind.value} relocations cannot be applied")
    if len(target_bytes) != TARGET_SIZE[kind]:
        raise ValueError(
            f"{kind.value} target needs {TARGET_SIZE[kind]} bytes, got {len(target_bytes)}"
        )
    if kind is RelocKind.HIGHLOW:
        (value,) = struct.unpack("<I", target_bytes)
        return struct.pack("<I", (value + delta) % 2 ** 32)
    if kind is RelocKind.DIR64:
        (value,) = struct.unpack("<Q", target_bytes)
        return struct.pack("<Q", (value + delta) % 2 ** 64)

    # MOVW then MOVT, low and high halves of one 32-bit immediate
    movw1, movw2, movt1, movt2 = struct.unpack("<4H", target_bytes)
    value = _thumb_mov_imm16(movw1, movw2) | (_thumb_mov_imm16(movt1, movt2) << 16)
    value = (value + delta) % 2 ** 32
    movw1, movw2 = _thumb_mov_encode(movw1, movw2, value & 0xFFFF)
    movt1, movt2 = _thumb_mov_encode(movt1, movt2, value >> 16)
    return struct.pack("<4H", movw1, movw2, movt1, movt2)


def _check_base(new_base: int):
    if not 0 <= new_base <= U64_MAX:
        raise ValueError(f"base 0x{new_base:X} is not a 64-bit address")


def relocate(
    img: LoadedImage,
    new_base: int,
    walk: RelocationWalk,
    book: Optional[RuntimeBookkeeping] = None,
    check_invariants: bool = CHECK_INVARIANTS,
) -> RelocationResult:
    """
    Applies every relocation of a verified walk in order of appearance and rebases the image
    :param img: LoadedImage the walk was verified for
    :param new_base: address the image is moved to
    :param walk: RelocationWalk from verify_reloc_dir
    :param book: optional sink receiving the original target values
    :param check_invariants: compare the relocation directory bytes before and after
    :return: RelocationResult
    """
    _check_base(new_base)
    if img.ctx.relocs_stripped and new_base != img.ctx.preferred_base:
        raise RelocsStripped(
            f"image has no relocation information and cannot move to 0x{new_base:X}"
        )
    delta = new_base - img.base
    if book is not None:
        book.original_base = img.base
        book.records.clear()
    directory = None
    if check_invariants and walk.rdv is not None:
        directory = image_access(img, walk.rdv, walk.total_size).tobytes()

    applied = 0
    for offset, kind in walk.targets():
        target = image_access(img, offset, TARGET_SIZE[kind], TARGET_ALIGN[kind])
        original = target.tobytes()
        if book is not None:
            book.records.append(
                BookkeepingRecord(offset, kind, int.from_bytes(original, "little"))
            )
        target.view[:] = list(apply_one(kind, original, delta))
        applied += 1
    img.base = new_base

    if directory is not None and image_access(img, walk.rdv, walk.total_size).tobytes() != directory:
        raise RelocDirModified("relocation directory changed while relocating", walk.rdv)
    logger.debug("Applied %d relocations, delta 0x%X", applied, delta % 2 ** 64)
    return RelocationResult(applied, delta)


def runtime_relocate(
    img: LoadedImage,
    new_base: int,
    walk: RelocationWalk,
    book: RuntimeBookkeeping,
    policy: RuntimePolicy = RuntimePolicy.STRICT,
) -> RuntimeRelocationResult:
    """
    Re-relocates an already relocated image using the recorded original values
    All targets are checked before any byte is patched
    :param img: LoadedImage relocated by relocate with book
    :param new_base: address the image is moved to
    :param walk: RelocationWalk the bookkeeping was recorded for
    :param book: RuntimeBookkeeping filled by relocate
    :param policy: STRICT fails on a changed target, SKIP_CHANGED leaves it alone
    :return: RuntimeRelocationResult
    """
    _check_base(new_base)
    targets = list(walk.targets())
    if book.original_base is None or len(targets) != len(book.records):
        raise BookkeepingInconsistent(
            f"{len(book.records)} records for {len(targets)} relocations"
        )
    for (offset, kind), record in zip(targets, book.records):
        if record.image_offset != offset or record.reloc_type is not kind:
            raise BookkeepingInconsistent(
                f"record for 0x{record.image_offset:X} does not match relocation at 0x{offset:X}",
                offset,
            )

    applied_delta = img.base - book.original_base
    pending = []
    skipped = []
    for record in book.records:
        size = TARGET_SIZE[record.reloc_type]
        target = image_access(img, record.image_offset, size, TARGET_ALIGN[record.reloc_type])
        original = record.original_value.to_bytes(size, "little")
        if target.tobytes() == apply_one(record.reloc_type, original, applied_delta):
            pending.append((target, record, original))
        elif policy is RuntimePolicy.STRICT:
            raise RuntimeValueMismatch(
                f"relocation target 0x{record.image_offset:X} changed since it was relocated",
                record.image_offset,
            )
        else:
            skipped.append(record.image_offset)

    delta = new_base - book.original_base
    for target, record, original in pending:
        target.view[:] = list(apply_one(record.reloc_type, original, delta))
    previous_base, img.base = img.base, new_base
    if skipped:
        logger.warning("Skipped %d changed relocation targets", len(skipped))
    return RuntimeRelocationResult(
        applied=len(pending),
        delta=new_base - previous_base,
        skipped_count=len(skipped),
        skipped_offsets=tuple(skipped),
    )


def walk_summary(walk: RelocationWalk) -> WalkSummary:
    kinds = Counter(
        entry.kind.value for block in walk.blocks for entry in block.entries
    )
    return WalkSummary(
        blocks=len(walk.blocks),
        entries=sum(kinds.values()),
        by_kind=dict(sorted(kinds.items())),
    )
