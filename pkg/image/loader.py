"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from image.format_model import TargetConfig, checked_add, is_aligned
from image.headers import ImageContext, ImageFormat, RawFile
from image.sections import SectionTable
from utils.configloader import TRACK_COVERAGE
from utils.generic import (
    DestinationTooSmall,
    HeaderLoadConflictsWithSection,
    Misaligned,
    OutOfBounds,
    TeHeaderNotLoadable,
    WriteOverlapError,
)

logger = logging.getLogger(__name__)

Destination = Union[bytearray, memoryview, np.ndarray]


@dataclass
class LoadOptions:
    """
    :param load_headers: copy the headers in front of the first section. None uses the configured default
     and silently skips header loading where it is impossible
    :param track_coverage: count writes per destination byte
    """

    load_headers: Optional[bool] = None
    track_coverage: bool = TRACK_COVERAGE


@dataclass
class LoadedImage:
    mem: np.ndarray
    ctx: ImageContext
    table: SectionTable
    base: int
    headers_loaded: bool = False
    coverage: Optional[np.ndarray] = field(default=None, repr=False)

    def snapshot(self) -> bytes:
        return self.mem.tobytes()


@dataclass(frozen=True)
class ImageSlice:
    view: np.ndarray
    remaining: int

    def tobytes(self) -> bytes:
        return self.view.tobytes()


def required_image_size(ctx: ImageContext) -> int:
    return ctx.is_


def required_image_alignment(ctx: ImageContext, cfg: Optional[TargetConfig] = None) -> int:
    """Alignment the destination base address must satisfy"""
    cfg = cfg if cfg is not None else TargetConfig.from_settings()
    return max(ctx.sa, cfg.a_max)


def _as_array(dest: Destination) -> np.ndarray:
    if isinstance(dest, np.ndarray):
        return dest.reshape(-1).view(np.uint8)
    return np.frombuffer(dest, dtype=np.uint8)


def _resolve_load_headers(
    ctx: ImageContext, table: SectionTable, requested: Optional[bool], cfg: TargetConfig
) -> bool:
    if requested is None:
        wanted = cfg.load_headers_default
        if wanted and (ctx.format is ImageFormat.TE or table[0].va == 0):
            logger.debug("Header loading disabled for this image")
            return False
        return wanted
    if requested and ctx.format is ImageFormat.TE:
        raise TeHeaderNotLoadable("TE headers cannot be placed in the image")
    if requested and table[0].va == 0:
        raise HeaderLoadConflictsWithSection(
            "first section starts at image offset 0, headers would be overwritten", 0
        )
    return requested


def _write(img: LoadedImage, offset: int, data: np.ndarray):
    end = checked_add(offset, len(data))
    if end > img.ctx.is_:
        raise OutOfBounds(f"write [0x{offset:X}, 0x{end:X}) exceeds SizeOfImage", offset)
    if img.coverage is not None:
        img.coverage[offset:end] += 1
        if (img.coverage[offset:end] > 1).any():
            first = offset + int(np.argmax(img.coverage[offset:end] > 1))
            raise WriteOverlapError(f"image byte 0x{first:X} written twice", first)
    img.mem[offset:end] = data


def load(
    raw: RawFile,
    ctx: ImageContext,
    table: SectionTable,
    dest: Destination,
    opts: Optional[LoadOptions] = None,
    cfg: Optional[TargetConfig] = None,
) -> LoadedImage:
    """
    Loads a verified raw file into a caller-provided destination
    The destination is zeroed first, then headers (if requested) and every section are copied in file order
    :param raw: raw file the context was verified from
    :param ctx: verified ImageContext
    :param table: Section Table accepted by verify_sections
    :param dest: writable byte region of at least ctx.is_ bytes
    :param opts: LoadOptions
    :param cfg: target configuration, defaults to settings.ini
    :return: LoadedImage over dest
    """
    opts = opts if opts is not None else LoadOptions()
    cfg = cfg if cfg is not None else TargetConfig.from_settings()
    mem = _as_array(dest)
    if len(mem) < ctx.is_:
        raise DestinationTooSmall(
            f"destination holds 0x{len(mem):X} bytes, image needs 0x{ctx.is_:X}"
        )
    mem = mem[: ctx.is_]
    load_headers = _resolve_load_headers(ctx, table, opts.load_headers, cfg)

    mem[:] = 0
    img = LoadedImage(
        mem=mem,
        ctx=ctx,
        table=table,
        base=ctx.preferred_base,
        coverage=np.zeros(ctx.is_, dtype=np.uint16) if opts.track_coverage else None,
    )
    source = np.frombuffer(raw.data, dtype=np.uint8)
    if load_headers:
        _write(img, 0, source[: ctx.hs])
        img.headers_loaded = True
    for section in table:
        size = min(section.vs, section.rs)
        if not size:
            continue
        start = section.raw_start(ctx)
        _write(img, section.va, source[start:checked_add(start, size)])
    logger.debug(
        "Loaded %d sections into 0x%X bytes (headers %s)",
        len(table),
        ctx.is_,
        "loaded" if load_headers else "skipped",
    )
    return img


def image_access(img: LoadedImage, offset: int, size: int, align: int = 1) -> ImageSlice:
    """
    Checked access to the loaded image
    :param img: LoadedImage
    :param offset: image offset
    :param size: number of bytes to access
    :param align: required alignment of offset
    :return: ImageSlice with a writable view and the number of bytes left in the image from offset
    """
    if offset < 0 or size < 0 or offset > img.ctx.is_ or size > img.ctx.is_ - offset:
        raise OutOfBounds(
            f"access of {size} bytes at 0x{offset:X} exceeds SizeOfImage 0x{img.ctx.is_:X}",
            offset,
        )
    if not is_aligned(offset, align):
        raise Misaligned(f"offset 0x{offset:X} is not aligned to {align}", offset)
    return ImageSlice(img.mem[offset:offset + size], img.ctx.is_ - offset)


def discard_sections(img: LoadedImage) -> int:
    """Zero-fills the memory of every discardable section and returns how many were discarded"""
    count = 0
    for section in img.table:
        if section.discardable:
            image_access(img, section.va, section.vs).view[:] = 0
            count += 1
    if count:
        logger.debug("Discarded %d sections", count)
    return count


def entry_point(img: LoadedImage) -> int:
    image_access(img, img.ctx.entry_point_rva, 1)
    return img.ctx.entry_point_rva


def zero_unhashed_header_fields(img: LoadedImage) -> int:
    """
    Clears the loaded checksum field and security directory entry, which Authenticode does not cover
    :return: number of bytes cleared
    """
    if not img.headers_loaded:
        return 0
    cleared = 0
    for offset, size in (
        (img.ctx.checksum_field_offset, 4),
        (img.ctx.secdir_entry_offset, 8),
    ):
        if offset is None:
            continue
        image_access(img, offset, size).view[:] = 0
        cleared += size
    return cleared
