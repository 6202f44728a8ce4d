"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import enum
import logging
import struct
from dataclasses import dataclass
from typing import List, Optional, Union

from image.format_model import (
    TargetConfig,
    align_up,
    checked_add,
    checked_mul,
    is_aligned,
    is_power_of_two,
    machine_codes,
)
from utils.generic import (
    ArithmeticOverflow,
    OutOfBounds,
    StructureRejected,
    TeStrippedSizeInvalid,
    UnknownFormat,
    VerifyReport,
    ViolationCode,
)

logger = logging.getLogger(__name__)

DOS_MAGIC = b"MZ"
PE_MAGIC = b"PE\0\0"
TE_MAGIC = b"VZ"

DOS_HEADER_SIZE = 0x40
E_LFANEW_OFFSET = 0x3C
COFF_HEADER_SIZE = 20
TE_HEADER_SIZE = 40
SECTION_HEADER_SIZE = 40

OPTIONAL_MAGIC_PE32 = 0x10B
OPTIONAL_MAGIC_PE32PLUS = 0x20B

IMAGE_FILE_RELOCS_STRIPPED = 0x0001
IMAGE_NUMBEROF_DIRECTORY_ENTRIES = 16
IMAGE_DIRECTORY_ENTRY_SECURITY = 4
IMAGE_DIRECTORY_ENTRY_BASERELOC = 5
DATA_DIRECTORY_SIZE = 8

# offsets inside the optional header
OPT_ENTRY_POINT = 16
OPT_SECTION_ALIGNMENT = 32
OPT_SIZE_OF_IMAGE = 56
OPT_SIZE_OF_HEADERS = 60
OPT_CHECKSUM = 64
OPT_SUBSYSTEM = 68

# magic: (fixed part size, image base offset, image base width, NumberOfRvaAndSizes offset)
_OPTIONAL_LAYOUT = {
    OPTIONAL_MAGIC_PE32: (96, 28, 4, 92),
    OPTIONAL_MAGIC_PE32PLUS: (112, 24, 8, 108),
}


@dataclass(frozen=True)
class RawFile:
    """
    Read-only raw image file
    Every read goes through a bounds-checked little-endian accessor
    """

    data: bytes

    @classmethod
    def from_path(cls, path) -> "RawFile":
        with open(path, "rb") as raw_file:
            return cls(raw_file.read())

    @property
    def fs(self) -> int:
        return len(self.data)

    @property
    def view(self) -> memoryview:
        return memoryview(self.data)

    def _check_bounds(self, offset: int, length: int):
        if offset < 0 or length < 0 or offset > self.fs - length:
            raise OutOfBounds(
                f"raw read of {length} bytes at 0x{offset:X} exceeds file size 0x{self.fs:X}",
                offset,
            )

    def require(self, offset: int, length: int):
        self._check_bounds(offset, length)

    def bytes_at(self, offset: int, length: int) -> bytes:
        self._check_bounds(offset, length)
        return self.data[offset:offset + length]

    def u8(self, offset: int) -> int:
        self._check_bounds(offset, 1)
        return self.data[offset]

    def u16(self, offset: int) -> int:
        self._check_bounds(offset, 2)
        return struct.unpack_from("<H", self.data, offset)[0]

    def u32(self, offset: int) -> int:
        self._check_bounds(offset, 4)
        return struct.unpack_from("<I", self.data, offset)[0]

    def u64(self, offset: int) -> int:
        self._check_bounds(offset, 8)
        return struct.unpack_from("<Q", self.data, offset)[0]


@enum.unique
class FileKind(enum.Enum):
    TE = "TE"
    PE_WITH_DOS = "PE_WITH_DOS"
    PE_BARE = "PE_BARE"


@enum.unique
class ImageFormat(enum.Enum):
    TE = "TE"
    PE32 = "PE32"
    PE32PLUS = "PE32PLUS"


@enum.unique
class HeaderLoadPolicy(enum.Enum):
    ALLOWED = "ALLOWED"
    DISABLED = "DISABLED"


@dataclass(frozen=True)
class ImageContext:
    """
    Verified header facts of one raw file. Nothing after parse_and_verify reads header fields from raw bytes again
    Offsets named *_field_offset / *_entry_offset / cert_table_* are raw file offsets, everything else is image space
    """

    format: ImageFormat
    fs: int
    hs: int
    is_: int
    sa: int
    so: int
    num_sections: int
    rdv: Optional[int]
    rds: Optional[int]
    preferred_base: int
    entry_point_rva: int
    te_stripped_offset: int
    relocs_stripped: bool
    machine: int
    subsystem: int
    checksum_field_offset: Optional[int] = None
    secdir_entry_offset: Optional[int] = None
    cert_table_offset: Optional[int] = None
    cert_table_size: Optional[int] = None

    @property
    def has_reloc_dir(self) -> bool:
        return self.rdv is not None

    @property
    def has_cert_table(self) -> bool:
        return self.cert_table_offset is not None

    def summary(self) -> dict:
        """Projection used by reports"""
        return {
            "format": self.format.value,
            "fs": self.fs,
            "hs": self.hs,
            "is": self.is_,
            "sa": self.sa,
            "so": self.so,
            "num_sections": self.num_sections,
            "rdv": self.rdv,
            "rds": self.rds,
            "preferred_base": self.preferred_base,
            "entry_point_rva": self.entry_point_rva,
            "stripped_delta": self.te_stripped_offset,
            "relocs_stripped": self.relocs_stripped,
            "machine": self.machine,
            "subsystem": self.subsystem,
        }


class HeaderVerifyReport(VerifyReport):
    """Violations found while verifying the header grammar"""


@dataclass(frozen=True)
class TeEffectiveOffsets:
    header_load_policy: HeaderLoadPolicy
    stripped_delta: int


def detect_format(raw: RawFile) -> FileKind:
    """
    Classifies a raw file by its leading magic only
    :param raw: raw file
    :return: FileKind
    """
    if raw.data[:2] == TE_MAGIC:
        return FileKind.TE
    if raw.data[:2] == DOS_MAGIC:
        return FileKind.PE_WITH_DOS
    if raw.data[:4] == PE_MAGIC:
        return FileKind.PE_BARE
    raise UnknownFormat("no TE, MS-DOS or PE magic at file start", 0)


def te_stripped_delta(stripped_size: int) -> int:
    """Bytes removed from the original PE beyond the size of the TE header that replaced them"""
    if stripped_size < TE_HEADER_SIZE:
        raise TeStrippedSizeInvalid(
            f"StrippedSize 0x{stripped_size:X} is smaller than the TE header"
        )
    return stripped_size - TE_HEADER_SIZE


def te_effective_offsets(ctx: ImageContext) -> TeEffectiveOffsets:
    if ctx.format is not ImageFormat.TE:
        raise TeStrippedSizeInvalid(f"{ctx.format.value} image carries no stripped size")
    return TeEffectiveOffsets(HeaderLoadPolicy.DISABLED, ctx.te_stripped_offset)


def effective_header_size(ctx: ImageContext) -> int:
    """End of the headers in image space. TE headers stand in for the stripped PE bytes"""
    return checked_add(ctx.hs, ctx.te_stripped_offset)


def parse_and_verify(
    raw: RawFile, cfg: Optional[TargetConfig] = None
) -> Union[ImageContext, HeaderVerifyReport]:
    """
    Verifies the headers of a raw file and builds its ImageContext
    Stops at the first violation since every later read depends on the earlier ones
    :param raw: raw file
    :param cfg: target configuration, defaults to settings.ini
    :return: ImageContext on success, HeaderVerifyReport with one violation otherwise
    """
    cfg = cfg if cfg is not None else TargetConfig.from_settings()
    report = HeaderVerifyReport()
    try:
        if raw.fs > cfg.max_file_size:
            raise StructureRejected(
                ViolationCode.SizeLimitExceeded,
                f"file size 0x{raw.fs:X} exceeds limit 0x{cfg.max_file_size:X}",
            )
        try:
            kind = detect_format(raw)
        except UnknownFormat as e:
            raise StructureRejected(ViolationCode.BadMagic, e.message, 0)
        if kind is FileKind.TE:
            ctx = _parse_te(raw, cfg)
        else:
            ctx = _parse_pe(raw, cfg, kind)
    except StructureRejected as e:
        report.add(e.code, e.message, e.offset)
    except OutOfBounds as e:
        report.add(ViolationCode.HeaderOutOfBounds, e.message, e.offset)
    except TeStrippedSizeInvalid as e:
        report.add(ViolationCode.TeStrippedSizeInvalid, e.message, e.offset)
    except ArithmeticOverflow as e:
        report.add(ViolationCode.ArithmeticOverflow, e.message, e.offset)
    else:
        logger.debug(
            "Accepted %s header: %d sections, SizeOfHeaders 0x%X, SizeOfImage 0x%X",
            ctx.format.value,
            ctx.num_sections,
            ctx.hs,
            ctx.is_,
        )
        return ctx
    logger.debug("Rejected header: %s", report.violations[0].message)
    return report


def _check_machine(machine: int, cfg: TargetConfig, offset: int):
    if cfg.check_machine and machine not in machine_codes(cfg.machine_class):
        raise StructureRejected(
            ViolationCode.MachineMismatch,
            f"machine 0x{machine:04X} is not accepted for {cfg.machine_class.value}",
            offset,
        )


def _check_section_count(num_sections: int, cfg: TargetConfig, offset: int):
    if num_sections == 0:
        raise StructureRejected(ViolationCode.SectionCountZero, "image declares no sections", offset)
    if num_sections > cfg.max_sections:
        raise StructureRejected(
            ViolationCode.SizeLimitExceeded,
            f"{num_sections} sections exceed limit {cfg.max_sections}",
            offset,
        )


def _check_image_size(is_: int, effective_hs: int, sa: int, cfg: TargetConfig):
    if is_ > cfg.max_image_size:
        raise StructureRejected(
            ViolationCode.SizeLimitExceeded,
            f"SizeOfImage 0x{is_:X} exceeds limit 0x{cfg.max_image_size:X}",
        )
    if is_ < align_up(effective_hs, sa):
        raise StructureRejected(
            ViolationCode.SizeOfImageTooSmall,
            f"SizeOfImage 0x{is_:X} does not cover the aligned headers",
        )


def _parse_pe(raw: RawFile, cfg: TargetConfig, kind: FileKind) -> ImageContext:
    pe_offset = 0
    if kind is FileKind.PE_WITH_DOS:
        raw.require(0, DOS_HEADER_SIZE)
        pe_offset = raw.u32(E_LFANEW_OFFSET)
        if pe_offset < DOS_HEADER_SIZE:
            raise StructureRejected(
                ViolationCode.HeaderOutOfBounds,
                f"e_lfanew 0x{pe_offset:X} points into the MS-DOS header",
                E_LFANEW_OFFSET,
            )
        if not is_aligned(pe_offset, cfg.pe_header_alignment):
            raise StructureRejected(
                ViolationCode.MisalignedHeaderOffset,
                f"e_lfanew 0x{pe_offset:X} is not aligned to {cfg.pe_header_alignment}",
                E_LFANEW_OFFSET,
            )
        if raw.bytes_at(pe_offset, 2) == TE_MAGIC:
            raise StructureRejected(
                ViolationCode.DosStubBeforeTe,
                "TE header preceded by an MS-DOS stub",
                pe_offset,
            )
        if raw.bytes_at(pe_offset, 4) != PE_MAGIC:
            raise StructureRejected(ViolationCode.BadMagic, "missing PE signature", pe_offset)

    coff = checked_add(pe_offset, len(PE_MAGIC))
    raw.require(coff, COFF_HEADER_SIZE)
    machine = raw.u16(coff)
    num_sections = raw.u16(coff + 2)
    size_of_optional = raw.u16(coff + 16)
    characteristics = raw.u16(coff + 18)

    opt = coff + COFF_HEADER_SIZE
    if size_of_optional < 2:
        raise StructureRejected(
            ViolationCode.HeaderOutOfBounds,
            f"SizeOfOptionalHeader {size_of_optional} cannot hold a magic",
            coff + 16,
        )
    raw.require(opt, size_of_optional)
    magic = raw.u16(opt)
    if magic not in _OPTIONAL_LAYOUT:
        raise StructureRejected(
            ViolationCode.BadOptionalMagic, f"optional header magic 0x{magic:X}", opt
        )
    fixed_size, base_offset, base_width, rva_count_offset = _OPTIONAL_LAYOUT[magic]
    if size_of_optional < fixed_size:
        raise StructureRejected(
            ViolationCode.HeaderOutOfBounds,
            f"SizeOfOptionalHeader {size_of_optional} is smaller than the fixed optional header",
            coff + 16,
        )
    number_of_rva = raw.u32(opt + rva_count_offset)
    directory_count = min(number_of_rva, IMAGE_NUMBEROF_DIRECTORY_ENTRIES)
    if fixed_size + directory_count * DATA_DIRECTORY_SIZE > size_of_optional:
        raise StructureRejected(
            ViolationCode.HeaderOutOfBounds,
            f"{directory_count} data directories exceed SizeOfOptionalHeader",
            opt + rva_count_offset,
        )

    _check_machine(machine, cfg, coff)
    _check_section_count(num_sections, cfg, coff + 2)

    so = opt + size_of_optional
    if not is_aligned(so, 4):
        raise StructureRejected(
            ViolationCode.MisalignedHeaderOffset,
            f"Section Table offset 0x{so:X} is not 4-byte aligned",
            so,
        )
    table_end = checked_add(so, checked_mul(num_sections, SECTION_HEADER_SIZE))
    if table_end > raw.fs:
        raise StructureRejected(
            ViolationCode.HeaderOutOfBounds,
            f"Section Table ends at 0x{table_end:X} beyond file size 0x{raw.fs:X}",
            so,
        )

    hs = raw.u32(opt + OPT_SIZE_OF_HEADERS)
    if hs < table_end or hs > raw.fs:
        raise StructureRejected(
            ViolationCode.SizeOfHeadersInvalid,
            f"SizeOfHeaders 0x{hs:X} outside [0x{table_end:X}, 0x{raw.fs:X}]",
            opt + OPT_SIZE_OF_HEADERS,
        )
    sa = raw.u32(opt + OPT_SECTION_ALIGNMENT)
    if not is_power_of_two(sa):
        raise StructureRejected(
            ViolationCode.SectionAlignmentNotPow2,
            f"SectionAlignment 0x{sa:X} is not a power of two",
            opt + OPT_SECTION_ALIGNMENT,
        )
    is_ = raw.u32(opt + OPT_SIZE_OF_IMAGE)
    _check_image_size(is_, hs, sa, cfg)

    directories = opt + fixed_size
    rdv = rds = None
    if directory_count > IMAGE_DIRECTORY_ENTRY_BASERELOC:
        entry = directories + IMAGE_DIRECTORY_ENTRY_BASERELOC * DATA_DIRECTORY_SIZE
        rva, size = raw.u32(entry), raw.u32(entry + 4)
        if rva or size:
            rdv, rds = rva, size
    relocs_stripped = bool(characteristics & IMAGE_FILE_RELOCS_STRIPPED)
    if relocs_stripped and rdv is not None:
        raise StructureRejected(
            ViolationCode.RelocsStrippedInconsistent,
            "RELOCS_STRIPPED is set while a relocation directory is declared",
            coff + 18,
        )

    secdir_entry = cert_offset = cert_size = None
    if directory_count > IMAGE_DIRECTORY_ENTRY_SECURITY:
        secdir_entry = directories + IMAGE_DIRECTORY_ENTRY_SECURITY * DATA_DIRECTORY_SIZE
        offset, size = raw.u32(secdir_entry), raw.u32(secdir_entry + 4)
        if offset or size:
            cert_offset, cert_size = offset, size

    if base_width == 4:
        preferred_base = raw.u32(opt + base_offset)
    else:
        preferred_base = raw.u64(opt + base_offset)

    return ImageContext(
        format=ImageFormat.PE32 if magic == OPTIONAL_MAGIC_PE32 else ImageFormat.PE32PLUS,
        fs=raw.fs,
        hs=hs,
        is_=is_,
        sa=sa,
        so=so,
        num_sections=num_sections,
        rdv=rdv,
        rds=rds,
        preferred_base=preferred_base,
        entry_point_rva=raw.u32(opt + OPT_ENTRY_POINT),
        te_stripped_offset=0,
        relocs_stripped=relocs_stripped,
        machine=machine,
        subsystem=raw.u16(opt + OPT_SUBSYSTEM),
        checksum_field_offset=opt + OPT_CHECKSUM,
        secdir_entry_offset=secdir_entry,
        cert_table_offset=cert_offset,
        cert_table_size=cert_size,
    )


def _te_section_alignment(addresses: List[int], cfg: TargetConfig) -> int:
    """Largest power of two (capped by configuration) dividing every non-zero section address"""
    combined = 0
    for va in addresses:
        combined |= va
    if not combined:
        return cfg.te_max_section_alignment
    return min(combined & -combined, cfg.te_max_section_alignment)


def _parse_te(raw: RawFile, cfg: TargetConfig) -> ImageContext:
    raw.require(0, TE_HEADER_SIZE)
    machine = raw.u16(2)
    num_sections = raw.u8(4)
    subsystem = raw.u8(5)
    stripped_delta = te_stripped_delta(raw.u16(6))

    _check_machine(machine, cfg, 2)
    _check_section_count(num_sections, cfg, 4)

    so = TE_HEADER_SIZE
    table_end = checked_add(so, checked_mul(num_sections, SECTION_HEADER_SIZE))
    if table_end > raw.fs:
        raise StructureRejected(
            ViolationCode.HeaderOutOfBounds,
            f"Section Table ends at 0x{table_end:X} beyond file size 0x{raw.fs:X}",
            so,
        )
    hs = align_up(table_end, 8)
    if hs > raw.fs:
        raise StructureRejected(
            ViolationCode.SizeOfHeadersInvalid,
            f"TE headers end at 0x{hs:X} beyond file size 0x{raw.fs:X}",
        )

    addresses = []
    last_end = 0
    for index in range(num_sections):
        header = so + index * SECTION_HEADER_SIZE
        vs, va = raw.u32(header + 8), raw.u32(header + 12)
        rs, o = raw.u32(header + 16), raw.u32(header + 20)
        if rs and o < stripped_delta:
            raise StructureRejected(
                ViolationCode.TeStrippedSizeInvalid,
                f"section {index} raw offset 0x{o:X} lies inside the stripped bytes",
                header + 20,
            )
        addresses.append(va)
        last_end = checked_add(va, vs)
    sa = _te_section_alignment(addresses, cfg)
    is_ = align_up(last_end, sa)
    _check_image_size(is_, checked_add(hs, stripped_delta), sa, cfg)

    rva, size = raw.u32(24), raw.u32(28)
    relocs_stripped = not (rva or size)

    return ImageContext(
        format=ImageFormat.TE,
        fs=raw.fs,
        hs=hs,
        is_=is_,
        sa=sa,
        so=so,
        num_sections=num_sections,
        rdv=None if relocs_stripped else rva,
        rds=None if relocs_stripped else size,
        preferred_base=raw.u64(16),
        entry_point_rva=raw.u32(8),
        te_stripped_offset=stripped_delta,
        relocs_stripped=relocs_stripped,
        machine=machine,
        subsystem=subsystem,
    )
