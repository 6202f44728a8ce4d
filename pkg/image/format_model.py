"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import enum
import math
from dataclasses import dataclass, replace
from typing import Dict, Tuple, Union

from utils.generic import ArithmeticOverflow
from utils.configloader import (
    ARCH,
    ARM_MOV32T,
    RISCV_RELOCS,
    STRICT_SECTION_LAYOUT,
    REFUSE_OVERLAP,
    PAD_TRAILING,
    LOAD_HEADERS,
    MAX_SECTIONS,
    MAX_FILE_SIZE,
    MAX_IMAGE_SIZE,
    PE_HEADER_ALIGNMENT,
    TE_MAX_SECTION_ALIGNMENT,
)

U64_MAX = 2 ** 64 - 1
INFINITE = math.inf

"""Machines"""


@enum.unique
class MachineClass(enum.Enum):
    IA32 = "IA32"
    X64 = "X64"
    ARM = "ARM"
    AARCH64 = "AARCH64"
    RISCV64 = "RISCV64"


IMAGE_FILE_MACHINE_I386 = 0x014C
IMAGE_FILE_MACHINE_ARM = 0x01C0
IMAGE_FILE_MACHINE_THUMB = 0x01C2
IMAGE_FILE_MACHINE_ARMNT = 0x01C4
IMAGE_FILE_MACHINE_AMD64 = 0x8664
IMAGE_FILE_MACHINE_ARM64 = 0xAA64
IMAGE_FILE_MACHINE_RISCV64 = 0x5064

_MACHINE_CODES = {
    MachineClass.IA32: (IMAGE_FILE_MACHINE_I386,),
    MachineClass.X64: (IMAGE_FILE_MACHINE_AMD64,),
    MachineClass.ARM: (
        IMAGE_FILE_MACHINE_ARM,
        IMAGE_FILE_MACHINE_THUMB,
        IMAGE_FILE_MACHINE_ARMNT,
    ),
    MachineClass.AARCH64: (IMAGE_FILE_MACHINE_ARM64,),
    MachineClass.RISCV64: (IMAGE_FILE_MACHINE_RISCV64,),
}


def machine_codes(machine_class: MachineClass) -> Tuple[int, ...]:
    """COFF machine codes accepted for a machine class"""
    return _MACHINE_CODES[machine_class]


@dataclass(frozen=True)
class TargetConfig:
    """
    Architecture parameters and strictness switches every predicate is evaluated against
    a_max is derived from machine_class: 4 for IA32, 8 otherwise
    """

    machine_class: MachineClass = MachineClass.X64
    allow_arm_mov32t: bool = False
    allow_riscv_relocs: bool = False
    strict_section_layout: bool = True
    refuse_hash_overlap: bool = True
    load_headers_default: bool = True
    pad_trailing: bool = False
    check_machine: bool = True
    max_sections: int = 96
    max_file_size: int = 2 ** 31
    max_image_size: int = 2 ** 31
    pe_header_alignment: int = 4
    te_max_section_alignment: int = 0x10000

    @property
    def a_max(self) -> int:
        return 4 if self.machine_class is MachineClass.IA32 else 8

    @classmethod
    def from_settings(cls, **overrides) -> "TargetConfig":
        """
        Builds the configuration from settings.ini and advanced_settings.ini
        :param overrides: TargetConfig fields that replace the configured values
        """
        try:
            machine_class = MachineClass(ARCH)
        except ValueError:
            raise ValueError(
                f'Architecture "{ARCH}" not valid. Pick one of '
                + ", ".join(member.value for member in MachineClass)
            )
        config = cls(
            machine_class=machine_class,
            allow_arm_mov32t=ARM_MOV32T,
            allow_riscv_relocs=RISCV_RELOCS,
            strict_section_layout=STRICT_SECTION_LAYOUT,
            refuse_hash_overlap=REFUSE_OVERLAP,
            load_headers_default=LOAD_HEADERS,
            pad_trailing=PAD_TRAILING,
            max_sections=MAX_SECTIONS,
            max_file_size=MAX_FILE_SIZE,
            max_image_size=MAX_IMAGE_SIZE,
            pe_header_alignment=PE_HEADER_ALIGNMENT,
            te_max_section_alignment=TE_MAX_SECTION_ALIGNMENT,
        )
        return replace(config, **overrides)


"""Fundamental types"""


@enum.unique
class FundamentalType(enum.Enum):
    BOOLEAN = "BOOLEAN"
    CHAR8 = "CHAR8"
    UINT8 = "UINT8"
    UINT16 = "UINT16"
    UINT32 = "UINT32"
    UINT64 = "UINT64"
    UINTN = "UINTN"


_FUNDAMENTAL_SIZES = {
    FundamentalType.BOOLEAN: 1,
    FundamentalType.CHAR8: 1,
    FundamentalType.UINT8: 1,
    FundamentalType.UINT16: 2,
    FundamentalType.UINT32: 4,
    FundamentalType.UINT64: 8,
}

_NATIVE_32BIT = (MachineClass.IA32, MachineClass.ARM)


@dataclass(frozen=True)
class FundamentalTypeInfo:
    name: FundamentalType
    size_bytes: int
    align_bytes: int


def fundamental_type_info(name: FundamentalType, cfg: TargetConfig) -> FundamentalTypeInfo:
    """
    Size and natural alignment of a fundamental type
    UINTN is UINT32 for IA32 and ARM and UINT64 everywhere else
    """
    if name is FundamentalType.UINTN:
        size = 4 if cfg.machine_class in _NATIVE_32BIT else 8
    else:
        size = _FUNDAMENTAL_SIZES[name]
    return FundamentalTypeInfo(name, size, align_of(size, cfg))


def fundamental_type_table(cfg: TargetConfig) -> Dict[FundamentalType, FundamentalTypeInfo]:
    return {name: fundamental_type_info(name, cfg) for name in FundamentalType}


"""Arithmetic"""


def checked_add(*values: int) -> int:
    """
    Sums unsigned 64-bit values
    Raises ArithmeticOverflow instead of wrapping
    """
    total = 0
    for value in values:
        if value < 0 or value > U64_MAX:
            raise ArithmeticOverflow(f"operand 0x{value:X} outside the unsigned 64-bit domain")
        total += value
        if total > U64_MAX:
            raise ArithmeticOverflow("addition exceeds the unsigned 64-bit domain")
    return total


def checked_mul(a: int, b: int) -> int:
    if a < 0 or b < 0 or a > U64_MAX or b > U64_MAX:
        raise ArithmeticOverflow("operand outside the unsigned 64-bit domain")
    product = a * b
    if product > U64_MAX:
        raise ArithmeticOverflow("multiplication exceeds the unsigned 64-bit domain")
    return product


def is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


def align_of(size_bytes: int, cfg: TargetConfig) -> int:
    """Natural alignment: the minimum of the data size and the architecture's A_MAX"""
    if size_bytes < 1:
        raise ValueError("size_bytes must be positive")
    return min(size_bytes, cfg.a_max)


def align_up(v: int, a: int) -> int:
    """
    Least multiple of a that is not less than v
    :param v: non-negative value
    :param a: power of two
    """
    if not is_power_of_two(a):
        raise ValueError(f"alignment {a} is not a power of two")
    return checked_add(v, a - 1) & ~(a - 1)


def is_aligned(v: int, a: int) -> bool:
    if not is_power_of_two(a):
        raise ValueError(f"alignment {a} is not a power of two")
    return v % a == 0


"""Base Relocation types"""

IMAGE_REL_BASED_ABSOLUTE = 0
IMAGE_REL_BASED_HIGH = 1
IMAGE_REL_BASED_LOW = 2
IMAGE_REL_BASED_HIGHLOW = 3
IMAGE_REL_BASED_HIGHADJ = 4
IMAGE_REL_BASED_ARM_MOV32T = 5
IMAGE_REL_BASED_DIR64 = 10


@enum.unique
class RelocKind(enum.Enum):
    ABSOLUTE = "ABSOLUTE"
    HIGHLOW = "HIGHLOW"
    DIR64 = "DIR64"
    ARM_MOV32T = "ARM_MOV32T"
    UNSUPPORTED = "UNSUPPORTED"


@dataclass(frozen=True)
class BaseRelocTypeInfo:
    reloc_type: RelocKind
    code: int
    target_size: Union[int, float]
    target_align: Union[int, float]

    @property
    def supported(self) -> bool:
        return self.target_size is not INFINITE


def reloc_type_info(code: int, cfg: TargetConfig) -> BaseRelocTypeInfo:
    """
    Target characteristics of a Base Relocation type code
    HIGH, LOW and HIGHADJ are never supported, ARM_MOV32T only when enabled
    """
    if not 0 <= code <= 15:
        raise ValueError(f"relocation type code {code} is not a 4-bit value")
    if code == IMAGE_REL_BASED_ABSOLUTE:
        # padding entry, no target
        return BaseRelocTypeInfo(RelocKind.ABSOLUTE, code, 0, 1)
    if code == IMAGE_REL_BASED_HIGHLOW:
        return BaseRelocTypeInfo(RelocKind.HIGHLOW, code, 4, 1)
    if code == IMAGE_REL_BASED_DIR64:
        return BaseRelocTypeInfo(RelocKind.DIR64, code, 8, 1)
    if code == IMAGE_REL_BASED_ARM_MOV32T and cfg.allow_arm_mov32t:
        return BaseRelocTypeInfo(RelocKind.ARM_MOV32T, code, 8, 4)
    return BaseRelocTypeInfo(RelocKind.UNSUPPORTED, code, INFINITE, INFINITE)
