"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import pytest

from image.format_model import (
    INFINITE,
    U64_MAX,
    FundamentalType,
    MachineClass,
    RelocKind,
    TargetConfig,
    align_of,
    align_up,
    checked_add,
    checked_mul,
    fundamental_type_info,
    fundamental_type_table,
    is_aligned,
    machine_codes,
    reloc_type_info,
)
from utils.generic import ArithmeticOverflow

IA32 = TargetConfig(machine_class=MachineClass.IA32)
X64 = TargetConfig(machine_class=MachineClass.X64)


def test_a_max_follows_machine_class():
    assert IA32.a_max == 4
    for machine_class in MachineClass:
        if machine_class is not MachineClass.IA32:
            assert TargetConfig(machine_class=machine_class).a_max == 8


@pytest.mark.parametrize(
    "cfg, expected",
    [
        (IA32, {"BOOLEAN": 1, "CHAR8": 1, "UINT8": 1, "UINT16": 2, "UINT32": 4, "UINT64": 4, "UINTN": 4}),
        (X64, {"BOOLEAN": 1, "CHAR8": 1, "UINT8": 1, "UINT16": 2, "UINT32": 4, "UINT64": 8, "UINTN": 8}),
    ],
)
def test_fundamental_type_alignment_table(cfg, expected):
    table = fundamental_type_table(cfg)
    assert {name.value: info.align_bytes for name, info in table.items()} == expected
    for info in table.values():
        assert info.align_bytes == align_of(info.size_bytes, cfg)


def test_uintn_size_per_machine_class():
    assert fundamental_type_info(FundamentalType.UINTN, IA32).size_bytes == 4
    assert fundamental_type_info(FundamentalType.UINTN, TargetConfig(machine_class=MachineClass.ARM)).size_bytes == 4
    assert fundamental_type_info(FundamentalType.UINTN, X64).size_bytes == 8
    assert fundamental_type_info(FundamentalType.UINTN, TargetConfig(machine_class=MachineClass.AARCH64)).size_bytes == 8


def test_align_of_examples():
    assert align_of(8, IA32) == 4
    assert align_of(1, X64) == 1
    assert align_of(2, X64) == 2
    with pytest.raises(ValueError):
        align_of(0, X64)


def test_align_up_examples():
    assert align_up(0, 4096) == 0
    assert align_up(0x201, 0x1000) == 0x1000
    assert align_up(0x1001, 0x1000) == 0x2000
    assert align_up(0x1000, 0x1000) == 0x1000
    with pytest.raises(ValueError):
        align_up(5, 3)
    with pytest.raises(ArithmeticOverflow):
        align_up(U64_MAX, 0x1000)


def test_align_up_properties(rng):
    for _ in range(2000):
        a = 1 << int(rng.integers(0, 20))
        v = int(rng.integers(0, 2 ** 40))
        up = align_up(v, a)
        assert v <= up < v + a
        assert up % a == 0
        assert align_up(up, a) == up
        assert align_up(v + 1, a) >= up


def test_is_aligned_examples():
    assert is_aligned(0, 8)
    assert not is_aligned(6, 4)
    assert is_aligned(24, 8)


def test_stricter_alignment_implies_weaker(rng):
    for _ in range(2000):
        v = int(rng.integers(0, 2 ** 32))
        small, large = sorted(1 << int(x) for x in rng.integers(0, 16, 2))
        if is_aligned(v, large):
            assert is_aligned(v, small)


def test_checked_arithmetic():
    assert checked_add(1, 2, 3) == 6
    assert checked_add(U64_MAX) == U64_MAX
    with pytest.raises(ArithmeticOverflow):
        checked_add(U64_MAX, 1)
    with pytest.raises(ArithmeticOverflow):
        checked_add(-1)
    assert checked_mul(0x100, 40) == 0x2800
    with pytest.raises(ArithmeticOverflow):
        checked_mul(2 ** 32, 2 ** 32)


@pytest.mark.parametrize(
    "code, kind, size, align",
    [
        (0, RelocKind.ABSOLUTE, 0, 1),
        (3, RelocKind.HIGHLOW, 4, 1),
        (10, RelocKind.DIR64, 8, 1),
    ],
)
def test_reloc_type_table(code, kind, size, align):
    for cfg in (IA32, X64, TargetConfig(allow_arm_mov32t=True)):
        info = reloc_type_info(code, cfg)
        assert (info.reloc_type, info.target_size, info.target_align) == (kind, size, align)
        assert info.supported


def test_arm_mov32t_only_when_enabled():
    enabled = reloc_type_info(5, TargetConfig(allow_arm_mov32t=True))
    assert (enabled.reloc_type, enabled.target_size, enabled.target_align) == (RelocKind.ARM_MOV32T, 8, 4)
    disabled = reloc_type_info(5, X64)
    assert disabled.reloc_type is RelocKind.UNSUPPORTED
    assert not disabled.supported


def test_ambiguous_types_never_supported():
    cfg = TargetConfig(allow_arm_mov32t=True, allow_riscv_relocs=True)
    for code in (1, 2, 4, 6, 7, 8, 9, 11, 12, 13, 14, 15):
        info = reloc_type_info(code, cfg)
        assert info.reloc_type is RelocKind.UNSUPPORTED
        assert info.target_size is INFINITE and info.target_align is INFINITE
    with pytest.raises(ValueError):
        reloc_type_info(16, cfg)


def test_machine_codes():
    assert machine_codes(MachineClass.IA32) == (0x014C,)
    assert 0x01C4 in machine_codes(MachineClass.ARM)
    assert machine_codes(MachineClass.RISCV64) == (0x5064,)


def test_from_settings_applies_overrides():
    cfg = TargetConfig.from_settings(machine_class=MachineClass.IA32, strict_section_layout=False)
    assert cfg.machine_class is MachineClass.IA32
    assert not cfg.strict_section_layout
    assert cfg.max_sections == 96
