"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import numpy as np
import pytest

from image.format_model import MachineClass, TargetConfig
from image.headers import ImageContext, parse_and_verify
from image.loader import LoadOptions, load
from image.relocation import RelocationWalk, verify_reloc_dir
from image.sections import read_section_table, verify_sections
from tests.support.builder import FixtureSpec, build_fixture
from tests.support.mutations import config_for


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def x64_cfg():
    return TargetConfig(machine_class=MachineClass.X64)


@pytest.fixture
def ia32_cfg():
    return TargetConfig(machine_class=MachineClass.IA32)


@pytest.fixture
def relaxed_cfg():
    return TargetConfig(machine_class=MachineClass.X64, strict_section_layout=False)


class Loaded:
    """Every intermediate product of verifying and loading one fixture"""

    def __init__(self, spec: FixtureSpec, cfg: TargetConfig = None, opts: LoadOptions = None):
        self.spec = spec
        self.cfg = cfg if cfg is not None else config_for(spec)
        self.raw = build_fixture(spec)
        self.ctx = parse_and_verify(self.raw, self.cfg)
        assert isinstance(self.ctx, ImageContext), self.ctx
        self.table = read_section_table(self.raw, self.ctx)
        assert verify_sections(self.ctx, self.table, self.cfg).accepted
        self.img = load(self.raw, self.ctx, self.table, bytearray(self.ctx.is_), opts, self.cfg)
        self.walk = verify_reloc_dir(self.img, self.cfg)
        assert isinstance(self.walk, RelocationWalk), self.walk


@pytest.fixture
def loaded():
    """Factory: loaded(spec, cfg=None, opts=None) -> Loaded"""
    return Loaded
