"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

from image.format_model import TargetConfig
from image.hashing import HashPlan, authenticode_plan
from image.headers import ImageContext, ImageFormat, RawFile, parse_and_verify
from image.loader import LoadedImage, LoadOptions, load
from image.relocation import RelocationWalk, verify_reloc_dir
from image.sections import SectionTable, read_section_table, verify_sections
from utils.generic import (
    CertTableMalformed,
    HashOverlapRefused,
    ImageLoaderError,
    VerifyReport,
)

logger = logging.getLogger(__name__)


@dataclass
class Verification:
    """Everything a full verification run produced, up to the first failing stage"""

    report: VerifyReport = field(default_factory=VerifyReport)
    ctx: Optional[ImageContext] = None
    table: Optional[SectionTable] = None
    img: Optional[LoadedImage] = None
    walk: Optional[RelocationWalk] = None
    plan: Optional[HashPlan] = None
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return self.report.accepted


class _Stage:
    def __init__(self, verification: Verification, name: str):
        self._verification = verification
        self._name = name
        self._start = None

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self._verification.timings[self._name] = time.perf_counter() - self._start
        return False


def verify_image(
    raw: RawFile,
    cfg: Optional[TargetConfig] = None,
    opts: Optional[LoadOptions] = None,
    max_load_size: Optional[int] = None,
    authenticode: bool = True,
) -> Verification:
    """
    Runs header, section, relocation directory and hash layout verification in order
    :param raw: raw file
    :param cfg: target configuration, defaults to settings.ini
    :param opts: LoadOptions for the scratch load the relocation directory is read from
    :param max_load_size: skip loading (and everything after it) for larger images
    :param authenticode: build the Authenticode plan as the last stage
    :return: Verification
    """
    cfg = cfg if cfg is not None else TargetConfig.from_settings()
    result = Verification()

    with _Stage(result, "headers"):
        parsed = parse_and_verify(raw, cfg)
    if isinstance(parsed, VerifyReport):
        result.report = parsed
        return result
    ctx = result.ctx = parsed

    with _Stage(result, "sections"):
        result.table = read_section_table(raw, ctx)
        result.report = verify_sections(ctx, result.table, cfg)
    if not result.accepted:
        return result

    if max_load_size is not None and ctx.is_ > max_load_size:
        logger.info("Image of 0x%X bytes not loaded", ctx.is_)
        return result

    with _Stage(result, "load"):
        try:
            result.img = load(raw, ctx, result.table, bytearray(ctx.is_), opts, cfg)
        except ImageLoaderError as e:
            result.report.violations.append(e.violation)
            return result

    with _Stage(result, "relocations"):
        walk = verify_reloc_dir(result.img, cfg)
    if isinstance(walk, VerifyReport):
        result.report.violations.extend(walk.violations)
        return result
    result.walk = walk

    if authenticode and ctx.format is not ImageFormat.TE:
        with _Stage(result, "hash_plan"):
            try:
                result.plan = authenticode_plan(raw, ctx, result.table, cfg)
            except (HashOverlapRefused, CertTableMalformed) as e:
                result.report.violations.append(e.violation)
    return result
