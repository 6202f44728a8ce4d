"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import logging
import sys

import click

from image import __version__
from image.format_model import MachineClass, TargetConfig
from image.hashing import linear_plan
from image.headers import ImageFormat, RawFile
from image.loader import LoadOptions, discard_sections
from image.pipeline import Verification, verify_image
from image.relocation import relocate, walk_summary
from image.report import Report, SectionModel, Verdict, ViolationModel
from utils.generic import ImageLoaderError, TeNotHashable

logger = logging.getLogger("ImageLoader")

EXIT_ACCEPT = 0
EXIT_REJECT = 1
EXIT_ERROR = 2


class AddressType(click.ParamType):
    """Integer in any Python literal base, e.g. 0x140000000"""

    name = "address"

    def convert(self, value, param, ctx):
        if isinstance(value, int):
            return value
        try:
            return int(value, 0)
        except ValueError:
            self.fail(f"{value!r} is not an address", param, ctx)


def target_options(function):
    """Options every command shares to select the TargetConfig"""
    function = click.option(
        "--refuse-overlap/--allow-overlap",
        "refuse_overlap",
        default=None,
        help="Refuse Authenticode plans for overlapping raw section data",
    )(function)
    function = click.option(
        "--arm-mov32t", "arm_mov32t", is_flag=True, help="Accept ARM MOVW/MOVT relocations"
    )(function)
    function = click.option(
        "--arch",
        type=click.Choice([member.value for member in MachineClass], case_sensitive=False),
        default=None,
        help="Architecture the image is validated for (default from settings.ini)",
    )(function)
    function = click.option(
        "--strict/--relaxed", "strict", default=None, help="Section layout strictness"
    )(function)
    return function


def build_config(strict, arch, arm_mov32t, refuse_overlap) -> TargetConfig:
    overrides = {}
    if strict is not None:
        overrides["strict_section_layout"] = strict
    if arch is not None:
        overrides["machine_class"] = MachineClass(arch.upper())
    if arm_mov32t:
        overrides["allow_arm_mov32t"] = True
    if refuse_overlap is not None:
        overrides["refuse_hash_overlap"] = refuse_overlap
    return TargetConfig.from_settings(**overrides)


def read_input(path) -> RawFile:
    try:
        return RawFile.from_path(path)
    except OSError as e:
        logger.error("Cannot read %s: %s", path, e)
        emit(Report(input_path=str(path), verdict=Verdict.ERROR,
                    violations=[ViolationModel(code="IOError", message=str(e))]))
        sys.exit(EXIT_ERROR)


def build_report(path, verification: Verification, details: bool = False) -> Report:
    verdict = Verdict.ACCEPT if verification.accepted else Verdict.REJECT
    report = dict(
        input_path=str(path),
        verdict=verdict,
        violations=[ViolationModel.from_violation(v) for v in verification.report.violations],
        timings=verification.timings,
    )
    if verification.accepted and verification.ctx is not None:
        report["context_summary"] = verification.ctx.summary()
        if details:
            report["sections"] = [SectionModel(**s.as_dict()) for s in verification.table]
            if verification.walk is not None:
                report["relocations"] = walk_summary(verification.walk).as_dict()
    return Report(**report)


def emit(report: Report):
    click.echo(report.model_dump_json())


def finish(report: Report):
    emit(report)
    sys.exit(EXIT_ACCEPT if report.verdict is Verdict.ACCEPT else EXIT_REJECT)


@click.group()
@click.version_option(version=__version__)
@click.option("-v", "--verbose", count=True, help="Increase verbosity (-v info, -vv debug)")
def cli(verbose):
    """Verify, load and hash PE32/PE32+/TE images"""
    logging.basicConfig(
        stream=sys.stderr,
        level=max(logging.WARNING - 10 * verbose, logging.DEBUG),
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.argument("path", type=click.Path())
@target_options
def validate(path, strict, arch, arm_mov32t, refuse_overlap):
    """Verify headers, sections, relocations and hash layout of PATH"""
    cfg = build_config(strict, arch, arm_mov32t, refuse_overlap)
    raw = read_input(path)
    finish(build_report(path, verify_image(raw, cfg)))


@cli.command()
@click.argument("path", type=click.Path())
@target_options
def info(path, strict, arch, arm_mov32t, refuse_overlap):
    """Report the verified context, Section Table and relocation summary of PATH"""
    cfg = build_config(strict, arch, arm_mov32t, refuse_overlap)
    raw = read_input(path)
    finish(build_report(path, verify_image(raw, cfg), details=True))


@cli.command()
@click.argument("path", type=click.Path())
@click.option("--base", type=AddressType(), default=None, help="Load address (default: preferred base)")
@click.option("--out", "out_path", type=click.Path(), required=True, help="File receiving the loaded image")
@click.option("--load-headers/--no-load-headers", "load_headers", default=None)
@click.option("--discard", is_flag=True, help="Zero discardable sections after loading")
@target_options
def load(path, base, out_path, load_headers, discard, strict, arch, arm_mov32t, refuse_overlap):
    """Load PATH, relocate it to --base and write the image to --out"""
    cfg = build_config(strict, arch, arm_mov32t, refuse_overlap)
    raw = read_input(path)
    verification = verify_image(raw, cfg, LoadOptions(load_headers=load_headers))
    report = build_report(path, verification)
    if not verification.accepted:
        finish(report)

    img = verification.img
    try:
        relocate(img, img.ctx.preferred_base if base is None else base, verification.walk)
    except ImageLoaderError as e:
        finish(Report(input_path=str(path), verdict=Verdict.REJECT,
                      violations=[ViolationModel.from_violation(e.violation)]))
    if discard:
        discard_sections(img)
    try:
        with open(out_path, "wb") as out_file:
            out_file.write(img.snapshot())
    except OSError as e:
        logger.error("Cannot write %s: %s", out_path, e)
        sys.exit(EXIT_ERROR)
    logger.info("Wrote 0x%X bytes based at 0x%X to %s", img.ctx.is_, img.base, out_path)
    finish(report)


@cli.command("hash-plan")
@click.argument("path", type=click.Path())
@click.option("--mode", type=click.Choice(["authenticode", "linear"]), default="authenticode")
@target_options
def hash_plan(path, mode, strict, arch, arm_mov32t, refuse_overlap):
    """Print the hash input ranges of PATH, one per line"""
    cfg = build_config(strict, arch, arm_mov32t, refuse_overlap)
    raw = read_input(path)
    verification = verify_image(raw, cfg, authenticode=mode == "authenticode")
    if not verification.accepted:
        for violation in verification.report.violations:
            click.echo(f"{violation.code.value}: {violation.message}", err=True)
        sys.exit(EXIT_REJECT)
    try:
        if mode == "linear":
            plan = linear_plan(raw, verification.ctx, verification.table)
        elif verification.ctx.format is ImageFormat.TE:
            raise TeNotHashable("TE images have no Authenticode header layout")
        else:
            plan = verification.plan
    except ImageLoaderError as e:
        click.echo(f"{e.code.value}: {e.message}", err=True)
        sys.exit(EXIT_REJECT)
    for line in plan.lines():
        click.echo(line)


if __name__ == "__main__":
    cli()
