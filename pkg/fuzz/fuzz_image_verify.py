"""Fuzz test runner for image verification.

Every input must either be rejected with a report or verify, load and relocate without
raising. See https://github.com/google/atheris for installing the fuzzing engine, it is
not part of requirements.txt.
"""

import sys

import atheris

with atheris.instrument_imports():
    from image.format_model import TargetConfig
    from image.headers import RawFile
    from image.pipeline import verify_image
    from image.relocation import RuntimeBookkeeping, RuntimePolicy, relocate, runtime_relocate

MAX_LOAD_SIZE = 16 * 2 ** 20
CONFIG = TargetConfig(check_machine=False, allow_arm_mov32t=True, refuse_hash_overlap=False)


def TestVerifyImage(data):
    verification = verify_image(RawFile(bytes(data)), CONFIG, max_load_size=MAX_LOAD_SIZE)
    if not verification.accepted or verification.walk is None:
        return
    img = verification.img
    if img.ctx.relocs_stripped:
        return
    book = RuntimeBookkeeping()
    relocate(img, (img.base + 0x10000) % 2 ** 64, verification.walk, book, check_invariants=True)
    runtime_relocate(img, img.ctx.preferred_base, verification.walk, book, RuntimePolicy.SKIP_CHANGED)


if __name__ == "__main__":
    atheris.Setup(sys.argv, TestVerifyImage)
    atheris.Fuzz()
