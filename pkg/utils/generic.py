"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""
import enum
from dataclasses import dataclass, field
from typing import List, Optional


class ViolationCode(str, enum.Enum):
    """Every reason a raw file can be rejected or an operation can fail"""

    # headers
    BadMagic = "BadMagic"
    HeaderOutOfBounds = "HeaderOutOfBounds"
    MisalignedHeaderOffset = "MisalignedHeaderOffset"
    BadOptionalMagic = "BadOptionalMagic"
    SizeOfHeadersInvalid = "SizeOfHeadersInvalid"
    SectionCountZero = "SectionCountZero"
    SectionAlignmentNotPow2 = "SectionAlignmentNotPow2"
    DosStubBeforeTe = "DosStubBeforeTe"
    ArithmeticOverflow = "ArithmeticOverflow"
    TeStrippedSizeInvalid = "TeStrippedSizeInvalid"
    MachineMismatch = "MachineMismatch"
    SizeLimitExceeded = "SizeLimitExceeded"
    RelocsStrippedInconsistent = "RelocsStrippedInconsistent"
    UnknownFormat = "UnknownFormat"

    # sections
    SectionNotContiguous = "SectionNotContiguous"
    SectionUnsorted = "SectionUnsorted"
    SectionOverlapsImage = "SectionOverlapsImage"
    SizeOfImageTooSmall = "SizeOfImageTooSmall"
    SectionRawOutOfFile = "SectionRawOutOfFile"
    SectionRawInHeaders = "SectionRawInHeaders"

    # relocation directory
    RelocDirMisaligned = "RelocDirMisaligned"
    RelocDirOutOfImage = "RelocDirOutOfImage"
    BlockSizeInvalid = "BlockSizeInvalid"
    UnsupportedRelocType = "UnsupportedRelocType"
    TargetOutOfImage = "TargetOutOfImage"
    TargetMisaligned = "TargetMisaligned"
    TargetOverlapsRelocDir = "TargetOverlapsRelocDir"

    # operations
    DestinationTooSmall = "DestinationTooSmall"
    HeaderLoadConflictsWithSection = "HeaderLoadConflictsWithSection"
    TeHeaderNotLoadable = "TeHeaderNotLoadable"
    OutOfBounds = "OutOfBounds"
    Misaligned = "Misaligned"
    WriteOverlap = "WriteOverlap"
    RelocsStripped = "RelocsStripped"
    RuntimeValueMismatch = "RuntimeValueMismatch"
    BookkeepingInconsistent = "BookkeepingInconsistent"
    RelocDirModified = "RelocDirModified"
    HashOverlapRefused = "HashOverlapRefused"
    TeNotHashable = "TeNotHashable"
    CertTableMalformed = "CertTableMalformed"


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    message: str
    offset: Optional[int] = None

    def as_dict(self) -> dict:
        return {"code": self.code.value, "message": self.message, "offset": self.offset}


@dataclass
class VerifyReport:
    """
    Result of a verification pass
    accepted is True if and only if no violation was found
    """

    violations: List[Violation] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return not self.violations

    def add(self, code: ViolationCode, message: str, offset: Optional[int] = None):
        self.violations.append(Violation(code, message, offset))

    def codes(self) -> List[ViolationCode]:
        return [violation.code for violation in self.violations]

    def __bool__(self):
        return self.accepted


class StructureRejected(Exception):
    """Stops a verification pass at the first structural violation, turned into a VerifyReport entry by the pass"""

    def __init__(self, code: ViolationCode, message: str, offset: Optional[int] = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.offset = offset


class ImageLoaderError(Exception):
    """Base exception for every failing loader operation. Carries the violation code reported to callers"""

    code = None

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.offset = offset

    @property
    def violation(self) -> Violation:
        return Violation(self.code, self.message, self.offset)


class UnknownFormat(ImageLoaderError):
    """Raised when none of the TE, MS-DOS or PE magics match"""

    code = ViolationCode.UnknownFormat


class ArithmeticOverflow(ImageLoaderError):
    """Raised when an offset or size computation leaves the unsigned 64-bit domain"""

    code = ViolationCode.ArithmeticOverflow


class TeStrippedSizeInvalid(ImageLoaderError):
    """Raised when TE stripped-size facts are requested for an image that has none"""

    code = ViolationCode.TeStrippedSizeInvalid


class DestinationTooSmall(ImageLoaderError):
    """Raised when the caller-provided destination does not match SizeOfImage"""

    code = ViolationCode.DestinationTooSmall


class HeaderLoadConflictsWithSection(ImageLoaderError):
    """Raised when header loading is requested while the first section starts at image offset 0"""

    code = ViolationCode.HeaderLoadConflictsWithSection


class TeHeaderNotLoadable(ImageLoaderError):
    """Raised when header loading is requested for a TE image"""

    code = ViolationCode.TeHeaderNotLoadable


class OutOfBounds(ImageLoaderError):
    """Raised when an image access leaves [0, SizeOfImage)"""

    code = ViolationCode.OutOfBounds


class Misaligned(ImageLoaderError):
    """Raised when an image access offset does not satisfy the requested alignment"""

    code = ViolationCode.Misaligned


class WriteOverlapError(ImageLoaderError):
    """Raised by coverage tracking when a destination byte is written twice during load"""

    code = ViolationCode.WriteOverlap


class UnsupportedRelocType(ImageLoaderError):
    """Raised when a Base Relocation of an unsupported type is to be applied"""

    code = ViolationCode.UnsupportedRelocType


class RelocsStripped(ImageLoaderError):
    """Raised when an image without relocation information is moved away from its preferred base"""

    code = ViolationCode.RelocsStripped


class RuntimeValueMismatch(ImageLoaderError):
    """Raised by STRICT runtime relocation when a target no longer holds its bookkept value"""

    code = ViolationCode.RuntimeValueMismatch


class BookkeepingInconsistent(ImageLoaderError):
    """Raised when runtime bookkeeping does not describe the given relocation walk"""

    code = ViolationCode.BookkeepingInconsistent


class RelocDirModified(ImageLoaderError):
    """Raised when relocating changed the bytes of the Relocation Directory itself"""

    code = ViolationCode.RelocDirModified


class HashOverlapRefused(ImageLoaderError):
    """Raised when Authenticode hashing is refused because raw section data overlaps"""

    code = ViolationCode.HashOverlapRefused


class TeNotHashable(ImageLoaderError):
    """Raised when an Authenticode plan is requested for a TE image"""

    code = ViolationCode.TeNotHashable


class CertTableMalformed(ImageLoaderError):
    """Raised when the certificate table is not trailing or lies outside the file"""

    code = ViolationCode.CertTableMalformed
