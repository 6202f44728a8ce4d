"""
ImageLoader
Hardened loader for PE32/PE32+/TE executable images
Licensed under GNU General Public License v3.0
"""

import enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, model_validator

from image import __version__
from utils.generic import Violation


class Verdict(str, enum.Enum):
    ACCEPT = "ACCEPT"
    REJECT = "REJECT"
    ERROR = "ERROR"


class ViolationModel(BaseModel):
    code: str
    message: str
    offset: Optional[int] = None

    @classmethod
    def from_violation(cls, violation: Violation) -> "ViolationModel":
        return cls(**violation.as_dict())


class SectionModel(BaseModel):
    name: str
    va: int
    vs: int
    o: int
    rs: int
    characteristics: int


class Report(BaseModel):
    """JSON report written to stdout by every command. Field names are stable per tool_version"""

    model_config = ConfigDict(frozen=True)

    tool_version: str = __version__
    input_path: str
    verdict: Verdict
    violations: List[ViolationModel] = []
    context_summary: Optional[Dict[str, Any]] = None
    sections: Optional[List[SectionModel]] = None
    relocations: Optional[Dict[str, Any]] = None
    timings: Dict[str, float] = {}

    @model_validator(mode="after")
    def _verdict_matches_violations(self):
        if self.verdict is Verdict.ACCEPT and self.violations:
            raise ValueError("ACCEPT report carries violations")
        if self.verdict is Verdict.REJECT and not self.violations:
            raise ValueError("REJECT report carries no violation")
        return self
