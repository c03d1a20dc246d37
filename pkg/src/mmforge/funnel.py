"""Stage accounting: every record entering a stage is kept or rejected.

Each pipeline stage tracks its unit counts through a Funnel so reports can
be audited: input_count == output_count + sum(rejections) always holds.
Side quantities that are not in the stage's unit (for example images dropped
inside a kept document) go in the free-form ``info`` map instead, never into
the rejection ledger.
"""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, model_validator


class FunnelReport(BaseModel):
    """Immutable summary of one stage run."""

    model_config = ConfigDict(extra="forbid")

    stage: str
    input_count: int = Field(ge=0)
    output_count: int = Field(ge=0)
    rejections: dict[str, int] = Field(default_factory=dict)
    info: dict[str, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _conserved(self) -> "FunnelReport":
        if any(v < 0 for v in self.rejections.values()):
            raise ValueError("rejection counts must be non-negative")
        total = self.output_count + sum(self.rejections.values())
        if total != self.input_count:
            raise ValueError(
                f"stage {self.stage!r}: input {self.input_count} != "
                f"output {self.output_count} + rejects {sum(self.rejections.values())}"
            )
        return self


class Funnel:
    """Mutable counter set for a running stage; freeze with report()."""

    def __init__(self, stage: str):
        self.stage = stage
        self.input_count = 0
        self.output_count = 0
        self.rejections: dict[str, int] = {}
        self.info: dict[str, int] = {}

    def reject(self, reason: str, n: int = 1) -> None:
        self.rejections[reason] = self.rejections.get(reason, 0) + n

    def note(self, key: str, n: int = 1) -> None:
        self.info[key] = self.info.get(key, 0) + n

    def report(self) -> FunnelReport:
        """Validate conservation and return the frozen report."""
        return FunnelReport(
            stage=self.stage,
            input_count=self.input_count,
            output_count=self.output_count,
            rejections=dict(self.rejections),
            info=dict(self.info),
        )

    def write(self, path: str | Path) -> FunnelReport:
        rep = self.report()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(rep.model_dump(), fh, ensure_ascii=False, indent=2, sort_keys=True)
            fh.write("\n")
        return rep


def load_report(path: str | Path) -> FunnelReport:
    with open(path, "r", encoding="utf-8") as fh:
        return FunnelReport.model_validate(json.load(fh))
