# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
from __future__ import annotations

from typing import Literal, Union

from convstudy import study
from convstudy.study import ConvergenceRow, StudyConfig
from convstudy.workers import Runner
from stfem.utils import QuietablePrint

__all__ = ["LevelRunner", "LevelResult"]

LevelResult = Union[tuple[Literal["OK"], int, ConvergenceRow], tuple[Literal["ERR"], int, str]]


class LevelRunner(Runner):
    """
    Marches whole refinement levels of a study.

    Jobs are level indices i; results are ("OK", i, row) or ("ERR", i, message).
    """

    def __init__(self, jobs, results, *, config: StudyConfig, **kwargs):
        super().__init__(jobs, results, **kwargs)
        self.config = config

    def handle(self, job: int) -> LevelResult:
        if not isinstance(job, int):
            raise TypeError(f"Level index expected, got {job!r}")
        row, _ = study.run_level(self.config, job, echo=QuietablePrint(quiet=True))
        return "OK", job, row
