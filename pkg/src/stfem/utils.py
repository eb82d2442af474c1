# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
from __future__ import annotations

import os
import shutil
from pathlib import Path
from typing import Optional

THREADS_ENV = "STFEM_THREADS"


def backup_path(the_file: Path, n: int) -> Path:
    """results.csv -> results.prev{n}.csv"""
    return the_file.with_name(f"{the_file.stem}.prev{n}{the_file.suffix}")


def make_backup(the_file: Path, levels: int = 2) -> Optional[Path]:
    """
    Rotates the_file into .prev1 (newest) .. .prev{levels} (oldest), dropping anything older.

    :return: Path of the fresh .prev1 copy, None if the_file does not exist
    """
    if levels < 1 or not the_file.exists():
        return None
    for n in range(levels, 1, -1):
        older = backup_path(the_file, n - 1)
        if older.exists():
            older.replace(backup_path(the_file, n))
    newest = backup_path(the_file, 1)
    shutil.copy2(the_file, newest)
    return newest


def threads_from_env(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


class QuietablePrint:
    def __init__(self, quiet: bool = False):
        self.quiet = quiet

    def __call__(self, *args, **kwargs):
        if not self.quiet:
            kwargs.setdefault("flush", True)
            print(*args, **kwargs)

    def marker(self, char: str):
        """Single progress character, no newline"""
        self(char, end="")
