# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""Entry points of the convstudy subcommands."""
from __future__ import annotations

import datetime
import sys
import time
from typing import Optional, Sequence

from convstudy.config import options
from convstudy.manufactured import Constants
from convstudy.study import StudyConfig, eoc, run_convergence_study, run_level, schedule
from convstudy.verify import run_all
from stfem.assembly import Model
from stfem.solver import NewtonDiverged
from stfem.utils import QuietablePrint


def _study_config(opts, **extra) -> StudyConfig:
    return StudyConfig(
        model=Model(opts.model),
        k=opts.k,
        deterministic=opts.deterministic,
        damped=opts.damped_newton,
        constants=Constants().replace(**opts.constants),
        march=dict(opts.march),
        **extra,
    )


def study_main(opts, echo: QuietablePrint) -> int:
    config = _study_config(
        opts, imin=opts.imin, imax=opts.imax, out_dir=opts.out, workers=opts.workers, dump=opts.dump
    )
    echo(f"{config.model.value} study, k={config.k}, levels {config.imin}..{config.imax}")
    rows = run_convergence_study(config, echo)
    diverged = [r.i for r in rows if r.diverged]
    if diverged:
        echo(f"Newton diverged on levels {diverged}")
        return 2
    bulk = eoc([r.err_bulk for r in rows])
    if bulk and bulk[-1] is not None:
        echo(f"Last bulk EOC {bulk[-1]:.2f}")
    return 0


def single_main(opts, echo: QuietablePrint) -> int:
    config = _study_config(opts, imin=opts.i, imax=opts.i)
    h, dt = schedule(opts.i)
    echo(f"{config.model.value}, k={config.k}, i={opts.i} (h={h:g}, dt={dt:g}): ", end="")
    row, _ = run_level(config, opts.i, echo=echo)
    print()
    if row.diverged:
        print(f"Newton diverged after {row.max_newton} iterations ({row.runtime_s:,.2f} seconds)")
        return 2
    print(f"err_bulk   = {row.err_bulk:.6e}")
    print(f"err_surf   = {row.err_surf:.6e}")
    print(f"max_newton = {row.max_newton}")
    print(f"n_dofs     = {row.n_dofs}")
    print(f"runtime    = {row.runtime_s:,.2f} seconds")
    return 0


def verify_main(opts, echo: QuietablePrint) -> int:
    results = run_all(echo)
    failed = [r.name for r in results if not r.passed]
    summary = f"{len(results) - len(failed)}/{len(results)} checks passed"
    if failed:
        summary += f", failed: {', '.join(failed)}"
    print(summary)
    return 1 if failed else 0


COMMANDS = {"study": study_main, "single": single_main, "verify": verify_main}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Entry point of `python -m convstudy`

    :return: 0 on success, 2 if Newton diverged, 1 on any other error
    """
    opts = options(argv)
    echo = QuietablePrint(quiet=opts.quiet)
    global_start = time.monotonic()
    try:
        code = COMMANDS[opts.command](opts, echo)
    except NewtonDiverged as e:
        print(f"Newton diverged: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    echo(f"Done in {time.monotonic() - global_start:,.2f} seconds at {datetime.datetime.now().strftime('%H:%M')}")
    return code


if __name__ == "__main__":
    sys.exit(cli_main())
