# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""Study defaults, YAML overrides and command-line options of convstudy."""
from __future__ import annotations

import argparse
from pathlib import Path
from typing import Any, Optional, Sequence

import appdirs
import ruamel.yaml as ryaml

__all__ = [
    "OUT_DIR",
    "T_FINAL",
    "H_BASE",
    "MODELS",
    "ORDERS",
    "WORKERS",
    "CONSTANT_KEYS",
    "MARCH_KEYS",
    "MissingVersion",
    "UnsupportedVersion",
    "load_overrides",
    "options",
]

OUT_DIR = Path(appdirs.user_data_dir("coupled-stfem"))

T_FINAL = 0.5
H_BASE = 0.2
MODELS = ("henry", "langmuir")
ORDERS = (1, 2, 3, 4)
WORKERS = 1

SUPPORTED_VERSIONS = {1}
CONSTANT_KEYS = {"k_B", "k_S", "b_B", "b_S", "b_BS", "gamma_B", "gamma_S"}
MARCH_KEYS = {"newton_tol", "newton_maxiter", "strip_factor", "levelset_order", "n_samples"}


class MissingVersion(ValueError):
    pass


class UnsupportedVersion(NotImplementedError):
    pass


def _checked_section(data: dict[str, Any], name: str, allowed: set[str], yaml_file: Path) -> dict[str, Any]:
    section = data.get(name) or {}
    if not isinstance(section, dict):
        raise ValueError(f"'{name}' in {yaml_file} must be a mapping")
    if unknown := set(section) - allowed:
        raise ValueError(f"Unknown keys in '{name}' of {yaml_file}: {', '.join(sorted(unknown))}")
    return dict(section)


def load_overrides(yaml_file: Path) -> tuple[dict[str, float], dict[str, Any]]:
    """
    Reads a study configuration file

    :param yaml_file: YAML file with a 'version' marker and optional 'constants' and 'march' sections
    :return: (constant overrides, march overrides)
    """
    with yaml_file.open("rt") as fin:
        data: Optional[dict[str, Any]] = ryaml.YAML(typ="safe", pure=True).load(fin)
    if not data or (version := data.get("version")) is None:
        raise MissingVersion(f"'version' marker not found in {yaml_file}")
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersion(f"Version {version} in {yaml_file} is not supported")
    if unknown := set(data) - {"version", "constants", "march"}:
        raise ValueError(f"Unknown sections in {yaml_file}: {', '.join(sorted(map(str, unknown)))}")

    constants = {k: float(v) for k, v in _checked_section(data, "constants", CONSTANT_KEYS, yaml_file).items()}
    march = _checked_section(data, "march", MARCH_KEYS, yaml_file)
    for key in ("newton_maxiter", "levelset_order", "n_samples"):
        if key in march:
            march[key] = int(march[key])
    for key in ("newton_tol", "strip_factor"):
        if key in march:
            march[key] = float(march[key])
    return constants, march


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--model", choices=MODELS, default="henry", help="Surface-bulk coupling law")
    parser.add_argument("--k", type=int, choices=ORDERS, default=1, help="k = k_s = k_t = q_s = q_t")
    parser.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="Assemble element chunks in a fixed order",
    )
    parser.add_argument("--damped-newton", action="store_true", help="Halve Newton steps until the residual drops")
    parser.add_argument("--config", type=Path, default=None, help="YAML file overriding constants and solver knobs")
    parser.add_argument("--quiet", action="store_true", help="No progress markers")


def options(argv: Optional[Sequence[str]] = None):
    """
    Parse CLI options

    :return: A namespace containing the options
    """
    parser = argparse.ArgumentParser("convstudy", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    commands = parser.add_subparsers(dest="command", required=True)

    study = commands.add_parser(
        "study", help="Refinement study over i = 0..imax", formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    _add_common(study)
    study.add_argument("--imin", type=int, default=0, help="First refinement level")
    study.add_argument("--imax", type=int, default=3, help="Last refinement level (inclusive)")
    study.add_argument("--out", type=Path, default=OUT_DIR, help="Directory for the CSV and dump files")
    study.add_argument("--workers", type=int, default=WORKERS, help="Number of level-runner processes")
    study.add_argument("--dump", action="store_true", help="Write a msgpack solution dump per level")

    single = commands.add_parser(
        "single", help="One run at a single refinement level", formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    _add_common(single)
    single.add_argument("--i", type=int, default=0, help="Refinement level")

    verify = commands.add_parser(
        "verify",
        help="Quadrature, mapping and derivative checks",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    verify.add_argument("--quiet", action="store_true", help="Only the summary line")

    opts = parser.parse_args(argv)

    if opts.command == "study":
        if opts.imin < 0 or opts.imax < opts.imin:
            parser.error(f"Need 0 <= imin <= imax, got imin={opts.imin}, imax={opts.imax}")
        if opts.workers < 1:
            parser.error(f"--workers must be >= 1, got {opts.workers}")
    if opts.command == "single" and opts.i < 0:
        parser.error(f"--i must be >= 0, got {opts.i}")

    opts.constants, opts.march = {}, {}
    if getattr(opts, "config", None) is not None:
        opts.constants, opts.march = load_overrides(opts.config)

    return opts
