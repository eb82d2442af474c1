# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, TypedDict

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import msgpack
import numpy as np

from stfem.solver import SlabSolution

__all__ = ["SolutionDump", "dump_name"]


class SolutionDumpSerialized(TypedDict):
    __meta: dict[str, object]
    __coefficients: list[float]
    __bulk: tuple[list[list[float]], list[float]]
    __surface: tuple[list[list[float]], list[float]]


def dump_name(model: str, k: int, i: int) -> str:
    return f"solution_{model}_k{k}_i{i}.msgp"


@dataclass
class SolutionDump:
    """
    Final slab of one refinement level: coefficients on its coupled space plus the spatial nodes
    of both components with the t_N trace values.

    Stored with MessagePack so that the file does not depend on where the classes live.
    """

    model: str
    k: int
    i: int
    t_final: float
    err_bulk: Optional[float] = None
    err_surf: Optional[float] = None
    coefficients: np.ndarray = field(default_factory=lambda: np.empty(0))
    bulk_nodes: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    bulk_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    surface_nodes: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    surface_values: np.ndarray = field(default_factory=lambda: np.empty(0))

    @classmethod
    def from_solution(
        cls,
        solution: SlabSolution,
        model: str,
        k: int,
        i: int,
        err_bulk: Optional[float] = None,
        err_surf: Optional[float] = None,
    ) -> Self:
        space = solution.context.space
        bulk_values, surface_values = solution.end_values()
        return cls(
            model=model,
            k=k,
            i=i,
            t_final=solution.context.interval[1],
            err_bulk=err_bulk,
            err_surf=err_surf,
            coefficients=np.asarray(solution.coefficients, dtype=float),
            bulk_nodes=space.bulk.node_coords,
            bulk_values=bulk_values,
            surface_nodes=space.surf.node_coords,
            surface_values=surface_values,
        )

    def write_to_stream(self, stream: BinaryIO) -> None:
        encoded: SolutionDumpSerialized = {
            "__meta": {
                "model": self.model,
                "k": self.k,
                "i": self.i,
                "t_final": self.t_final,
                "err_bulk": self.err_bulk,
                "err_surf": self.err_surf,
            },
            "__coefficients": self.coefficients.tolist(),
            "__bulk": (self.bulk_nodes.tolist(), self.bulk_values.tolist()),
            "__surface": (self.surface_nodes.tolist(), self.surface_values.tolist()),
        }
        msgpack.pack(encoded, stream)

    def write_to_path(self, path: Path, with_temp: bool = True) -> None:
        if not with_temp:
            with path.open("wb") as fout:
                self.write_to_stream(fout)
        else:
            temp = path.with_suffix(".temp" + path.suffix)
            with temp.open("wb") as fout:
                self.write_to_stream(fout)
            temp.replace(path)

    @classmethod
    def new_from_stream(cls, stream: BinaryIO) -> Self:
        encoded: SolutionDumpSerialized = msgpack.unpack(stream)
        meta = encoded["__meta"]
        bulk_nodes, bulk_values = encoded["__bulk"]
        surface_nodes, surface_values = encoded["__surface"]
        return cls(
            model=meta["model"],
            k=meta["k"],
            i=meta["i"],
            t_final=meta["t_final"],
            err_bulk=meta["err_bulk"],
            err_surf=meta["err_surf"],
            coefficients=np.asarray(encoded["__coefficients"], dtype=float),
            bulk_nodes=np.asarray(bulk_nodes, dtype=float).reshape(-1, 2),
            bulk_values=np.asarray(bulk_values, dtype=float),
            surface_nodes=np.asarray(surface_nodes, dtype=float).reshape(-1, 2),
            surface_values=np.asarray(surface_values, dtype=float),
        )

    @classmethod
    def new_from_path(cls, path: Path, missing_ok: bool = False) -> Optional[Self]:
        """:return: the dump, or None if missing_ok and the file does not exist"""
        if not path.exists():
            if not missing_ok:
                raise FileNotFoundError(f"{path} not found!")
            return None
        with path.open("rb") as fin:
            return cls.new_from_stream(fin)
