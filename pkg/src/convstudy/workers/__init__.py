# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Process pool for running refinement levels side by side.

A RunnerPool owns one job queue and one result queue shared by all its Runners. Jobs are plain
picklable values; the poison pill is the string "DIE".
"""
from __future__ import annotations

import multiprocessing as MP
import time
import warnings
from enum import IntEnum
from multiprocessing import Process
from typing import Any, ContextManager, Iterator, Protocol

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

__all__ = ["RunnerState", "Runner", "RunnerPool", "POISON"]

POISON = "DIE"
POLL_SECONDS = 0.2


class MPValueProtocol(Protocol):
    """Protocol implemented by multiprocessing.Value"""

    value: int

    def get_lock(self) -> ContextManager:
        ...


class RunnerState(IntEnum):
    # 0000_0dbr
    #       |++--> 00 = starting, 01 = idle, 10 = working
    #       +----> 1 = dead or dying
    STARTING = 0b0000_0000
    IDLE = 0b0000_0001
    WORKING = 0b0000_0010
    DEAD = 0b0000_0100
    DYING = 0b0000_0110


class Runner(Process):
    """
    A Process pulling jobs from `jobs` and pushing whatever `handle()` returns into `results`.

    Subclasses implement `handle()`; an exception escaping it ends only that job.
    """

    def __init__(self, jobs: MP.Queue, results: MP.Queue, **kwargs):
        super().__init__(daemon=True, **kwargs)
        self.jobs = jobs
        self.results = results
        self._state: MPValueProtocol = MP.Value("l", RunnerState.STARTING)

    @property
    def state(self) -> int:
        return self._state.value

    @state.setter
    def state(self, value: RunnerState):
        self._state.value = value

    def handle(self, job: Any) -> Any:
        raise NotImplementedError

    def failed(self, job: Any, exc: Exception) -> Any:
        """Result reported when handle() raised"""
        return ("ERR", job, f"{type(exc).__name__}: {exc}")

    def run(self) -> None:
        interrupted = False
        try:
            while True:
                self.state = RunnerState.IDLE
                try:
                    job = self.jobs.get()
                except KeyboardInterrupt:
                    # first Ctrl-C lets the current queue state settle, the second one ends us
                    if not interrupted:
                        interrupted = True
                        continue
                    job = POISON
                if job == POISON:
                    self.state = RunnerState.DYING
                    break
                self.state = RunnerState.WORKING
                try:
                    outcome = self.handle(job)
                except Exception as e:
                    outcome = self.failed(job, e)
                self.results.put(outcome)
        except KeyboardInterrupt:
            pass
        finally:
            self.state = RunnerState.DEAD


class RunnerPool:
    """
    Starts `size` instances of a Runner subclass and feeds them jobs.

    Use as a context manager; leaving the block drains the queues and joins every runner.
    """

    def __init__(self, size: int, runner_class: type[Runner], **runner_kwargs):
        if size < 1:
            raise ValueError(f"Pool size must be >= 1, got {size}")
        self.size = size
        self.runner_class = runner_class
        self.runner_kwargs = runner_kwargs
        self.jobs: MP.Queue = MP.Queue()
        self.results: MP.Queue = MP.Queue()
        self._runners: list[Runner] = []
        self._outstanding = 0
        self._closed = False

    def __enter__(self) -> Self:
        self.start()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close(drain=exc_type is not None)

    @property
    def runners(self) -> list[Runner]:
        return list(self._runners)

    @property
    def idle_count(self) -> int:
        return sum(1 for r in self._runners if r.state == RunnerState.IDLE)

    @property
    def alive_count(self) -> int:
        return sum(1 for r in self._runners if r.is_alive())

    @property
    def outstanding(self) -> int:
        """Submitted jobs whose results have not been collected yet"""
        return self._outstanding

    def start(self, timeout: float = 60.0) -> None:
        """Starts the runners and waits until all of them are idle"""
        for _ in range(self.size):
            runner = self.runner_class(self.jobs, self.results, **self.runner_kwargs)
            runner.start()
            self._runners.append(runner)
        deadline = time.monotonic() + timeout
        while self.idle_count < self.size:
            if any(r.exitcode is not None for r in self._runners):
                raise RuntimeError("A runner died while starting")
            if time.monotonic() > deadline:
                raise TimeoutError(f"Only {self.idle_count} of {self.size} runners became idle")
            time.sleep(POLL_SECONDS)

    def submit(self, job: Any) -> None:
        if self._closed:
            raise RuntimeError("Pool already closed")
        self.jobs.put(job)
        self._outstanding += 1

    def collect(self) -> Iterator[Any]:
        """Yields results in completion order until every submitted job is accounted for"""
        while self._outstanding > 0:
            outcome = self.results.get()
            self._outstanding -= 1
            yield outcome

    def close(self, drain: bool = False) -> None:
        """
        Sends one poison pill per live runner and joins them.

        :param drain: Discard jobs still waiting in the queue instead of letting the runners finish them
        """
        if self._closed:
            return
        self._closed = True
        if self._outstanding and not drain:
            warnings.warn(f"Closing pool with {self._outstanding} uncollected results", RuntimeWarning)
        if drain:
            while not self.jobs.empty():
                _ = self.jobs.get()
        for r in self._runners:
            if r.is_alive():
                self.jobs.put(POISON)
        for r in self._runners:
            r.join()
        for q in (self.jobs, self.results):
            while not q.empty():
                _ = q.get()
            q.close()
