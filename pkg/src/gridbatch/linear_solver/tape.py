"""Element-major value storage shared by every batched kernel."""
from __future__ import annotations

import numpy as np


class BatchTape:
    """Values of ``n_slots`` elements for ``n_tasks`` tasks.

    Storage is element-major: the value of slot ``s`` for task ``t`` sits at
    flat offset ``s * n_tasks + t``, so one element of all tasks is contiguous.
    Kernels consume the mini-batch layout ``(n_minibatches, n_slots, width)``
    produced by :meth:`minibatches`.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        data = np.asarray(data)
        if data.ndim != 2:
            raise ValueError("tape data must be 2-D (n_slots, n_tasks)")
        self.data = np.ascontiguousarray(data)

    @classmethod
    def zeros(cls, n_slots: int, n_tasks: int, dtype=np.float64) -> "BatchTape":
        return cls(np.zeros((n_slots, n_tasks), dtype=dtype))

    @classmethod
    def from_task_major(cls, values: np.ndarray) -> "BatchTape":
        """``values[t, s]`` -> tape."""
        return cls(np.asarray(values).T)

    @property
    def n_slots(self) -> int:
        return self.data.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.data.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def value(self, slot: int, task: int):
        return self.flat[slot * self.n_tasks + task]

    def task(self, t: int) -> np.ndarray:
        return self.data[:, t].copy()

    def to_task_major(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.T)

    def minibatches(self, width: int) -> np.ndarray:
        """Transpose into ``(n_mb, n_slots, width)``; the tail is padded with the last task."""
        return to_minibatches(self.to_task_major(), width)

    @classmethod
    def from_minibatches(cls, blocks: np.ndarray, n_tasks: int) -> "BatchTape":
        return cls.from_task_major(from_minibatches(blocks, n_tasks))

    def __repr__(self) -> str:
        return f"BatchTape(n_slots={self.n_slots}, n_tasks={self.n_tasks}, dtype={self.data.dtype})"


def to_minibatches(task_major: np.ndarray, width: int) -> np.ndarray:
    """``(n_tasks, n_slots)`` -> ``(n_mb, n_slots, width)``, padding with the last task."""
    if width < 1:
        raise ValueError("mini-batch width must be >= 1")
    task_major = np.asarray(task_major)
    n_tasks = task_major.shape[0]
    n_mb = -(-n_tasks // width)
    pad = n_mb * width - n_tasks
    if pad:
        task_major = np.concatenate([task_major, np.repeat(task_major[-1:], pad, axis=0)])
    blocks = task_major.reshape((n_mb, width) + task_major.shape[1:])
    return np.ascontiguousarray(np.swapaxes(blocks, 1, 2))


def from_minibatches(blocks: np.ndarray, n_tasks: int) -> np.ndarray:
    """Inverse of :func:`to_minibatches`; returns ``(n_tasks, n_slots)``."""
    n_mb, n_slots, width = blocks.shape[:3]
    task_major = np.swapaxes(blocks, 1, 2).reshape((n_mb * width, n_slots) + blocks.shape[3:])
    return np.ascontiguousarray(task_major[:n_tasks])
