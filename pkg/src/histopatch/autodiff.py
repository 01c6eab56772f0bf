"""Reverse-mode gradient tape.

Primitive operations append one record per execution; replaying the records in
reverse order accumulates gradients into every input tensor, so a parameter
used twice receives the sum of both contributions.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["Tape"]

# A backward rule maps the output gradient to one gradient per recorded input;
# None entries mark inputs that do not receive gradients (e.g. running stats).
BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of executed primitives for reverse-mode replay."""

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, BackwardRule]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: BackwardRule) -> None:
        self._records.append((tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(input) into ``.grad`` of every recorded input.

        ``seed`` is the gradient of the final objective with respect to
        ``loss`` itself; it defaults to ones (a sum-loss over ``loss``).
        """
        if seed is None:
            seed = np.ones_like(loss.data)
        else:
            seed = np.asarray(seed, dtype=np.float32)
            if seed.shape != loss.data.shape:
                raise ValueError(f"seed shape {seed.shape} != loss shape {loss.data.shape}")
        loss.accumulate_grad(seed)
        for inputs, output, rule in reversed(self._records):
            gout = output.grad
            if gout is None:
                # dead branch: output never influenced the loss
                continue
            grads = rule(gout)
            if len(grads) != len(inputs):
                raise RuntimeError(
                    f"backward rule returned {len(grads)} gradients for {len(inputs)} inputs"
                )
            for tensor, grad in zip(inputs, grads):
                if grad is not None:
                    tensor.accumulate_grad(grad)
