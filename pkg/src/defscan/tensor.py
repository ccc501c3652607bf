"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Every operation in :mod:`defscan.ops` computes its forward value eagerly and,
when a :class:`Tape` is active, records a closure that maps the output
gradient to input-gradient contributions.  Replaying the tape backward visits
operations in exact reverse execution order and *accumulates* (never
overwrites) gradients, so values consumed by several operations receive the
sum of all contributions.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .errors import DimensionError, InputError

# Cheap non-finite probe run on every freshly created tensor.  A single sum()
# pass detects any NaN/Inf (their propagation through summation is total);
# the full isfinite scan only runs to rule out pure-overflow false positives.
FINITE_CHECKS = True


def _finite_probe(arr: np.ndarray) -> None:
    if not FINITE_CHECKS or arr.size == 0:
        return
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise InputError("operation produced non-finite values (NaN or Inf)")


class Tensor:
    """A dense float64 array plus an optional same-shape gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        _finite_probe(arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)})"


class Parameter(Tensor):
    """A named learnable tensor; ``grad`` doubles as its accumulator."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={tuple(self.shape)})"


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Execution-ordered record of operations for one forward pass.

    A Tape is confined to a single execution context; use it as a context
    manager around the forward computation, then call :meth:`backward`.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, vjp) -> None:
        self._records.append((out, vjp))

    def backward(self, out: Tensor, cotangent=None) -> None:
        """Seed ``out.grad`` and replay the tape in reverse.

        ``cotangent`` defaults to 1 for scalar outputs; non-scalar outputs
        require an explicit cotangent of the same shape.
        """
        if cotangent is None:
            if out.size != 1:
                raise InputError(
                    "backward() on a non-scalar output requires a cotangent"
                )
            seed = np.ones_like(out.data)
        else:
            seed = np.asarray(cotangent, dtype=np.float64)
            if seed.shape != out.data.shape:
                raise DimensionError(
                    f"cotangent shape {seed.shape} != output shape {out.data.shape}"
                )
            seed = seed.copy()
        accumulate_grad(out, seed)
        for tensor, vjp in reversed(self._records):
            if tensor.grad is not None:
                vjp(tensor.grad)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating a zero accumulator on first use."""
    if g.shape != t.data.shape:
        # Only exact matches or safe broadcasts (1-extents / missing leading
        # axes expanding to t's shape) are allowed.
        if np.broadcast_shapes(g.shape, t.data.shape) != t.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} incompatible with tensor {t.data.shape}"
            )
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Module:
    """Minimal weight container; children are discovered from attributes.

    Attribute order is insertion order, so parameter naming and checkpoint
    layout are deterministic for a fixed construction path.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            yield from _walk_params(path, val)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def finalize_names(self) -> None:
        """Assign dotted-path names; names must be unique within the model."""
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise InputError(f"duplicate parameter name: {name}")
            seen.add(name)
            p.name = name


def _walk_params(path: str, val) -> Iterator[tuple[str, Parameter]]:
    if isinstance(val, Parameter):
        yield path, val
    elif isinstance(val, Module):
        yield from val.named_parameters(path)
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_params(f"{path}.{i}", item)
