"""A small container base class that walks attributes to find parameters."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter


class Module:
    """Parameters, buffers and submodules are discovered from instance attributes.

    ``Parameter`` attributes are trainable; plain ``np.ndarray`` attributes are
    buffers (persisted in checkpoints, never trained). Lists of modules are
    walked with their index as the name component.
    """

    def named_children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, np.ndarray) and not name.startswith("_"):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
