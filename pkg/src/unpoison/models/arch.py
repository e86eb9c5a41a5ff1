"""Architecture descriptors and the small-model registry.

An :class:`ArchSpec` is a plain, JSON-able description of a feed-forward
stack: conv / relu / avgpool / flatten / dense layers ending in a dense head
to ``class_count`` logits trained with softmax cross-entropy. Shapes must
chain from ``input_shape`` to the head; the parameter count is closed-form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..errors import ConfigurationError

# Layer descriptors, as tagged tuples:
#   ("conv", kernel, out_channels, stride)
#   ("relu",)
#   ("avgpool", factor)
#   ("flatten",)
#   ("dense", width)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    class_count: int
    layers: tuple[tuple, ...]

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigurationError("class_count must be at least 2")
        if not self.layers or self.layers[-1][0] != "dense" \
                or self.layers[-1][1] != self.class_count:
            raise ConfigurationError("last layer must be a dense head to class_count")

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "class_count": self.class_count,
                "layers": [list(layer) for layer in self.layers]}

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(d["name"], tuple(d["input_shape"]), d["class_count"],
                        tuple(tuple(layer) for layer in d["layers"]))

    def param_count(self) -> int:
        count = 0
        for kind, shape in iter_shapes(self):
            if kind[0] == "conv":
                _, k, out_ch, _ = kind
                count += out_ch * (shape[0] * k * k + 1)
            elif kind[0] == "dense":
                count += kind[1] * (shape + 1)
        return count


def iter_shapes(arch: ArchSpec):
    """Yield (layer descriptor, input shape) pairs, validating the chain.

    Validation happens before each yield so consumers never see an
    inconsistent layer.
    """
    shape: tuple | int = arch.input_shape
    for layer in arch.layers:
        kind = layer[0]
        if kind == "conv":
            _, k, out_ch, stride = layer
            if not isinstance(shape, tuple):
                raise ConfigurationError("conv layer requires a (C, H, W) input")
            c, h, w = shape
            pad = k // 2
            next_shape = (out_ch, (h + 2 * pad - k) // stride + 1,
                          (w + 2 * pad - k) // stride + 1)
        elif kind == "avgpool":
            factor = layer[1]
            if not isinstance(shape, tuple):
                raise ConfigurationError("avgpool requires a (C, H, W) input")
            c, h, w = shape
            if h % factor or w % factor:
                raise ConfigurationError("avgpool factor must divide spatial dims")
            next_shape = (c, h // factor, w // factor)
        elif kind == "flatten":
            next_shape = shape[0] * shape[1] * shape[2] \
                if isinstance(shape, tuple) else shape
        elif kind == "dense":
            if isinstance(shape, tuple):
                raise ConfigurationError("dense layer requires a flat input; "
                                         "insert a flatten layer first")
            next_shape = layer[1]
        elif kind == "relu":
            next_shape = shape
        else:
            raise ConfigurationError(f"unknown layer kind '{kind}'")
        yield layer, shape
        shape = next_shape


def logistic(input_shape: Sequence[int], class_count: int) -> ArchSpec:
    """Multinomial logistic model; exact-Hessian tractable."""
    return ArchSpec("logistic", tuple(input_shape), class_count,
                    (("flatten",), ("dense", class_count)))


def mlp1(input_shape: Sequence[int], class_count: int, hidden: int = 16) -> ArchSpec:
    return ArchSpec("mlp1", tuple(input_shape), class_count,
                    (("flatten",), ("dense", hidden), ("relu",),
                     ("dense", class_count)))


def cnn_s(input_shape: Sequence[int], class_count: int, hidden: int = 64) -> ArchSpec:
    return ArchSpec("cnn-s", tuple(input_shape), class_count,
                    (("conv", 3, 8, 1), ("relu",), ("avgpool", 2),
                     ("conv", 3, 16, 1), ("relu",), ("avgpool", 2),
                     ("flatten",), ("dense", hidden), ("relu",),
                     ("dense", class_count)))


REGISTRY = {"logistic": logistic, "mlp1": mlp1, "cnn-s": cnn_s}


def build_arch(tier: str, input_shape: Sequence[int], class_count: int,
               **kwargs) -> ArchSpec:
    if tier not in REGISTRY:
        raise ConfigurationError(f"unknown architecture tier '{tier}' "
                                 f"(available: {sorted(REGISTRY)})")
    return REGISTRY[tier](input_shape, class_count, **kwargs)
