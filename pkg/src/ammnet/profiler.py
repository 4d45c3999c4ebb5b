"""Analytic cost accounting: FLOPs, parameters and activation memory.

Conventions: one multiply-add is 2 FLOPs; a bias add is 1 FLOP per output
element; batch normalization costs 2 ops and ReLU 1 op per element; softmax
costs 3 ops per element (shift, exp, normalize); nearest upsampling is free.
Activation memory is the sum of every recorded layer output at 4 bytes per
value, i.e. everything a training forward pass would retain.  The report
covers the inference graph, so training-only layers (distribution alignment)
are not included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_recorder: list | None = None
_names: dict[int, str] = {}


def active() -> bool:
    return _recorder is not None


def record(owner, kind: str, flops: int, params: int, out_shape) -> None:
    if _recorder is None:
        return
    if isinstance(owner, str):
        name = owner
    else:
        name = _names.get(id(owner), type(owner).__name__)
    _recorder.append(LayerCost(name, kind, int(flops), int(params), 4 * int(np.prod(out_shape))))


@dataclass
class LayerCost:
    name: str
    kind: str
    flops: int
    params: int
    activation_bytes: int


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)
    input_size: int = 0

    @property
    def flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def activation_memory_bytes(self) -> int:
        return sum(layer.activation_bytes for layer in self.layers)

    def select(self, prefix: str) -> "CostReport":
        return CostReport([lay for lay in self.layers if lay.name.startswith(prefix)], self.input_size)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "flops": self.flops,
            "params": self.params,
            "activation_memory_bytes": self.activation_memory_bytes,
            "layers": [vars(layer) for layer in self.layers],
        }


class _Recording:
    def __init__(self, module):
        self.module = module
        self.layers: list[LayerCost] = []

    def __enter__(self):
        global _recorder
        _names.clear()
        if self.module is not None:
            for name, mod in self.module.named_modules():
                _names[id(mod)] = name or type(mod).__name__
        _recorder = self.layers
        return self

    def __exit__(self, *exc):
        global _recorder
        _recorder = None
        _names.clear()
        return False


def recording(module=None) -> _Recording:
    return _Recording(module)


def profile_model(cfg, input_size: int = 64, batch: int = 1) -> CostReport:
    """Cost of one inference forward pass of the model described by ``cfg``."""
    from . import tensor as T
    from .model import AMMNet

    model = AMMNet(cfg)
    model.eval()
    rgb = np.zeros((batch, 3, input_size, input_size), dtype=np.float32)
    dsm = np.zeros((batch, 1, input_size, input_size), dtype=np.float32)
    with T.no_grad(), recording(model) as rec:
        model(rgb, dsm, training=False)
    return CostReport(rec.layers, input_size)


def format_report(report: CostReport, per_layer: bool = True) -> str:
    lines = []
    if per_layer:
        lines.append(f"{'layer':48s} {'kind':10s} {'FLOPs':>14s} {'params':>10s} {'act bytes':>12s}")
        for lay in report.layers:
            lines.append(f"{lay.name:48s} {lay.kind:10s} {lay.flops:14d} {lay.params:10d} {lay.activation_bytes:12d}")
    lines.append(
        f"total @ {report.input_size}x{report.input_size}: FLOPs={report.flops} ({report.flops / 1e9:.4f} G)  "
        f"params={report.params} ({report.params / 1e6:.4f} M)  "
        f"activation memory={report.activation_memory_bytes / 2**20:.2f} MB"
    )
    return "\n".join(lines)
