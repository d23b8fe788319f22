"""Parameter and multiply-accumulate accounting.

MACs count one multiply-add per weight application in convolutions, linear
layers and the two attention matmuls (``QK^T`` and ``AV``). Normalisation,
activations, resizing and elementwise gates are not counted, following the
usual profiler convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EndoCaver, ModelConfig
from .tensor import Tensor, count_macs, no_grad

COMPONENTS = ("encoder", "gam", "d_decoder", "s_decoder", "dsa")


@dataclass
class ComplexityReport:
    input_size: int
    params: int
    macs: int
    param_breakdown: dict[str, int]
    mac_breakdown: dict[str, int]

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9

    def table(self) -> str:
        lines = [f"input {self.input_size}x{self.input_size}",
                 f"{'component':<12}{'params':>12}{'MACs':>16}"]
        for c in COMPONENTS:
            lines.append(f"{c:<12}{self.param_breakdown[c]:>12,}{self.mac_breakdown[c]:>16,}")
        lines.append(f"{'total':<12}{self.params:>12,}{self.macs:>16,}")
        lines.append(f"= {self.params_m:.3f} M params, {self.gmacs:.3f} GMac")
        return "\n".join(lines)


def count_model(cfg: ModelConfig, input_size: int) -> ComplexityReport:
    """Closed-form counts for ``cfg`` at a square ``input_size``; no forward pass needed."""
    if input_size <= 0 or input_size % 32:
        raise ValueError("input size must be a positive multiple of 32")
    model = EndoCaver(cfg)
    params = model.parameter_breakdown()
    macs = model.mac_breakdown(input_size, input_size)
    return ComplexityReport(input_size, sum(params.values()), sum(macs.values()), params, macs)


def traced_macs(model: EndoCaver, input_size: int) -> int:
    """MACs tallied by the conv/matmul primitives during one real forward pass."""
    x = Tensor(np.full((1, 3, input_size, input_size), 0.5, dtype=np.float32))
    was_training = model.training
    model.eval()
    try:
        with no_grad(), count_macs() as tally:
            model(x)
    finally:
        model.train(was_training)
    return tally.total
