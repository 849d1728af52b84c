"""Parameter counts, analytic FLOPs, and wall-clock throughput.

FLOPs convention: one multiply-accumulate counts as ONE unit, the same
convention behind the familiar detector GFLOPs magnitudes. Reported
numbers therefore halve what a multiply+add=2 counter would give.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import nn

from ..models.attention import (
    ConditionalCrossAttention,
    MultiheadAttention,
    MultiScaleDeformableAttention,
)


class UnregisteredLayer(RuntimeError):
    """A parameterized leaf module has no analytic FLOP rule."""


def count_parameters(model: nn.Module) -> tuple[int, int]:
    """(total, trainable) element counts; frozen params leave the second."""
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return total, trainable


# -- analytic FLOP rules ------------------------------------------------------
#
# A rule maps (module, inputs, output) -> MAC count for one forward call.
# Composite rules own their whole subtree; the estimator does not descend
# into modules that match one.


def _conv_flops(module: nn.Conv2d, inputs, output) -> int:
    out_elements = output.numel()
    per_element = (module.in_channels // module.groups) * module.kernel_size[0] * module.kernel_size[1]
    return out_elements * per_element


def _linear_flops(module: nn.Linear, inputs, output) -> int:
    return (output.numel() // module.out_features) * module.in_features * module.out_features


def _norm_flops(module, inputs, output) -> int:
    # normalization is a scale-and-shift pass: one MAC-equivalent per element
    return output.numel() if isinstance(output, torch.Tensor) else 0


def _embedding_flops(module, inputs, output) -> int:
    return 0  # table lookup


def _mha_flops(module: MultiheadAttention, inputs, output) -> int:
    query, key = inputs[0], inputs[1]
    batch, tq, dim = query.shape
    tk = key.shape[1]
    projections = batch * (2 * tq + 2 * tk) * dim * dim  # q, out and k, v
    attention = 2 * batch * tq * tk * dim  # QK^T and AV, summed over heads
    return projections + attention


def _conditional_cross_flops(module: ConditionalCrossAttention, inputs, output) -> int:
    content, memory = inputs[0], inputs[2]
    batch, tq, dim = content.shape
    tk = memory.shape[1]
    # q_content/q_pos/out on queries; k_content/k_pos/v on memory
    projections = batch * (3 * tq + 3 * tk) * dim * dim
    # concatenated content+position keys double the QK^T width
    attention = 3 * batch * tq * tk * dim
    return projections + attention


def _deformable_flops(module: MultiScaleDeformableAttention, inputs, output) -> int:
    query, value = inputs[0], inputs[2]
    batch, tq, dim = query.shape
    points = module.num_heads * module.num_levels * module.num_points
    projections = batch * (tq + value.shape[1]) * dim * dim  # output and value
    heads = batch * tq * dim * 3 * points  # offset (2/pt) + weight (1/pt) linears
    sampling = batch * tq * points * (dim // module.num_heads) * 5  # 4 bilinear MACs + 1 weight
    return projections + heads + sampling


FLOP_RULES: dict[type, Callable] = {
    nn.Conv2d: _conv_flops,
    nn.Linear: _linear_flops,
    nn.LayerNorm: _norm_flops,
    nn.GroupNorm: _norm_flops,
    nn.BatchNorm2d: _norm_flops,
    nn.Embedding: _embedding_flops,
}

COMPOSITE_RULES: dict[type, Callable] = {
    MultiheadAttention: _mha_flops,
    ConditionalCrossAttention: _conditional_cross_flops,
    MultiScaleDeformableAttention: _deformable_flops,
}


def register_flop_rule(module_type: type, rule: Callable, composite: bool = False) -> None:
    (COMPOSITE_RULES if composite else FLOP_RULES)[module_type] = rule


@dataclass
class FlopsEstimate:
    mean: float
    std: float
    totals: list[float] = field(default_factory=list)

    @property
    def gmean(self) -> float:
        return self.mean / 1e9

    @property
    def gstd(self) -> float:
        return self.std / 1e9


def _plan_hooks(model: nn.Module) -> list[tuple[nn.Module, Callable]]:
    planned = []

    def visit(module: nn.Module):
        rule = COMPOSITE_RULES.get(type(module))
        if rule is not None:
            planned.append((module, rule))
            return
        children = list(module.children())
        if children:
            for child in children:
                visit(child)
            return
        leaf_rule = FLOP_RULES.get(type(module))
        if leaf_rule is not None:
            planned.append((module, leaf_rule))
        elif any(p.numel() for p in module.parameters(recurse=False)):
            raise UnregisteredLayer(f"no FLOP rule for {type(module).__name__}")

    visit(model)
    return planned


def estimate_flops(model: nn.Module, sample_inputs: Sequence) -> FlopsEstimate:
    """Analytic MAC totals per input; mean and population std across inputs.

    Each sample input is either an image tensor or an (images, mask) pair
    fed straight to the model. Deterministic: no timing, no profiling.
    """
    if not sample_inputs:
        raise ValueError("need at least one sample input")
    planned = _plan_hooks(model)
    totals = []
    counter = {"macs": 0}

    def make_hook(rule):
        def hook(module, inputs, output):
            counter["macs"] += int(rule(module, inputs, output))
        return hook

    handles = [module.register_forward_hook(make_hook(rule)) for module, rule in planned]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for sample in sample_inputs:
                counter["macs"] = 0
                if isinstance(sample, (tuple, list)):
                    model(*sample)
                else:
                    model(sample)
                totals.append(float(counter["macs"]))
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)
    mean = statistics.fmean(totals)
    std = statistics.pstdev(totals)
    return FlopsEstimate(mean=mean, std=std, totals=totals)


@dataclass
class FpsResult:
    fps: float
    mean_latency: float
    median_latency: float
    std_latency: float
    latencies: list[float] = field(default_factory=list)


def measure_fps(
    model: Callable,
    input_shape: tuple[int, ...] = (3, 256, 256),
    warmup_iters: int = 50,
    timed_iters: int = 200,
) -> FpsResult:
    """Batch-1 throughput with explicit warmup.

    Run this on an otherwise idle machine; the numbers are protocol-relative
    (single thread of work, no concurrent load). CPU execution needs no
    device synchronization; each iteration is individually timed.
    """
    if timed_iters < 10:
        raise ValueError(f"timed_iters must be >= 10; got {timed_iters}")
    example = torch.zeros(1, *input_shape)
    is_module = isinstance(model, nn.Module)
    if is_module:
        was_training = model.training
        model.eval()
    try:
        with torch.no_grad():
            for _ in range(warmup_iters):
                model(example)
            latencies = []
            start = time.perf_counter()
            for _ in range(timed_iters):
                tick = time.perf_counter()
                model(example)
                latencies.append(time.perf_counter() - tick)
            elapsed = time.perf_counter() - start
    finally:
        if is_module:
            model.train(was_training)
    return FpsResult(
        fps=timed_iters / elapsed,
        mean_latency=statistics.fmean(latencies),
        median_latency=statistics.median(latencies),
        std_latency=statistics.pstdev(latencies),
        latencies=latencies,
    )


def device_peak_memory() -> int | None:
    """Peak accelerator memory in bytes, or None when not measurable."""
    if torch.cuda.is_available():
        return int(torch.cuda.max_memory_allocated())
    return None
