"""Small shared building blocks for the model slots."""

from __future__ import annotations

import torch
from torch import nn

__all__ = ["MLP", "inverse_sigmoid", "iterative_box_refine"]


class MLP(nn.Module):
    """A stack of Linear+ReLU layers with a linear output layer."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = torch.relu(x)
        return x


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Logit of x with both arguments clamped away from 0 by ``eps``.

    The clamp bounds the output to roughly +-6.9, keeping gradients finite at
    the box-coordinate boundaries.
    """
    x = x.clamp(min=0.0, max=1.0)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def iterative_box_refine(prev_boxes: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Layer-wise anchor update: sigmoid(inverse_sigmoid(prev) + delta), elementwise.

    Composing two refinements equals one refinement with summed deltas for
    boxes away from the clamp boundary (the update is additive in logit
    space).
    """
    return torch.sigmoid(inverse_sigmoid(prev_boxes) + deltas)
