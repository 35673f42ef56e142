"""Shared neural building blocks.

Conventions that keep parameter counts in closed form: every linear map is
bias-free, layer norms carry no affine parameters, and attention output is
re-projected only where a block explicitly owns an output matrix.
"""

from __future__ import annotations

import hashlib
import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def norm(x: Tensor) -> Tensor:
    return F.layer_norm(x, x.shape[-1:])


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    mask: Tensor | None = None,
    sink: list | None = None,
) -> Tensor:
    """Scaled dot-product attention over already-projected q/k/v rows.

    q is (n_q, d); k and v are (n_k, d). Returns (n_q, d) with heads
    concatenated. mask, if given, is additive on the (n_q, n_k) scores.
    """
    n_q, d = q.shape
    n_k = k.shape[0]
    head_dim = d // n_heads
    qh = q.view(n_q, n_heads, head_dim).transpose(0, 1)
    kh = k.view(n_k, n_heads, head_dim).transpose(0, 1)
    vh = v.view(n_k, n_heads, head_dim).transpose(0, 1)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(head_dim)
    if mask is not None:
        scores = scores + mask
    weights = torch.softmax(scores, dim=-1)
    if sink is not None:
        sink.append(weights.reshape(-1, n_k).detach())
    out = weights @ vh
    return out.transpose(0, 1).reshape(n_q, d)


def gated_attention(
    query: Tensor,
    neighbors: Tensor,
    gate: Tensor,
    sink: list | None = None,
) -> Tensor:
    """Aggregate neighbor rows with sigmoid-gated softmax weights.

    Scores are sigmoid(gate . [query || neighbor]) per neighbor, normalized
    with a softmax; the result is the weighted sum of the neighbor rows
    themselves (callers pass in already-projected vectors).
    """
    n = neighbors.shape[0]
    pairs = torch.cat([query.unsqueeze(0).expand(n, -1), neighbors], dim=1)
    scores = torch.sigmoid(pairs @ gate)
    weights = torch.softmax(scores, dim=0)
    if sink is not None:
        sink.append(weights.unsqueeze(0).detach())
    return weights @ neighbors


class AttentionBlock(nn.Module):
    """Post-norm attention + feed-forward step (12 d^2 parameters).

    Queries always come from x; keys/values default to x but may be an
    augmented sequence, in which case output length still follows x.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)
        self.ff_in = nn.Linear(dim, 4 * dim, bias=False)
        self.ff_out = nn.Linear(4 * dim, dim, bias=False)

    def forward(self, x: Tensor, kv: Tensor | None = None, mask: Tensor | None = None,
                sink: list | None = None) -> Tensor:
        kv = x if kv is None else kv
        attended = multi_head_attention(
            self.query(x), self.key(kv), self.value(kv),
            self.n_heads, mask=mask, sink=sink,
        )
        x = norm(x + self.out(attended))
        x = norm(x + self.ff_out(F.gelu(self.ff_in(x))))
        return x


def masked_mean(matrices: list[Tensor]) -> Tensor:
    """Elementwise mean over matrices of ragged row counts.

    Rows are aligned from the top; each output row averages only the inputs
    long enough to reach it, so padding never dilutes the mean.
    """
    longest = max(m.shape[0] for m in matrices)
    counts = matrices[0].new_zeros(longest)
    padded = []
    for m in matrices:
        counts[: m.shape[0]] += 1
        if m.shape[0] < longest:
            m = torch.cat([m, m.new_zeros(longest - m.shape[0], m.shape[1])])
        padded.append(m)
    total = padded[0]
    for m in padded[1:]:
        total = total + m
    return total / counts.unsqueeze(1)


def init_parameters(module: nn.Module, seed: int, bound: float,
                    initializer=None) -> None:
    """Seeded uniform(-bound, bound) init over parameters in name order.

    initializer(name, tensor) may overwrite individual tensors afterwards;
    that is the seam for plugging in pre-trained weights.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            p.uniform_(-bound, bound, generator=gen)
            if initializer is not None:
                override = initializer(name, p)
                if override is not None:
                    p.copy_(torch.as_tensor(override, dtype=p.dtype))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def fingerprint(module: nn.Module) -> str:
    """SHA-256 over all parameter bytes in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().to(torch.float64).numpy().tobytes())
    return h.hexdigest()
