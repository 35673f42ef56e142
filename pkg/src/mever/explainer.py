"""Explanation generation: fusion-in-decoder seq2seq, teacher-forced loss,
logits pooling, and the label-consistency regularizer.

Each (claim, evidence) pair is embedded as image rows (projected CLS
embeddings of the claim's images, then the evidence's) prepended to the
token rows of "claim [sep] evidence", encoded separately, and the encoder
outputs are mean-pooled across evidence before decoding. The output head is
tied to the token embedding, so the backbone's parameter total stays in
closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import (
    EmptyGold,
    EmptySequence,
    EmptyText,
    NoEvidence,
    OverLengthAfterTruncation,
    UnknownLabel,
)
from .layers import AttentionBlock, init_parameters, masked_mean, multi_head_attention, norm
from .tokenizer import Vocabulary
from .verifier import VerdictDistribution


@dataclass(frozen=True)
class Seq2SeqConfig:
    steps: int = 2
    dim: int = 32
    n_heads: int = 4
    vocab_size: int = 96
    max_positions: int = 96
    max_source_len: int = 64
    max_target_len: int = 24

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        for name in ("steps", "dim", "n_heads", "vocab_size", "max_positions",
                     "max_source_len", "max_target_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if max(self.max_source_len, self.max_target_len) > self.max_positions:
            raise ValueError("sequence budgets exceed max_positions")


def generation_parameter_budget(config: Seq2SeqConfig) -> int:
    """Closed-form parameter total of a freshly constructed Seq2Seq."""
    L, d = config.steps, config.dim
    return 28 * L * d * d + config.vocab_size * d + config.max_positions * d


@dataclass
class Explanation:
    token_ids: tuple[int, ...]
    text: str
    per_step_logits: Tensor | None = field(default=None, repr=False)


class DecoderBlock(nn.Module):
    """Causal self-attention, cross-attention over the fused source, and a
    feed-forward step; 16 d^2 parameters."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.self_query = nn.Linear(dim, dim, bias=False)
        self.self_key = nn.Linear(dim, dim, bias=False)
        self.self_value = nn.Linear(dim, dim, bias=False)
        self.self_out = nn.Linear(dim, dim, bias=False)
        self.cross_query = nn.Linear(dim, dim, bias=False)
        self.cross_key = nn.Linear(dim, dim, bias=False)
        self.cross_value = nn.Linear(dim, dim, bias=False)
        self.cross_out = nn.Linear(dim, dim, bias=False)
        self.ff_in = nn.Linear(dim, 4 * dim, bias=False)
        self.ff_out = nn.Linear(4 * dim, dim, bias=False)

    def forward(self, x: Tensor, memory: Tensor, causal_mask: Tensor,
                sink: list | None = None) -> Tensor:
        attended = multi_head_attention(
            self.self_query(x), self.self_key(x), self.self_value(x),
            self.n_heads, mask=causal_mask, sink=sink)
        x = norm(x + self.self_out(attended))
        crossed = multi_head_attention(
            self.cross_query(x), self.cross_key(memory), self.cross_value(memory),
            self.n_heads, sink=sink)
        x = norm(x + self.cross_out(crossed))
        x = norm(x + self.ff_out(F.gelu(self.ff_in(x))))
        return x


class Seq2Seq(nn.Module):
    def __init__(self, config: Seq2SeqConfig, vocab: Vocabulary | None = None,
                 seed: int = 0, initializer=None):
        super().__init__()
        self.config = config
        self.vocab = vocab
        d = config.dim
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.positional = nn.Parameter(torch.zeros(config.max_positions, d))
        self.encoder_blocks = nn.ModuleList(
            AttentionBlock(d, config.n_heads) for _ in range(config.steps))
        self.decoder_blocks = nn.ModuleList(
            DecoderBlock(d, config.n_heads) for _ in range(config.steps))
        init_parameters(self, seed, bound=d ** -0.5, initializer=initializer)

    # -- source construction -------------------------------------------------

    def build_source(self, claim_text: str, evidence_text: str,
                     claim_image_embeddings: list[Tensor],
                     evidence_image_embeddings: list[Tensor],
                     image_proj) -> Tensor:
        """Embed one (claim, evidence) pair as image rows plus token rows.

        Token rows carry positional encodings by their text position; the
        prepended image rows carry none. Evidence tokens are truncated to
        fit the source budget; a claim that cannot fit even alone is an
        error rather than a silent cut.
        """
        if self.vocab is None:
            raise ValueError("seq2seq has no vocabulary attached")
        claim_ids = self.vocab.encode(claim_text)
        evidence_ids = self.vocab.encode(evidence_text)
        if not claim_ids:
            raise EmptyText(f"no tokens in {claim_text!r}")
        budget = self.config.max_source_len
        if len(claim_ids) + 1 > budget:
            raise OverLengthAfterTruncation(
                f"claim occupies {len(claim_ids)} tokens; budget is {budget}")
        evidence_ids = evidence_ids[: budget - len(claim_ids) - 1]
        ids = claim_ids + [self.vocab.sep_id] + evidence_ids
        idx = torch.tensor(ids, dtype=torch.long)
        tokens = self.token_embedding(idx) + self.positional[: len(ids)]
        image_rows = [image_proj(z) for z in claim_image_embeddings]
        image_rows += [image_proj(z) for z in evidence_image_embeddings]
        if image_rows:
            return torch.cat([torch.stack(image_rows), tokens], dim=0)
        return tokens

    def encode_source(self, source: Tensor, sink: list | None = None) -> Tensor:
        x = source
        for block in self.encoder_blocks:
            x = block(x, sink=sink)
        return x

    def fuse(self, per_evidence: list[Tensor]) -> Tensor:
        """Mask-aware elementwise mean of the per-evidence encoder outputs."""
        if not per_evidence:
            raise NoEvidence("fusion needs at least one encoded evidence")
        return masked_mean(per_evidence)

    # -- decoding -------------------------------------------------------------

    def _decode_states(self, fused: Tensor, input_ids: list[int],
                       sink: list | None = None) -> Tensor:
        idx = torch.tensor(input_ids, dtype=torch.long)
        x = self.token_embedding(idx) + self.positional[: len(input_ids)]
        n = len(input_ids)
        causal = torch.full((n, n), float("-inf"), dtype=x.dtype).triu(1)
        for block in self.decoder_blocks:
            x = block(x, memory=fused, causal_mask=causal, sink=sink)
        return x

    def decode_teacher_forced(self, fused: Tensor, gold_ids: list[int],
                              sink: list | None = None) -> Tensor:
        """Logits at every gold position, conditioned on the gold prefix."""
        if not gold_ids:
            raise EmptyGold("gold token sequence is empty")
        if self.vocab is None:
            raise ValueError("seq2seq has no vocabulary attached")
        inputs = [self.vocab.bos_id] + list(gold_ids[:-1])
        states = self._decode_states(fused, inputs, sink=sink)
        return states @ self.token_embedding.weight.T

    def generate(self, fused: Tensor, max_len: int,
                 sink: list | None = None) -> Explanation:
        """Greedy decoding until the end token or max_len; argmax ties go to
        the lowest token id."""
        if max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {max_len}")
        if self.vocab is None:
            raise ValueError("seq2seq has no vocabulary attached")
        ids: list[int] = []
        logits_rows = []
        with torch.no_grad():
            for _ in range(min(max_len, self.config.max_target_len)):
                states = self._decode_states(fused, [self.vocab.bos_id] + ids, sink=sink)
                step_logits = states[-1] @ self.token_embedding.weight.T
                logits_rows.append(step_logits)
                # embedding rows beyond the fitted vocabulary are spare
                # capacity, not emittable tokens
                next_id = int(np.argmax(step_logits[: self.vocab.size].numpy()))
                ids.append(next_id)
                if next_id == self.vocab.eos_id:
                    break
        return Explanation(
            token_ids=tuple(ids),
            text=self.vocab.decode(ids),
            per_step_logits=torch.stack(logits_rows),
        )


# ---------------------------------------------------------------------------
# losses

def generation_loss(logits: Tensor, gold_ids: list[int]) -> Tensor:
    """Teacher-forced next-token cross-entropy with floored probabilities."""
    if len(gold_ids) == 0:
        raise EmptyGold("gold token sequence is empty")
    probs = torch.softmax(logits, dim=-1)
    picked = probs[torch.arange(len(gold_ids)), torch.tensor(gold_ids)]
    return -torch.log(picked.clamp(min=1e-12)).sum()


def pool_logits(per_token_logits: Tensor) -> Tensor:
    """Elementwise mean of the per-position vocabulary logits."""
    if per_token_logits.ndim != 2 or per_token_logits.shape[0] == 0:
        raise EmptySequence("need at least one logit row")
    return per_token_logits.mean(dim=0)


class ConsistencyHead(nn.Module):
    """Maps pooled vocabulary logits to a verdict distribution."""

    def __init__(self, vocab_size: int, dim: int, n_labels: int, seed: int = 0):
        super().__init__()
        self.hidden = nn.Linear(vocab_size, dim, bias=False)
        self.out = nn.Linear(dim, n_labels, bias=False)
        init_parameters(self, seed, bound=dim ** -0.5)

    def forward(self, pooled: Tensor) -> Tensor:
        return self.out(F.gelu(self.hidden(pooled)))


def _kl(p: Tensor, q: Tensor) -> Tensor:
    logs = torch.log(p.clamp(min=1e-12)) - torch.log(q.clamp(min=1e-12))
    return (p * logs).sum()


def consistency_loss(verdict: VerdictDistribution, pooled: Tensor,
                     head: ConsistencyHead, gold: str
                     ) -> tuple[Tensor, VerdictDistribution]:
    """Symmetric KL between the two verdict distributions plus cross-entropy
    of the logits-side verdict against gold. Gradients reach both sides."""
    if gold not in verdict.label_set:
        raise UnknownLabel(f"{gold!r} not in {list(verdict.label_set)}")
    probs_e = torch.softmax(head(pooled), dim=0)
    pred_e = VerdictDistribution(probs=probs_e, label_set=verdict.label_set)
    idx = verdict.label_set.index(gold)
    loss = (
        _kl(verdict.probs, probs_e)
        + _kl(probs_e, verdict.probs)
        - torch.log(probs_e[idx].clamp(min=1e-12))
    )
    return loss, pred_e
