"""Token-level fusion, claim-evidence interaction, evidence-level fusion,
and the verdict classifier.

The six fusion matrices (shared q/k/v, the text+image merge, the evidence
text+image merge, and the evidence projection) form the `fusion_core` group
whose size is exactly eight d-squared; the aggregation gate and the
classifier head sit outside that group. Image aggregation at evidence level
reuses the graph encoder's cross-modal projection and pair gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoder import EncodedUnit, GraphEncoder
from .errors import NoEvidence, ShapeMismatch, UnknownLabel
from .layers import gated_attention, init_parameters, masked_mean, multi_head_attention


@dataclass
class VerdictDistribution:
    probs: Tensor
    label_set: tuple[str, ...]

    @property
    def predicted_label(self) -> str:
        best = torch.max(self.probs).item()
        candidates = [l for l, p in zip(self.label_set, self.probs.tolist())
                      if p >= best - 1e-12]
        return min(candidates)


def verification_loss(pred: VerdictDistribution, gold: str) -> Tensor:
    if gold not in pred.label_set:
        raise UnknownLabel(f"{gold!r} not in {list(pred.label_set)}")
    idx = pred.label_set.index(gold)
    return -torch.log(pred.probs[idx].clamp(min=1e-12))


class FusionCore(nn.Module):
    """The named fusion matrices; parameter total is exactly 8 d^2."""

    def __init__(self, dim: int):
        super().__init__()
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.text_image_merge = nn.Linear(2 * dim, dim, bias=False)
        self.evidence_merge = nn.Linear(2 * dim, dim, bias=False)
        self.evidence_proj = nn.Linear(dim, dim, bias=False)


class Verifier(nn.Module):
    def __init__(self, dim: int, n_labels: int, n_heads: int, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.n_heads = n_heads
        self.fusion_core = FusionCore(dim)
        self.evidence_gate = nn.Parameter(torch.zeros(2 * dim))
        self.classifier_hidden = nn.Linear(2 * dim, dim, bias=False)
        self.classifier_out = nn.Linear(dim, n_labels, bias=False)
        init_parameters(self, seed, bound=dim ** -0.5)

    def _cross_attend(self, queries: Tensor, context: Tensor,
                      sink: list | None = None) -> Tensor:
        core = self.fusion_core
        return multi_head_attention(
            core.query(queries), core.key(context), core.value(context),
            self.n_heads, sink=sink,
        )

    def token_fuse(self, tokens: Tensor, patch_list: list[Tensor],
                   sink: list | None = None) -> Tensor:
        """Merge a unit's patch matrices into its token matrix.

        Each image is cross-attended from the token side, images are mean
        pooled, and the result is concatenated feature-wise with the tokens
        and merged back to width d. No images means a zero image block.
        """
        if tokens.shape[-1] != self.dim:
            raise ShapeMismatch(f"token width {tokens.shape[-1]} != {self.dim}")
        if patch_list:
            per_image = [self._cross_attend(tokens, z, sink=sink) for z in patch_list]
            image_block = torch.stack(per_image).mean(dim=0)
        else:
            image_block = torch.zeros_like(tokens)
        return self.fusion_core.text_image_merge(torch.cat([tokens, image_block], dim=1))

    def interact(self, evidence_units: list[Tensor], claim_unit: Tensor,
                 sink: list | None = None) -> Tensor:
        """Attend each fused evidence matrix over the fused claim matrix,
        pool across evidence, and return the pooled CLS row."""
        if not evidence_units:
            raise NoEvidence("claim-evidence interaction needs evidence")
        attended = [self._cross_attend(u, claim_unit, sink=sink) for u in evidence_units]
        return masked_mean(attended)[0]

    def evidence_fuse(self, claim_embedding: Tensor, evidence_units: list[EncodedUnit],
                      encoder: GraphEncoder, sink: list | None = None) -> Tensor:
        """Aggregate evidence embeddings with the claim embedding as query.

        Per evidence, its image CLS embeddings are aggregated using the
        encoder's cross-modal projection and gate (zero vector when the
        evidence has no images), merged with the text CLS, then the claim
        aggregates the projected evidence vectors through the e2c gate.
        """
        if not evidence_units:
            raise NoEvidence("evidence fusion needs evidence")
        merged = []
        for unit in evidence_units:
            h_cls = unit.text_embedding
            if unit.patches:
                z_proj = torch.stack([encoder.cross_modal_proj(z) for z in unit.image_embeddings])
                z_hat = gated_attention(encoder.cross_modal_proj(h_cls), z_proj,
                                        encoder.pair_gate, sink=sink)
            else:
                z_hat = torch.zeros_like(h_cls)
            merged.append(self.fusion_core.evidence_merge(torch.cat([h_cls, z_hat])))
        projected = torch.stack([self.fusion_core.evidence_proj(t) for t in merged])
        query = encoder.cross_modal_proj(claim_embedding)
        return gated_attention(query, projected, self.evidence_gate, sink=sink)

    def classify(self, claim_embedding: Tensor, evidence_embedding: Tensor,
                 label_set: tuple[str, ...]) -> VerdictDistribution:
        hidden = F.gelu(self.classifier_hidden(
            torch.cat([claim_embedding, evidence_embedding])))
        probs = torch.softmax(self.classifier_out(hidden), dim=0)
        return VerdictDistribution(probs=probs, label_set=label_set)

    def verify(self, claim_unit: EncodedUnit, evidence_units: list[EncodedUnit],
               encoder: GraphEncoder, label_set: tuple[str, ...],
               ablations: frozenset = frozenset(), sink: list | None = None
               ) -> tuple[Tensor, Tensor, VerdictDistribution]:
        """Full verification pass; returns (claim emb, evidence emb, verdict)."""
        if not evidence_units:
            raise NoEvidence("no evidence supplied for claim verification")
        if "no_token_fusion" in ablations:
            claim_embedding = claim_unit.text_embedding
        else:
            fused_claim = self.token_fuse(claim_unit.tokens, claim_unit.patches, sink=sink)
            fused_evidence = [self.token_fuse(u.tokens, u.patches, sink=sink)
                              for u in evidence_units]
            claim_embedding = self.interact(fused_evidence, fused_claim, sink=sink)
        if "no_evidence_fusion" in ablations:
            evidence_embedding = claim_embedding
        else:
            evidence_embedding = self.evidence_fuse(
                claim_embedding, evidence_units, encoder, sink=sink)
        verdict = self.classify(claim_embedding, evidence_embedding, label_set)
        return claim_embedding, evidence_embedding, verdict
