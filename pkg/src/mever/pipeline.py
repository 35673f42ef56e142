"""Joint model container and per-claim forward passes.

The stage-two graph encoder here is a separate instance from the frozen
retrieval encoder; verification and generation read this one only, which
keeps the retriever freeze contract clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .datamodel import ClaimRecord, Dataset, EvidenceRecord
from .encoder import VERIFICATION, EncodedUnit, GraphEncoder
from .errors import NoEvidence
from .explainer import (
    ConsistencyHead,
    Explanation,
    Seq2Seq,
    consistency_loss,
    generation_loss,
    pool_logits,
)
from .retriever import RankedList
from .verifier import VerdictDistribution, Verifier, verification_loss


@dataclass
class JointModel:
    encoder: GraphEncoder
    verifier: Verifier
    seq2seq: Seq2Seq
    consistency_head: ConsistencyHead
    label_set: tuple[str, ...]

    def groups(self) -> dict[str, torch.nn.Module]:
        return {
            "encoder": self.encoder,
            "verifier": self.verifier,
            "seq2seq": self.seq2seq,
            "head": self.consistency_head,
        }

    def parameters(self):
        for module in self.groups().values():
            yield from module.parameters()

    def train_targets(self) -> list[tuple[str, torch.nn.Parameter]]:
        named = []
        for prefix, module in sorted(self.groups().items()):
            for name, p in sorted(module.named_parameters()):
                named.append((f"{prefix}/{name}", p))
        return named


def evidence_for_claim(dataset: Dataset, claim: ClaimRecord, setting: str,
                       retrieved: dict[str, RankedList] | None,
                       k: int) -> list[EvidenceRecord]:
    if setting == "gold":
        ids = claim.gold_evidence_ids
    elif setting == "retrieved":
        if retrieved is None or claim.id not in retrieved:
            raise NoEvidence(f"no retrieved evidence for claim {claim.id}")
        ids = retrieved[claim.id].ids[:k]
    else:
        raise ValueError(f"unknown evidence setting {setting!r}")
    return [dataset.evidence_by_id(eid) for eid in ids]


def encode_claim_and_evidence(model: JointModel, dataset: Dataset,
                              claim: ClaimRecord,
                              evidence_records: list[EvidenceRecord],
                              ablations: frozenset = frozenset(),
                              sink: list | None = None,
                              cache: dict | None = None
                              ) -> tuple[EncodedUnit, list[EncodedUnit]]:
    claim_unit = model.encoder.encode(claim.text, dataset.images_for(claim),
                                      mode=VERIFICATION, ablations=ablations, sink=sink)
    units = []
    for ev in evidence_records:
        if cache is not None and ev.id in cache:
            units.append(cache[ev.id])
            continue
        unit = model.encoder.encode(ev.text, dataset.images_for(ev),
                                    mode=VERIFICATION, ablations=ablations, sink=sink)
        if cache is not None:
            cache[ev.id] = unit
        units.append(unit)
    return claim_unit, units


def fused_source(model: JointModel, claim: ClaimRecord, claim_unit: EncodedUnit,
                 evidence_records: list[EvidenceRecord],
                 evidence_units: list[EncodedUnit],
                 ablations: frozenset = frozenset(),
                 sink: list | None = None) -> Tensor:
    """Encode every (claim, evidence) pair and pool them for the decoder."""
    proj = model.encoder.cross_modal_proj
    matrices = []
    for ev, unit in zip(evidence_records, evidence_units):
        source = model.seq2seq.build_source(
            claim.text, ev.text,
            claim_unit.image_embeddings, unit.image_embeddings, proj)
        matrices.append(model.seq2seq.encode_source(source, sink=sink))
    if "no_fid" in ablations:
        return matrices[0]
    return model.seq2seq.fuse(matrices)


def explanation_token_ids(model: JointModel, explanation: str) -> list[int]:
    vocab = model.seq2seq.vocab
    ids = vocab.encode(explanation) + [vocab.eos_id]
    return ids[: model.seq2seq.config.max_target_len]


@dataclass
class TrainForward:
    verdict: VerdictDistribution
    total: Tensor
    verification: Tensor
    generation: Tensor | None = None
    consistency: Tensor | None = None
    verdict_from_logits: VerdictDistribution | None = None


def train_forward(model: JointModel, dataset: Dataset, claim: ClaimRecord,
                  evidence_records: list[EvidenceRecord], lambda_reg: float,
                  ablations: frozenset = frozenset(), generation: bool = True,
                  detach_verdict: bool = False, sink: list | None = None,
                  cache: dict | None = None) -> TrainForward:
    """Teacher-forced losses for one claim under the configured ablations."""
    claim_unit, units = encode_claim_and_evidence(
        model, dataset, claim, evidence_records, ablations, sink=sink, cache=cache)
    _, _, verdict = model.verifier.verify(
        claim_unit, units, model.encoder, model.label_set,
        ablations=ablations, sink=sink)
    ver_loss = verification_loss(verdict, claim.label)

    if not generation:
        return TrainForward(verdict=verdict, total=ver_loss, verification=ver_loss)

    fused = fused_source(model, claim, claim_unit, evidence_records, units,
                         ablations=ablations, sink=sink)
    gold_ids = explanation_token_ids(model, claim.explanation)
    logits = model.seq2seq.decode_teacher_forced(fused, gold_ids, sink=sink)
    gen_loss = generation_loss(logits, gold_ids)

    pooled = pool_logits(logits)
    verdict_for_reg = verdict
    if detach_verdict:
        verdict_for_reg = VerdictDistribution(
            probs=verdict.probs.detach(), label_set=verdict.label_set)
    lambda_eff = 0.0 if "no_regularizer" in ablations else lambda_reg
    reg_loss, verdict_e = consistency_loss(
        verdict_for_reg, pooled, model.consistency_head, claim.label)
    total = ver_loss + gen_loss + lambda_eff * reg_loss
    return TrainForward(verdict=verdict, total=total, verification=ver_loss,
                        generation=gen_loss, consistency=reg_loss,
                        verdict_from_logits=verdict_e)


@dataclass
class Prediction:
    claim_id: str
    predicted_label: str
    explanation: str
    verdict: VerdictDistribution = field(repr=False, default=None)


def predict_forward(model: JointModel, dataset: Dataset, claim: ClaimRecord,
                    evidence_records: list[EvidenceRecord],
                    ablations: frozenset = frozenset(),
                    max_len: int | None = None,
                    generate: bool = True,
                    cache: dict | None = None) -> Prediction:
    """Inference pass: predicted label plus a greedily decoded explanation."""
    with torch.no_grad():
        claim_unit, units = encode_claim_and_evidence(
            model, dataset, claim, evidence_records, ablations, cache=cache)
        _, _, verdict = model.verifier.verify(
            claim_unit, units, model.encoder, model.label_set, ablations=ablations)
        text = ""
        if generate:
            fused = fused_source(model, claim, claim_unit, evidence_records, units,
                                 ablations=ablations)
            limit = max_len or model.seq2seq.config.max_target_len
            explanation: Explanation = model.seq2seq.generate(fused, limit)
            text = explanation.text
    return Prediction(claim_id=claim.id, predicted_label=verdict.predicted_label,
                      explanation=text, verdict=verdict)
