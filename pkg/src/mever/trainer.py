"""Two-stage optimization: contrastive retriever training, then joint
verification + explanation training with the frozen retriever's output.

Checkpoints are little-endian framed binaries (magic, version, CRC32,
payload) holding every parameter group, the optimizer moments, shuffle RNG
state, config snapshot, and metric history, so save -> load -> save is
byte-identical and resumed runs reproduce the uninterrupted loss curve.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from .datamodel import Dataset
from .encoder import RETRIEVAL, EncoderConfig, GraphEncoder
from .errors import CorruptFile, MissingExplanations, TrainingDiverged, VersionMismatch
from .evalkit import f1_scores, mean_average_precision
from .explainer import ConsistencyHead, Seq2Seq, Seq2SeqConfig
from .pipeline import JointModel, evidence_for_claim, predict_forward, train_forward
from .retriever import RankedList, build_index, contrastive_loss, rank_all, retrieve
from .tokenizer import Vocabulary
from .verifier import Verifier

ALL_ABLATIONS = ("no_images", "no_i2t", "no_t2i", "no_token_fusion",
                 "no_evidence_fusion", "no_fid", "no_regularizer")

CHECKPOINT_MAGIC = b"MEVRCKPT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    lambda_reg: float = 0.5
    k_retrieved: int = 3
    batch_size: int = 8
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 50
    seed: int = 0
    evidence_setting: str = "retrieved"
    ablations: frozenset = frozenset()
    generation: bool | None = None
    detach_verdict_in_consistency: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seq2seq: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.evidence_setting not in ("gold", "retrieved"):
            raise ValueError(f"unknown evidence_setting {self.evidence_setting!r}")
        unknown = set(self.ablations) - set(ALL_ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}")
        if self.seq2seq.dim != self.encoder.dim:
            raise ValueError("seq2seq dim must match encoder dim")
        if self.seq2seq.vocab_size != self.encoder.vocab_size:
            raise ValueError("seq2seq and encoder must share a vocabulary size")

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("encoder", "seq2seq"):
                for sub in fields(value):
                    out[f"{f.name}.{sub.name}"] = str(getattr(value, sub.name))
            elif f.name == "ablations":
                out[f.name] = ",".join(sorted(value))
            elif f.name == "generation":
                out[f.name] = "auto" if value is None else str(value)
            else:
                out[f.name] = str(value)
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        mapping = dict(mapping)
        kwargs = {}
        nested = {"encoder": {}, "seq2seq": {}}
        for key, value in mapping.items():
            if "." in key:
                group, sub = key.split(".", 1)
                if group not in nested:
                    raise ValueError(f"unknown config key {key!r}")
                nested[group][sub] = value
            else:
                kwargs[key] = value

        def coerce(value, typ):
            if not isinstance(value, str):
                return value
            if typ is bool:
                return value.lower() in ("1", "true", "yes", "on")
            return typ(value)

        scalar_types = {
            "lambda_reg": float, "k_retrieved": int, "batch_size": int,
            "learning_rate": float, "max_epochs": int, "patience": int,
            "seed": int, "evidence_setting": str,
            "detach_verdict_in_consistency": bool,
        }
        out = {}
        for name, typ in scalar_types.items():
            if name in kwargs:
                out[name] = coerce(kwargs.pop(name), typ)
        if "ablations" in kwargs:
            raw = kwargs.pop("ablations")
            if isinstance(raw, str):
                raw = [a for a in raw.split(",") if a]
            out["ablations"] = frozenset(raw)
        if "generation" in kwargs:
            raw = kwargs.pop("generation")
            if isinstance(raw, str):
                out["generation"] = None if raw.lower() in ("auto", "") else coerce(raw, bool)
            else:
                out["generation"] = raw
        if kwargs:
            raise ValueError(f"unknown config keys {sorted(kwargs)}")

        for group, config_cls in (("encoder", EncoderConfig), ("seq2seq", Seq2SeqConfig)):
            if nested[group]:
                sub_types = {f.name: f.type for f in fields(config_cls)}
                sub_kwargs = {}
                for name, value in nested[group].items():
                    if name not in sub_types:
                        raise ValueError(f"unknown config key {group}.{name}")
                    sub_kwargs[name] = coerce(value, int)
                out[group] = config_cls(**sub_kwargs)
        return cls(**out)


def load_config_file(path) -> dict[str, str]:
    """Flat key=value UTF-8 config; '#' starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# checkpoint format

@dataclass
class Checkpoint:
    kind: str
    config: dict
    epoch: int
    arrays: dict[str, np.ndarray]
    vocab_tokens: tuple[str, ...]
    rng_state: bytes
    history: tuple[dict, ...]
    extra: dict


def _pack(obj, out: bytearray) -> None:
    if obj is None:
        out += b"N"
    elif obj is True:
        out += b"T"
    elif obj is False:
        out += b"F"
    elif isinstance(obj, int):
        out += b"I" + struct.pack("<q", obj)
    elif isinstance(obj, float):
        out += b"D" + struct.pack("<d", obj)
    elif isinstance(obj, str):
        raw = obj.encode("utf-8")
        out += b"S" + struct.pack("<I", len(raw)) + raw
    elif isinstance(obj, bytes):
        out += b"B" + struct.pack("<I", len(obj)) + obj
    elif isinstance(obj, np.ndarray):
        arr = np.ascontiguousarray(obj)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        dt = arr.dtype.str.encode("ascii")
        out += b"A" + struct.pack("<I", len(dt)) + dt
        out += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<q", dim)
        raw = arr.tobytes()
        out += struct.pack("<Q", len(raw)) + raw
    elif isinstance(obj, (list, tuple)):
        out += b"L" + struct.pack("<I", len(obj))
        for item in obj:
            _pack(item, out)
    elif isinstance(obj, dict):
        out += b"M" + struct.pack("<I", len(obj))
        for key in sorted(obj):
            _pack(str(key), out)
            _pack(obj[key], out)
    else:
        raise TypeError(f"cannot serialize {type(obj)!r}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFile("truncated checkpoint payload")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def _unpack(r: _Reader):
    tag = r.take(1)
    if tag == b"N":
        return None
    if tag == b"T":
        return True
    if tag == b"F":
        return False
    if tag == b"I":
        return struct.unpack("<q", r.take(8))[0]
    if tag == b"D":
        return struct.unpack("<d", r.take(8))[0]
    if tag == b"S":
        (n,) = struct.unpack("<I", r.take(4))
        return r.take(n).decode("utf-8")
    if tag == b"B":
        (n,) = struct.unpack("<I", r.take(4))
        return r.take(n)
    if tag == b"A":
        (dt_len,) = struct.unpack("<I", r.take(4))
        dtype = np.dtype(r.take(dt_len).decode("ascii"))
        (ndim,) = struct.unpack("<I", r.take(4))
        shape = tuple(struct.unpack("<q", r.take(8))[0] for _ in range(ndim))
        (raw_len,) = struct.unpack("<Q", r.take(8))
        return np.frombuffer(r.take(raw_len), dtype=dtype).reshape(shape).copy()
    if tag == b"L":
        (n,) = struct.unpack("<I", r.take(4))
        return [_unpack(r) for _ in range(n)]
    if tag == b"M":
        (n,) = struct.unpack("<I", r.take(4))
        out = {}
        for _ in range(n):
            key = _unpack(r)
            out[key] = _unpack(r)
        return out
    raise CorruptFile(f"unknown tag {tag!r} in checkpoint")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = bytearray()
    _pack({
        "kind": ckpt.kind,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "arrays": ckpt.arrays,
        "vocab": list(ckpt.vocab_tokens),
        "rng": ckpt.rng_state,
        "history": list(ckpt.history),
        "extra": ckpt.extra,
    }, payload)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIQ", CHECKPOINT_VERSION, zlib.crc32(payload), len(payload)))
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 16:
        raise CorruptFile("file too short to be a checkpoint")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptFile("not a checkpoint file")
    version, crc, length = struct.unpack("<IIQ", data[8:24])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    payload = data[24:]
    if len(payload) != length:
        raise CorruptFile(f"payload length {len(payload)} != header {length}")
    if zlib.crc32(payload) != crc:
        raise CorruptFile("checkpoint checksum mismatch")
    obj = _unpack(_Reader(bytes(payload)))
    return Checkpoint(
        kind=obj["kind"], config=obj["config"], epoch=obj["epoch"],
        arrays=obj["arrays"], vocab_tokens=tuple(obj["vocab"]),
        rng_state=obj["rng"], history=tuple(obj["history"]), extra=obj["extra"],
    )


# ---------------------------------------------------------------------------
# module <-> array helpers

def _group_key(prefix: str, gname: str, name: str) -> str:
    return f"{prefix}/{gname}/{name}" if prefix else f"{gname}/{name}"


def _group_arrays(groups: dict[str, torch.nn.Module], prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for gname, module in sorted(groups.items()):
        for name, p in sorted(module.named_parameters()):
            out[_group_key(prefix, gname, name)] = p.detach().cpu().numpy().copy()
    return out


def _load_group_arrays(groups: dict[str, torch.nn.Module], arrays: dict,
                       prefix: str) -> None:
    with torch.no_grad():
        for gname, module in sorted(groups.items()):
            for name, p in sorted(module.named_parameters()):
                p.copy_(torch.from_numpy(arrays[_group_key(prefix, gname, name)]))


def _optimizer_arrays(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                out[f"opt/{idx}/{key}"] = value.detach().cpu().numpy().copy()
            else:
                out[f"opt/{idx}/{key}"] = np.asarray(value)
    return out


def _load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict) -> None:
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        if not key.startswith("opt/"):
            continue
        _, idx, name = key.split("/", 2)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(value.copy())
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def _generator_state(gen: torch.Generator) -> bytes:
    return gen.get_state().numpy().tobytes()


def _restore_generator(gen: torch.Generator, raw: bytes) -> None:
    gen.set_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))


def _batches(order: list[int], size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


# ---------------------------------------------------------------------------
# stage 1: retriever

@dataclass
class RetrieverTrainResult:
    encoder: GraphEncoder
    log: list[dict]
    checkpoint: Checkpoint


def _retrieval_validation_map(dataset: Dataset, encoder: GraphEncoder,
                              claim_ids, ablations: frozenset) -> float | None:
    claims = [dataset.claim(cid) for cid in claim_ids
              if dataset.claim(cid).gold_evidence_ids]
    if not claims:
        return None
    index = build_index(dataset, encoder, ablations)
    rankings, gold = {}, {}
    for claim in claims:
        with torch.no_grad():
            unit = encoder.encode(claim.text, dataset.images_for(claim),
                                  mode=RETRIEVAL, ablations=ablations)
        rankings[claim.id] = [eid for eid, _ in rank_all(unit.text_embedding, index)]
        gold[claim.id] = set(claim.gold_evidence_ids)
    return mean_average_precision(rankings, gold)


def train_retriever(dataset: Dataset, config: TrainConfig,
                    resume_from: Checkpoint | None = None) -> RetrieverTrainResult:
    """Contrastive training with Adam, early-stopped on validation MAP."""
    vocab = Vocabulary.build(dataset.all_texts(), config.encoder.vocab_size)
    encoder = GraphEncoder(config.encoder, vocab, seed=config.seed)
    groups = {"encoder": encoder}
    opt_params = [p for _, p in sorted(encoder.named_parameters())]
    opt = torch.optim.Adam(opt_params, lr=config.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    shuffle_gen = torch.Generator().manual_seed(config.seed + 1)

    history: list[dict] = []
    best_metric = -math.inf
    bad_epochs = 0
    start_epoch = 0
    if resume_from is not None:
        if resume_from.kind != "retriever":
            raise ValueError(f"cannot resume retriever from {resume_from.kind!r} checkpoint")
        vocab = Vocabulary(tokens=list(resume_from.vocab_tokens))
        encoder.vocab = vocab
        _load_group_arrays(groups, resume_from.arrays, "model")
        _load_optimizer_arrays(opt, resume_from.arrays)
        _restore_generator(shuffle_gen, resume_from.rng_state)
        history = [dict(h) for h in resume_from.history]
        best_metric = resume_from.extra["best_metric"]
        bad_epochs = resume_from.extra["bad_epochs"]
        best_arrays = {k: v for k, v in resume_from.arrays.items() if k.startswith("best/")}
        start_epoch = resume_from.epoch
    else:
        best_arrays = {f"best/{k.split('/', 1)[1]}": v
                       for k, v in _group_arrays(groups, "model").items()}

    def snapshot(epoch: int) -> Checkpoint:
        arrays = _group_arrays(groups, "model")
        arrays.update(best_arrays)
        arrays.update(_optimizer_arrays(opt))
        return Checkpoint(
            kind="retriever", config=config.to_mapping(), epoch=epoch,
            arrays=arrays, vocab_tokens=tuple(vocab.tokens),
            rng_state=_generator_state(shuffle_gen), history=tuple(history),
            extra={"best_metric": best_metric, "bad_epochs": bad_epochs,
                   "label_set": list(dataset.label_set)},
        )

    train_claims = [dataset.claim(cid) for cid in dataset.splits.get("train", ())
                    if dataset.claim(cid).gold_evidence_ids]
    if not train_claims:
        raise ValueError("train split has no claims with gold evidence")
    val_ids = list(dataset.splits.get("val", ()))

    last_good = snapshot(start_epoch)
    for epoch in range(start_epoch, config.max_epochs):
        perm = torch.randperm(len(train_claims), generator=shuffle_gen).tolist()
        epoch_loss = 0.0
        for chunk in _batches(perm, config.batch_size):
            if len(chunk) < 2:
                continue
            cache: dict[str, torch.Tensor] = {}
            claim_rows, evidence_rows = [], []
            for i in chunk:
                claim = train_claims[i]
                claim_rows.append(encoder.encode(
                    claim.text, dataset.images_for(claim),
                    mode=RETRIEVAL, ablations=config.ablations).text_embedding)
                ev = dataset.evidence_by_id(claim.gold_evidence_ids[0])
                if ev.id not in cache:
                    cache[ev.id] = encoder.encode(
                        ev.text, dataset.images_for(ev),
                        mode=RETRIEVAL, ablations=config.ablations).text_embedding
                evidence_rows.append(cache[ev.id])
            loss = contrastive_loss(torch.stack(claim_rows), torch.stack(evidence_rows))
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite retrieval loss at epoch {epoch}", checkpoint=last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()

        metric = _retrieval_validation_map(dataset, encoder, val_ids, config.ablations)
        if metric is None:
            metric = -epoch_loss
        history.append({"epoch": epoch, "loss": epoch_loss, "metric": metric})
        if metric >= best_metric:
            bad_epochs = 0 if metric > best_metric else bad_epochs + 1
            best_metric = metric
            best_arrays = {f"best/{k.split('/', 1)[1]}": v
                           for k, v in _group_arrays(groups, "model").items()}
        else:
            bad_epochs += 1
        last_good = snapshot(epoch + 1)
        if bad_epochs >= config.patience:
            break

    checkpoint = last_good
    _load_group_arrays(groups, {k.replace("best/", "", 1): v for k, v in best_arrays.items()},
                       "")
    return RetrieverTrainResult(encoder=encoder, log=history, checkpoint=checkpoint)


def restore_retriever(ckpt: Checkpoint) -> GraphEncoder:
    if ckpt.kind != "retriever":
        raise ValueError(f"expected retriever checkpoint, got {ckpt.kind!r}")
    config = TrainConfig.from_mapping(ckpt.config)
    vocab = Vocabulary(tokens=list(ckpt.vocab_tokens))
    encoder = GraphEncoder(config.encoder, vocab, seed=config.seed)
    best = {k.replace("best/", "", 1): v for k, v in ckpt.arrays.items()
            if k.startswith("best/")}
    _load_group_arrays({"encoder": encoder}, best, "")
    return encoder


def freeze_and_retrieve(dataset: Dataset, encoder: GraphEncoder, k: int,
                        ablations: frozenset = frozenset()) -> dict[str, RankedList]:
    """Build the index once and rank evidence for every claim in the dataset."""
    index = build_index(dataset, encoder, ablations)
    out = {}
    for claim in dataset.claims:
        out[claim.id] = retrieve(claim, dataset.images_for(claim), encoder,
                                 index, k, ablations)
    return out


# ---------------------------------------------------------------------------
# stage 2: joint verification + explanation

@dataclass
class JointTrainResult:
    model: JointModel
    log: list[dict]
    checkpoint: Checkpoint


def build_joint_model(config: TrainConfig, vocab: Vocabulary,
                      label_set: tuple[str, ...]) -> JointModel:
    encoder = GraphEncoder(config.encoder, vocab, seed=config.seed)
    verifier = Verifier(config.encoder.dim, len(label_set),
                        config.encoder.n_heads, seed=config.seed + 101)
    seq2seq = Seq2Seq(config.seq2seq, vocab, seed=config.seed + 202)
    head = ConsistencyHead(config.seq2seq.vocab_size, config.seq2seq.dim,
                           len(label_set), seed=config.seed + 303)
    return JointModel(encoder=encoder, verifier=verifier, seq2seq=seq2seq,
                      consistency_head=head, label_set=tuple(label_set))


def _joint_validation_macro_f1(model: JointModel, dataset: Dataset, claim_ids,
                               setting: str, retrieved, k: int,
                               ablations: frozenset) -> float | None:
    preds, golds = [], []
    cache: dict = {}
    for cid in claim_ids:
        claim = dataset.claim(cid)
        records = evidence_for_claim(dataset, claim, setting, retrieved, k)
        if not records:
            continue
        pred = predict_forward(model, dataset, claim, records,
                               ablations=ablations, generate=False, cache=cache)
        preds.append(pred.predicted_label)
        golds.append(claim.label)
    if not preds:
        return None
    return f1_scores(preds, golds, dataset.label_set).macro


def train_joint(dataset: Dataset, retrieved: dict[str, RankedList] | None,
                config: TrainConfig,
                resume_from: Checkpoint | None = None) -> JointTrainResult:
    """Joint optimization of verification + generation + consistency losses,
    early-stopped on validation Macro F1."""
    generation = config.generation
    if generation is None:
        generation = dataset.has_explanations
    if generation and not dataset.has_explanations:
        raise MissingExplanations("generation loss requested on a dataset without explanations")

    vocab = Vocabulary.build(dataset.all_texts(), config.encoder.vocab_size)
    model = build_joint_model(config, vocab, dataset.label_set)
    groups = model.groups()
    opt_params = [p for _, p in model.train_targets()]
    opt = torch.optim.Adam(opt_params, lr=config.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    shuffle_gen = torch.Generator().manual_seed(config.seed + 2)

    history: list[dict] = []
    best_metric = -math.inf
    bad_epochs = 0
    start_epoch = 0
    if resume_from is not None:
        if resume_from.kind != "joint":
            raise ValueError(f"cannot resume joint training from {resume_from.kind!r} checkpoint")
        vocab = Vocabulary(tokens=list(resume_from.vocab_tokens))
        model.encoder.vocab = vocab
        model.seq2seq.vocab = vocab
        _load_group_arrays(groups, resume_from.arrays, "model")
        _load_optimizer_arrays(opt, resume_from.arrays)
        _restore_generator(shuffle_gen, resume_from.rng_state)
        history = [dict(h) for h in resume_from.history]
        best_metric = resume_from.extra["best_metric"]
        bad_epochs = resume_from.extra["bad_epochs"]
        best_arrays = {k: v for k, v in resume_from.arrays.items() if k.startswith("best/")}
        start_epoch = resume_from.epoch
    else:
        best_arrays = {f"best/{k.split('/', 1)[1]}": v
                       for k, v in _group_arrays(groups, "model").items()}

    def snapshot(epoch: int) -> Checkpoint:
        arrays = _group_arrays(groups, "model")
        arrays.update(best_arrays)
        arrays.update(_optimizer_arrays(opt))
        return Checkpoint(
            kind="joint", config=config.to_mapping(), epoch=epoch,
            arrays=arrays, vocab_tokens=tuple(vocab.tokens),
            rng_state=_generator_state(shuffle_gen), history=tuple(history),
            extra={"best_metric": best_metric, "bad_epochs": bad_epochs,
                   "label_set": list(dataset.label_set),
                   "generation": generation},
        )

    setting = config.evidence_setting
    if setting == "retrieved" and retrieved is None:
        raise ValueError("retrieved evidence setting requires a retrieval map")
    train_claims = []
    for cid in dataset.splits.get("train", ()):
        claim = dataset.claim(cid)
        if setting == "gold" and not claim.gold_evidence_ids:
            continue
        train_claims.append(claim)
    if not train_claims:
        raise ValueError("train split has no usable claims")
    val_ids = list(dataset.splits.get("val", ()))

    lambda_eff = 0.0 if "no_regularizer" in config.ablations else config.lambda_reg
    last_good = snapshot(start_epoch)
    for epoch in range(start_epoch, config.max_epochs):
        perm = torch.randperm(len(train_claims), generator=shuffle_gen).tolist()
        epoch_loss = 0.0
        for chunk in _batches(perm, config.batch_size):
            cache: dict = {}
            parts = {"verification": [], "generation": [], "consistency": [], "total": []}
            for i in chunk:
                claim = train_claims[i]
                records = evidence_for_claim(dataset, claim, setting, retrieved,
                                             config.k_retrieved)
                fw = train_forward(
                    model, dataset, claim, records, config.lambda_reg,
                    ablations=config.ablations, generation=generation,
                    detach_verdict=config.detach_verdict_in_consistency,
                    cache=cache)
                parts["verification"].append(fw.verification)
                parts["total"].append(fw.total)
                if fw.generation is not None:
                    parts["generation"].append(fw.generation)
                    parts["consistency"].append(fw.consistency)
            n = len(parts["total"])
            loss = torch.stack(parts["total"]).sum() / n
            ver = torch.stack(parts["verification"]).sum().item() / n
            gen = torch.stack(parts["generation"]).sum().item() / n if parts["generation"] else 0.0
            reg = torch.stack(parts["consistency"]).sum().item() / n if parts["consistency"] else 0.0
            if abs(loss.item() - (ver + gen + lambda_eff * reg)) > 1e-6 * max(1.0, abs(loss.item())):
                raise AssertionError("loss components do not sum to the batch total")
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite joint loss at epoch {epoch}", checkpoint=last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()

        metric = _joint_validation_macro_f1(
            model, dataset, val_ids, setting, retrieved,
            config.k_retrieved, config.ablations)
        if metric is None:
            metric = -epoch_loss
        history.append({"epoch": epoch, "loss": epoch_loss, "metric": metric})
        if metric >= best_metric:
            bad_epochs = 0 if metric > best_metric else bad_epochs + 1
            best_metric = metric
            best_arrays = {f"best/{k.split('/', 1)[1]}": v
                           for k, v in _group_arrays(groups, "model").items()}
        else:
            bad_epochs += 1
        last_good = snapshot(epoch + 1)
        if bad_epochs >= config.patience:
            break

    checkpoint = last_good
    _load_group_arrays(groups, {k.replace("best/", "", 1): v for k, v in best_arrays.items()},
                       "")
    return JointTrainResult(model=model, log=history, checkpoint=checkpoint)


def restore_joint(ckpt: Checkpoint) -> JointModel:
    if ckpt.kind != "joint":
        raise ValueError(f"expected joint checkpoint, got {ckpt.kind!r}")
    config = TrainConfig.from_mapping(ckpt.config)
    vocab = Vocabulary(tokens=list(ckpt.vocab_tokens))
    model = build_joint_model(config, vocab, tuple(ckpt.extra["label_set"]))
    best = {k.replace("best/", "", 1): v for k, v in ckpt.arrays.items()
            if k.startswith("best/")}
    _load_group_arrays(model.groups(), best, "")
    return model


# ---------------------------------------------------------------------------
# evaluation protocol and ablations

def evaluate_split(dataset: Dataset, split: str, retriever: GraphEncoder | None = None,
                   joint: JointModel | None = None, setting: str = "gold",
                   k: int = 3, ablations: frozenset = frozenset(),
                   metadata: dict | None = None):
    """Score one split: retrieval over the full corpus ranking, verification
    under the chosen evidence setting, and generation when the dataset
    carries gold explanations."""
    from .evalkit import build_report

    claims = dataset.split_claims(split)
    if not claims:
        raise ValueError(f"split {split!r} is empty")

    rankings = gold = None
    retrieved_map: dict[str, RankedList] | None = None
    if retriever is not None:
        index = build_index(dataset, retriever, ablations)
        rankings, gold, retrieved_map = {}, {}, {}
        for claim in claims:
            with torch.no_grad():
                unit = retriever.encode(claim.text, dataset.images_for(claim),
                                        mode=RETRIEVAL, ablations=ablations)
            ranked = rank_all(unit.text_embedding, index)
            retrieved_map[claim.id] = RankedList(claim_id=claim.id,
                                                 entries=tuple(ranked[:k]))
            if claim.gold_evidence_ids:
                rankings[claim.id] = [eid for eid, _ in ranked]
                gold[claim.id] = set(claim.gold_evidence_ids)
        if not rankings:
            rankings = gold = None

    preds = golds = generated = references = None
    if joint is not None:
        do_generation = dataset.has_explanations
        preds, golds = [], []
        if do_generation:
            generated, references = [], []
        cache: dict = {}
        for claim in claims:
            records = evidence_for_claim(dataset, claim, setting, retrieved_map, k)
            if not records:
                continue
            pred = predict_forward(joint, dataset, claim, records,
                                   ablations=ablations, generate=do_generation,
                                   cache=cache)
            preds.append(pred.predicted_label)
            golds.append(claim.label)
            if do_generation:
                generated.append(pred.explanation)
                references.append(claim.explanation)
        if not preds:
            preds = golds = generated = references = None

    meta = {"split": split, "evidence_setting": setting, "k": k}
    meta.update(metadata or {})
    return build_report(rankings=rankings, gold_evidence=gold, preds=preds,
                        golds=golds, label_set=dataset.label_set,
                        generated=generated, references=references, metadata=meta)


_ENCODER_ABLATIONS = frozenset({"no_images", "no_i2t", "no_t2i"})


def run_ablation_matrix(dataset: Dataset, config: TrainConfig,
                        split: str = "test") -> list[dict]:
    """Train and score the full model, each single-mechanism toggle, and a
    zero-weight regularizer run; returns one comparison row per variant."""
    variants: list[tuple[str, frozenset, float]] = [("full", frozenset(), config.lambda_reg)]
    variants += [(flag, frozenset({flag}), config.lambda_reg) for flag in ALL_ABLATIONS]
    variants.append(("lambda_zero", frozenset(), 0.0))

    base_stage1: RetrieverTrainResult | None = None
    rows = []
    for name, flags, lam in variants:
        cfg = replace(config, ablations=flags, lambda_reg=lam)
        if flags & _ENCODER_ABLATIONS or base_stage1 is None:
            stage1 = train_retriever(dataset, cfg)
            if not (flags & _ENCODER_ABLATIONS):
                base_stage1 = stage1
        else:
            stage1 = base_stage1
        retrieved = freeze_and_retrieve(dataset, stage1.encoder,
                                        cfg.k_retrieved, flags)
        stage2 = train_joint(dataset, retrieved, cfg)
        report = evaluate_split(dataset, split, retriever=stage1.encoder,
                                joint=stage2.model, setting=cfg.evidence_setting,
                                k=cfg.k_retrieved, ablations=flags,
                                metadata={"ablation": name, "seed": cfg.seed})
        rows.append({
            "ablation": name,
            "map": (report.retrieval or {}).get("map"),
            "macro_f1": (report.verification or {}).get("macro_f1"),
            "rougeL": (report.generation or {}).get("rougeL"),
        })

    full = rows[0]
    for row in rows:
        for metric in ("map", "macro_f1", "rougeL"):
            base_value = full[metric]
            value = row[metric]
            row[f"d_{metric}"] = (value - base_value
                                  if value is not None and base_value is not None else None)
    return rows
