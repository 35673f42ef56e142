"""Corpus schema, loading, validation, alignment, and synthetic generation.

On disk a corpus is a directory with ``claims.jsonl``, ``evidence.jsonl``,
``splits.json`` and an ``images/`` directory of 8-bit RGB PNGs. All text is
UTF-8. The label set is derived from observed claim labels in canonical
order (SUPPORT, REFUTE, NEI, then anything else sorted), padded to at least
two entries.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .errors import (
    CorpusValidationError,
    DanglingReference,
    EmptyImagePool,
    MalformedRecord,
    MissingFile,
    TooFewClaims,
)

CANONICAL_LABELS = ("SUPPORT", "REFUTE", "NEI")

_CLAIM_KEYS = ("id", "text", "image_ids", "gold_evidence_ids", "label", "explanation")
_EVIDENCE_KEYS = ("id", "text", "image_ids")


@dataclass(frozen=True)
class ClaimRecord:
    id: str
    text: str
    image_ids: tuple[str, ...]
    gold_evidence_ids: tuple[str, ...]
    label: str
    explanation: str | None = None


@dataclass(frozen=True)
class EvidenceRecord:
    id: str
    text: str
    image_ids: tuple[str, ...]


@dataclass(frozen=True)
class ImageRecord:
    id: str
    uri: str
    height: int
    width: int
    channels: int
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Dataset:
    claims: tuple[ClaimRecord, ...]
    evidence: tuple[EvidenceRecord, ...]
    images: tuple[ImageRecord, ...]
    splits: dict[str, tuple[str, ...]]
    label_set: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_claims_by_id", {c.id: c for c in self.claims})
        object.__setattr__(self, "_evidence_by_id", {e.id: e for e in self.evidence})
        object.__setattr__(self, "_images_by_id", {i.id: i for i in self.images})

    def claim(self, claim_id: str) -> ClaimRecord:
        return self._claims_by_id[claim_id]

    def evidence_by_id(self, evidence_id: str) -> EvidenceRecord:
        return self._evidence_by_id[evidence_id]

    def image(self, image_id: str) -> ImageRecord:
        return self._images_by_id[image_id]

    def images_for(self, record: ClaimRecord | EvidenceRecord) -> list[ImageRecord]:
        return [self._images_by_id[i] for i in record.image_ids]

    @property
    def has_explanations(self) -> bool:
        return len(self.claims) > 0 and all(c.explanation is not None for c in self.claims)

    def split_claims(self, split: str) -> list[ClaimRecord]:
        return [self._claims_by_id[cid] for cid in self.splits.get(split, ())]

    def all_texts(self) -> list[str]:
        texts = [c.text for c in self.claims] + [e.text for e in self.evidence]
        texts += [c.explanation for c in self.claims if c.explanation is not None]
        return texts


@dataclass
class ValidationReport:
    errors: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[tuple[str, str]] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors


def derive_label_set(labels) -> tuple[str, ...]:
    observed = set(labels)
    ordered = [l for l in CANONICAL_LABELS if l in observed]
    ordered += sorted(observed - set(CANONICAL_LABELS))
    for fallback in CANONICAL_LABELS:
        if len(ordered) >= 2:
            break
        if fallback not in ordered:
            ordered.append(fallback)
    return tuple(ordered)


# ---------------------------------------------------------------------------
# validation

def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Report every invariant violation; never raises."""
    report = ValidationReport()
    err = report.errors.append
    warn = report.warnings.append

    report.counts = {
        "claims": len(dataset.claims),
        "evidence": len(dataset.evidence),
        "images": len(dataset.images),
    }

    if not dataset.evidence:
        err(("evidence", "evidence corpus is empty"))
    if len(dataset.label_set) not in (2, 3):
        err(("label_set", f"label_set size must be 2 or 3, got {len(dataset.label_set)}"))

    for name, records in (("claim", dataset.claims), ("evidence", dataset.evidence), ("image", dataset.images)):
        seen = set()
        for r in records:
            if r.id in seen:
                err((r.id, f"duplicate {name} id"))
            seen.add(r.id)

    image_ids = {i.id for i in dataset.images}
    evidence_ids = {e.id for e in dataset.evidence}
    referenced_images = set()

    for c in dataset.claims:
        if c.label not in dataset.label_set:
            err((c.id, f"label {c.label!r} not in label_set {list(dataset.label_set)}"))
        for iid in c.image_ids:
            referenced_images.add(iid)
            if iid not in image_ids:
                err((c.id, f"dangling image reference {iid!r}"))
        for eid in c.gold_evidence_ids:
            if eid not in evidence_ids:
                err((c.id, f"dangling evidence reference {eid!r}"))
        if not c.gold_evidence_ids and c.label != "NEI":
            warn((c.id, f"label {c.label} but no gold evidence"))

    for e in dataset.evidence:
        for iid in e.image_ids:
            referenced_images.add(iid)
            if iid not in image_ids:
                err((e.id, f"dangling image reference {iid!r}"))

    with_expl = [c for c in dataset.claims if c.explanation is not None]
    if with_expl and len(with_expl) != len(dataset.claims):
        for c in dataset.claims:
            if c.explanation is None:
                err((c.id, "explanation missing but dataset declares explanations"))

    for img in dataset.images:
        if img.height < 1 or img.width < 1:
            err((img.id, f"degenerate image size {img.height}x{img.width}"))
        if img.channels != 3:
            err((img.id, f"expected 3 channels (RGB), got {img.channels}"))
        if img.pixels is not None and img.pixels.shape != (img.height, img.width, img.channels):
            err((img.id, f"pixel array shape {img.pixels.shape} disagrees with record"))
        if img.id not in referenced_images:
            warn((img.id, "image never referenced"))

    claim_ids = {c.id for c in dataset.claims}
    assigned: dict[str, str] = {}
    for split_name, ids in dataset.splits.items():
        for cid in ids:
            if cid not in claim_ids:
                err((split_name, f"split references unknown claim {cid!r}"))
            elif cid in assigned:
                err((split_name, f"claim {cid!r} already in split {assigned[cid]!r}"))
            else:
                assigned[cid] = split_name

    return report


# ---------------------------------------------------------------------------
# load / save

def _read_jsonl(path: Path, required: tuple[str, ...], optional: tuple[str, ...] = ()):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(path, line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise MalformedRecord(path, line_no, "record is not an object")
            missing = [k for k in required if k not in obj]
            if missing:
                raise MalformedRecord(path, line_no, f"missing keys {missing}")
            unknown = [k for k in obj if k not in required and k not in optional]
            if unknown:
                raise MalformedRecord(path, line_no, f"unknown keys {unknown}")
            rows.append((line_no, obj))
    return rows


def _as_str_tuple(path, line_no, key, value):
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise MalformedRecord(path, line_no, f"{key} must be a list of strings")
    return tuple(value)


def load_image(path: Path, image_id: str, uri: str) -> ImageRecord:
    with Image.open(path) as im:
        arr = np.array(im.convert("RGB") if im.mode == "RGB" else im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageRecord(
        id=image_id,
        uri=uri,
        height=arr.shape[0],
        width=arr.shape[1],
        channels=arr.shape[2],
        pixels=arr,
    )


def load_corpus(root) -> Dataset:
    """Load and validate a corpus directory; any validation error aborts."""
    root = Path(root)
    claims_path = root / "claims.jsonl"
    evidence_path = root / "evidence.jsonl"
    splits_path = root / "splits.json"
    images_dir = root / "images"
    for p in (claims_path, evidence_path, splits_path):
        if not p.is_file():
            raise MissingFile(str(p))
    if not images_dir.is_dir():
        raise MissingFile(str(images_dir))

    claims = []
    for line_no, obj in _read_jsonl(claims_path, _CLAIM_KEYS[:5], optional=("explanation",)):
        if not isinstance(obj["id"], str) or not isinstance(obj["text"], str) or not isinstance(obj["label"], str):
            raise MalformedRecord(claims_path, line_no, "id, text and label must be strings")
        expl = obj.get("explanation")
        if expl is not None and not isinstance(expl, str):
            raise MalformedRecord(claims_path, line_no, "explanation must be a string")
        claims.append(ClaimRecord(
            id=obj["id"],
            text=obj["text"],
            image_ids=_as_str_tuple(claims_path, line_no, "image_ids", obj["image_ids"]),
            gold_evidence_ids=_as_str_tuple(claims_path, line_no, "gold_evidence_ids", obj["gold_evidence_ids"]),
            label=obj["label"],
            explanation=expl,
        ))

    evidence = []
    for line_no, obj in _read_jsonl(evidence_path, _EVIDENCE_KEYS):
        if not isinstance(obj["id"], str) or not isinstance(obj["text"], str):
            raise MalformedRecord(evidence_path, line_no, "id and text must be strings")
        evidence.append(EvidenceRecord(
            id=obj["id"],
            text=obj["text"],
            image_ids=_as_str_tuple(evidence_path, line_no, "image_ids", obj["image_ids"]),
        ))

    images = []
    for png in sorted(images_dir.glob("*.png")):
        images.append(load_image(png, png.stem, f"images/{png.name}"))

    try:
        splits_raw = json.loads(splits_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedRecord(splits_path, 1, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(splits_raw, dict):
        raise MalformedRecord(splits_path, 1, "splits.json must be an object")
    splits = {}
    for name, ids in splits_raw.items():
        splits[name] = _as_str_tuple(splits_path, 1, name, ids)

    dataset = Dataset(
        claims=tuple(claims),
        evidence=tuple(evidence),
        images=tuple(images),
        splits=splits,
        label_set=derive_label_set(c.label for c in claims),
    )

    report = validate_dataset(dataset)
    if not report.ok:
        dangling = [(rid, msg) for rid, msg in report.errors if "dangling" in msg]
        if dangling:
            raise DanglingReference(dangling[0][0], dangling[0][1])
        raise CorpusValidationError(report)
    return dataset


def _claim_to_json(c: ClaimRecord) -> str:
    obj = {
        "id": c.id,
        "text": c.text,
        "image_ids": list(c.image_ids),
        "gold_evidence_ids": list(c.gold_evidence_ids),
        "label": c.label,
    }
    if c.explanation is not None:
        obj["explanation"] = c.explanation
    return json.dumps(obj, ensure_ascii=False)


def save_corpus(dataset: Dataset, root) -> None:
    """Write the corpus directory; inverse of load_corpus on valid datasets."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)

    with open(root / "claims.jsonl", "w", encoding="utf-8") as fh:
        for c in dataset.claims:
            fh.write(_claim_to_json(c) + "\n")

    with open(root / "evidence.jsonl", "w", encoding="utf-8") as fh:
        for e in dataset.evidence:
            fh.write(json.dumps({
                "id": e.id,
                "text": e.text,
                "image_ids": list(e.image_ids),
            }, ensure_ascii=False) + "\n")

    ordered = {}
    for name in ("train", "val", "test"):
        if name in dataset.splits:
            ordered[name] = list(dataset.splits[name])
    for name in sorted(dataset.splits):
        if name not in ordered:
            ordered[name] = list(dataset.splits[name])
    (root / "splits.json").write_text(json.dumps(ordered, ensure_ascii=False), encoding="utf-8")

    for img in dataset.images:
        if img.pixels is None:
            raise ValueError(f"image {img.id} has no pixel data to save")
        Image.fromarray(img.pixels).save(root / "images" / f"{img.id}.png")


# ---------------------------------------------------------------------------
# alignment

def align_images(dataset: Dataset, sim: Callable, top_k: int = 3) -> Dataset:
    """Attach the top_k most similar images to every evidence text lacking them.

    Ties break lexicographically by image id, so reruns are deterministic.
    Evidence that already carries images is untouched; idempotent.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    needs = [e for e in dataset.evidence if not e.image_ids]
    if not needs:
        return dataset
    if not dataset.images:
        raise EmptyImagePool("no images available for alignment")

    new_evidence = []
    for e in dataset.evidence:
        if e.image_ids:
            new_evidence.append(e)
            continue
        scored = sorted(
            ((float(sim(e.text, img)), img.id) for img in dataset.images),
            key=lambda pair: (-pair[0], pair[1]),
        )
        chosen = tuple(iid for _, iid in scored[:top_k])
        new_evidence.append(replace(e, image_ids=chosen))
    return replace(dataset, evidence=tuple(new_evidence))


def mean_color_similarity(text: str, image: ImageRecord) -> float:
    """Deterministic stand-in for a pre-trained cross-modal scorer.

    Hashes the text to a target color and scores images by closeness of
    their mean color. Only useful as a pluggable default for `prepare`.
    """
    h = 2166136261
    for ch in text.lower():
        h = ((h ^ ord(ch)) * 16777619) & 0xFFFFFFFF
    target = np.array([(h >> 16) & 0xFF, (h >> 8) & 0xFF, h & 0xFF], dtype=np.float64)
    if image.pixels is None:
        return 0.0
    mean = image.pixels.reshape(-1, image.channels).mean(axis=0)[:3]
    return -float(np.abs(mean - target).sum())


# ---------------------------------------------------------------------------
# synthetic corpora

_MARKERS = {"SUPPORT": "confirms", "REFUTE": "rejects", "NEI": "mentions"}


def _palette(n: int) -> list[tuple[int, int, int]]:
    colors = []
    for j in range(n):
        r, g, b = colorsys.hsv_to_rgb(j / max(n, 1), 1.0, 1.0)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return colors


def _render_image(color: tuple[int, int, int], variant: int, size: int = 16) -> np.ndarray:
    arr = np.zeros((size, size, 3), dtype=np.uint8)
    arr[:, :] = [c // 4 for c in color]
    x0 = 2 + 3 * (variant % 4)
    arr[2:size - 2, x0:x0 + 2] = color
    arr[size - 3:size - 1, 2:size - 2] = color
    return arr


def generate_synthetic(
    seed: int,
    n_claims: int,
    n_evidence: int,
    n_images: int,
    vocab: int,
    with_explanations: bool,
    label_set: tuple[str, ...] = ("SUPPORT", "REFUTE"),
) -> Dataset:
    """Deterministic toy corpus where text and images carry correlated signal.

    Evidence texts come in pairs with identical wording but differently
    colored images, so ranking inside a pair is only solvable through the
    image channel; claims carry their gold evidence's image. Labels are
    balanced and revealed by a marker word in the claim text. Splits are
    built in, stratified by (gold pair-parity, label) so the train split
    keeps the text-only ambiguity symmetric.
    """
    if min(n_claims, n_evidence, n_images) < 1:
        raise ValueError("counts must be >= 1")
    if vocab < 10:
        raise ValueError("vocab must be >= 10")
    rng = np.random.default_rng(seed)
    words = [f"w{i:02d}" for i in range(vocab)]

    n_pairs = (n_evidence + 1) // 2
    topics = []
    for _ in range(n_pairs):
        topics.append([words[int(k)] for k in rng.choice(vocab, size=3, replace=False)])

    colors = _palette(n_evidence)
    images = []
    for k in range(n_images):
        j = k % n_evidence
        iid = f"i{k:03d}"
        pixels = _render_image(colors[j], variant=k // n_evidence)
        images.append(ImageRecord(
            id=iid, uri=f"images/{iid}.png",
            height=pixels.shape[0], width=pixels.shape[1], channels=3,
            pixels=pixels,
        ))

    evidence = []
    evidence_images: list[tuple[str, ...]] = []
    for j in range(n_evidence):
        text = " ".join(topics[j // 2]) + " chart data"
        own = tuple(f"i{k:03d}" for k in range(n_images) if k % n_evidence == j)
        evidence_images.append(own)
        evidence.append(EvidenceRecord(id=f"e{j:03d}", text=text, image_ids=own))

    claims = []
    for n in range(n_claims):
        label = label_set[(n + n // n_evidence) % len(label_set)]
        marker = _MARKERS.get(label, label.lower())
        j = n % n_evidence
        filler = words[int(rng.integers(vocab))]
        topic = " ".join(topics[j // 2])
        text = f"the {topic} result {marker} the finding {filler}"
        if label == "NEI":
            gold: tuple[str, ...] = ()
            image_ids: tuple[str, ...] = ()
        else:
            gold = (f"e{j:03d}",)
            image_ids = evidence_images[j][:1]
        explanation = None
        if with_explanations:
            if label == "NEI":
                explanation = "the available charts do not cover this claim"
            else:
                explanation = f"the hue{j:02d} chart {marker} this claim"
        claims.append(ClaimRecord(
            id=f"c{n:03d}", text=text, image_ids=image_ids,
            gold_evidence_ids=gold, label=label, explanation=explanation,
        ))

    splits = _stratified_splits(claims, n_evidence, rng)
    return Dataset(
        claims=tuple(claims),
        evidence=tuple(evidence),
        images=tuple(images),
        splits=splits,
        label_set=derive_label_set([c.label for c in claims]),
    )


def _stratified_splits(claims, n_evidence, rng) -> dict[str, tuple[str, ...]]:
    strata: dict[tuple, list[str]] = {}
    for n, c in enumerate(claims):
        key = ((n % n_evidence) % 2, c.label)
        strata.setdefault(key, []).append(c.id)
    for ids in strata.values():
        rng.shuffle(ids)
    interleaved: list[str] = []
    buckets = [strata[k] for k in sorted(strata)]
    depth = max(len(b) for b in buckets)
    for i in range(depth):
        for b in buckets:
            if i < len(b):
                interleaved.append(b[i])

    n = len(interleaved)
    n_test = max(1, round(0.2 * n)) if n >= 3 else (1 if n >= 2 else 0)
    n_val = max(1, round(0.1 * (n - n_test))) if n - n_test >= 2 else 0
    n_train = n - n_test - n_val
    return {
        "train": tuple(interleaved[:n_train]),
        "val": tuple(interleaved[n_train:n_train + n_val]),
        "test": tuple(interleaved[n_train + n_val:]),
    }


# ---------------------------------------------------------------------------
# splitting

def split_dataset(dataset: Dataset, train: float, val: float, seed: int) -> Dataset:
    """Reassign train/val/test splits; val is carved out of the train share."""
    if not 0 < train < 1:
        raise ValueError(f"train fraction must be in (0,1), got {train}")
    if not 0 <= val < 1:
        raise ValueError(f"val fraction must be in [0,1), got {val}")
    ids = [c.id for c in dataset.claims]
    n = len(ids)
    n_train_total = round(train * n)
    n_val = round(val * n_train_total)
    n_train = n_train_total - n_val
    n_test = n - n_train_total
    if min(n_train, n_test) < 1 or (val > 0 and n_val < 1):
        raise TooFewClaims(
            f"{n} claims cannot fill train/val/test at fractions ({train}, {val})"
        )
    rng = np.random.default_rng(seed)
    order = [ids[int(i)] for i in rng.permutation(n)]
    splits = {
        "train": tuple(order[:n_train]),
        "val": tuple(order[n_train:n_train + n_val]),
        "test": tuple(order[n_train + n_val:]),
    }
    return replace(dataset, splits=splits)
