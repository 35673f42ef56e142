import json
from dataclasses import replace

import numpy as np
import pytest

from mever.datamodel import (
    ClaimRecord,
    Dataset,
    EvidenceRecord,
    ImageRecord,
    align_images,
    derive_label_set,
    generate_synthetic,
    load_corpus,
    save_corpus,
    split_dataset,
    validate_dataset,
)
from mever.errors import (
    CorpusValidationError,
    DanglingReference,
    EmptyImagePool,
    MalformedRecord,
    MissingFile,
    TooFewClaims,
)

from helpers import tiny_corpus


def test_synthetic_is_valid_and_counted():
    d = tiny_corpus()
    report = validate_dataset(d)
    assert report.errors == []
    assert report.counts == {"claims": 6, "evidence": 4, "images": 4}


def test_synthetic_deterministic():
    a = generate_synthetic(seed=11, n_claims=8, n_evidence=4, n_images=4,
                           vocab=15, with_explanations=True)
    b = generate_synthetic(seed=11, n_claims=8, n_evidence=4, n_images=4,
                           vocab=15, with_explanations=True)
    assert a.claims == b.claims
    assert a.evidence == b.evidence
    assert a.splits == b.splits
    for ia, ib in zip(a.images, b.images):
        assert np.array_equal(ia.pixels, ib.pixels)


def test_synthetic_16_claims_two_way_balance():
    d = generate_synthetic(seed=5, n_claims=16, n_evidence=8, n_images=8,
                           vocab=20, with_explanations=False)
    labels = [c.label for c in d.claims]
    assert labels.count("SUPPORT") == 8
    assert labels.count("REFUTE") == 8
    assert all(len(c.gold_evidence_ids) == 1 for c in d.claims)


@pytest.mark.parametrize("seed", range(100))
def test_synthetic_always_validates(seed):
    d = generate_synthetic(seed=seed, n_claims=5, n_evidence=3, n_images=3,
                           vocab=11, with_explanations=(seed % 2 == 0))
    assert validate_dataset(d).errors == []


def test_synthetic_rejects_bad_args():
    with pytest.raises(ValueError):
        generate_synthetic(seed=0, n_claims=0, n_evidence=1, n_images=1,
                           vocab=10, with_explanations=False)
    with pytest.raises(ValueError):
        generate_synthetic(seed=0, n_claims=1, n_evidence=1, n_images=1,
                           vocab=9, with_explanations=False)


def test_validate_flags_unknown_label():
    d = tiny_corpus()
    bad = replace(d, claims=(replace(d.claims[0], label="MAYBE"),) + d.claims[1:])
    report = validate_dataset(bad)
    assert len([e for e in report.errors if e[0] == d.claims[0].id]) == 1


def test_validate_flags_dangling_image():
    d = tiny_corpus()
    bad = replace(d, claims=(replace(d.claims[0], image_ids=("ghost",)),) + d.claims[1:])
    errors = validate_dataset(bad).errors
    assert len(errors) == 1
    assert "dangling image" in errors[0][1]


def test_validate_flags_split_problems():
    d = tiny_corpus()
    bad = replace(d, splits={"train": ("c000", "nope"), "val": ("c000",)})
    messages = [m for _, m in validate_dataset(bad).errors]
    assert any("unknown claim" in m for m in messages)
    assert any("already in split" in m for m in messages)


def test_validate_flags_mixed_explanations():
    d = tiny_corpus()
    bad = replace(d, claims=(replace(d.claims[0], explanation=None),) + d.claims[1:])
    errors = validate_dataset(bad).errors
    assert errors == [(d.claims[0].id, "explanation missing but dataset declares explanations")]


def test_empty_evidence_fails_validation():
    d = tiny_corpus()
    bad = replace(d, evidence=(),
                  claims=tuple(replace(c, gold_evidence_ids=()) for c in d.claims))
    assert any(rid == "evidence" for rid, _ in validate_dataset(bad).errors)


def test_derive_label_set_orders_canonically():
    assert derive_label_set(["REFUTE", "NEI", "SUPPORT"]) == ("SUPPORT", "REFUTE", "NEI")
    assert derive_label_set(["SUPPORT"]) == ("SUPPORT", "REFUTE")


# --- load / save -----------------------------------------------------------

def test_round_trip_records_and_bytes(tmp_path):
    for seed in range(50):
        d = generate_synthetic(seed=seed, n_claims=4, n_evidence=2, n_images=2,
                               vocab=10, with_explanations=(seed % 3 == 0))
        root1 = tmp_path / f"c{seed}" / "a"
        root2 = tmp_path / f"c{seed}" / "b"
        save_corpus(d, root1)
        loaded = load_corpus(root1)
        assert loaded.claims == d.claims
        assert loaded.evidence == d.evidence
        assert [i.id for i in loaded.images] == [i.id for i in d.images]
        assert loaded.splits == d.splits
        save_corpus(loaded, root2)
        for name in ("claims.jsonl", "evidence.jsonl", "splits.json"):
            assert (root1 / name).read_bytes() == (root2 / name).read_bytes()
        for png in (root1 / "images").glob("*.png"):
            assert png.read_bytes() == (root2 / "images" / png.name).read_bytes()


def test_load_single_claim_corpus(tmp_path):
    pixels = np.zeros((8, 8, 3), dtype=np.uint8)
    d = Dataset(
        claims=(ClaimRecord(id="c1", text="a claim", image_ids=("i1",),
                            gold_evidence_ids=("e1",), label="SUPPORT"),),
        evidence=(EvidenceRecord(id="e1", text="some text", image_ids=("i1",)),),
        images=(ImageRecord(id="i1", uri="images/i1.png", height=8, width=8,
                            channels=3, pixels=pixels),),
        splits={"train": ("c1",), "val": (), "test": ()},
        label_set=("SUPPORT", "REFUTE"),
    )
    save_corpus(d, tmp_path)
    loaded = load_corpus(tmp_path)
    report = validate_dataset(loaded)
    assert report.counts == {"claims": 1, "evidence": 1, "images": 1}


def test_load_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        load_corpus(tmp_path)


def test_load_empty_evidence_aborts(tmp_path):
    d = tiny_corpus()
    save_corpus(d, tmp_path)
    (tmp_path / "evidence.jsonl").write_text("", encoding="utf-8")
    with pytest.raises((DanglingReference, CorpusValidationError)):
        load_corpus(tmp_path)


def test_load_malformed_record_reports_line(tmp_path):
    d = tiny_corpus()
    save_corpus(d, tmp_path)
    path = tmp_path / "claims.jsonl"
    lines = path.read_text(encoding="utf-8").splitlines()
    lines[2] = "{not json"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(MalformedRecord) as exc:
        load_corpus(tmp_path)
    assert exc.value.line_no == 3


def test_load_dangling_reference(tmp_path):
    d = tiny_corpus()
    bad = replace(d, claims=(replace(d.claims[0], gold_evidence_ids=("e999",)),) + d.claims[1:])
    save_corpus(bad, tmp_path)
    with pytest.raises(DanglingReference):
        load_corpus(tmp_path)


def test_load_rejects_unknown_keys(tmp_path):
    d = tiny_corpus()
    save_corpus(d, tmp_path)
    path = tmp_path / "evidence.jsonl"
    lines = path.read_text(encoding="utf-8").splitlines()
    obj = json.loads(lines[0])
    obj["surprise"] = 1
    lines[0] = json.dumps(obj)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(MalformedRecord):
        load_corpus(tmp_path)


# --- alignment --------------------------------------------------------------

def _strip_evidence_images(d):
    return replace(d, evidence=tuple(replace(e, image_ids=()) for e in d.evidence))


def test_align_noop_when_all_have_images():
    d = tiny_corpus()
    assert align_images(d, lambda t, i: 0.0, top_k=3) is d


def test_align_indicator_with_tie_break():
    d = _strip_evidence_images(generate_synthetic(
        seed=2, n_claims=2, n_evidence=1, n_images=5, vocab=10,
        with_explanations=False))
    sim = lambda text, img: 1.0 if img.id == "i003" else 0.0
    out = align_images(d, sim, top_k=3)
    assert out.evidence[0].image_ids == ("i003", "i000", "i001")


def test_align_brute_force_oracle():
    d = _strip_evidence_images(generate_synthetic(
        seed=4, n_claims=2, n_evidence=2, n_images=6, vocab=10,
        with_explanations=False))
    scores = {f"i{k:03d}": ((k * 7) % 5) / 5.0 for k in range(6)}
    out = align_images(d, lambda t, img: scores[img.id], top_k=3)
    expected = [iid for _, iid in sorted(((-s, i) for i, s in scores.items()))][:3]
    for ev in out.evidence:
        assert list(ev.image_ids) == expected


def test_align_constant_sim_takes_smallest_ids():
    d = _strip_evidence_images(generate_synthetic(
        seed=4, n_claims=2, n_evidence=1, n_images=4, vocab=10,
        with_explanations=False))
    out = align_images(d, lambda t, i: 0.5, top_k=1)
    assert out.evidence[0].image_ids == ("i000",)


def test_align_idempotent():
    d = _strip_evidence_images(tiny_corpus())
    sim = lambda text, img: float(len(text)) - float(img.id[-1])
    once = align_images(d, sim, top_k=2)
    assert align_images(once, sim, top_k=2) == once


def test_align_empty_pool():
    d = _strip_evidence_images(tiny_corpus())
    d = replace(d, images=(),
                claims=tuple(replace(c, image_ids=()) for c in d.claims))
    with pytest.raises(EmptyImagePool):
        align_images(d, lambda t, i: 0.0)


# --- splitting ---------------------------------------------------------------

def test_split_matches_published_fractions():
    d = generate_synthetic(seed=1, n_claims=10, n_evidence=4, n_images=4,
                           vocab=10, with_explanations=False)
    out = split_dataset(d, train=0.8, val=0.1, seed=0)
    assert len(out.splits["train"]) == 7
    assert len(out.splits["val"]) == 1
    assert len(out.splits["test"]) == 2


def test_split_deterministic():
    d = tiny_corpus()
    assert split_dataset(d, 0.5, 0.2, seed=9).splits == split_dataset(d, 0.5, 0.2, seed=9).splits


@pytest.mark.parametrize("seed", range(50))
def test_split_partitions_disjoint_and_exhaustive(seed):
    d = generate_synthetic(seed=seed, n_claims=9, n_evidence=3, n_images=3,
                           vocab=10, with_explanations=False)
    out = split_dataset(d, train=0.7, val=0.2, seed=seed)
    pieces = [set(v) for v in out.splits.values()]
    union = set().union(*pieces)
    assert union == {c.id for c in d.claims}
    assert sum(len(p) for p in pieces) == len(union)


def test_split_too_few_claims():
    d = generate_synthetic(seed=0, n_claims=1, n_evidence=1, n_images=1,
                           vocab=10, with_explanations=False)
    with pytest.raises(TooFewClaims):
        split_dataset(d, train=0.8, val=0.1, seed=0)
