import math

import numpy as np
import pytest
import torch

from mever.datamodel import ImageRecord
from mever.encoder import (
    EncoderConfig,
    EncoderState,
    GraphEncoder,
    build_graph,
    parameter_budget,
)
from mever.errors import EmptyText, ShapeMismatch
from mever.layers import parameter_count
from mever.tokenizer import Vocabulary

from helpers import (
    gated_attention_oracle,
    mha_oracle,
    tiny_corpus,
    tiny_encoder_config,
    to_lists,
)


def make_encoder(dataset, seed=0, dtype=torch.float64, **overrides):
    cfg = tiny_encoder_config(**overrides)
    vocab = Vocabulary.build(dataset.all_texts(), cfg.vocab_size)
    return GraphEncoder(cfg, vocab, seed=seed).to(dtype)


def random_state(encoder, n_tokens, n_images, seed=0):
    gen = torch.Generator().manual_seed(seed)
    d = encoder.config.dim
    dtype = encoder.pair_gate.dtype
    text = torch.randn(n_tokens, d, generator=gen, dtype=dtype)
    images = [torch.randn(5, d, generator=gen, dtype=dtype) for _ in range(n_images)]
    return EncoderState(text=text, images=images)


# --- graph construction -----------------------------------------------------

def test_graph_zero_images_has_self_loop_only():
    g = build_graph("t", [], mode="retrieval")
    assert g.cross_edges == ()
    assert g.intra_image_edges == ()
    assert g.text_self_loop


def test_graph_three_images_complete():
    g = build_graph("t", ["a", "b", "c"])
    assert len(g.cross_edges) == 3
    assert len(g.intra_image_edges) == 3  # K3


@pytest.mark.parametrize("n", range(1, 7))
def test_graph_edge_counts(n):
    g = build_graph("t", [f"i{k}" for k in range(n)])
    assert len(g.cross_edges) == n
    assert len(g.intra_image_edges) == n * (n - 1) // 2


def test_graph_verification_mode_drops_self_loop():
    assert not build_graph("t", ["a"], mode="verification").text_self_loop
    with pytest.raises(ValueError):
        build_graph("t", [], mode="nonsense")


# --- image-to-text aggregation ----------------------------------------------

def test_image_to_text_single_image_weight_one():
    d = tiny_corpus()
    enc = make_encoder(d)
    state = random_state(enc, 4, 1)
    sink = []
    z_hat, h_hat = enc.image_to_text(state, sink=sink)
    assert torch.allclose(sink[0], torch.ones(1, 1, dtype=torch.float64))
    assert torch.allclose(z_hat, enc.cross_modal_proj(state.images[0][0]))
    assert torch.allclose(h_hat, enc.cross_modal_proj(state.text[0]))


def test_image_to_text_identical_images_split_evenly():
    d = tiny_corpus()
    enc = make_encoder(d)
    state = random_state(enc, 4, 1)
    state.images = [state.images[0], state.images[0].clone()]
    sink = []
    enc.image_to_text(state, sink=sink)
    assert torch.allclose(sink[0], torch.full((1, 2), 0.5, dtype=torch.float64))


def test_image_to_text_matches_scalar_oracle():
    d = tiny_corpus()
    enc = make_encoder(d)
    state = random_state(enc, 3, 4, seed=7)
    z_hat, h_hat = enc.image_to_text(state)

    proj = to_lists(enc.cross_modal_proj.weight)
    gate = to_lists(enc.pair_gate)
    h_proj = [sum(proj[r][c] * state.text[0][c].item() for c in range(8)) for r in range(8)]
    neighbors = []
    for z in state.images:
        neighbors.append([sum(proj[r][c] * z[0][c].item() for c in range(8)) for r in range(8)])
    expected, _ = gated_attention_oracle(h_proj, neighbors, gate)
    assert torch.allclose(z_hat, torch.tensor(expected, dtype=torch.float64), atol=1e-9)
    assert torch.allclose(h_hat, torch.tensor(h_proj, dtype=torch.float64), atol=1e-9)


def test_image_to_text_zero_images_gives_zero_vector():
    d = tiny_corpus()
    enc = make_encoder(d)
    state = random_state(enc, 4, 0)
    z_hat, h_hat = enc.image_to_text(state)
    assert torch.equal(z_hat, torch.zeros_like(z_hat))
    assert torch.allclose(h_hat, enc.cross_modal_proj(state.text[0]))


# --- text-to-image aggregation ----------------------------------------------

def test_text_to_image_single_image_is_self_projection():
    d = tiny_corpus()
    enc = make_encoder(d)
    state = random_state(enc, 4, 1)
    z_hat, h_hat = enc.text_to_image(state, 0)
    assert torch.allclose(z_hat, enc.cross_modal_proj(state.images[0][0]))
    assert torch.allclose(h_hat, enc.cross_modal_proj(state.text[0]))


def test_text_to_image_identical_images_agree():
    d = tiny_corpus()
    enc = make_encoder(d)
    state = random_state(enc, 4, 1)
    state.images = [state.images[0]] * 3
    outs = [enc.text_to_image(state, i)[0] for i in range(3)]
    assert torch.allclose(outs[0], outs[1])
    assert torch.allclose(outs[0], outs[2])


def test_text_to_image_matches_scalar_oracle():
    d = tiny_corpus()
    enc = make_encoder(d)
    state = random_state(enc, 3, 3, seed=5)
    proj = to_lists(enc.cross_modal_proj.weight)
    gate = to_lists(enc.pair_gate)
    neighbors = []
    for z in state.images:
        neighbors.append([sum(proj[r][c] * z[0][c].item() for c in range(8)) for r in range(8)])
    for i in range(3):
        z_hat, _ = enc.text_to_image(state, i)
        expected, _ = gated_attention_oracle(neighbors[i], neighbors, gate)
        assert torch.allclose(z_hat, torch.tensor(expected, dtype=torch.float64), atol=1e-9)


# --- encoder step -----------------------------------------------------------

@pytest.mark.parametrize("n_tokens,n_images", [(2, 0), (4, 1), (7, 3)])
def test_step_preserves_shapes(n_tokens, n_images):
    d = tiny_corpus()
    enc = make_encoder(d)
    state = random_state(enc, n_tokens, n_images)
    out = enc.step(state)
    assert out.text.shape == state.text.shape
    assert [z.shape for z in out.images] == [z.shape for z in state.images]
    assert out.step == 1


def test_step_zero_images_uses_single_virtual_token():
    d = tiny_corpus()
    enc = make_encoder(d)
    sink = []
    enc.step(random_state(enc, 4, 0), sink=sink)
    # one text MHA with K/V length 4 + 1 virtual token
    assert sink[0].shape[-1] == 5


def test_step_with_images_uses_two_virtual_tokens():
    d = tiny_corpus()
    enc = make_encoder(d)
    sink = []
    enc.step(random_state(enc, 4, 2), sink=sink)
    gnn_rows = [w for w in sink if w.shape[-1] == 2]
    text_rows = [w for w in sink if w.shape[-1] == 6]
    assert gnn_rows and text_rows


def test_step_rejects_wrong_width():
    d = tiny_corpus()
    enc = make_encoder(d)
    state = EncoderState(text=torch.randn(3, 5, dtype=torch.float64), images=[])
    with pytest.raises(ShapeMismatch):
        enc.step(state)


def test_step_matches_scalar_oracle_single_head():
    d = tiny_corpus()
    enc = make_encoder(d, dim=4, n_heads=1)
    state = random_state(enc, 2, 1, seed=3)
    out = enc.step(state)

    dim = 4
    proj = to_lists(enc.cross_modal_proj.weight)
    gate = to_lists(enc.pair_gate)
    text = to_lists(state.text)
    image = to_lists(state.images[0])

    def matmul_rows(rows, weight):
        w = to_lists(weight)
        return [[sum(w[r][c] * row[c] for c in range(len(row))) for r in range(len(w))]
                for row in rows]

    def layer_norm(row):
        mean = sum(row) / len(row)
        var = sum((x - mean) ** 2 for x in row) / len(row)
        return [(x - mean) / math.sqrt(var + 1e-5) for x in row]

    def gelu(x):
        return 0.5 * x * (1 + math.erf(x / math.sqrt(2)))

    def block(block_module, x_rows, kv_rows):
        q = matmul_rows(x_rows, block_module.query.weight)
        k = matmul_rows(kv_rows, block_module.key.weight)
        v = matmul_rows(kv_rows, block_module.value.weight)
        attended = mha_oracle(q, k, v, n_heads=1)
        out_proj = matmul_rows(attended, block_module.out.weight)
        x1 = [layer_norm([a + b for a, b in zip(r1, r2)]) for r1, r2 in zip(x_rows, out_proj)]
        ff = matmul_rows([[gelu(v) for v in row] for row in matmul_rows(x1, block_module.ff_in.weight)],
                         block_module.ff_out.weight)
        return [layer_norm([a + b for a, b in zip(r1, r2)]) for r1, r2 in zip(x1, ff)]

    h_proj = [sum(proj[r][c] * text[0][c] for c in range(dim)) for r in range(dim)]
    z_proj = [sum(proj[r][c] * image[0][c] for c in range(dim)) for r in range(dim)]
    z_hat, _ = gated_attention_oracle(h_proj, [z_proj], gate)
    expected_text = block(enc.text_blocks[0], text, [z_hat, h_proj] + text)

    z_hat_i, _ = gated_attention_oracle(z_proj, [z_proj], gate)
    expected_image = block(enc.image_blocks[0], image, [z_hat_i, h_proj] + image)

    assert torch.allclose(out.text, torch.tensor(expected_text, dtype=torch.float64), atol=1e-9)
    assert torch.allclose(out.images[0], torch.tensor(expected_image, dtype=torch.float64), atol=1e-9)


# --- encode ------------------------------------------------------------------

def test_encode_deterministic_bitwise():
    d = tiny_corpus()
    enc = make_encoder(d)
    claim = d.claims[0]
    a = enc.encode(claim.text, d.images_for(claim))
    b = enc.encode(claim.text, d.images_for(claim))
    assert torch.equal(a.tokens, b.tokens)
    assert all(torch.equal(x, y) for x, y in zip(a.patches, b.patches))


def test_encode_text_embedding_is_cls_row():
    d = tiny_corpus()
    enc = make_encoder(d)
    unit = enc.encode(d.evidence[0].text, d.images_for(d.evidence[0]))
    assert torch.equal(unit.text_embedding, unit.tokens[0])


def test_encode_image_permutation_leaves_text_embedding():
    d = tiny_corpus(n_images=8, n_evidence=2, n_claims=4)
    enc = make_encoder(d)
    ev = d.evidence[0]
    images = d.images_for(ev)
    assert len(images) >= 3
    base = enc.encode(ev.text, images).text_embedding
    perm = enc.encode(ev.text, images[::-1]).text_embedding
    assert torch.allclose(base, perm, atol=1e-6)


def test_encode_empty_text_raises():
    d = tiny_corpus()
    enc = make_encoder(d)
    with pytest.raises(EmptyText):
        enc.encode("", [])


def test_encode_truncates_to_budget():
    d = tiny_corpus()
    enc = make_encoder(d, max_text_len=4)
    unit = enc.encode("one two three four five six", [])
    assert unit.tokens.shape[0] == 4  # CLS + 3


def test_encode_no_images_flag_equals_stripped_input():
    d = tiny_corpus()
    enc = make_encoder(d)
    claim = d.claims[0]
    flagged = enc.encode(claim.text, d.images_for(claim),
                         ablations=frozenset({"no_images"}))
    stripped = enc.encode(claim.text, [])
    assert torch.equal(flagged.tokens, stripped.tokens)
    assert flagged.patches == [] and stripped.patches == []


def test_encode_rejects_wrong_channel_count():
    d = tiny_corpus()
    enc = make_encoder(d)
    bad = ImageRecord(id="x", uri="x.png", height=16, width=16, channels=1,
                      pixels=np.zeros((16, 16, 1), dtype=np.uint8))
    with pytest.raises(ShapeMismatch):
        enc.encode("some text", [bad])


def test_encode_rejects_undersized_image():
    d = tiny_corpus()
    enc = make_encoder(d)
    bad = ImageRecord(id="x", uri="x.png", height=4, width=4, channels=3,
                      pixels=np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ShapeMismatch):
        enc.encode("some text", [bad])


def test_attention_rows_normalized_everywhere():
    d = tiny_corpus()
    enc = make_encoder(d)
    claim = d.claims[0]
    sink = []
    enc.encode(claim.text, d.images_for(claim), sink=sink)
    assert sink
    for weights in sink:
        assert torch.all(weights >= 0)
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


# --- configuration and parameter accounting ----------------------------------

def test_paper_scale_config_accepted():
    cfg = EncoderConfig(steps=12, dim=768, n_heads=12, max_text_len=512,
                        patch_size=16, channels=3, vocab_size=30522,
                        max_positions=512)
    assert parameter_budget(cfg) > 0


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(dim=10, n_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(steps=0)
    with pytest.raises(ValueError):
        EncoderConfig(max_text_len=128, max_positions=64)


@pytest.mark.parametrize("cfg", [
    EncoderConfig(steps=2, dim=32, n_heads=4, max_text_len=32, patch_size=8,
                  channels=3, vocab_size=96, max_positions=64),
    EncoderConfig(steps=3, dim=48, n_heads=6, max_text_len=40, patch_size=4,
                  channels=3, vocab_size=120, max_positions=80),
])
def test_parameter_count_matches_budget(cfg):
    enc = GraphEncoder(cfg, vocab=None, seed=0)
    L, d, V, W, P, C = (cfg.steps, cfg.dim, cfg.vocab_size, cfg.max_positions,
                        cfg.patch_size, cfg.channels)
    expected = (12 * L * d * d + V * d + W * d) \
        + (12 * L * d * d + P * P * C + W * d) \
        + (d * d + 2 * d)
    assert parameter_count(enc) == expected == parameter_budget(cfg)


def test_seeded_init_is_deterministic_and_bounded():
    cfg = tiny_encoder_config()
    a = GraphEncoder(cfg, vocab=None, seed=4)
    b = GraphEncoder(cfg, vocab=None, seed=4)
    c = GraphEncoder(cfg, vocab=None, seed=5)
    for (_, pa), (_, pb) in zip(sorted(a.named_parameters()), sorted(b.named_parameters())):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for (_, pa), (_, pc)
               in zip(sorted(a.named_parameters()), sorted(c.named_parameters())))
    bound = cfg.dim ** -0.5 + 1e-9
    for _, p in a.named_parameters():
        assert p.abs().max() <= bound


def test_initializer_seam_overrides():
    cfg = tiny_encoder_config()
    target = torch.full((2 * cfg.dim,), 0.25)

    def init(name, tensor):
        if name == "pair_gate":
            return target
        return None

    enc = GraphEncoder(cfg, vocab=None, seed=0, initializer=init)
    assert torch.equal(enc.pair_gate.data, target)
