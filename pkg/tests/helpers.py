"""Shared fixtures-by-function and independent scalar oracles for the tests.

The oracles here are deliberately written as plain-Python loops over lists
so they share no code path with the tensor implementations they check.
"""

import math

import torch

from mever.datamodel import generate_synthetic
from mever.encoder import EncoderConfig, GraphEncoder
from mever.explainer import ConsistencyHead, Seq2Seq, Seq2SeqConfig
from mever.tokenizer import Vocabulary
from mever.verifier import Verifier

torch.set_num_threads(1)


def tiny_corpus(seed=3, n_claims=6, n_evidence=4, n_images=4, vocab=12):
    return generate_synthetic(seed=seed, n_claims=n_claims, n_evidence=n_evidence,
                              n_images=n_images, vocab=vocab, with_explanations=True)


def tiny_encoder_config(**overrides):
    base = dict(steps=2, dim=8, n_heads=2, max_text_len=16, patch_size=8,
                channels=3, vocab_size=50, max_positions=32)
    base.update(overrides)
    return EncoderConfig(**base)


def tiny_seq2seq_config(**overrides):
    base = dict(steps=2, dim=8, n_heads=2, vocab_size=50, max_positions=48,
                max_source_len=40, max_target_len=12)
    base.update(overrides)
    return Seq2SeqConfig(**base)


def tiny_models(dataset, seed=0, dtype=torch.float64):
    cfg = tiny_encoder_config()
    scfg = tiny_seq2seq_config()
    vocab = Vocabulary.build(dataset.all_texts(), cfg.vocab_size)
    encoder = GraphEncoder(cfg, vocab, seed=seed).to(dtype)
    verifier = Verifier(cfg.dim, len(dataset.label_set), cfg.n_heads, seed=seed + 1).to(dtype)
    seq2seq = Seq2Seq(scfg, vocab, seed=seed + 2).to(dtype)
    head = ConsistencyHead(scfg.vocab_size, scfg.dim, len(dataset.label_set),
                           seed=seed + 3).to(dtype)
    return encoder, verifier, seq2seq, head


# --- scalar oracles --------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def softmax_list(xs):
    m = max(xs)
    exps = [math.exp(x - m) for x in xs]
    total = sum(exps)
    return [e / total for e in exps]


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def matvec(matrix, vec):
    return [dot(row, vec) for row in matrix]


def gated_attention_oracle(query, neighbors, gate):
    """Scalar re-derivation of the gated softmax aggregation."""
    scores = [sigmoid(dot(gate, list(query) + list(nb))) for nb in neighbors]
    weights = softmax_list(scores)
    d = len(neighbors[0])
    return [sum(w * nb[j] for w, nb in zip(weights, neighbors)) for j in range(d)], weights


def mha_oracle(q_rows, k_rows, v_rows, n_heads):
    """Scalar multi-head attention over already-projected rows."""
    d = len(q_rows[0])
    head_dim = d // n_heads
    out = [[0.0] * d for _ in q_rows]
    for h in range(n_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        for i, q in enumerate(q_rows):
            scores = [dot(q[lo:hi], k[lo:hi]) / math.sqrt(head_dim) for k in k_rows]
            weights = softmax_list(scores)
            for j in range(lo, hi):
                out[i][j] = sum(w * v[j] for w, v in zip(weights, v_rows))
    return out


def to_lists(tensor):
    return tensor.detach().to(torch.float64).tolist()


def finite_difference_check(loss_fn, named_params, coords_per_tensor=None,
                            h=1e-5, seed=0):
    """Central finite differences vs autograd; returns max relative error.

    coords_per_tensor=None sweeps every coordinate; an integer samples that
    many (seeded) per tensor. Relative error uses a 1e-3 denominator floor
    so near-zero gradients are judged on an absolute scale.
    """
    params = [p for _, p in named_params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = torch.Generator().manual_seed(seed)
    worst = 0.0
    worst_at = None
    for (name, p), g in zip(named_params, grads):
        flat = p.data.view(-1)
        gflat = (g if g is not None else torch.zeros_like(p)).reshape(-1)
        n = flat.numel()
        if coords_per_tensor is None or n <= coords_per_tensor:
            coords = range(n)
        else:
            coords = torch.randperm(n, generator=rng)[:coords_per_tensor].tolist()
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = gflat[i].item()
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
            if rel > worst:
                worst = rel
                worst_at = f"{name}[{i}] analytic={an:.6e} fd={fd:.6e}"
    return worst, worst_at
