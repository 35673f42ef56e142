"""Two-layer text/image graph and the nested multi-modal encoder.

A unit (one claim or one evidence text plus its images) is encoded by
interleaving, inside every step, graph aggregation between the text node
and its image nodes with a transformer step on the text side and a ViT-style
step on the image side. Aggregated embeddings enter each step as virtual
tokens prepended to keys/values only, so sequence lengths never grow.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .datamodel import ImageRecord
from .errors import EmptyText, ShapeMismatch
from .layers import AttentionBlock, gated_attention, init_parameters
from .tokenizer import Vocabulary

RETRIEVAL = "retrieval"
VERIFICATION = "verification"


@dataclass(frozen=True)
class EncoderConfig:
    steps: int = 2
    dim: int = 32
    n_heads: int = 4
    max_text_len: int = 32
    patch_size: int = 8
    channels: int = 3
    vocab_size: int = 96
    max_positions: int = 64

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        for name in ("steps", "dim", "n_heads", "max_text_len", "patch_size",
                     "channels", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_text_len > self.max_positions:
            raise ValueError("max_text_len exceeds max_positions")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def parameter_budget(config: EncoderConfig) -> int:
    """Closed-form parameter total of a freshly constructed GraphEncoder."""
    L, d = config.steps, config.dim
    V, W = config.vocab_size, config.max_positions
    text_stack = 12 * L * d * d + V * d + W * d
    image_stack = 12 * L * d * d + config.patch_dim + W * d
    graph_reasoning = d * d + 2 * d
    return text_stack + image_stack + graph_reasoning


@dataclass(frozen=True)
class MultiModalGraph:
    """Textual node, its image nodes, and the edge sets between them."""

    text_node: str
    image_nodes: tuple[str, ...]
    cross_edges: tuple[tuple[str, str], ...]
    intra_image_edges: tuple[tuple[str, str], ...]
    text_self_loop: bool


def build_graph(unit_text: str, image_ids, mode: str = RETRIEVAL) -> MultiModalGraph:
    if mode not in (RETRIEVAL, VERIFICATION):
        raise ValueError(f"unknown mode {mode!r}")
    image_nodes = tuple(image_ids)
    return MultiModalGraph(
        text_node=unit_text,
        image_nodes=image_nodes,
        cross_edges=tuple((unit_text, i) for i in image_nodes),
        intra_image_edges=tuple(itertools.combinations(image_nodes, 2)),
        text_self_loop=(mode == RETRIEVAL),
    )


@dataclass
class EncoderState:
    """Per-step activations: text token rows and one patch matrix per image."""

    text: Tensor
    images: list[Tensor]
    step: int = 0


@dataclass
class EncodedUnit:
    """Final-step output of the nested encoder for one unit."""

    tokens: Tensor
    patches: list[Tensor] = field(default_factory=list)

    @property
    def text_embedding(self) -> Tensor:
        return self.tokens[0]

    @property
    def image_embeddings(self) -> list[Tensor]:
        return [z[0] for z in self.patches]


class GraphEncoder(nn.Module):
    """Nested encoder over the two-layer multi-modal graph.

    One cross-modal projection serves both the text and image sides, and one
    gate vector scores both image-to-text and image-to-image aggregation;
    the patch embedding is a learnable per-pixel filter followed by a fixed,
    config-derived projection. Together with bias-free linears and
    non-affine norms this makes the trainable total exactly
    ``parameter_budget(config)``.
    """

    def __init__(self, config: EncoderConfig, vocab: Vocabulary | None = None,
                 seed: int = 0, initializer=None):
        super().__init__()
        self.config = config
        self.vocab = vocab
        d = config.dim
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.text_positional = nn.Parameter(torch.zeros(config.max_positions, d))
        self.image_positional = nn.Parameter(torch.zeros(config.max_positions, d))
        self.patch_filter = nn.Parameter(torch.zeros(config.patch_dim))
        self.text_blocks = nn.ModuleList(
            AttentionBlock(d, config.n_heads) for _ in range(config.steps))
        self.image_blocks = nn.ModuleList(
            AttentionBlock(d, config.n_heads) for _ in range(config.steps))
        self.cross_modal_proj = nn.Linear(d, d, bias=False)
        self.pair_gate = nn.Parameter(torch.zeros(2 * d))

        basis_gen = torch.Generator().manual_seed(
            (config.patch_dim * 1_000_003 + d) % (2**31 - 1))
        basis = torch.randn(config.patch_dim, d, generator=basis_gen)
        self.register_buffer("patch_basis", basis / config.patch_dim ** 0.5)

        init_parameters(self, seed, bound=d ** -0.5, initializer=initializer)

    # -- tokenisation / patchification -------------------------------------

    def embed_text(self, text: str) -> Tensor:
        if self.vocab is None:
            raise ValueError("encoder has no vocabulary attached")
        ids = self.vocab.encode(text)
        if not ids:
            raise EmptyText(f"no tokens in {text!r}")
        ids = [self.vocab.cls_id] + ids[: self.config.max_text_len - 1]
        idx = torch.tensor(ids, dtype=torch.long)
        return self.token_embedding(idx) + self.text_positional[: len(ids)]

    def patchify(self, image: ImageRecord) -> Tensor:
        if image.pixels is None:
            raise ValueError(f"image {image.id} carries no pixel data")
        p = self.config.patch_size
        if image.height < p or image.width < p:
            raise ShapeMismatch(f"image {image.id} smaller than patch size {p}")
        if image.channels != self.config.channels:
            raise ShapeMismatch(
                f"image {image.id} has {image.channels} channels, expected {self.config.channels}")
        arr = torch.as_tensor(image.pixels, dtype=self.patch_filter.dtype) / 255.0
        rows, cols = image.height // p, image.width // p
        arr = arr[: rows * p, : cols * p]
        patches = (
            arr.view(rows, p, cols, p, self.config.channels)
            .permute(0, 2, 1, 3, 4)
            .reshape(rows * cols, self.config.patch_dim)
        )
        if patches.shape[0] + 1 > self.config.max_positions:
            raise ShapeMismatch(f"image {image.id} yields too many patches")
        return patches

    def embed_image(self, image: ImageRecord) -> Tensor:
        patches = self.patchify(image)
        projected = (patches * self.patch_filter) @ self.patch_basis
        body = projected + self.image_positional[1 : patches.shape[0] + 1]
        cls_row = self.image_positional[0].unsqueeze(0)
        return torch.cat([cls_row, body], dim=0)

    # -- graph reasoning ----------------------------------------------------

    def image_to_text(self, state: EncoderState, sink: list | None = None
                      ) -> tuple[Tensor, Tensor]:
        """Aggregate image embeddings toward the text node.

        Returns the image aggregate and the projected text embedding; with
        no images the aggregate is the zero vector and downstream code omits
        the corresponding virtual token.
        """
        h_proj = self.cross_modal_proj(state.text[0])
        if not state.images:
            return torch.zeros_like(h_proj), h_proj
        z_proj = torch.stack([self.cross_modal_proj(z[0]) for z in state.images])
        z_hat = gated_attention(h_proj, z_proj, self.pair_gate, sink=sink)
        return z_hat, h_proj

    def text_to_image(self, state: EncoderState, image_index: int,
                      sink: list | None = None) -> tuple[Tensor, Tensor]:
        """Aggregate sibling images toward one image node, plus the text projection."""
        h_proj = self.cross_modal_proj(state.text[0])
        z_proj = torch.stack([self.cross_modal_proj(z[0]) for z in state.images])
        z_hat = gated_attention(z_proj[image_index], z_proj, self.pair_gate, sink=sink)
        return z_hat, h_proj

    def step(self, state: EncoderState, sink: list | None = None,
             ablations: frozenset = frozenset()) -> EncoderState:
        d = self.config.dim
        if state.text.shape[-1] != d or any(z.shape[-1] != d for z in state.images):
            raise ShapeMismatch(f"state width disagrees with encoder dim {d}")
        if state.step >= self.config.steps:
            raise ValueError(f"step {state.step} out of range")

        z_hat, h_proj = self.image_to_text(state, sink=sink)
        if state.images and "no_i2t" not in ablations:
            text_prefix = torch.stack([z_hat, h_proj])
        else:
            text_prefix = h_proj.unsqueeze(0)
        text_kv = torch.cat([text_prefix, state.text], dim=0)
        new_text = self.text_blocks[state.step](state.text, kv=text_kv, sink=sink)

        new_images = []
        for i, z in enumerate(state.images):
            if "no_t2i" in ablations:
                kv = z
            else:
                z_hat_i, h_proj_i = self.text_to_image(state, i, sink=sink)
                kv = torch.cat([torch.stack([z_hat_i, h_proj_i]), z], dim=0)
            new_images.append(self.image_blocks[state.step](z, kv=kv, sink=sink))

        return EncoderState(text=new_text, images=new_images, step=state.step + 1)

    def encode(self, text: str, images: list[ImageRecord] | None = None,
               mode: str = RETRIEVAL, sink: list | None = None,
               ablations: frozenset = frozenset()) -> EncodedUnit:
        """Run all steps over one unit and return its final embeddings."""
        images = list(images or [])
        if "no_images" in ablations:
            images = []
        build_graph(text, [im.id for im in images], mode=mode)  # structural check
        state = EncoderState(
            text=self.embed_text(text),
            images=[self.embed_image(im) for im in images],
        )
        for _ in range(self.config.steps):
            state = self.step(state, sink=sink, ablations=ablations)
        return EncodedUnit(tokens=state.text, patches=state.images)
