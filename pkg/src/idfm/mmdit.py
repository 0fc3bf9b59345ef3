"""Toy multimodal diffusion transformer predicting a velocity field.

Tokens are ``[text | latent patches | context patches]``. Queries, keys and
values are projected with per-modality weights, then every layer runs one
joint multi-head attention under the mask its schedule selects. Time enters
only through per-layer scale/shift/gate vectors shared by all tokens, which
keeps the instance subgraphs of the disentanglement mask closed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .encoder import GlyphVocab, PromptBundle, assemble
from .masks import AttnMask, LayerSchedule, REGIMES, build_mask, schedule
from .partition import BoxSpec, PartitionLayout, build_layout

MODALITIES = ("text", "latent", "context")

# adapter rank used for full-size backbones; the desk model defaults to 4
FULL_SCALE_LORA_RANK = 32


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 48
    image_w: int = 48
    channels: int = 3
    patch: int = 4
    d_model: int = 64
    heads: int = 4
    num_layers: int = 8
    early_count: int = 2
    late_count: int = 2
    mlp_ratio: int = 2
    time_dim: int = 32
    freq_dim: int = 32
    utility_len: int = 8
    max_str_len: int = 6
    max_instances: int = 16
    alphabet: str = "ABCDEFGHIJKLMNOP"
    # False gives the plain joint-attention baseline (no masks anywhere)
    masked: bool = True
    # shift context positions instead of sharing the latent grid
    context_pos_offset: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError("image dims must be divisible by patch")
        if self.early_count + self.late_count > self.num_layers:
            raise ValueError("early + late layers exceed num_layers")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for 2-D positions")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def text_positions(self) -> int:
        return max(self.utility_len, self.max_str_len + 2)

    def vocab(self) -> GlyphVocab:
        return GlyphVocab(alphabet=self.alphabet, embed_dim=self.d_model, max_str_len=self.max_str_len)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# image <-> patch tokens
# ---------------------------------------------------------------------------


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[H, W, C] image -> [num_patches, patch*patch*C] rows in raster order."""
    H, W, C = image.shape
    gh, gw = H // patch, W // patch
    return (
        image.reshape(gh, patch, gw, patch, C)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch * patch * C)
    )


def unpatchify(tokens: np.ndarray, patch: int, grid_h: int, grid_w: int) -> np.ndarray:
    C = tokens.shape[1] // (patch * patch)
    return (
        tokens.reshape(grid_h, grid_w, patch, patch, C)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid_h * patch, grid_w * patch, C)
    )


def sincos_2d(grid_h: int, grid_w: int, dim: int, row_offset: int = 0) -> np.ndarray:
    """Fixed 2-D sin/cos positions: half the channels encode rows, half columns."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(
        np.arange(grid_h, dtype=np.float64) + row_offset,
        np.arange(grid_w, dtype=np.float64),
        indexing="ij",
    )
    out = []
    for coord in (rows.reshape(-1), cols.reshape(-1)):
        arg = coord[:, None] * omega[None, :]
        out += [np.sin(arg), np.cos(arg)]
    return np.concatenate(out, axis=1)


def timestep_features(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    arg = 1000.0 * float(t) * freqs
    return np.concatenate([np.cos(arg), np.sin(arg)])[None, :]


# ---------------------------------------------------------------------------
# editing task -> prompts, layout, masks
# ---------------------------------------------------------------------------


@dataclass
class PreparedTask:
    boxes: tuple[BoxSpec, ...]
    strings: tuple[str, ...]
    layout: PartitionLayout
    masks: dict[str, AttnMask] | None


def prepare_task(config: ModelConfig, boxes: Sequence[BoxSpec], strings: Sequence[str] | None = None) -> PreparedTask:
    """Layout and (if the model is masked) both attention masks for a task.

    ``strings`` default to each box's target text.
    """
    boxes = tuple(boxes)
    if strings is None:
        strings = tuple(b.tgt for b in boxes)
    strings = tuple(strings)
    vocab = config.vocab()
    bundle = assemble(config.utility_len, strings, vocab)
    for b in boxes:
        b.check_bounds(config.image_w, config.image_h)
    layout = build_layout(
        config.utility_len, bundle.inst_lens, boxes, config.patch, config.grid_h, config.grid_w
    )
    masks = {r: build_mask(layout, r) for r in REGIMES} if config.masked else None
    return PreparedTask(boxes, strings, layout, masks)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def _block_linears(layer: int) -> list[str]:
    p = f"blocks.{layer}"
    return [f"{p}.qkv.{m}" for m in MODALITIES] + [f"{p}.out", f"{p}.ff1", f"{p}.ff2"]


@dataclass
class LoraAdapter:
    target: str
    A: nx.Tensor
    B: nx.Tensor
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class MMDiT:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.vocab = config.vocab()
        self.params: dict[str, nx.Tensor] = {}
        self.lora: dict[str, LoraAdapter] = {}
        self._init_params(np.random.default_rng(seed))
        c = config
        self.pos_latent = nx.Tensor(sincos_2d(c.grid_h, c.grid_w, c.d_model))
        offset = c.grid_h if c.context_pos_offset else 0
        self.pos_context = nx.Tensor(sincos_2d(c.grid_h, c.grid_w, c.d_model, row_offset=offset))

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = nx.Tensor(arr, requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d, std = c.d_model, c.init_std
        normal = lambda *shape: rng.normal(0.0, std, size=shape)

        def xavier(n_out, n_in):
            bound = math.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-bound, bound, size=(n_out, n_in))

        self._add("tok_embed", normal(self.vocab.size, d))
        self._add("text_pos", normal(c.text_positions, d))
        self._add("segment", normal(c.max_instances + 1, d))
        self._add("modality", normal(len(MODALITIES), d))
        for m in ("latent", "context"):
            self._add(f"patch_in.{m}.w", xavier(d, c.patch_dim))
            self._add(f"patch_in.{m}.b", np.zeros(d))
        self._add("time.w1", normal(c.time_dim, c.freq_dim))
        self._add("time.b1", np.zeros(c.time_dim))
        self._add("time.w2", normal(c.time_dim, c.time_dim))
        self._add("time.b2", np.zeros(c.time_dim))
        hidden = c.mlp_ratio * d
        for layer in range(c.num_layers):
            p = f"blocks.{layer}"
            # zero modulation: every block starts as the identity map
            self._add(f"{p}.mod.w", np.zeros((6 * d, c.time_dim)))
            self._add(f"{p}.mod.b", np.zeros(6 * d))
            for m in MODALITIES:
                self._add(f"{p}.qkv.{m}.w", xavier(3 * d, d))
                self._add(f"{p}.qkv.{m}.b", np.zeros(3 * d))
            self._add(f"{p}.out.w", xavier(d, d))
            self._add(f"{p}.out.b", np.zeros(d))
            self._add(f"{p}.ff1.w", xavier(hidden, d))
            self._add(f"{p}.ff1.b", np.zeros(hidden))
            self._add(f"{p}.ff2.w", xavier(d, hidden))
            self._add(f"{p}.ff2.b", np.zeros(d))
        self._add("final.mod.w", np.zeros((2 * d, c.time_dim)))
        self._add("final.mod.b", np.zeros(2 * d))
        self._add("final.out.w", np.zeros((c.patch_dim, d)))
        self._add("final.out.b", np.zeros(c.patch_dim))

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(
            p.data.size for p in self.all_tensors().values() if p.requires_grad or not trainable_only
        )

    def all_tensors(self) -> dict[str, nx.Tensor]:
        """Base parameters plus LoRA factors, keyed by checkpoint name."""
        out = dict(self.params)
        for target, ad in self.lora.items():
            out[f"lora.{target}.A"] = ad.A
            out[f"lora.{target}.B"] = ad.B
        return out

    def trainable(self) -> dict[str, nx.Tensor]:
        return {k: v for k, v in self.all_tensors().items() if v.requires_grad}

    def zero_grad(self) -> None:
        for p in self.all_tensors().values():
            p.grad = None

    def randomize(self, seed: int, std: float = 0.2) -> None:
        """Overwrite every parameter with noise (tests need non-trivial weights)."""
        rng = np.random.default_rng(seed)
        for name, p in self.params.items():
            p.data[...] = rng.normal(0.0, std, size=p.data.shape)

    # -- LoRA -----------------------------------------------------------------

    def lora_targets(self) -> list[str]:
        return [t for layer in range(self.config.num_layers) for t in _block_linears(layer)]

    def lora_attach(
        self,
        targets: Iterable[str] | None = None,
        rank: int = 4,
        alpha: float | None = None,
        seed: int = 0,
        train_embeddings: bool = False,
    ) -> None:
        """Attach zero-initialized low-rank adapters and freeze the base weights."""
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        targets = list(self.lora_targets() if targets is None else targets)
        alpha = float(rank if alpha is None else alpha)
        rng = np.random.default_rng(seed)
        for t in targets:
            if f"{t}.w" not in self.params:
                raise KeyError(f"no linear layer named {t!r}")
            if t in self.lora:
                raise ValueError(f"adapter already attached to {t!r}")
        for t in targets:
            d_out, d_in = self.params[f"{t}.w"].shape
            bound = 1.0 / math.sqrt(d_in)
            A = nx.Tensor(rng.uniform(-bound, bound, size=(rank, d_in)), requires_grad=True, name=f"lora.{t}.A")
            B = nx.Tensor(np.zeros((d_out, rank)), requires_grad=True, name=f"lora.{t}.B")
            self.lora[t] = LoraAdapter(t, A, B, rank, alpha)
        for name, p in self.params.items():
            p.requires_grad = train_embeddings and name in ("tok_embed", "text_pos", "segment")

    def lora_merge(self) -> None:
        """Fold every adapter into its base weight and drop the adapters."""
        for t, ad in self.lora.items():
            w = self.params[f"{t}.w"]
            w.data += ad.scaling * (ad.B.data @ ad.A.data)
        self.lora.clear()

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = True

    def _linear(self, x: nx.Tensor, name: str) -> nx.Tensor:
        y = nx.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])
        ad = self.lora.get(name)
        if ad is not None:
            low = nx.linear(nx.linear(x, ad.A), ad.B)
            y = nx.add(y, nx.scale(low, ad.scaling))
        return y

    # -- forward ------------------------------------------------------------

    def make_bundle(self, strings: Sequence[str]) -> PromptBundle:
        return assemble(self.config.utility_len, strings, self.vocab, token_table=self.params["tok_embed"])

    def time_embedding(self, t: float) -> nx.Tensor:
        P = self.params
        feats = nx.Tensor(timestep_features(t, self.config.freq_dim))
        hidden = nx.silu(nx.linear(feats, P["time.w1"], P["time.b1"]))
        return nx.linear(hidden, P["time.w2"], P["time.b2"])

    def embed(
        self,
        x_t: np.ndarray,
        ref: np.ndarray,
        bundle: PromptBundle,
        t: float,
        layout: PartitionLayout,
    ) -> tuple[nx.Tensor, nx.Tensor]:
        """Token states ``h`` [seq_len × d_model] and the time embedding.

        ``h`` itself is time independent; time acts through the modulation
        vectors derived from the returned embedding.
        """
        c = self.config
        expected = (c.image_h, c.image_w, c.channels)
        if x_t.shape != expected or ref.shape != expected:
            raise nx.ShapeError(f"images must be {expected}, got {x_t.shape} and {ref.shape}")
        if bundle.total_len != layout.text_len:
            raise nx.ShapeError("prompt bundle does not match the layout")
        if (layout.grid_h, layout.grid_w, layout.patch) != (c.grid_h, c.grid_w, c.patch):
            raise nx.ShapeError("layout grid does not match the model config")
        P = self.params
        tok = bundle.embeddings if bundle.embeddings is not None else nx.take_rows(P["tok_embed"], bundle.token_ids)
        if bundle.num_instances > c.max_instances:
            raise ValueError(f"{bundle.num_instances} instances exceed the model limit of {c.max_instances}")
        text = nx.add(tok, nx.take_rows(P["text_pos"], bundle.positions))
        text = nx.add(text, nx.take_rows(P["segment"], bundle.segment_ids))
        text = nx.add_row(text, nx.take_rows(P["modality"], [0]))

        lat = nx.linear(nx.Tensor(patchify(x_t, c.patch)), P["patch_in.latent.w"], P["patch_in.latent.b"])
        lat = nx.add_row(nx.add(lat, self.pos_latent), nx.take_rows(P["modality"], [1]))
        ctx = nx.linear(nx.Tensor(patchify(ref, c.patch)), P["patch_in.context.w"], P["patch_in.context.b"])
        ctx = nx.add_row(nx.add(ctx, self.pos_context), nx.take_rows(P["modality"], [2]))
        return nx.concat_rows([text, lat, ctx]), self.time_embedding(t)

    def modulation(self, temb: nx.Tensor, name: str, parts: int) -> list[nx.Tensor]:
        d = self.config.d_model
        mod = nx.linear(nx.silu(temb), self.params[f"{name}.w"], self.params[f"{name}.b"])
        return [nx.slice_cols(mod, i * d, (i + 1) * d) for i in range(parts)]

    @staticmethod
    def _modulate(x: nx.Tensor, shift: nx.Tensor, scl: nx.Tensor) -> nx.Tensor:
        return nx.add_row(nx.add(x, nx.mul_row(x, scl)), shift)

    def attention(self, x: nx.Tensor, layer: int, mask: AttnMask | None, layout: PartitionLayout) -> nx.Tensor:
        c = self.config
        d, hd = c.d_model, c.head_dim
        bounds = (0, layout.latent_start, layout.context_start, layout.seq_len)
        qkv = nx.concat_rows(
            [
                self._linear(nx.slice_rows(x, bounds[i], bounds[i + 1]), f"blocks.{layer}.qkv.{m}")
                for i, m in enumerate(MODALITIES)
                if bounds[i + 1] > bounds[i]
            ]
        )
        inv = 1.0 / math.sqrt(hd)
        heads = []
        for h in range(c.heads):
            # 1/sqrt(d) folded into the queries
            q = nx.scale(nx.slice_cols(qkv, h * hd, (h + 1) * hd), inv)
            k = nx.slice_cols(qkv, d + h * hd, d + (h + 1) * hd)
            v = nx.slice_cols(qkv, 2 * d + h * hd, 2 * d + (h + 1) * hd)
            logits = nx.matmul(q, nx.transpose(k))
            heads.append(nx.matmul(nx.masked_softmax(logits, mask), v))
        return self._linear(nx.concat_cols(heads), f"blocks.{layer}.out")

    def block_forward(
        self,
        h: nx.Tensor,
        mask: AttnMask | None,
        layer: int,
        temb: nx.Tensor,
        layout: PartitionLayout,
    ) -> nx.Tensor:
        if mask is not None and mask.seq_len != h.shape[0]:
            raise nx.ShapeError(f"mask covers {mask.seq_len} tokens, sequence has {h.shape[0]}")
        p = f"blocks.{layer}"
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(temb, f"{p}.mod", 6)
        a = self.attention(self._modulate(nx.layer_norm(h), shift1, scale1), layer, mask, layout)
        h = nx.add(h, nx.mul_row(a, gate1))
        f = self._linear(nx.gelu(self._linear(self._modulate(nx.layer_norm(h), shift2, scale2), f"{p}.ff1")), f"{p}.ff2")
        return nx.add(h, nx.mul_row(f, gate2))

    def default_schedule(self) -> LayerSchedule:
        c = self.config
        return schedule(c.num_layers, c.early_count, c.late_count)

    def velocity_tokens(
        self,
        x_t: np.ndarray,
        ref: np.ndarray,
        bundle: PromptBundle,
        t: float,
        layout: PartitionLayout,
        masks: dict[str, AttnMask] | None,
        sched: LayerSchedule | None = None,
    ) -> nx.Tensor:
        """Predicted velocity as latent patch rows [num_patches × patch_dim].

        ``masks`` maps regime name to mask; ``None`` runs unmasked joint
        attention in every layer.
        """
        sched = sched or self.default_schedule()
        if sched.num_layers != self.config.num_layers:
            raise ValueError("schedule length differs from the layer count")
        h, temb = self.embed(x_t, ref, bundle, t, layout)
        for layer in range(self.config.num_layers):
            mask = None if masks is None else masks[sched.regime(layer)]
            h = self.block_forward(h, mask, layer, temb, layout)
        shift, scl = self.modulation(temb, "final.mod", 2)
        lat = nx.slice_rows(h, layout.latent_start, layout.context_start)
        lat = self._modulate(nx.layer_norm(lat), shift, scl)
        return nx.linear(lat, self.params["final.out.w"], self.params["final.out.b"])

    def forward_velocity(
        self,
        x_t: np.ndarray,
        ref: np.ndarray,
        bundle: PromptBundle,
        t: float,
        layout: PartitionLayout,
        masks: dict[str, AttnMask] | None,
        sched: LayerSchedule | None = None,
    ) -> np.ndarray:
        """Image-shaped velocity (inference path, no tape needed)."""
        c = self.config
        v = self.velocity_tokens(x_t, ref, bundle, t, layout, masks, sched)
        return unpatchify(v.data, c.patch, c.grid_h, c.grid_w)

    def velocity(self, x_t: np.ndarray, ref: np.ndarray, task: PreparedTask, t: float, sched: LayerSchedule | None = None) -> np.ndarray:
        bundle = self.make_bundle(task.strings)
        return self.forward_velocity(x_t, ref, bundle, t, task.layout, task.masks, sched)
