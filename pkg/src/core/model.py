"""
Grounding Model
Tiny multimodal encoder-decoder trained from scratch:

    v = P_img(patches(x))                  visual tokens, (h_f*w_f) x d
    l = E_txt(t)                           instruction tokens, n_t x d
    fused = E_mm([queries ; v ; l])        keys/values for cross-attention
    y_j = D_mm(fused, y_<j)                autoregressive answer decoder
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config.defaults import ITC_TEMPERATURE
from ..config.schema import PARAM_GROUPS, ModelConfig
from .errors import ModelInputError

# parameter name prefix -> freeze group
_GROUP_PREFIXES = {
    "patch_proj": "image",
    "row_embed": "image",
    "col_embed": "image",
    "token_embed": "embedding",
    "text_encoder": "text",
    "text_norm": "text",
    "queries": "queries",
    "fusion": "fusion",
    "fusion_norm": "fusion",
    "decoder": "decoder",
    "decoder_norm": "decoder",
    "lm_head": "decoder",
    "itc_image_proj": "heads",
    "itc_text_proj": "heads",
    "itm_head": "heads",
    "logit_scale": "heads",
}


def sinusoidal_positions(length: int, d: int) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float32) * (-math.log(10000.0) / d))
    table = torch.zeros(length, d)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : d // 2]
    return table


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with optional key mask, causal mask and KV cache."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, memory: Optional[torch.Tensor] = None,
                key_mask: Optional[torch.Tensor] = None, causal: bool = False,
                cache: Optional[Dict[str, torch.Tensor]] = None) -> torch.Tensor:
        q = self._split(self.q_proj(x))
        if memory is not None and cache is not None and "k" in cache:
            # cross-attention keys are computed once per decode
            k, v = cache["k"], cache["v"]
        else:
            source = x if memory is None else memory
            k = self._split(self.k_proj(source))
            v = self._split(self.v_proj(source))
            if cache is not None:
                if memory is None and "k" in cache:
                    k = torch.cat([cache["k"], k], dim=2)
                    v = torch.cat([cache["v"], v], dim=2)
                cache["k"], cache["v"] = k, v

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        fill = torch.finfo(scores.dtype).min
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], fill)
        if causal:
            t_q, t_k = scores.shape[-2], scores.shape[-1]
            future = torch.ones(t_q, t_k, dtype=torch.bool, device=scores.device).triu(1 + t_k - t_q)
            scores = scores.masked_fill(future, fill)
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.out_proj(out)


def _mlp(d: int, ratio: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, d * ratio), nn.GELU(), nn.Linear(d * ratio, d))


class EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = _mlp(d, mlp_ratio)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_mask=mask)
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.norm3 = nn.LayerNorm(d)
        self.mlp = _mlp(d, mlp_ratio)

    def forward(self, y: torch.Tensor, fused: torch.Tensor, fused_mask: torch.Tensor,
                cache: Optional[Dict[str, Dict[str, torch.Tensor]]] = None) -> torch.Tensor:
        y = y + self.self_attn(self.norm1(y), causal=True,
                               cache=None if cache is None else cache["self"])
        y = y + self.cross_attn(self.norm2(y), memory=fused, key_mask=fused_mask,
                                cache=None if cache is None else cache["cross"])
        return y + self.mlp(self.norm3(y))


@dataclass
class DecoderCache:
    """Per-layer self/cross attention keys and values for incremental decoding."""
    layers: List[Dict[str, Dict[str, torch.Tensor]]]
    length: int = 0

    @classmethod
    def empty(cls, num_layers: int) -> "DecoderCache":
        return cls([{"self": {}, "cross": {}} for _ in range(num_layers)])

    def reorder(self, index: torch.Tensor) -> None:
        """Keep rows ``index`` (beam parents), in that order."""
        for layer in self.layers:
            for kind in ("self", "cross"):
                for key, tensor in layer[kind].items():
                    layer[kind][key] = tensor.index_select(0, index)


@dataclass
class ForwardState:
    """Encoder outputs: visual tokens v, text tokens l and the fused memory."""
    v: torch.Tensor
    l: torch.Tensor
    text_mask: torch.Tensor
    fused: torch.Tensor
    fused_mask: torch.Tensor
    cache: Optional[DecoderCache] = field(default=None, repr=False)

    def repeat(self, n: int) -> "ForwardState":
        """Repeat a single-example state ``n`` times along the batch axis."""
        rep = lambda t: t.expand(n, *t.shape[1:]).contiguous()
        return ForwardState(rep(self.v), rep(self.l), rep(self.text_mask), rep(self.fused), rep(self.fused_mask))


class GroundingModel(nn.Module):
    """Patch encoder + projection, text encoder, query fusion encoder and causal decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size < 1:
            raise ModelInputError("config.vocab_size must be set from the vocabulary")
        self.config = config
        d, vocab = config.d, config.vocab_size
        patch_dim = config.patch * config.patch * 3

        self.patch_proj = nn.Sequential(nn.Linear(patch_dim, d), nn.GELU(), nn.Linear(d, d))
        self.row_embed = nn.Parameter(torch.zeros(config.h_f, d))
        self.col_embed = nn.Parameter(torch.zeros(config.w_f, d))
        self.token_embed = nn.Embedding(vocab, d)
        self.text_encoder = nn.ModuleList(
            [EncoderBlock(d, config.heads, config.mlp_ratio) for _ in range(config.enc_layers)])
        self.text_norm = nn.LayerNorm(d)
        self.queries = nn.Parameter(torch.zeros(config.num_queries, d))
        self.fusion = nn.ModuleList(
            [EncoderBlock(d, config.heads, config.mlp_ratio) for _ in range(config.enc_layers)])
        self.fusion_norm = nn.LayerNorm(d)
        self.decoder = nn.ModuleList(
            [DecoderBlock(d, config.heads, config.mlp_ratio) for _ in range(config.dec_layers)])
        self.decoder_norm = nn.LayerNorm(d)
        self.lm_head = None if config.tie_embeddings else nn.Linear(d, vocab, bias=False)
        self.itc_image_proj = nn.Linear(d, d)
        self.itc_text_proj = nn.Linear(d, d)
        self.itm_head = nn.Linear(d, 2)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / ITC_TEMPERATURE)))
        self.register_buffer("positions", sinusoidal_positions(config.max_seq_len, d), persistent=False)
        self._init_weights()

    def _init_weights(self) -> None:
        std = self.config.init_std
        for name, param in self.named_parameters():
            if name == "logit_scale":
                continue
            if "norm" in name:
                nn.init.ones_(param) if name.endswith("weight") else nn.init.zeros_(param)
            elif name.endswith("bias"):
                nn.init.zeros_(param)
            else:
                nn.init.normal_(param, mean=0.0, std=std)

    # --- parameter groups ---

    @staticmethod
    def group_of(param_name: str) -> str:
        return _GROUP_PREFIXES[param_name.split(".", 1)[0]]

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups: Dict[str, List[nn.Parameter]] = {g: [] for g in PARAM_GROUPS}
        for name, param in self.named_parameters():
            groups[self.group_of(name)].append(param)
        return groups

    def freeze(self, groups: Iterable[str]) -> None:
        """Stop gradients for the named groups; every other group stays trainable."""
        frozen = set(groups)
        for name, param in self.named_parameters():
            param.requires_grad_(self.group_of(name) not in frozen)

    # --- encoders ---

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """B x H x W x 3 in [0, 1] -> B x (h_f * w_f) x d."""
        cfg = self.config
        expected = (cfg.image_height, cfg.image_width, 3)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ModelInputError(f"expected images of shape B x {expected}, got {tuple(images.shape)}")
        b, p = images.shape[0], cfg.patch
        patches = images.reshape(b, cfg.h_f, p, cfg.w_f, p, 3).permute(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(b, cfg.h_f * cfg.w_f, p * p * 3)
        pos = (self.row_embed[:, None, :] + self.col_embed[None, :, :]).reshape(cfg.h_f * cfg.w_f, -1)
        return self.patch_proj(patches) + pos

    def encode_text(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """B x n_t token ids -> B x n_t x d; PAD positions are masked out of attention."""
        if ids.dim() != 2:
            raise ModelInputError(f"expected B x n token ids, got shape {tuple(ids.shape)}")
        n = ids.shape[1]
        if n > self.config.max_seq_len:
            raise ModelInputError(f"instruction of {n} tokens exceeds max_seq_len={self.config.max_seq_len}")
        if mask is None:
            mask = ids != 0
        x = self.token_embed(ids) + self.positions[:n]
        if n == 0:
            return x
        for block in self.text_encoder:
            x = block(x, mask)
        return self.text_norm(x)

    def fuse(self, v: torch.Tensor, l: torch.Tensor, text_mask: torch.Tensor):
        """[queries ; v ; l] through the fusion encoder; returns (fused, fused_mask)."""
        d = self.config.d
        if v.shape[-1] != d or l.shape[-1] != d or v.shape[0] != l.shape[0]:
            raise ModelInputError(f"cannot fuse visual {tuple(v.shape)} with text {tuple(l.shape)}")
        b = v.shape[0]
        queries = self.queries.unsqueeze(0).expand(b, -1, -1)
        x = torch.cat([queries, v, l], dim=1)
        visible = torch.ones(b, queries.shape[1] + v.shape[1], dtype=torch.bool, device=v.device)
        mask = torch.cat([visible, text_mask], dim=1)
        for block in self.fusion:
            x = block(x, mask)
        return self.fusion_norm(x), mask

    def encode(self, images: torch.Tensor, text_ids: torch.Tensor) -> ForwardState:
        v = self.encode_image(images)
        text_mask = text_ids != 0
        l = self.encode_text(text_ids, text_mask)
        fused, fused_mask = self.fuse(v, l, text_mask)
        return ForwardState(v, l, text_mask, fused, fused_mask)

    # --- decoder ---

    def decode(self, state: ForwardState, y_in: torch.Tensor,
               cache: Optional[DecoderCache] = None) -> torch.Tensor:
        """Logits B x T x V for decoder inputs ``y_in`` (continuing ``cache`` if given)."""
        start = cache.length if cache is not None else 0
        t = y_in.shape[1]
        if start + t > self.config.max_seq_len:
            raise ModelInputError(f"decoder length {start + t} exceeds max_seq_len={self.config.max_seq_len}")
        y = self.token_embed(y_in) + self.positions[start:start + t]
        for i, block in enumerate(self.decoder):
            y = block(y, state.fused, state.fused_mask, None if cache is None else cache.layers[i])
        y = self.decoder_norm(y)
        if cache is not None:
            cache.length += t
        if self.lm_head is None:
            return y @ self.token_embed.weight.t()
        return self.lm_head(y)

    def decode_step(self, state: ForwardState, y_prefix: torch.Tensor) -> torch.Tensor:
        """Next-token logits (B x V) after ``y_prefix``, recomputed from scratch."""
        if y_prefix.shape[1] >= self.config.max_seq_len:
            raise ModelInputError("prefix already fills max_seq_len")
        return self.decode(state, y_prefix)[:, -1]

    def new_cache(self) -> DecoderCache:
        return DecoderCache.empty(len(self.decoder))

    def forward(self, images: torch.Tensor, text_ids: torch.Tensor, y_in: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(images, text_ids), y_in)

    # --- alignment heads ---

    def image_queries(self, v: torch.Tensor) -> torch.Tensor:
        """Query outputs of the fusion encoder over [queries ; v] alone, without text."""
        b = v.shape[0]
        x = torch.cat([self.queries.unsqueeze(0).expand(b, -1, -1), v], dim=1)
        mask = torch.ones(b, x.shape[1], dtype=torch.bool, device=v.device)
        for block in self.fusion:
            x = block(x, mask)
        return self.fusion_norm(x)[:, :self.config.num_queries]

    def image_embedding(self, state: ForwardState) -> torch.Tensor:
        """Pooled image-only query outputs; mean visual token when there are no queries."""
        if self.config.num_queries > 0:
            pooled = self.image_queries(state.v).mean(dim=1)
        else:
            pooled = state.v.mean(dim=1)
        return F.normalize(self.itc_image_proj(pooled), dim=-1)

    def text_embedding(self, state: ForwardState) -> torch.Tensor:
        weights = state.text_mask.unsqueeze(-1).to(state.l.dtype)
        pooled = (state.l * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)
        return F.normalize(self.itc_text_proj(pooled), dim=-1)

    def itm_logits(self, state: ForwardState) -> torch.Tensor:
        """Two-way match/no-match logits from the pooled fused representation."""
        if self.config.num_queries > 0:
            pooled = state.fused[:, 0]
        else:
            weights = state.fused_mask.unsqueeze(-1).to(state.fused.dtype)
            pooled = (state.fused * weights).sum(dim=1) / weights.sum(dim=1)
        return self.itm_head(pooled)

    def temperature(self) -> torch.Tensor:
        return torch.exp(-self.logit_scale)


def build_model(config: ModelConfig, seed: int = 0) -> GroundingModel:
    """Seeded construction so two runs start from identical weights."""
    generator_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return GroundingModel(config)
    finally:
        torch.random.set_rng_state(generator_state)
