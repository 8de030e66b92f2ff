"""RoI-Matcher network.

Siamese residual encoder -> prompt-mask fusion -> FPNC aggregation -> grid
sampled tokens -> two cross-attention stages -> FCN head with 6 output
channels (region, kernel, 4-d similarity vectors).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = "roimatcher-v1"

# residual blocks per encoder stage
DEPTH_PRESETS = {
    "small": (1, 1, 1, 1),
    "medium": (2, 2, 2, 2),
    "large": (3, 4, 6, 3),
}


class CheckpointVersionError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    base_channels: int = 32
    encoder_depth: str = "small"
    input_size: tuple[int, int] = (640, 640)
    attention_heads: int = 4
    token_stride: int = 16
    use_fpnc: bool = True
    use_grid_sampling: bool = True
    mask_fusion: str = "pre"
    head_channels: int = 64
    bias: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.token_stride not in (4, 8, 16, 32):
            raise ValueError(f"token_stride must be one of 4/8/16/32, got {self.token_stride}")
        if self.base_channels <= 0 or (4 * self.base_channels) % self.attention_heads:
            raise ValueError("4 * base_channels must be a positive multiple of attention_heads")
        if self.encoder_depth not in DEPTH_PRESETS:
            raise ValueError(f"unknown encoder_depth {self.encoder_depth!r}")
        if self.mask_fusion not in ("pre", "post"):
            raise ValueError(f"mask_fusion must be 'pre' or 'post', got {self.mask_fusion!r}")

    @property
    def effective_stride(self) -> int:
        return self.token_stride if self.use_grid_sampling else 4


class SegOutput(NamedTuple):
    region: torch.Tensor      # (B, H, W) in [0, 1]
    kernel: torch.Tensor      # (B, H, W) in [0, 1]
    similarity: torch.Tensor  # (B, 4, H, W)


class Tokens(NamedTuple):
    data: torch.Tensor        # (B, N, D)
    grid: tuple[int, int]


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        y = F.relu(self.n1(self.conv1(x)))
        return F.relu(self.n2(self.conv2(y)) + idt)


class Encoder(nn.Module):
    """Four residual stages at strides 4/8/16/32 with C/2C/4C/8C channels."""

    def __init__(self, c: int, depth: str = "small"):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, c // 2, 3, 2, 1, bias=False), _norm(c // 2), nn.ReLU(inplace=True),
            nn.Conv2d(c // 2, c, 3, 2, 1, bias=False), _norm(c), nn.ReLU(inplace=True),
        )
        stages, cin = [], c
        for i, n in enumerate(DEPTH_PRESETS[depth]):
            cout = c * 2 ** i
            blocks = [BasicBlock(cin, cout, 1 if i == 0 else 2)]
            blocks += [BasicBlock(cout, cout) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image dims must be divisible by 32, got {(h, w)}")
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def pool_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Max-pool a (B, H, W) mask to ``size``; returns (B, 1, h, w)."""
    return F.adaptive_max_pool2d(mask.unsqueeze(1).to(torch.get_default_dtype()
                                                      if not mask.is_floating_point() else mask.dtype), size)


def fuse_mask(pyramid: list[torch.Tensor], mask: torch.Tensor) -> list[torch.Tensor]:
    """Multiply every level by the prompt mask max-pooled to that level's size."""
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    h, w = mask.shape[-2:]
    h0, w0 = pyramid[0].shape[-2:]
    if (h, w) != (h0 * 4, w0 * 4):
        raise ValueError(f"mask dims {(h, w)} do not match image dims {(h0 * 4, w0 * 4)}")
    mask = mask.to(pyramid[0].dtype)
    return [f * pool_mask(mask, f.shape[-2:]) for f in pyramid]


class FPNC(nn.Module):
    """Reduce each level to C channels, smooth, upsample to stride 4 and concatenate.

    With ``concat_only=False`` this becomes a classic FPN: wider laterals with
    top-down summation before smoothing.
    """

    def __init__(self, c: int, concat_only: bool = True, bias: bool = True):
        super().__init__()
        self.concat_only = concat_only
        inner = c if concat_only else 4 * c
        self.lateral = nn.ModuleList(nn.Conv2d(c * 2 ** i, inner, 1, bias=bias) for i in range(4))
        self.smooth = nn.ModuleList(nn.Conv2d(inner, c, 3, 1, 1, bias=bias) for _ in range(4))

    def forward(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        lat = [conv(f) for conv, f in zip(self.lateral, pyramid)]
        if not self.concat_only:
            for i in range(2, -1, -1):
                lat[i] = lat[i] + F.interpolate(lat[i + 1], size=lat[i].shape[-2:], mode="nearest")
        size = lat[0].shape[-2:]
        outs = []
        for i, (conv, x) in enumerate(zip(self.smooth, lat)):
            y = F.relu(conv(x))
            if i:
                y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
            outs.append(y)
        return torch.cat(outs, dim=1)


def to_tokens(fmap: torch.Tensor, factor: int) -> Tokens:
    """Average-pool a stride-4 map by ``factor`` and flatten row-major."""
    if factor > 1:
        fmap = F.avg_pool2d(fmap, factor)
    grid = tuple(fmap.shape[-2:])
    return Tokens(fmap.flatten(2).transpose(1, 2), grid)


class CrossAttention(nn.Module):
    """Pre-norm multi-head cross attention block with a 2x feed-forward sublayer."""

    def __init__(self, dim: int, heads: int, bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.norm_q = nn.LayerNorm(dim, bias=bias)
        self.norm_kv = nn.LayerNorm(dim, bias=bias)
        self.q = nn.Linear(dim, dim, bias=bias)
        self.k = nn.Linear(dim, dim, bias=bias)
        self.v = nn.Linear(dim, dim, bias=bias)
        self.proj = nn.Linear(dim, dim, bias=bias)
        self.norm_ff = nn.LayerNorm(dim, bias=bias)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim, bias=bias), nn.GELU(),
                                nn.Linear(2 * dim, dim, bias=bias))
        self.last_weights: torch.Tensor | None = None

    def attend(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, nq, d = query.shape
        nk = context.shape[1]
        dh = d // self.heads
        q = self.q(self.norm_q(query)).view(b, nq, self.heads, dh).transpose(1, 2)
        kv = self.norm_kv(context)
        k = self.k(kv).view(b, nk, self.heads, dh).transpose(1, 2)
        v = self.v(kv).view(b, nk, self.heads, dh).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-2, -1) / dh ** 0.5, dim=-1)
        self.last_weights = w.detach()
        out = (w @ v).transpose(1, 2).reshape(b, nq, d)
        return self.proj(out)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if query.shape[-1] != context.shape[-1]:
            raise ValueError(f"embedding dims differ: {query.shape[-1]} vs {context.shape[-1]}")
        x = query + self.attend(query, context)
        return x + self.ff(self.norm_ff(x))


class SegHead(nn.Module):
    def __init__(self, dim: int, hidden: int, bias: bool = True):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(dim, hidden, 3, 1, 1, bias=bias), nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, 1, 1, bias=bias), nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 6, 1, bias=bias),
        )

    def forward(self, tokens: Tokens, out_size: tuple[int, int]) -> SegOutput:
        b, n, d = tokens.data.shape
        x = tokens.data.transpose(1, 2).reshape(b, d, *tokens.grid)
        x = F.interpolate(self.body(x), size=out_size, mode="bilinear", align_corners=False)
        return SegOutput(torch.sigmoid(x[:, 0]), torch.sigmoid(x[:, 1]), x[:, 2:])


class RoIMatcher(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        c = cfg.base_channels
        self.encoder = Encoder(c, cfg.encoder_depth)
        # reference and masked pyramids share one aggregator; the target has its own
        self.fpnc_ref = FPNC(c, cfg.use_fpnc, cfg.bias)
        self.fpnc_tgt = FPNC(c, cfg.use_fpnc, cfg.bias)
        self.attn_ref = CrossAttention(4 * c, cfg.attention_heads, cfg.bias)
        self.attn_tgt = CrossAttention(4 * c, cfg.attention_heads, cfg.bias)
        self.head = SegHead(4 * c, cfg.head_channels, cfg.bias)

    @property
    def pool_factor(self) -> int:
        return self.config.effective_stride // 4

    def encode(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.encoder(image)

    def embed(self, reference, prompt, target):
        """Return the (E_mask, E_ref, E_tgt) token embeddings."""
        if prompt.dim() == 2:
            prompt = prompt.unsqueeze(0)
        prompt = prompt.to(reference.dtype)
        f_ref = self.encoder(reference)
        f_tgt = self.encoder(target)
        agg_ref = self.fpnc_ref(f_ref)
        if self.config.mask_fusion == "pre":
            agg_mask = self.fpnc_ref(fuse_mask(f_ref, prompt))
        else:
            agg_mask = agg_ref * pool_mask(prompt, agg_ref.shape[-2:])
        agg_tgt = self.fpnc_tgt(f_tgt)
        k = self.pool_factor
        return to_tokens(agg_mask, k), to_tokens(agg_ref, k), to_tokens(agg_tgt, k)

    def forward(self, reference: torch.Tensor, prompt: torch.Tensor,
                target: torch.Tensor) -> SegOutput:
        e_mask, e_ref, e_tgt = self.embed(reference, prompt, target)
        e_r = self.attn_ref(e_mask.data, e_ref.data)
        e_total = self.attn_tgt(e_tgt.data, e_r)
        return self.head(Tokens(e_total, e_tgt.grid), tuple(target.shape[-2:]))


def normalize_image(image) -> torch.Tensor:
    """uint8 HxWx3 (or a batch) -> float CHW in [-1, 1]."""
    t = torch.as_tensor(image)
    t = t.to(torch.get_default_dtype()) / 255.0
    t = (t - 0.5) / 0.5
    return t.movedim(-1, -3).contiguous()


def save_checkpoint(model: RoIMatcher, path: str | Path, **extra) -> None:
    cfg = asdict(model.config)
    torch.save({"version": CHECKPOINT_VERSION, "config": cfg,
                "state_dict": model.state_dict(), **extra}, str(path))


def load_checkpoint(path: str | Path, map_location="cpu") -> tuple[RoIMatcher, dict]:
    blob = torch.load(str(path), map_location=map_location, weights_only=False)
    version = blob.get("version") if isinstance(blob, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version!r}, expected {CHECKPOINT_VERSION!r}")
    model = RoIMatcher(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
