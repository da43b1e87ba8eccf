"""Toy pixel-space UNet with TDCA blocks and a landmark spatial branch."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import landmark_heatmap
from .embeddings import AttrProjector, IdentityProjector, TextEncoder, prompt_ids
from .errors import ConfigurationError
from .tdca import CONCAT, TRIPLET, ConditioningBundle, TDCABlock, attend, multihead_attend, split_heads, merge_heads


@dataclass
class ModelConfig:
    image_size: int = 32
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 2)
    heads: int = 4
    ctx_dim: int = 64
    face_embed_dim: int = 32
    id_tokens: int = 4
    n_layers: int = 6
    d_latent: int = 64
    n_landmarks: int = 5
    landmark_sigma: float = 1.5
    self_attn_resolutions: tuple = (8,)
    groups: int = 8
    spatial_branch: bool = True

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.self_attn_resolutions = tuple(self.self_attn_resolutions)
        if self.image_size % (2 ** (len(self.channel_mult) - 1)):
            raise ConfigurationError("image_size must be divisible by the total downsampling factor")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["self_attn_resolutions"] = list(self.self_attn_resolutions)
        return d


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    """Spatial self-attention whose probability maps can be recorded or replaced."""

    def __init__(self, dim: int, heads: int, site: str):
        super().__init__()
        self.heads, self.site = heads, site
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, controller=None):
        q, k, v = self.to_qkv(self.norm(x)).chunk(3, dim=-1)
        qh, kh, vh = (split_heads(t, self.heads) for t in (q, k, v))
        if controller is None:
            out = attend(qh, kh, vh)
        else:
            _, probs = attend(qh, kh, vh, return_probs=True)
            probs = controller(self.site, probs)
            out = probs @ vh
        return x + self.to_out(merge_heads(out))


class SpatialLevel(nn.Module):
    """Self-attention (optional) followed by a TDCA block, on a feature map."""

    def __init__(self, dim, cfg: ModelConfig, resolution: int, site: str):
        super().__init__()
        self.self_attn = SelfAttention(dim, cfg.heads, site) if resolution in cfg.self_attn_resolutions else None
        self.cross = TDCABlock(dim, cfg.ctx_dim, cfg.heads)

    def forward(self, x, bundle, gains, controller=None):
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        if self.self_attn is not None:
            tokens = self.self_attn(tokens, controller)
        tokens = self.cross(tokens, bundle, *gains)
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class SpatialBranch(nn.Module):
    """Landmark encoder adding zero-initialized residuals at every encoder level.

    Its lowest level cross-attends to the identity tokens only.
    """

    def __init__(self, cfg: ModelConfig, channels: list[int]):
        super().__init__()
        self.heads = cfg.heads
        c0 = channels[0]
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.n_landmarks, c0, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c0, c0, 3, padding=1), nn.SiLU(),
        )
        self.downs = nn.ModuleList()
        for i in range(1, len(channels)):
            self.downs.append(nn.Sequential(nn.Conv2d(channels[i - 1], channels[i], 3, stride=2, padding=1), nn.SiLU()))
        cl = channels[-1]
        self.to_q = nn.Linear(cl, cl, bias=False)
        self.to_k = nn.Linear(cfg.ctx_dim, cl, bias=False)
        self.to_v = nn.Linear(cfg.ctx_dim, cl, bias=False)
        self.outs = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c in channels)

    def forward(self, heatmap, id_tokens):
        feats = [self.stem(heatmap)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        h = feats[-1]
        b, c, hh, ww = h.shape
        tok = h.flatten(2).transpose(1, 2)
        tok = tok + multihead_attend(self.to_q(tok), self.to_k(id_tokens), self.to_v(id_tokens), self.heads)
        feats[-1] = tok.transpose(1, 2).reshape(b, c, hh, ww)
        return [out(f) for out, f in zip(self.outs, feats)]


class UNet(nn.Module):
    """Noise predictor conditioned on text, identity and attribute tokens plus landmarks.

    ``lambda1``/``lambda2`` are model-wide gains shared by every TDCA block.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.lambda1 = 1.0
        self.lambda2 = 1.0
        self.topology = TRIPLET
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        temb_dim = 4 * cfg.base_channels
        g = cfg.groups

        self.text_encoder = TextEncoder(cfg.ctx_dim)
        self.id_projector = IdentityProjector(cfg.face_embed_dim, cfg.ctx_dim, cfg.id_tokens)
        self.attr_projector = AttrProjector(cfg.n_layers, cfg.d_latent, cfg.ctx_dim)

        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(3, chans[0], 3, padding=1)

        res = cfg.image_size
        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        cin = chans[0]
        for i, c in enumerate(chans):
            self.down_res.append(ResBlock(cin, c, temb_dim, g))
            self.down_attn.append(SpatialLevel(c, cfg, res, f"down{i}"))
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
                res //= 2
            cin = c
        self.mid_res1 = ResBlock(cin, cin, temb_dim, g)
        self.mid_attn = SpatialLevel(cin, cfg, res, "mid")
        self.mid_res2 = ResBlock(cin, cin, temb_dim, g)
        self.up_res, self.up_attn, self.upsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        for i, c in reversed(list(enumerate(chans))):
            self.up_res.append(ResBlock(cin + c, c, temb_dim, g))
            self.up_attn.append(SpatialLevel(c, cfg, res, f"up{i}"))
            if i > 0:
                self.upsample.append(nn.Conv2d(c, chans[i - 1], 3, padding=1))
                res *= 2
                cin = chans[i - 1]
            else:
                cin = c
        self.norm_out = nn.GroupNorm(g, cin)
        self.conv_out = zero_module(nn.Conv2d(cin, 3, 3, padding=1))
        self.spatial = SpatialBranch(cfg, chans) if cfg.spatial_branch else None

    # -- conditioning -------------------------------------------------------

    def tdca_blocks(self) -> list[TDCABlock]:
        return [m for m in self.modules() if isinstance(m, TDCABlock)]

    def encode(self, prompts, face_embeddings: torch.Tensor, latents: torch.Tensor) -> ConditioningBundle:
        dt = self.conv_in.weight.dtype
        text = self.text_encoder(prompt_ids(prompts))
        ids = self.id_projector(face_embeddings.to(dt))
        attrs = self.attr_projector(latents.to(dt))
        return ConditioningBundle(text, ids, attrs)

    def encode_null(self, batch: int) -> ConditioningBundle:
        dt = self.conv_in.weight.dtype
        cfg = self.cfg
        return self.encode(
            [""] * batch,
            torch.zeros(batch, cfg.face_embed_dim, dtype=dt),
            torch.zeros(batch, cfg.n_layers, cfg.d_latent, dtype=dt),
        )

    def heatmap(self, landmarks) -> torch.Tensor:
        return landmark_heatmap(landmarks, self.cfg.image_size, self.cfg.landmark_sigma).to(self.conv_in.weight.dtype)

    # -- forward ------------------------------------------------------------

    @property
    def gains(self):
        return (self.lambda1, self.lambda2)

    def forward(self, x, t, bundle: ConditioningBundle, heatmap=None, controller=None):
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(x.dtype))
        residuals = None
        if self.spatial is not None and heatmap is not None:
            residuals = self.spatial(heatmap, bundle.id_tokens)

        h = self.conv_in(x)
        skips = []
        for i, (rb, at) in enumerate(zip(self.down_res, self.down_attn)):
            h = rb(h, temb)
            h = at(h, bundle, self.gains, controller)
            if residuals is not None:
                h = h + residuals[i]
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, bundle, self.gains, controller)
        h = self.mid_res2(h, temb)
        for j, (rb, at) in enumerate(zip(self.up_res, self.up_attn)):
            h = rb(torch.cat([h, skips.pop()], dim=1), temb)
            h = at(h, bundle, self.gains, controller)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))

    # -- adapter management -------------------------------------------------

    def reset_attribute_adapter(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        cfg = self.cfg
        with torch.no_grad():
            self.attr_projector.weight.copy_(
                torch.randn(self.attr_projector.weight.shape, generator=gen) / cfg.d_latent ** 0.5
            )
            self.attr_projector.bias.zero_()
        for blk in self.tdca_blocks():
            if blk.topology == TRIPLET:
                blk.reset_attribute_branch(gen)

    def convert_to_concat(self) -> None:
        for blk in self.tdca_blocks():
            blk.convert_to_concat()
        self.topology = CONCAT


def predict_noise(model: UNet, x_t, t, bundle: ConditioningBundle, landmarks, controller=None):
    heat = None if landmarks is None else model.heatmap(landmarks)
    return model(x_t, t, bundle, heat, controller)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
