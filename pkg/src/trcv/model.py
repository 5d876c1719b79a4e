"""Patch-token encoder with a classification head and a localization head.

The encoder is a DeiT-style pre-norm transformer over ``[cls; patches]``
with learned positional embeddings.  The classification head reads the cls
token; the localization head adds a projection of the cls token to every
patch token, lays the tokens out on their grid and upsamples them to a
two-channel (background, foreground) map at input resolution.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CKPT_MAGIC = b"TRCV1\n"


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 2
    embed_dim: int = 32
    heads: int = 4
    num_classes: int = 3
    mlp_ratio: float = 4.0
    decoder_channels: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        grid = self.image_size // self.patch_size
        up = self.image_size / grid
        if up != 2 ** round(math.log2(up)):
            raise ValueError("image_size / grid must be a power of two for the x2 decoder")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


@dataclass
class EncoderOutput:
    cls_token: torch.Tensor  # (B, d)
    patch_tokens: torch.Tensor  # (B, P, d)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class LocalizationHead(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d, ch = cfg.embed_dim, cfg.decoder_channels
        self.grid = cfg.grid
        self.norm = nn.LayerNorm(d)
        self.cls_proj = nn.Linear(d, d)
        self.proj = nn.Conv2d(d, ch, 1)
        n_up = int(round(math.log2(cfg.image_size // cfg.grid)))
        self.stages = nn.ModuleList(nn.Conv2d(ch, ch, 3, padding=1) for _ in range(n_up))
        self.out = nn.Conv2d(ch, 2, 1)

    def logits(self, out: EncoderOutput) -> torch.Tensor:
        tokens = self.norm(out.patch_tokens) + self.cls_proj(self.norm(out.cls_token))[:, None, :]
        b, p, d = tokens.shape
        x = tokens.transpose(1, 2).reshape(b, d, self.grid, self.grid)
        x = self.proj(x)
        for conv in self.stages:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.gelu(conv(x))
        return self.out(x)


class TrCAMV(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.cls_norm = nn.LayerNorm(d)
        self.classifier = nn.Linear(d, cfg.num_classes)
        self.loc_head = LocalizationHead(cfg)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        # variance-preserving decoder; the framework default shrinks the signal at every stage
        head = self.loc_head
        for conv in (head.proj, *head.stages):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        nn.init.kaiming_normal_(head.out.weight, nonlinearity="linear")
        nn.init.zeros_(head.out.bias)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Patch + positional embedding of ``(B, 3, S, S)`` input, cls first."""
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != self.cfg.image_size or x.shape[3] != self.cfg.image_size:
            raise ValueError(f"expected (B, 3, {self.cfg.image_size}, {self.cfg.image_size}) input, got {tuple(x.shape)}")
        patches = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, patches], dim=1) + self.pos_embed

    def encode(self, x: torch.Tensor) -> EncoderOutput:
        h = self.embed(x)
        for blk in self.blocks:
            h = blk(h)
        return EncoderOutput(h[:, 0], h[:, 1:])

    def class_logits(self, out: EncoderOutput) -> torch.Tensor:
        return self.classifier(self.cls_norm(out.cls_token))

    def classify(self, out: EncoderOutput) -> torch.Tensor:
        return self.class_logits(out).softmax(dim=-1)

    def localization_logits(self, out: EncoderOutput) -> torch.Tensor:
        return self.loc_head.logits(out)

    def localize(self, out: EncoderOutput) -> torch.Tensor:
        """``(B, 2, H, W)`` map; channel 0 background, channel 1 foreground."""
        return self.localization_logits(out).softmax(dim=1)

    def forward(self, x):
        out = self.encode(x)
        return self.class_logits(out), self.localization_logits(out)

    def decoder_parameters(self):
        """Parameters only the localization head uses."""
        return list(self.loc_head.parameters())


def standardize(x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Per-image, per-channel zero mean / unit variance for ``(..., 3, H, W)`` input."""
    centered = x - x.mean(dim=(-2, -1), keepdim=True)
    std = centered.pow(2).mean(dim=(-2, -1), keepdim=True).sqrt()
    # flat channels (std at rounding-noise level) map to exact zeros
    return torch.where(std > eps, centered / std.clamp_min(eps), torch.zeros_like(centered))


def resize_image(image: np.ndarray, size: int) -> torch.Tensor:
    """uint8 ``H x W x 3`` to a float ``(3, size, size)`` tensor in [0, 255], bilinear."""
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()
    if t.shape[1:] != (size, size):
        t = F.interpolate(t[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    return t


def frame_to_tensor(image: np.ndarray, size: int) -> torch.Tensor:
    """Inference preprocessing: resize to ``size`` and standardize."""
    return standardize(resize_image(image, size) / 255.0)


@torch.no_grad()
def infer(model: TrCAMV, frames):
    """Frame-by-frame forward pass.

    ``frames`` is a sequence of ``H x W x 3`` uint8 images (or objects with
    an ``image`` attribute).  Returns class probabilities ``(N, C)`` and
    foreground/background maps resized back to each frame's resolution as a
    list of ``(2, H, W)`` arrays.  Each frame is its own forward pass, so a
    frame's result never depends on what it was grouped with (batched float32
    kernels drift by ~1e-6 with the batch size).
    """
    was_training = model.training
    model.eval()
    size = model.cfg.image_size
    probs, maps = [], []
    for f in frames:
        im = getattr(f, "image", f)
        out = model.encode(frame_to_tensor(im, size)[None])
        probs.append(model.classify(out)[0].numpy())
        lg = model.localization_logits(out)
        h, w = im.shape[:2]
        if (h, w) != (size, size):
            lg = F.interpolate(lg, size=(h, w), mode="bilinear", align_corners=False)
        maps.append(lg[0].softmax(dim=0).numpy())
    model.train(was_training)
    return np.stack(probs) if probs else np.zeros((0, model.cfg.num_classes), np.float32), maps


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TrCAMV, path, meta: dict | None = None) -> None:
    """Write config + named float32 tensors in the TRCV1 container."""
    header = json.dumps({"config": asdict(model.cfg), "meta": meta or {}}, sort_keys=True).encode()
    state = model.state_dict()
    chunks = [CKPT_MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[TrCAMV, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a TRCV1 checkpoint")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model = TrCAMV(EncoderConfig(**header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]


def import_encoder_weights(model: TrCAMV, state: dict, prefix: str = "") -> list[str]:
    """Copy externally pretrained backbone tensors whose names and shapes match.

    Returns the names that were loaded; heads are left untouched.
    """
    own = model.state_dict()
    loaded = []
    for name, tensor in state.items():
        key = name[len(prefix):] if prefix and name.startswith(prefix) else name
        if key.startswith(("classifier", "loc_head")):
            continue
        if key in own and tuple(own[key].shape) == tuple(tensor.shape):
            own[key] = torch.as_tensor(tensor, dtype=own[key].dtype)
            loaded.append(key)
    model.load_state_dict(own)
    return loaded
