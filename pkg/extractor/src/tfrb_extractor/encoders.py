"""Frozen vision encoders producing (cls + patch) token sequences.

Two families:

* ``toy-vit-p<patch>-d<dim>-l<layers>[-s<seed>]`` -- a small randomly
  initialized (and then frozen) ViT built locally. Weights are a pure function
  of the identifier, so exports are reproducible anywhere without downloads.
  Accepts any resolution that is a multiple of its patch size.
* ``hf-clip:<model-name>`` -- a CLIP-class vision tower loaded through the
  ``transformers`` library from a local cache; its own preprocessing config
  decides resolution and normalization.

Every encoder reports its embedding dim, its token count for a resolution
(grid + 1 cls row), and a short preprocessing description recorded in export
manifests.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image


class EncoderError(RuntimeError):
    """Unknown identifier, unloadable weights, or invalid resolution."""


@dataclass
class EncoderInfo:
    name: str
    dim: int
    patch: int
    preprocessing: str


class ToyViT:
    """Seeded frozen ViT: conv patch embed, cls token, pre-norm blocks."""

    def __init__(self, patch: int, dim: int, layers: int, seed: int, name: str):
        if dim % 4 != 0:
            raise EncoderError(f"toy-vit dim must be divisible by 4, got {dim}")
        self.name = name
        self.patch = patch
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)

        def rand(*shape, scale=0.02):
            return torch.randn(*shape, generator=gen) * scale

        self.patch_proj = rand(dim, 3 * patch * patch, scale=0.05)
        self.patch_bias = torch.zeros(dim)
        self.cls_token = rand(dim)
        self.blocks = []
        for _ in range(layers):
            self.blocks.append({
                "ln1_g": torch.ones(dim), "ln1_b": torch.zeros(dim),
                "qkv": rand(3 * dim, dim, scale=0.05), "qkv_b": torch.zeros(3 * dim),
                "proj": rand(dim, dim, scale=0.05), "proj_b": torch.zeros(dim),
                "ln2_g": torch.ones(dim), "ln2_b": torch.zeros(dim),
                "fc1": rand(2 * dim, dim, scale=0.05), "fc1_b": torch.zeros(2 * dim),
                "fc2": rand(dim, 2 * dim, scale=0.05), "fc2_b": torch.zeros(dim),
            })
        self.heads = 4

    def info(self) -> EncoderInfo:
        return EncoderInfo(
            name=self.name, dim=self.dim, patch=self.patch,
            preprocessing="square resize, RGB, scale to [0,1], normalize mean 0.5 std 0.5",
        )

    def token_count(self, resolution: int) -> int:
        self._check_resolution(resolution)
        return (resolution // self.patch) ** 2 + 1

    def _check_resolution(self, resolution: int) -> None:
        if resolution < self.patch or resolution % self.patch != 0:
            raise EncoderError(
                f"resolution {resolution} invalid for {self.name}: "
                f"must be a positive multiple of patch {self.patch}"
            )

    def preprocess(self, image: Image.Image, resolution: int) -> torch.Tensor:
        self._check_resolution(resolution)
        img = image.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
        arr = torch.from_numpy(np.array(img, copy=True)).float() / 255.0
        arr = (arr - 0.5) / 0.5
        return arr.permute(2, 0, 1)  # (3, H, W)

    @torch.no_grad()
    def encode(self, batch: torch.Tensor) -> np.ndarray:
        """(B, 3, H, W) -> (B, N, D) float32 token sequences, cls row first."""
        b, c, h, w = batch.shape
        p = self.patch
        grid = h // p
        # unfold into (B, grid*grid, 3*p*p) patch vectors
        patches = batch.unfold(2, p, p).unfold(3, p, p)
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, grid * grid, c * p * p)
        x = patches @ self.patch_proj.T + self.patch_bias
        cls = self.cls_token.expand(b, 1, self.dim)
        x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = x + self._attn(torch.nn.functional.layer_norm(
                x, (self.dim,), blk["ln1_g"], blk["ln1_b"]), blk)
            y = torch.nn.functional.layer_norm(x, (self.dim,), blk["ln2_g"], blk["ln2_b"])
            y = torch.nn.functional.gelu(y @ blk["fc1"].T + blk["fc1_b"])
            x = x + y @ blk["fc2"].T + blk["fc2_b"]
        return x.to(torch.float32).numpy()

    def _attn(self, x: torch.Tensor, blk: dict) -> torch.Tensor:
        b, n, d = x.shape
        dh = d // self.heads
        qkv = x @ blk["qkv"].T + blk["qkv_b"]
        q, k, v = qkv.split(d, dim=-1)
        q = q.view(b, n, self.heads, dh).transpose(1, 2)
        k = k.view(b, n, self.heads, dh).transpose(1, 2)
        v = v.view(b, n, self.heads, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / dh**0.5, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return out @ blk["proj"].T + blk["proj_b"]


class HfClipVision:
    """CLIP-class vision tower via transformers; needs a local model cache."""

    def __init__(self, model_name: str):
        try:
            from transformers import CLIPImageProcessor, CLIPVisionModel
        except ImportError as exc:  # pragma: no cover - environment dependent
            raise EncoderError("transformers is not installed") from exc
        try:
            self._model = CLIPVisionModel.from_pretrained(model_name)
            self._proc = CLIPImageProcessor.from_pretrained(model_name)
        except Exception as exc:  # pragma: no cover - environment dependent
            raise EncoderError(f"cannot load encoder {model_name!r}: {exc}") from exc
        self._model.eval()
        self.name = f"hf-clip:{model_name}"
        self.dim = self._model.config.hidden_size
        self.patch = self._model.config.patch_size

    def info(self) -> EncoderInfo:
        return EncoderInfo(
            name=self.name, dim=self.dim, patch=self.patch,
            preprocessing="model's published CLIPImageProcessor pipeline",
        )

    def token_count(self, resolution: int) -> int:
        return (resolution // self.patch) ** 2 + 1

    def preprocess(self, image: Image.Image, resolution: int) -> "torch.Tensor":
        out = self._proc(
            images=image.convert("RGB"),
            size={"shortest_edge": resolution},
            crop_size={"height": resolution, "width": resolution},
            return_tensors="pt",
        )
        return out["pixel_values"][0]

    @torch.no_grad()
    def encode(self, batch: "torch.Tensor") -> np.ndarray:  # pragma: no cover
        out = self._model(pixel_values=batch).last_hidden_state
        return out.to(torch.float32).numpy()


_TOY_RE = re.compile(r"^toy-vit-p(\d+)-d(\d+)-l(\d+)(?:-s(\d+))?$")


def load_encoder(identifier: str):
    m = _TOY_RE.match(identifier)
    if m:
        patch, dim, layers = int(m.group(1)), int(m.group(2)), int(m.group(3))
        seed = int(m.group(4)) if m.group(4) else 0
        if patch < 1 or dim < 4 or layers < 0:
            raise EncoderError(f"invalid toy-vit spec {identifier!r}")
        return ToyViT(patch=patch, dim=dim, layers=layers, seed=seed, name=identifier)
    if identifier.startswith("hf-clip:"):
        return HfClipVision(identifier.split(":", 1)[1])
    raise EncoderError(
        f"unknown encoder {identifier!r}; expected toy-vit-p<P>-d<D>-l<L>[-s<S>] "
        f"or hf-clip:<model-name>"
    )
