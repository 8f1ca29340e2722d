"""Mini vision transformer with deep visual prompts.

At each prompted layer the token sequence is ``[cls, prompt, patches]``;
the prompt positions are dropped from the layer output before the next
layer gets its own prompt. Prompt tokens carry no positional embedding.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


class FrozenError(RuntimeError):
    """Training touched the backbone in the wrong freeze state."""


@dataclass(frozen=True)
class MiniViTConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    depth: int = 3
    width: int = 32
    heads: int = 2
    joint_dim: int = 16
    mlp_ratio: int = 2
    prompted_layers: tuple[int, ...] | None = None  # 1-based; None = every layer
    embedding: str = "cls"  # or "patch_mean"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.embedding not in ("cls", "patch_mean"):
            raise ValueError(f"unknown embedding mode {self.embedding!r}")
        layers = self.layers_with_prompts
        if any(not 1 <= l <= self.depth for l in layers) or len(set(layers)) != len(layers):
            raise ValueError(f"prompted_layers must be distinct values in 1..{self.depth}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def layers_with_prompts(self) -> tuple[int, ...]:
        if self.prompted_layers is None:
            return tuple(range(1, self.depth + 1))
        return tuple(sorted(self.prompted_layers))

    @property
    def n_prompted(self) -> int:
        return len(self.layers_with_prompts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompted_layers"] = None if self.prompted_layers is None else list(self.prompted_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MiniViTConfig":
        d = dict(d)
        if d.get("prompted_layers") is not None:
            d["prompted_layers"] = tuple(d["prompted_layers"])
        return cls(**d)


@dataclass
class EncodedImage:
    cls_embedding: Tensor  # (B, joint_dim)
    patch_embeddings: Tensor  # (B, n_patches, joint_dim)
    image_embedding: Tensor  # cls or patch mean, per config


def init_vit_params(cfg: MiniViTConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, p = cfg.width, cfg.patch_size
    hidden = d * cfg.mlp_ratio
    patch_dim = p * p * cfg.channels

    def lin(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    params = {
        "patch_w": lin(patch_dim, d),
        "patch_b": np.zeros(d),
        "cls": rng.normal(0.0, 0.02, size=d),
        "pos": rng.normal(0.0, 0.02, size=(cfg.n_patches, d)),
    }
    for i in range(1, cfg.depth + 1):
        params.update({
            f"l{i}.ln1_g": np.ones(d), f"l{i}.ln1_b": np.zeros(d),
            f"l{i}.qkv_w": lin(d, 3 * d), f"l{i}.qkv_b": np.zeros(3 * d),
            f"l{i}.proj_w": lin(d, d) * 0.5, f"l{i}.proj_b": np.zeros(d),
            f"l{i}.ln2_g": np.ones(d), f"l{i}.ln2_b": np.zeros(d),
            f"l{i}.fc1_w": lin(d, hidden), f"l{i}.fc1_b": np.zeros(hidden),
            f"l{i}.fc2_w": lin(hidden, d) * 0.5, f"l{i}.fc2_b": np.zeros(d),
        })
    params.update({"lnf_g": np.ones(d), "lnf_b": np.zeros(d), "out_w": lin(d, cfg.joint_dim)})
    return params


@dataclass
class MiniViT:
    config: MiniViTConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    frozen: bool = False

    @classmethod
    def create(cls, config: MiniViTConfig, seed: int) -> "MiniViT":
        raw = init_vit_params(config, seed)
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in raw.items()})

    @classmethod
    def from_arrays(cls, config: MiniViTConfig, arrays: dict[str, np.ndarray], frozen: bool) -> "MiniViT":
        m = cls(config, {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()})
        if frozen:
            m.freeze()
        return m

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
            t.data.setflags(write=False)
        self.frozen = True

    def require_frozen(self) -> None:
        if not self.frozen:
            raise FrozenError("backbone must be pretrained and frozen before prompt training")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch*patch*C), row-major patch order."""
    b, h, w, c = images.shape
    g_h, g_w = h // patch, w // patch
    x = images.reshape(b, g_h, patch, g_w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g_h * g_w, patch * patch * c)


def _ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return nx.layer_norm(x) * g + b


def _block(x: Tensor, p: dict[str, Tensor], i: int, heads: int) -> Tensor:
    bsz, seq, d = x.shape
    dh = d // heads
    h = _ln(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
    qkv = h @ p[f"l{i}.qkv_w"] + p[f"l{i}.qkv_b"]
    qkv = nx.transpose(qkv.reshape(bsz, seq, 3, heads, dh), (2, 0, 3, 1, 4))  # (3, B, H, S, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = nx.softmax(q @ nx.transpose(k) * (1.0 / np.sqrt(dh)), axis=-1)
    o = nx.transpose(att @ v, (0, 2, 1, 3)).reshape(bsz, seq, d)
    x = x + (o @ p[f"l{i}.proj_w"] + p[f"l{i}.proj_b"])
    h2 = _ln(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
    m = nx.gelu(h2 @ p[f"l{i}.fc1_w"] + p[f"l{i}.fc1_b"]) @ p[f"l{i}.fc2_w"] + p[f"l{i}.fc2_b"]
    return x + m


def encode(model: MiniViT, images, prompts: Tensor | None = None) -> EncodedImage:
    """Encode a batch of images (B, H, W, C) with per-layer prompts.

    ``prompts`` is (B, L, T, D) with L the number of prompted layers, or
    None / T == 0 for a plain forward pass.
    """
    cfg, p = model.config, model.params
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ContractError(f"image shape {images.shape[1:]} does not match config")
    bsz = images.shape[0]
    n_tok = 0
    if prompts is not None:
        if prompts.ndim == 3:
            prompts = prompts.reshape(1, *prompts.shape)
        if prompts.ndim != 4 or prompts.shape[1] != cfg.n_prompted or prompts.shape[3] != cfg.width:
            raise ContractError(
                f"prompt shape {prompts.shape} incompatible with {cfg.n_prompted} prompted layers of width {cfg.width}"
            )
        if prompts.shape[0] not in (1, bsz):
            raise ContractError(f"prompt batch {prompts.shape[0]} vs image batch {bsz}")
        n_tok = prompts.shape[2]

    x = Tensor(patchify(images, cfg.patch_size)) @ p["patch_w"] + p["patch_b"] + p["pos"]
    cls = Tensor(np.zeros((bsz, 1, cfg.width))) + p["cls"]
    seq = nx.concat([cls, x], axis=1)
    prompted = {layer: j for j, layer in enumerate(cfg.layers_with_prompts)}
    for i in range(1, cfg.depth + 1):
        j = prompted.get(i)
        if j is not None and n_tok > 0:
            pj = nx.take_rows(prompts, 1, j, j + 1).reshape(prompts.shape[0], n_tok, cfg.width)
            if pj.shape[0] != bsz:
                pj = Tensor(np.zeros((bsz, n_tok, cfg.width))) + pj
            seq_in = nx.concat([nx.take_rows(seq, 1, 0, 1), pj, nx.take_rows(seq, 1, 1, seq.shape[1])], axis=1)
            out = _block(seq_in, p, i, cfg.heads)
            seq = nx.concat([nx.take_rows(out, 1, 0, 1), nx.take_rows(out, 1, 1 + n_tok, out.shape[1])], axis=1)
        else:
            seq = _block(seq, p, i, cfg.heads)
    seq = _ln(seq, p["lnf_g"], p["lnf_b"]) @ p["out_w"]
    cls_emb = nx.take_rows(seq, 1, 0, 1).reshape(bsz, cfg.joint_dim)
    patch_emb = nx.take_rows(seq, 1, 1, seq.shape[1])
    image_emb = cls_emb if cfg.embedding == "cls" else nx.reduce_mean(patch_emb, axis=1)
    return EncodedImage(cls_emb, patch_emb, image_emb)
