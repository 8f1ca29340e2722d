"""Synthetic open-world counting benchmark.

Each category is a point on the unit sphere in a small parameter space
(glyph shape, size, colour, contrast). Its text embedding is a fixed
scaled random isometry of that point plus Gaussian noise, so text cosine
similarity tracks visual similarity. Scenes contain ``count`` glyphs of the
target category, optionally mixed with glyphs of one distractor category.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .text_space import TextEmbeddingTable, save_table, load_table

FORMAT_VERSION = container.VERSION
DENSITY_SIGMA = 1.0
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


class PackingError(RuntimeError):
    def __init__(self, requested: int, achieved: int):
        super().__init__(f"could only place {achieved} of {requested} objects")
        self.requested = requested
        self.achieved = achieved


@dataclass(frozen=True)
class SyntheticCategory:
    id: int
    name: str
    param_vector: np.ndarray
    is_seen: bool

    @property
    def radius(self) -> float:
        return glyph_radius(self.param_vector)


@dataclass
class CountingSample:
    image: np.ndarray  # (H, W, C) float32
    category_id: int
    gt_count: int
    density: np.ndarray  # (G_out, G_out) float64
    object_centers: np.ndarray  # (count, 2) (row, col) pixels
    distractor_id: int = -1
    distractor_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    requested_count: int | None = None


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def text_projection(p_dim: int, d_t: int, seed: int) -> np.ndarray:
    """Scaled random isometry R^p_dim -> R^d_t (orthonormal columns times sqrt(d_t))."""
    rng = np.random.default_rng([seed, 7919])
    q, _ = np.linalg.qr(rng.normal(size=(d_t, p_dim)))
    return q * np.sqrt(d_t)


def embed_params(params: np.ndarray, projection: np.ndarray, sigma_noise: float, rng: np.random.Generator) -> np.ndarray:
    params = np.atleast_2d(params)
    emb = params @ projection.T
    if sigma_noise > 0:
        emb = emb + rng.normal(0.0, sigma_noise, size=emb.shape)
    return emb


def gen_catalog(
    n_seen: int,
    n_unseen: int,
    p_dim: int = 4,
    d_t: int = 16,
    seed: int = 0,
    n_clusters: int = 6,
    cluster_spread: float = 0.45,
    sigma_noise: float = 0.05,
    k_max: int = 1,
) -> tuple[list[SyntheticCategory], TextEmbeddingTable]:
    if n_seen < max(1, k_max) or n_unseen < 0:
        raise ValueError(f"need n_seen >= {max(1, k_max)} and n_unseen >= 0")
    if p_dim < 4:
        raise ValueError("p_dim must be >= 4 (shape, size, colour, contrast)")
    if d_t < p_dim:
        raise ValueError("d_t must be >= p_dim")
    if sigma_noise < 0:
        raise ValueError("sigma_noise must be non-negative")
    rng = np.random.default_rng([seed, 1])
    n = n_seen + n_unseen
    centers = _unit(rng.normal(size=(n_clusters, p_dim)))
    members = rng.integers(0, n_clusters, size=n)
    params = _unit(centers[members] + cluster_spread * rng.normal(size=(n, p_dim)))
    unseen = set(rng.choice(n, size=n_unseen, replace=False).tolist()) if n_unseen else set()
    cats = [
        SyntheticCategory(i, f"cat_{i:03d}", params[i], i not in unseen)
        for i in range(n)
    ]
    proj = text_projection(p_dim, d_t, seed)
    emb = embed_params(params, proj, sigma_noise, np.random.default_rng([seed, 2]))
    table = TextEmbeddingTable(emb, [c.name for c in cats], np.array([c.is_seen for c in cats]))
    return cats, table


# rendering


def glyph_radius(u: np.ndarray) -> float:
    return float(2.75 + 1.25 * u[1])


def glyph_color(u: np.ndarray) -> np.ndarray:
    hue = np.pi * u[2]
    rgb = 0.5 + 0.45 * np.cos(hue - np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]))
    amp = 0.65 + 0.3 * u[3]
    return amp * rgb


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glyph_mask(u: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Soft coverage in [0, 1] of one glyph at offsets (dy, dx) from its centre.

    ``u[0]`` blends disk (-1), ring (0) and cross (+1).
    """
    r = glyph_radius(u)
    d = np.hypot(dy, dx)
    disk = _sigmoid((r - d) / 0.35)
    ring = np.exp(-(((d - 0.75 * r) / (0.22 * r + 0.35)) ** 2))
    half_w = 0.3 * r + 0.35
    arm_y = _sigmoid((r - np.abs(dy)) / 0.35) * _sigmoid((half_w - np.abs(dx)) / 0.35)
    arm_x = _sigmoid((r - np.abs(dx)) / 0.35) * _sigmoid((half_w - np.abs(dy)) / 0.35)
    cross = np.maximum(arm_x, arm_y)
    s = float(np.clip(u[0], -1.0, 1.0))
    w_disk, w_ring, w_cross = max(0.0, -s), 1.0 - abs(s), max(0.0, s)
    return np.clip(w_disk * disk + w_ring * ring + w_cross * cross, 0.0, 1.0)


def _place(rng, n, radius, size, min_sep_fn, existing, max_tries=1000):
    """Rejection-sample up to n centres; returns array (k, 2), k <= n."""
    placed = []
    pts = list(existing)
    tries = 0
    while len(placed) < n and tries < max_tries:
        tries += 1
        c = rng.uniform(radius, size - radius, size=2)
        if all(np.hypot(*(c - q[0])) >= min_sep_fn(q[1]) for q in pts):
            placed.append(c)
            pts.append((c, radius))
    return np.array(placed).reshape(-1, 2), pts


def density_map(centers: np.ndarray, image_size: int, out_size: int, sigma: float = DENSITY_SIGMA) -> np.ndarray:
    """Sum of per-object Gaussian kernels on the output grid, each renormalized to 1."""
    dens = np.zeros((out_size, out_size))
    scale = out_size / image_size
    grid = np.arange(out_size, dtype=np.float64)
    for row, col in np.asarray(centers).reshape(-1, 2):
        gy = (row * scale) - 0.5
        gx = (col * scale) - 0.5
        ky = np.exp(-0.5 * ((grid - gy) / sigma) ** 2)
        kx = np.exp(-0.5 * ((grid - gx) / sigma) ** 2)
        k = np.outer(ky, kx)
        dens += k / k.sum()
    return dens


def render_sample(
    category: SyntheticCategory,
    count: int,
    image_size: int = 64,
    seed=0,
    channels: int = 3,
    distractor: SyntheticCategory | None = None,
    distractor_count: int = 0,
    out_size: int | None = None,
    separation: float = 1.5,
    strict: bool = False,
) -> CountingSample:
    """Render ``count`` glyphs of ``category`` on a noisy background.

    Centres are rejection-sampled so any two glyphs sit at least
    ``separation`` times the larger radius apart. If packing fails after
    1000 tries the count is reduced (``requested_count`` keeps the original)
    unless ``strict``, in which case PackingError is raised.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if channels != 3:
        raise ValueError("only RGB rendering is supported")
    out_size = out_size or image_size // 4
    rng = np.random.default_rng(seed)
    u = category.param_vector
    r = category.radius
    sep = lambda r_other: separation * max(r, r_other)  # noqa: E731
    centers, pts = _place(rng, count, r, image_size, sep, [])
    if len(centers) < count and strict:
        raise PackingError(count, len(centers))
    if len(centers) == 0:
        raise PackingError(count, 0)
    d_centers = np.zeros((0, 2))
    if distractor is not None and distractor_count > 0:
        rd = distractor.radius
        d_centers, _ = _place(rng, distractor_count, rd, image_size, lambda r_other: separation * max(rd, r_other), pts)

    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) + 0.5
    img = 0.12 + 0.04 * rng.normal(size=(image_size, image_size, channels))
    layers = [(u, centers)]
    if len(d_centers):
        layers.append((distractor.param_vector, d_centers))
    for params, cs in layers:
        color = glyph_color(params)
        for cy, cx in cs:
            m = glyph_mask(params, yy - cy, xx - cx)[..., None]
            img = img * (1 - m) + color * m
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return CountingSample(
        image=img,
        category_id=category.id,
        gt_count=len(centers),
        density=density_map(centers, image_size, out_size),
        object_centers=centers,
        distractor_id=-1 if distractor is None or not len(d_centers) else distractor.id,
        distractor_centers=d_centers,
        requested_count=count if len(centers) != count else None,
    )


def log_uniform_count(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(np.clip(np.floor(np.exp(rng.uniform(np.log(lo), np.log(hi + 1)))), lo, hi))


# datasets on disk


@dataclass(frozen=True)
class DataConfig:
    n_seen: int = 24
    n_unseen: int = 8
    p_dim: int = 4
    d_t: int = 16
    n_clusters: int = 6
    cluster_spread: float = 0.45
    sigma_noise: float = 0.05
    image_size: int = 64
    samples_per_category: int = 40
    val_per_category: int = 8
    count_range: tuple[int, int] = (1, 30)
    distractor_prob: float = 0.9
    distractor_count_range: tuple[int, int] = (2, 20)
    seed: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["count_range"] = list(self.count_range)
        d["distractor_count_range"] = list(self.distractor_count_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        for key in ("count_range", "distractor_count_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def make_split_samples(cats: Sequence[SyntheticCategory], cfg: DataConfig, split: str, per_category: int):
    """Deterministic samples for one split; each sample's RNG is keyed by (seed, split, index)."""
    pool = [c for c in cats if (c.is_seen if split in ("train", "val") else not c.is_seen)]
    out = []
    idx = 0
    for cat in pool:
        others = [c for c in pool if c.id != cat.id]
        for _ in range(per_category):
            rng = np.random.default_rng([cfg.seed, SPLIT_CODES[split], idx, 11])
            count = log_uniform_count(rng, *cfg.count_range)
            distractor, d_count = None, 0
            if others and rng.uniform() < cfg.distractor_prob:
                distractor = others[int(rng.integers(len(others)))]
                d_count = log_uniform_count(rng, *cfg.distractor_count_range)
            sample = render_sample(
                cat, count, cfg.image_size, seed=[cfg.seed, SPLIT_CODES[split], idx, 13],
                distractor=distractor, distractor_count=d_count,
            )
            out.append(sample)
            idx += 1
    return out


def _sample_arrays(s: CountingSample) -> dict[str, np.ndarray]:
    return {
        "image": s.image,
        "density": s.density,
        "centers": np.asarray(s.object_centers, dtype=np.float64).reshape(-1, 2),
        "distractor_centers": np.asarray(s.distractor_centers, dtype=np.float64).reshape(-1, 2),
    }


def save_sample(path: Path, s: CountingSample) -> None:
    container.save(path, _sample_arrays(s))


def load_sample(path: Path, category_id: int, distractor_id: int = -1, requested_count=None) -> CountingSample:
    t = container.load(path)
    return CountingSample(
        image=t["image"], category_id=category_id, gt_count=int(t["centers"].shape[0]),
        density=t["density"], object_centers=t["centers"], distractor_id=distractor_id,
        distractor_centers=t["distractor_centers"], requested_count=requested_count,
    )


def build_dataset(cats: Sequence[SyntheticCategory], table: TextEmbeddingTable, cfg: DataConfig, out_dir) -> dict:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    save_table(table, out / "text_table.sdvt")
    container.save(out / "catalog.sdvt", {"params": np.stack([c.param_vector for c in cats])})
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "categories": [{"id": c.id, "name": c.name, "seen": c.is_seen} for c in cats],
        "splits": {},
    }
    for split, per in (("train", cfg.samples_per_category), ("val", cfg.val_per_category), ("test", cfg.samples_per_category)):
        entries = []
        for i, s in enumerate(make_split_samples(cats, cfg, split, per)):
            rel = f"samples/{split}_{i:05d}.sdvt"
            save_sample(out / rel, s)
            entries.append({
                "file": rel, "category_id": s.category_id, "count": s.gt_count,
                "distractor_id": s.distractor_id, "requested_count": s.requested_count,
            })
        manifest["splits"][split] = entries
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def generate(cfg: DataConfig, out_dir) -> dict:
    cats, table = gen_catalog(
        cfg.n_seen, cfg.n_unseen, cfg.p_dim, cfg.d_t, cfg.seed,
        n_clusters=cfg.n_clusters, cluster_spread=cfg.cluster_spread, sigma_noise=cfg.sigma_noise,
    )
    return build_dataset(cats, table, cfg, out_dir)


@dataclass
class SplitArrays:
    """A split held in memory: images (N, H, W, C) float32, ids, counts."""

    name: str
    images: np.ndarray
    category_ids: np.ndarray
    counts: np.ndarray
    densities: np.ndarray

    def __len__(self):
        return len(self.category_ids)

    def subset(self, idx) -> "SplitArrays":
        return SplitArrays(self.name, self.images[idx], self.category_ids[idx], self.counts[idx], self.densities[idx])


def stack_samples(name: str, samples: Sequence[CountingSample]) -> SplitArrays:
    return SplitArrays(
        name,
        np.stack([s.image for s in samples]),
        np.array([s.category_id for s in samples], dtype=np.int64),
        np.array([s.gt_count for s in samples], dtype=np.float64),
        np.stack([s.density for s in samples]),
    )


@dataclass
class Dataset:
    root: Path
    manifest: dict
    table: TextEmbeddingTable
    categories: list[SyntheticCategory]

    def split(self, name: str) -> SplitArrays:
        entries = self.manifest["splits"][name]
        samples = [
            load_sample(self.root / e["file"], e["category_id"], e.get("distractor_id", -1), e.get("requested_count"))
            for e in entries
        ]
        return stack_samples(name, samples)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise container.FormatError(f"dataset format {manifest.get('format_version')} != {FORMAT_VERSION}")
    table = load_table(root / "text_table.sdvt")
    params = container.load(root / "catalog.sdvt")["params"]
    cats = [SyntheticCategory(c["id"], c["name"], params[c["id"]], c["seen"]) for c in manifest["categories"]]
    return Dataset(root, manifest, table, cats)
