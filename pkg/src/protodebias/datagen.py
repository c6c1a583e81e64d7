"""Synthetic dermoscopy-style images with a known confounding structure.

The generator follows a structural causal model with a hidden style factor
that selects both the class-irrelevant acquisition artifact and (with
probability `rho`) aligns it with the class label:

    y  ~ uniform over classes
    s  =  y mod A   with probability rho,  else uniform over A artifacts
    x  =  render(lesion(y), artifact(s), noise)

Lesions differ across classes in border lobing and interior texture and are
confined to a central disk; artifacts are saturated peripheral markings
(corner patch, ruler marks, frame, hair-like arcs) confined to an outer
annulus. The two regions are disjoint by construction, which is what makes
explanation heatmaps checkable against ground truth. `region_masks` exposes
the canonical masks.

Determinism: each sample is rendered from its own generator seeded by
(seed, split, index), so datasets are reproducible sample-by-sample and
independent of generation order. Pixels are quantized to the 8-bit grid
before writing, so a write/read round trip through PNG is bit-exact.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ContractViolation, ManifestError

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}

# class morphology tables: border lobe count and interior texture kind
# cycle with the class index, so any num_classes gets a distinct
# combination. All classes share the lesion palette on purpose: the class
# signal lives in shape and texture alone, which keeps the causal feature
# strictly harder to read than the saturated artifact marks and so keeps
# the shortcut genuinely tempting.
_LOBES = (0, 3, 5, 7, 4, 6)
_TEXTURES = ("smooth", "stripes", "rings")
_LESION_COLOR = (0.46, 0.28, 0.26)

# artifact appearance tables: style and hue cycle with the artifact id
_ARTIFACT_COLORS = (
    (0.95, 0.12, 0.12),
    (0.10, 0.85, 0.95),
    (0.97, 0.85, 0.10),
    (0.90, 0.15, 0.90),
)

_MANIFEST_HEADER = "sample_id,path,label,artifact_id"


@dataclass(frozen=True)
class ScmConfig:
    """Configuration of the synthetic generator.

    `rho_train` controls how often the artifact aligns with the class in the
    train and val splits; `rho_test` controls the test split. The default
    pair (0.9, 0.0) is the shifted benchmark: a shortcut that is 90%
    predictive during training and useless at test time.
    """

    num_classes: int = 3
    num_artifacts: int = 3
    image_size: int = 32
    rho_train: float = 0.9
    rho_test: float = 0.0
    samples_per_split: int = 600
    noise_std: float = 0.02
    seed: int = 0
    overlap: bool = False

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if self.num_artifacts < 1:
            raise ConfigurationError("num_artifacts must be >= 1")
        if not (0.0 <= self.rho_train <= 1.0 and 0.0 <= self.rho_test <= 1.0):
            raise ConfigurationError("rho must lie in [0, 1]")
        if self.image_size < 32 or self.image_size % 8:
            raise ConfigurationError("image_size must be a multiple of 8, at least 32")
        if self.samples_per_split < 1:
            raise ConfigurationError("samples_per_split must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be nonnegative")

    def rho_for(self, split: str) -> float:
        if split not in SPLITS:
            raise ContractViolation(f"unknown split {split!r}")
        return self.rho_test if split == "test" else self.rho_train


@dataclass
class ImageSample:
    """One rendered image with its generating factors.

    `artifact_id` is None for imported real data where the artifact factor
    is unobserved.
    """

    sample_id: str
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    label: int
    artifact_id: int | None


def _sample_rng(cfg: ScmConfig, split: str, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(_SPLIT_CODE[split], index))
    return np.random.Generator(np.random.PCG64(ss))


def sample_factors(cfg: ScmConfig, split: str, n: int | None = None):
    """Draw (labels, artifact ids) for a split without rendering pixels.

    Uses the same per-sample streams as `generate_dataset`, so the factors
    agree with the rendered dataset draw-for-draw.
    """
    cfg.validate()
    if split not in SPLITS:
        raise ContractViolation(f"unknown split {split!r}")
    n = cfg.samples_per_split if n is None else n
    rho = cfg.rho_for(split)
    labels = np.empty(n, dtype=np.int64)
    artifacts = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = _sample_rng(cfg, split, i)
        y, s = _draw_factors(cfg, rho, rng)
        labels[i] = y
        artifacts[i] = s
    return labels, artifacts


def _draw_factors(cfg: ScmConfig, rho: float, rng: np.random.Generator):
    y = int(rng.integers(cfg.num_classes))
    if rng.random() < rho:
        s = y % cfg.num_artifacts
    else:
        s = int(rng.integers(cfg.num_artifacts))
    return y, s


def region_masks(image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (causal_disk, artifact_annulus) masks at the given size.

    Lesion content stays inside the central disk; artifact content stays
    inside the annulus. The two masks are disjoint at every size.
    """
    s = image_size
    c = (s - 1) / 2.0
    yy, xx = np.mgrid[0:s, 0:s]
    r = np.hypot(xx - c, yy - c)
    scale = s / 32.0
    causal = r <= 11.0 * scale
    artifact = r >= 11.5 * scale
    return causal, artifact


def _render_lesion(cfg: ScmConfig, y: int, rng: np.random.Generator) -> np.ndarray:
    s = cfg.image_size
    scale = s / 32.0
    c = (s - 1) / 2.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    r = np.hypot(xx - c, yy - c)
    theta = np.arctan2(yy - c, xx - c)

    # draw the full jitter set up front so every class consumes the same
    # number of draws and streams stay aligned under class swaps
    brightness = rng.uniform(0.96, 1.04)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    r0 = (7.4 + rng.uniform(-0.5, 0.5)) * scale
    tex_angle = rng.uniform(0.0, np.pi)
    tex_phase = rng.uniform(0.0, 2.0 * np.pi)

    img = np.empty((s, s, 3))
    img[:] = np.array([0.80, 0.63, 0.55]) * brightness

    lobes = _LOBES[y % len(_LOBES)]
    amp = 0.0 if lobes == 0 else 0.32
    boundary = r0 * (1.0 + amp * np.cos(lobes * theta + phase))
    edge = 0.8 * scale
    alpha = 1.0 / (1.0 + np.exp((r - boundary) / edge))
    # hard cutoff keeps lesion content strictly inside the causal disk
    alpha = alpha * (r <= 10.5 * scale)

    texture = _TEXTURES[y % len(_TEXTURES)]
    if texture == "stripes":
        coord = (xx - c) * np.cos(tex_angle) + (yy - c) * np.sin(tex_angle)
        pat = 0.5 + 0.5 * np.sin(2.0 * np.pi * coord / (5.5 * scale) + tex_phase)
    elif texture == "rings":
        pat = 0.5 + 0.5 * np.sin(2.0 * np.pi * r / (2.8 * scale) + tex_phase)
    else:
        pat = np.full((s, s), 0.5)

    lesion = np.empty((s, s, 3))
    base = np.array(_LESION_COLOR)
    mod = (0.45 + 1.10 * pat)[:, :, None]
    lesion[:] = base * mod
    return img * (1.0 - alpha[:, :, None]) + lesion * alpha[:, :, None]


def _paint_artifact(cfg: ScmConfig, img: np.ndarray, s_id: int, rng: np.random.Generator) -> None:
    """Draw artifact `s_id` onto `img` in place. All marks live in the outer
    annulus; the `overlap` flag shifts them inward to make a deliberately
    harder variant."""
    size = cfg.image_size
    scale = size / 32.0
    c = (size - 1) / 2.0
    color = np.array(_ARTIFACT_COLORS[s_id % len(_ARTIFACT_COLORS)])
    style = s_id % 4
    inset = 5.0 * scale if cfg.overlap else 0.0

    def px(v: float) -> int:
        return int(round(v * scale))

    if style == 0:
        # saturated corner patch
        lo, hi = px(1 + inset / scale), px(8 + inset / scale)
        img[lo:hi, lo:hi] = color
    elif style == 1:
        # ruler: tick marks plus a baseline along the top edge
        row = px(2 + inset / scale)
        img[row, px(4):size - px(4)] = color
        for col in range(px(4), size - px(4), px(3)):
            img[px(1 + inset / scale):px(4 + inset / scale), col] = color
    elif style == 2:
        # frame around the border
        wd = max(px(2), 1)
        off = px(inset / scale)
        img[off:off + wd, :] = color
        img[size - off - wd:size - off, :] = color
        img[:, off:off + wd] = color
        img[:, size - off - wd:size - off] = color
    else:
        # dark hair-like arcs in the annulus
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        r = np.hypot(xx - c, yy - c)
        theta = np.arctan2(yy - c, xx - c)
        dark = np.array([0.08, 0.07, 0.07])
        for r_arc in (12.5, 13.8, 15.0):
            a0 = rng.uniform(0.0, 2.0 * np.pi)
            width = rng.uniform(1.6, 2.4)
            band = np.abs(r - (r_arc - inset / scale) * scale) < 0.7 * scale
            ang = np.angle(np.exp(1j * (theta - a0)))
            band &= np.abs(ang) < width
            img[band] = dark


def render_sample(cfg: ScmConfig, y: int, s_id: int, rng: np.random.Generator) -> np.ndarray:
    """Render one image from factors. Adds pixel noise, clips to [0, 1] and
    quantizes to the 8-bit grid."""
    img = _render_lesion(cfg, y, rng)
    _paint_artifact(cfg, img, s_id, rng)
    img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def generate_dataset(cfg: ScmConfig, split: str, n: int | None = None) -> list[ImageSample]:
    """Generate a split as a list of samples (in index order)."""
    cfg.validate()
    if split not in SPLITS:
        raise ContractViolation(f"unknown split {split!r}")
    n = cfg.samples_per_split if n is None else n
    rho = cfg.rho_for(split)
    out = []
    for i in range(n):
        rng = _sample_rng(cfg, split, i)
        y, s_id = _draw_factors(cfg, rho, rng)
        pixels = render_sample(cfg, y, s_id, rng)
        out.append(ImageSample(f"{split}-{i:05d}", pixels, y, s_id))
    return out


def write_manifest(samples: list[ImageSample], out_dir: str | Path, split: str) -> Path:
    """Write PNGs plus a manifest CSV; returns the manifest path.

    Layout: <out_dir>/<split>.csv with image paths relative to out_dir
    under images/<sample_id>.png.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = [_MANIFEST_HEADER]
    for smp in samples:
        arr = np.round(smp.pixels * 255.0).astype(np.uint8)
        rel = f"images/{smp.sample_id}.png"
        Image.fromarray(arr).save(out_dir / rel)
        art = "" if smp.artifact_id is None else str(smp.artifact_id)
        lines.append(f"{smp.sample_id},{rel},{smp.label},{art}")
    path = out_dir / f"{split}.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(manifest_path: str | Path, image_size: int | None = None) -> list[ImageSample]:
    """Load samples listed in a manifest CSV.

    Images are rescaled with bilinear resampling when `image_size` differs
    from the stored size. Malformed rows raise ManifestError naming the
    line number.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    text = manifest_path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != _MANIFEST_HEADER:
        raise ManifestError(f"{manifest_path}:1: expected header {_MANIFEST_HEADER!r}")
    out = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ManifestError(f"{manifest_path}:{ln}: expected 4 fields, got {len(parts)}")
        sample_id, rel, label_s, art_s = (p.strip() for p in parts)
        try:
            label = int(label_s)
        except ValueError:
            raise ManifestError(f"{manifest_path}:{ln}: bad label {label_s!r}") from None
        if label < 0:
            raise ManifestError(f"{manifest_path}:{ln}: negative label")
        artifact = None
        if art_s:
            try:
                artifact = int(art_s)
            except ValueError:
                raise ManifestError(f"{manifest_path}:{ln}: bad artifact_id {art_s!r}") from None
        img_path = root / rel
        if not img_path.is_file():
            raise ManifestError(f"{manifest_path}:{ln}: missing image {rel}")
        with Image.open(img_path) as im:
            im = im.convert("RGB")
            if image_size is not None and im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            pixels = np.asarray(im, dtype=np.float64) / 255.0
        out.append(ImageSample(sample_id, pixels, label, artifact))
    if not out:
        raise ManifestError(f"{manifest_path}: no samples listed")
    return out


def import_labeled_folder(image_paths: list[str | Path], labels: list[int],
                          out_dir: str | Path, split: str = "train",
                          image_size: int = 32) -> Path:
    """Convert arbitrary labeled images into the manifest format.

    Artifact ids are left blank (unobserved). Images are resized to
    `image_size` and re-encoded as PNG so downstream loading is uniform.
    """
    if len(image_paths) != len(labels):
        raise ContractViolation("image_paths and labels must have equal length")
    samples = []
    for i, (p, lab) in enumerate(zip(image_paths, labels)):
        with Image.open(p) as im:
            im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            pixels = np.asarray(im, dtype=np.float64) / 255.0
        samples.append(ImageSample(f"{split}-{i:05d}", pixels, int(lab), None))
    return write_manifest(samples, out_dir, split)


def batch_arrays(samples: list[ImageSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (X, y) with X in NHWC float64."""
    X = np.stack([s.pixels for s in samples]).astype(np.float64)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def scm_config_dict(cfg: ScmConfig) -> dict:
    return dataclasses.asdict(cfg)
