"""Dataset manifests and a seeded synthetic stereo distortion generator.

The synthetic generator stands in for license-restricted subjective-study
databases: procedural pristine textures, a small horizontal disparity
between views, and three parametric distortions applied at five severity
levels.  Synthetic scores are level-linear scaffolding (dmos = 20*level),
not perceptual claims.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ContractError, ParseError, ResolutionError
from .imagepipe import GrayImage

DISTORTION_TAGS = ("jp2k", "jpeg", "wn", "blur", "ff",
                   "synth-blur", "synth-awgn", "synth-quant", "pristine")
SYNTH_TAGS = ("synth-blur", "synth-awgn", "synth-quant")
SYMMETRY_TAGS = ("symmetric", "asymmetric")

BLUR_SIGMAS = (0.5, 1.0, 2.0, 4.0, 8.0)
AWGN_STDS = (0.01, 0.02, 0.05, 0.1, 0.2)
QUANT_LEVELS = (64, 32, 16, 8, 4)

MANIFEST_HEADER = "id,ref_id,left_path,right_path,dmos,distortion,symmetry"


@dataclass
class StereoSample:
    id: str
    ref_id: str
    left_path: str
    right_path: str
    dmos: float
    distortion: str
    symmetry: str

    def __post_init__(self):
        if self.distortion not in DISTORTION_TAGS:
            raise ContractError(f"unknown distortion tag {self.distortion!r}")
        if self.symmetry not in SYMMETRY_TAGS:
            raise ContractError(f"unknown symmetry tag {self.symmetry!r}")
        self.dmos = float(self.dmos)
        if not np.isfinite(self.dmos):
            raise ContractError(f"sample {self.id}: dmos must be finite")


def load_manifest(path, check_paths: bool = True):
    """Parse a manifest file; paths are resolved relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != MANIFEST_HEADER:
            raise ParseError(f"{path}:1: bad header {header!r}", line_number=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 7:
                raise ParseError(
                    f"{path}:{lineno}: expected 7 comma-separated fields, "
                    f"got {len(fields)}", line_number=lineno)
            try:
                sample = StereoSample(
                    id=fields[0], ref_id=fields[1],
                    left_path=os.path.join(base, fields[2]),
                    right_path=os.path.join(base, fields[3]),
                    dmos=float(fields[4]), distortion=fields[5],
                    symmetry=fields[6])
            except (ValueError, ContractError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}",
                                 line_number=lineno) from exc
            samples.append(sample)

    if check_paths:
        missing = []
        for s in samples:
            for p in (s.left_path, s.right_path):
                if not os.path.isfile(p):
                    missing.append(p)
        if missing:
            raise ResolutionError(
                f"{len(missing)} image file(s) missing, first: {missing[0]}",
                missing=missing)
    return samples


def write_manifest(path, samples) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="ascii") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for s in samples:
            left = os.path.relpath(s.left_path, base)
            right = os.path.relpath(s.right_path, base)
            fh.write(f"{s.id},{s.ref_id},{left},{right},{s.dmos!r},"
                     f"{s.distortion},{s.symmetry}\n")


# ---------------------------------------------------------------------------
# distortions


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(4.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    k = _gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    padded = np.pad(pixels, ((r, r), (0, 0)), mode="symmetric")
    out = np.zeros_like(pixels)
    for i in range(len(k)):
        out += k[i] * padded[i:i + pixels.shape[0]]
    padded = np.pad(out, ((0, 0), (r, r)), mode="symmetric")
    out = np.zeros_like(pixels)
    for i in range(len(k)):
        out += k[i] * padded[:, i:i + pixels.shape[1]]
    return out


def apply_distortion(image: GrayImage, distortion: str, level: int,
                     seed: int = 0) -> GrayImage:
    """Apply one synthetic distortion at severity level 1..5 (0 = passthrough)."""
    if distortion not in SYNTH_TAGS:
        raise ContractError(f"unsupported distortion tag {distortion!r}; "
                            f"expected one of {SYNTH_TAGS}")
    if level == 0:
        return GrayImage(image.pixels.copy())
    if not 1 <= level <= 5:
        raise ContractError(f"distortion level {level} out of range 0..5")

    x = image.pixels
    if distortion == "synth-blur":
        out = _blur(x, BLUR_SIGMAS[level - 1])
    elif distortion == "synth-awgn":
        rng = np.random.default_rng([seed, level])
        out = x + rng.normal(0.0, AWGN_STDS[level - 1], size=x.shape)
    else:  # synth-quant
        n = QUANT_LEVELS[level - 1]
        out = np.round(x * (n - 1)) / (n - 1)
    return GrayImage(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass
class SynthSpec:
    contents: int
    levels: int = 5
    seed: int = 0
    height: int = 256
    width: int = 256
    types: tuple = SYNTH_TAGS
    asymmetric: bool = False

    def __post_init__(self):
        if self.contents < 1:
            raise ContractError("need at least one content")
        if not 4 <= self.levels <= 5:
            raise ContractError("levels per type must be 4 or 5")
        for t in self.types:
            if t not in SYNTH_TAGS:
                raise ContractError(f"unknown synthetic distortion {t!r}")
        if self.height < 64 or self.width < 64:
            raise ContractError("synthetic images must be at least 64x64")


def _pristine_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Filtered noise at two scales plus a smooth gradient, kept inside
    [0.1, 0.9] so additive noise has headroom."""
    coarse = _blur(rng.standard_normal((h, w)), 6.0)
    fine = _blur(rng.standard_normal((h, w)), 1.5)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (rr * np.sin(angle) + cc * np.cos(angle))
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    tex = 1.2 * coarse + 0.8 * fine
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    tex = 0.65 * tex + 0.35 * ramp
    return 0.1 + 0.8 * tex


def _shift_right_view(left: np.ndarray, disparity: int) -> np.ndarray:
    padded = np.pad(left, ((0, 0), (disparity, 0)), mode="symmetric")
    return padded[:, :left.shape[1]]


def _save_png(path, pixels: np.ndarray) -> None:
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def synth_dataset(spec: SynthSpec, out_dir, overwrite: bool = False) -> str:
    """Generate the synthetic stereo set; returns the manifest path."""
    out_dir = os.path.abspath(out_dir)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    if os.path.exists(manifest_path) and not overwrite:
        raise ContractError(
            f"{manifest_path} already exists; pass overwrite to regenerate")
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)

    samples = []

    def emit(sample_id, ref_id, left, right, dmos, tag, symmetry):
        lpath = os.path.join(images_dir, f"{sample_id}-L.png")
        rpath = os.path.join(images_dir, f"{sample_id}-R.png")
        _save_png(lpath, left)
        _save_png(rpath, right)
        samples.append(StereoSample(id=sample_id, ref_id=ref_id,
                                    left_path=lpath, right_path=rpath,
                                    dmos=dmos, distortion=tag,
                                    symmetry=symmetry))

    for content in range(spec.contents):
        rng = np.random.default_rng([spec.seed, content])
        left = _pristine_texture(rng, spec.height, spec.width)
        disparity = int(rng.integers(1, 5))
        right = _shift_right_view(left, disparity)
        ref_id = f"c{content:03d}"
        emit(f"{ref_id}-pristine", ref_id, left, right, 0.0,
             "pristine", "symmetric")

        gl = GrayImage(left)
        gr = GrayImage(right)
        for t_idx, tag in enumerate(spec.types):
            for level in range(1, spec.levels + 1):
                seed_l = (spec.seed * 1000003 + content * 1009
                          + t_idx * 101 + level * 10)
                dl = apply_distortion(gl, tag, level, seed=seed_l)
                dr = apply_distortion(gr, tag, level, seed=seed_l + 1)
                emit(f"{ref_id}-{tag}-l{level}-sym", ref_id,
                     dl.pixels, dr.pixels, 20.0 * level, tag, "symmetric")
                if spec.asymmetric:
                    dr_only = apply_distortion(gr, tag, level, seed=seed_l + 2)
                    emit(f"{ref_id}-{tag}-l{level}-asym", ref_id,
                         left, dr_only.pixels, 20.0 * level, tag, "asymmetric")

    write_manifest(manifest_path, samples)
    return manifest_path
