"""Procedural ground-truth scenes and the dataset file formats.

A scene is a smooth bump-surface "face": depth is 1 m plus a clamped sum
of 2..5 smooth radial bumps, mirrored to be approximately left-right
symmetric with a small asymmetric perturbation; albedo is a smooth color
field whose hue range depends on the domain (that hue gap is the style
signal); light and pose are sampled inside the renderer bounds; the image
is rendered with the package's own shade + reproject, so every stored
sample is exactly reproducible from its stored features.

On disk a dataset is

    root/
      manifest.cfg
      domain_0/ img_0000.png  img_0000.pfm  img_0000.kp  ...
      domain_1/ ...

* PNG: 8-bit RGB, values quantized by round(v*255).
* PFM: grayscale `Pf` variant, header lines `Pf`, `W H`, `-1.0`
  (little-endian scale), then H*W float32 rows bottom-to-top.  Stores the
  actual-view ground-truth depth; invalid (uncovered) pixels hold 0.
* KP: 66 UTF-8 lines `u v depth` (actual-view positions, f32-quantized
  depth samples of the PFM map, so re-sampling reproduces them exactly).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import renderer as R
from .metrics import KEYPOINT_COUNT
from .rng import SeededRng
from .tensor import Tensor


class DataError(ValueError):
    """Malformed dataset file or spec."""


@dataclass(frozen=True)
class DatasetSpec:
    """Sampling ranges for the procedural scene generator."""

    count: int = 80
    size: int = 64
    seed: int = 0
    domains: int = 2
    bumps_min: int = 2
    bumps_max: int = 5
    bump_amplitude: float = 0.1
    asym_amplitude: float = 0.015
    rotation_range: tuple[float, float, float] = (0.25, 0.45, 0.1)  # radians, x/y/z
    translation_range: tuple[float, float, float] = (0.02, 0.02, 0.04)  # meters
    ambient_range: tuple[float, float] = (0.25, 0.5)
    diffuse_range: tuple[float, float] = (0.3, 0.5)
    light_dir_range: float = 0.6

    def __post_init__(self):
        if self.size < 8 or self.size % 4:
            raise DataError(f"size must be a multiple of 4 and at least 8, got {self.size}")
        if not (1 <= self.bumps_min <= self.bumps_max):
            raise DataError("bump count range invalid")
        if self.bump_amplitude > R.DEPTH_MAX - 1.0:
            raise DataError("bump amplitude exceeds the depth range")
        for r, bound in zip(self.rotation_range, (R.ROTATION_BOUND,) * 3):
            if r > bound:
                raise DataError("rotation range exceeds the pose bound")
        for t in self.translation_range:
            if t > R.TRANSLATION_BOUND:
                raise DataError("translation range exceeds the pose bound")


@dataclass
class SceneSample:
    """One ground-truth record; `image` is rendered from the other fields."""

    image: np.ndarray  # [3,H,W] in [0,1], actual view, uncovered pixels 0
    gt_depth: np.ndarray  # [1,H,W] actual-view depth, 0 where uncovered
    mask: np.ndarray  # [1,H,W] coverage
    light: np.ndarray  # [4]: k_s, k_d, l_x, l_y
    view: np.ndarray  # [6]
    domain: int
    keypoints: np.ndarray  # [66,3]: u, v, depth (actual view)
    albedo: np.ndarray  # [3,H,W] canonical
    canonical_depth: np.ndarray  # [1,H,W] canonical


def keypoint_lattice(size: int) -> np.ndarray:
    """The fixed 11x6 canonical keypoint grid, [66,2] as (u,v)."""
    us = np.linspace(0.18, 0.82, 11) * (size - 1)
    vs = np.linspace(0.25, 0.75, 6) * (size - 1)
    uu, vv = np.meshgrid(us, vs)
    pts = np.stack([uu.ravel(), vv.ravel()], axis=1)
    assert pts.shape[0] == KEYPOINT_COUNT
    return pts


def _radial_bumps(rng: SeededRng, size: int, count: int, amp: float) -> np.ndarray:
    v, u = np.meshgrid(np.arange(size, dtype=np.float64),
                       np.arange(size, dtype=np.float64), indexing="ij")
    out = np.zeros((size, size))
    for _ in range(count):
        cu = rng.uniform(0.2, 0.8) * (size - 1)
        cv = rng.uniform(0.2, 0.8) * (size - 1)
        radius = rng.uniform(0.1, 0.3) * size
        height = rng.uniform(-amp, amp)
        out += height * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2.0 * radius**2))
    return out


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h = np.mod(h, 1.0) * 6.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    channels = [
        np.choose(i, [v, q, p, p, t, v]),
        np.choose(i, [t, v, v, q, p, p]),
        np.choose(i, [p, p, t, v, v, q]),
    ]
    return np.stack(channels)


def _smooth_field(rng: SeededRng, size: int) -> np.ndarray:
    """Low-frequency scalar field in [-1,1] from two random sinusoids."""
    v, u = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    fu, fv = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)
    pu, pv = rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi)
    return 0.5 * (np.sin(2 * math.pi * fu * u + pu) + np.sin(2 * math.pi * fv * v + pv))


def _domain_albedo(rng: SeededRng, size: int, domain: int, domains: int,
                   asym: float) -> np.ndarray:
    # domains occupy disjoint hue arcs; that gap is what the style
    # networks get to learn.  Like the depth surface, the color fields are
    # mirror-averaged with a small asymmetric remainder: the whole scene is
    # approximately bilaterally symmetric, which is what the flip branch
    # and the confidence maps are about
    def field(label):
        f = _smooth_field(rng.fork(label), size)
        return 0.5 * (f + f[:, ::-1]) + asym * _smooth_field(rng.fork(label + "_a"), size)

    base_hue = domain / domains + rng.uniform(0.0, 0.45 / domains)
    hue = base_hue + 0.04 * field("hue")
    sat = 0.45 + 0.25 * field("sat")
    val = 0.55 + 0.3 * field("val")
    return np.clip(_hsv_to_rgb(hue, np.clip(sat, 0.05, 1.0), np.clip(val, 0.05, 1.0)), 0.0, 1.0)


def generate_scene(rng: SeededRng, spec: DatasetSpec, domain: int) -> SceneSample:
    """Sample one self-consistent ground-truth scene."""
    if not (0 <= domain < spec.domains):
        raise DataError(f"domain {domain} out of range")
    size = spec.size
    n_bumps = rng.fork("count").integers(spec.bumps_min, spec.bumps_max + 1)
    surface = _radial_bumps(rng.fork("bumps"), size, n_bumps, spec.bump_amplitude)
    surface = 0.5 * (surface + surface[:, ::-1])  # mirror average
    surface += _radial_bumps(rng.fork("asym"), size, 1, spec.asym_amplitude)
    offset = np.clip(surface, 1.0 - R.DEPTH_MAX, R.DEPTH_MAX - 1.0)
    depth = (1.0 + offset)[None]

    albedo = _domain_albedo(rng.fork("albedo"), size, domain, spec.domains,
                            asym=0.12)

    lr = rng.fork("light")
    k_s = lr.uniform(*spec.ambient_range)
    k_d = lr.uniform(*spec.diffuse_range)
    l_x = lr.uniform(-spec.light_dir_range, spec.light_dir_range)
    l_y = lr.uniform(-spec.light_dir_range, spec.light_dir_range)
    light = R.LightParams.from_values(k_s, k_d, l_x, l_y)

    pr = rng.fork("pose")
    angles = [pr.uniform(-r, r) for r in spec.rotation_range]
    trans = [pr.uniform(-t, t) for t in spec.translation_range]
    w = np.array(angles + trans)
    view = R.Viewpoint.from_values(w)

    K = R.make_intrinsics(size, size, 10.0)
    depth_t = Tensor(depth)
    canonical = R.shade(Tensor(albedo), R.compute_normals(depth_t, K), light)
    image, warped, mask = R.reproject(canonical, depth_t, view, K)

    mask_np = mask.data
    image_np = image.data * mask_np  # uncovered pixels black
    # quantize before sampling keypoint depths, so the stored .kp triples
    # match bilinear samples of the stored .pfm map exactly
    gt_depth = (warped.data * mask_np).astype(np.float32).astype(np.float64)

    kp_canon = keypoint_lattice(size)
    kp_actual = _warp_points(kp_canon, depth[0], w, K)
    kp_depth = _bilinear(gt_depth[0], kp_actual[:, 0], kp_actual[:, 1])
    keypoints = np.column_stack([kp_actual, kp_depth])

    return SceneSample(
        image=image_np,
        gt_depth=gt_depth,
        mask=mask_np,
        light=np.array([k_s, k_d, l_x, l_y]),
        view=w,
        domain=domain,
        keypoints=keypoints,
        albedo=albedo,
        canonical_depth=depth,
    )


def _warp_points(points_uv: np.ndarray, depth: np.ndarray, w: np.ndarray,
                 K: R.CameraIntrinsics) -> np.ndarray:
    """Exact canonical-to-actual projection of continuous points."""
    d = _bilinear(depth, points_uv[:, 0], points_uv[:, 1])
    x = d * (points_uv[:, 0] - K.c_u) / K.f
    y = d * (points_uv[:, 1] - K.c_v) / K.f
    pts = np.stack([x, y, d])
    rot = R.euler_rotation(Tensor(w[:3])).data
    center = np.array([[0.0], [0.0], [1.0]])
    moved = rot @ (pts - center) + center + w[3:, None]
    return np.stack(
        [moved[0] / moved[2] * K.f + K.c_u, moved[1] / moved[2] * K.f + K.c_v], axis=1
    )


def _bilinear(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    u0 = np.clip(np.floor(uc), 0, w - 2).astype(int)
    v0 = np.clip(np.floor(vc), 0, h - 2).astype(int)
    fu, fv = uc - u0, vc - v0
    return (
        grid[v0, u0] * (1 - fu) * (1 - fv)
        + grid[v0, u0 + 1] * fu * (1 - fv)
        + grid[v0 + 1, u0] * (1 - fu) * fv
        + grid[v0 + 1, u0 + 1] * fu * fv
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_pfm(path, depth: np.ndarray) -> None:
    """Grayscale PFM, little-endian, rows bottom-to-top."""
    arr = np.asarray(depth, dtype=np.float32)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise DataError(f"expected a single-channel map, got {arr.shape}")
        arr = arr[0]
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read the grayscale PFM variant written by write_pfm, as [1,H,W] f64."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        magic, rest = raw.split(b"\n", 1)
        dims, rest = rest.split(b"\n", 1)
        scale_line, payload = rest.split(b"\n", 1)
    except ValueError as exc:
        raise DataError(f"{path}: truncated PFM header") from exc
    if magic != b"Pf":
        raise DataError(f"{path}: not a grayscale PFM (magic {magic!r})")
    try:
        w, h = (int(x) for x in dims.split())
        scale = float(scale_line)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PFM header") from exc
    if scale >= 0:
        raise DataError(f"{path}: big-endian PFM (scale {scale}) not supported")
    expected = w * h * 4
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w)[::-1]
    return data.astype(np.float64)[None]


def write_png(path, image: np.ndarray) -> None:
    """8-bit RGB PNG from a [3,H,W] float image in [0,1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"expected [3,H,W] image, got {arr.shape}")
    quant = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quant.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG as a [3,H,W] float image in [0,1]."""
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise DataError(f"{path}: expected an RGB PNG, got mode {img.mode}")
        arr = np.asarray(img, dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def write_kp(path, keypoints: np.ndarray) -> None:
    arr = np.asarray(keypoints, dtype=np.float64)
    if arr.shape != (KEYPOINT_COUNT, 3):
        raise DataError(f"expected [{KEYPOINT_COUNT},3] keypoints, got {arr.shape}")
    lines = [f"{u!r} {v!r} {d!r}" for u, v, d in arr.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kp(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if len(lines) != KEYPOINT_COUNT:
        raise DataError(f"{path}: expected {KEYPOINT_COUNT} keypoint lines, got {len(lines)}")
    try:
        rows = [[float(x) for x in line.split()] for line in lines]
    except ValueError as exc:
        raise DataError(f"{path}: malformed keypoint line") from exc
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape != (KEYPOINT_COUNT, 3):
        raise DataError(f"{path}: keypoint lines must hold 'u v depth'")
    return arr


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def write_dataset(spec: DatasetSpec, out_dir) -> None:
    """Write `spec.count` samples split evenly across domain directories."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(spec.seed)
    for i in range(spec.count):
        domain = i % spec.domains
        sample = generate_scene(rng.fork(f"scene:{i}"), spec, domain)
        ddir = root / f"domain_{domain}"
        ddir.mkdir(exist_ok=True)
        stem = ddir / f"img_{i // spec.domains:04d}"
        write_png(stem.with_suffix(".png"), sample.image)
        write_pfm(stem.with_suffix(".pfm"), sample.gt_depth)
        write_kp(stem.with_suffix(".kp"), sample.keypoints)
    manifest = "\n".join(
        [
            f"count = {spec.count}",
            f"size = {spec.size}",
            f"seed = {spec.seed}",
            f"domains = {spec.domains}",
            f"bumps_min = {spec.bumps_min}",
            f"bumps_max = {spec.bumps_max}",
            f"bump_amplitude = {spec.bump_amplitude}",
            f"asym_amplitude = {spec.asym_amplitude}",
        ]
    )
    (root / "manifest.cfg").write_text(manifest + "\n", encoding="utf-8")


@dataclass
class DatasetItem:
    image: np.ndarray
    domain: int
    gt_depth: np.ndarray | None = None
    mask: np.ndarray | None = None
    keypoints: np.ndarray | None = None
    view: np.ndarray | None = None  # gt pose; in-memory datasets only
    # (fingerprint, features) cache for the frozen perceptual extractor
    fx_cache: tuple[int, np.ndarray] | None = None


class Dataset:
    """Images grouped by domain directory, with optional ground truth.

    Batch composition is a pure function of (seed, batch size, iteration):
    epoch e is a seeded permutation, split into consecutive batches with
    the final short batch dropped.  That keeps resumed training bitwise
    identical to an uninterrupted run.
    """

    def __init__(self, items: list[DatasetItem], size: int):
        self.items = items
        self.size = size

    def __len__(self) -> int:
        return len(self.items)

    def batches_per_epoch(self, batch_size: int) -> int:
        n = len(self.items) // batch_size
        if n == 0:
            raise DataError(f"dataset of {len(self.items)} cannot fill a batch of {batch_size}")
        return n

    def batch_indices(self, seed: int, batch_size: int, iteration: int) -> np.ndarray:
        per = self.batches_per_epoch(batch_size)
        epoch, slot = divmod(iteration, per)
        perm = SeededRng(seed).fork(f"epoch:{epoch}").permutation(len(self.items))
        return perm[slot * batch_size : (slot + 1) * batch_size]

    def batch(self, seed: int, batch_size: int, iteration: int) -> list[DatasetItem]:
        return [self.items[i] for i in self.batch_indices(seed, batch_size, iteration)]


def load_dataset(root) -> Dataset:
    """Load `root/<domain>/img_*.png` with optional .pfm/.kp siblings."""
    root = Path(root)
    domains = sorted(p for p in root.iterdir() if p.is_dir())
    if not domains:
        raise DataError(f"{root}: no domain directories")
    items: list[DatasetItem] = []
    size = None
    for label, ddir in enumerate(domains):
        pngs = sorted(ddir.glob("img_*.png"))
        if not pngs:
            raise DataError(f"{ddir}: empty domain directory")
        for png in pngs:
            image = read_png(png)
            if size is None:
                size = image.shape[1]
            item = DatasetItem(image=image, domain=label)
            pfm = png.with_suffix(".pfm")
            if pfm.exists():
                item.gt_depth = read_pfm(pfm)
                item.mask = (item.gt_depth > 0).astype(np.float64)
            kp = png.with_suffix(".kp")
            if kp.exists():
                item.keypoints = read_kp(kp)
            items.append(item)
    return Dataset(items, size)
