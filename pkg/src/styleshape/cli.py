"""Batch command-line interface.

Commands: gen-data, train, eval, render, transfer, gradcheck.  Every
command is deterministic given its flags and seeds.  Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors.  Angles on the command
line are degrees; everything internal is radians.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import losses as L
from . import metrics as M
from . import networks as N
from . import renderer as R
from . import synthdata as S
from . import tensor as T
from . import trainer as TR
from .config import ConfigError, build_train_config, parse_config_lines, read_config_file
from .rng import SeededRng
from .tensor import Tensor

_PACKAGE_ERRORS = (
    ConfigError,
    TR.TrainError,
    S.DataError,
    M.MetricError,
    N.NetworkError,
    R.RenderError,
    L.LossError,
    OSError,
)


class UsageError(ValueError):
    """Bad flag combination detected after argparse."""


# ---------------------------------------------------------------------------
# checkpoint-backed model handle
# ---------------------------------------------------------------------------


class Model:
    """Networks plus architecture rebuilt from a checkpoint file."""

    def __init__(self, ckpt_path):
        entries = TR.load_checkpoint(ckpt_path)
        self.state, arch = TR.state_from_entries(entries)
        self.ncfg = TR.net_config_from_arch(arch)
        self.params = {k: Tensor(v) for k, v in self.state.params.items()}
        self.K = self.ncfg.intrinsics()

    def decompose(self, image: np.ndarray, domain: int):
        """Encoder + decoder on one image, with derived normals and shading."""
        img = Tensor(image)
        h, own, light, view = N.encode(img, domain, self.params, self.ncfg)
        dec = N.decode(h, own, self.params, self.ncfg)
        normals = R.compute_normals(dec.depth, self.K)
        direction = light.direction().reshape((3, 1, 1))
        lambert = T.sum_(normals * direction, axis=0, keepdims=True)
        shading = light.k_s + light.k_d * T.relu(lambert)
        canonical = dec.albedo * shading
        return {
            "hidden": h,
            "style": own,
            "light": light,
            "view": view,
            "albedo": dec.albedo,
            "depth": dec.depth,
            "normals": normals,
            "shading": shading,
            "canonical": canonical,
        }


def load_image_for_model(path, model: Model, notice=print) -> np.ndarray:
    image = S.read_png(path)
    size = model.ncfg.image_size
    if image.shape[1] != size or image.shape[2] != size:
        notice(f"note: resizing {image.shape[2]}x{image.shape[1]} input to {size}x{size}")
        from PIL import Image

        quant = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
        pil = Image.fromarray(quant.transpose(1, 2, 0), mode="RGB")
        pil = pil.resize((size, size), Image.BILINEAR)
        image = np.asarray(pil, dtype=np.float64).transpose(2, 0, 1) / 255.0
    return image


# ---------------------------------------------------------------------------
# eval plumbing (shared with the acceptance tests)
# ---------------------------------------------------------------------------


def predict_warped_depth(model: Model, image: np.ndarray, domain: int):
    """Canonical depth + predicted pose -> actual-view depth and coverage."""
    parts = model.decompose(image, domain)
    return warp_depth(parts["depth"], parts["view"], model.K)


def warp_depth(canonical_depth: Tensor, view: R.Viewpoint, K):
    _, warped, mask = R.reproject(
        Tensor(np.zeros((3, K.height, K.width))), canonical_depth, view, K
    )
    return warped.data, mask.data


def sample_depth_metrics(warped: np.ndarray, coverage: np.ndarray, item: S.DatasetItem,
                         wanted: list[str], K) -> dict[str, float]:
    """side/mad for one sample against its ground truth files."""
    out = {}
    if "side" in wanted or "mad" in wanted:
        if item.gt_depth is None:
            raise S.DataError("sample has no .pfm ground truth depth")
        mask = item.mask * coverage
        ev = M.DepthEval(warped, np.where(item.gt_depth > 0, item.gt_depth, 1.0), mask)
        if "side" in wanted:
            out["side"] = M.side(ev)
        if "mad" in wanted:
            out["mad"] = M.mad(ev, K)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    spec = S.DatasetSpec(count=args.count, size=args.size, seed=args.seed,
                         domains=args.domains)
    S.write_dataset(spec, out)
    print(f"wrote {args.count} samples across {args.domains} domains to {out}")
    return 0


def cmd_train(args) -> int:
    pairs = read_config_file(args.config) if args.config else {}
    overrides = parse_config_lines(args.set or [], source="--set")
    pairs.update(overrides)
    cfg = build_train_config(pairs)

    dataset = S.load_dataset(args.data)
    resume = None
    if args.resume:
        entries = TR.load_checkpoint(args.resume)
        resume, arch = TR.state_from_entries(entries)
        cfg = replace(cfg, seed=resume.seed, **arch)
        print(f"resuming from {args.resume} at iteration {resume.iteration}")

    interval = max(cfg.iterations // 10, 1)

    def progress(t, record):
        if (t + 1) % interval == 0 or t + 1 == cfg.iterations:
            print(f"iter {t + 1}/{cfg.iterations} total={record.get('total', 0.0):.4f}")

    state, _ = TR.train(cfg, dataset, out_dir=args.out, resume=resume, progress=progress)
    print(f"finished at iteration {state.iteration}; checkpoints in {args.out}")
    return 0


def cmd_eval(args) -> int:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(wanted) - {"side", "mad", "sdc"}
    if unknown:
        raise UsageError(f"unknown metrics: {', '.join(sorted(unknown))}")
    model = Model(args.ckpt)
    dataset = S.load_dataset(args.data)

    per_sample = {name: [] for name in wanted if name != "sdc"}
    kp_pred, kp_true = [], []
    for item in dataset.items:
        warped, coverage = predict_warped_depth(model, item.image, item.domain)
        values = sample_depth_metrics(warped, coverage, item, wanted, model.K)
        for name, value in values.items():
            per_sample[name].append(value)
        if "sdc" in wanted:
            if item.keypoints is None:
                raise S.DataError("sample has no .kp ground truth keypoints")
            kp_pred.append(S._bilinear(warped[0], item.keypoints[:, 0], item.keypoints[:, 1]))
            kp_true.append(item.keypoints[:, 2])

    lines = []
    for name in wanted:
        if name == "sdc":
            score = M.sdc(M.KeypointDepthSet(np.asarray(kp_pred), np.asarray(kp_true)))
            lines.append(f"sdc\t{score!r}")
        else:
            values = np.asarray(per_sample[name])
            lines.append(f"{name}\t{float(values.mean())!r}")
            lines.append(f"{name}_std\t{float(values.std())!r}")
    text = "\n".join(lines)
    print(text)
    if args.summary:
        Path(args.summary).write_text(text + "\n", encoding="utf-8")
    return 0


def _to_png_gray(shading: np.ndarray) -> np.ndarray:
    lo, hi = float(shading.min()), float(shading.max())
    scale = (shading - lo) / (hi - lo) if hi > lo else np.zeros_like(shading)
    return np.repeat(scale, 3, axis=0)


def cmd_render(args) -> int:
    model = Model(args.ckpt)
    image = load_image_for_model(args.image, model)
    parts = model.decompose(image, args.domain)

    canonical = parts["canonical"]
    img_out, _, _ = R.reproject(canonical, parts["depth"], parts["view"], model.K)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    S.write_png(out / "albedo.png", parts["albedo"].data)
    S.write_pfm(out / "depth.pfm", parts["depth"].data)
    depth = parts["depth"].data
    S.write_png(out / "depth_vis.png", _to_png_gray(depth))
    S.write_png(out / "normals.png", (parts["normals"].data + 1.0) / 2.0)
    S.write_png(out / "shading.png", _to_png_gray(parts["shading"].data))
    S.write_png(out / "recon.png", np.clip(img_out.data, 0.0, 1.0))
    print(f"wrote 6 files to {out}")
    return 0


def cmd_transfer(args) -> int:
    model = Model(args.ckpt)
    image = load_image_for_model(args.image, model)
    yaws = [float(v) for v in args.views.replace(",", " ").split()]
    bound = math.degrees(R.ROTATION_BOUND)
    for yaw in yaws:
        if abs(yaw) > bound + 1e-9:
            raise UsageError(f"yaw {yaw} exceeds the +/-{bound:.0f} degree pose bound")

    if args.ref is not None:
        ref = load_image_for_model(args.ref, model)
        _, style, _, _ = N.encode(Tensor(ref), args.domain, model.params, model.ncfg)
    else:
        z = SeededRng(args.noise_seed, "transfer").normal((model.ncfg.z_dim,))
        style = N.style_from_noise(z, args.domain, model.params, model.ncfg)

    h, _, light, _ = N.encode(Tensor(image), args.domain, model.params, model.ncfg)
    dec = N.decode(h, style, model.params, model.ncfg)
    canonical = R.shade(dec.albedo, R.compute_normals(dec.depth, model.K), light)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for yaw in yaws:
        w = np.array([0.0, math.radians(yaw), 0.0, 0.0, 0.0, 0.0])
        img, _, _ = R.reproject(canonical, dec.depth, R.Viewpoint.from_values(w), model.K)
        name = f"view_{yaw:+08.3f}.png".replace("+", "p").replace("-", "m")
        S.write_png(out / name, np.clip(img.data, 0.0, 1.0))
    print(f"wrote {len(yaws)} view(s) to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck as G

    scopes = list(G.SCOPES) if args.scope == "all" else [args.scope]
    all_ok = True
    for scope in scopes:
        results, tol, ok = G.run_scope(scope, seed=args.seed)
        all_ok &= ok
        worst = max(r.max_error for r in results)
        print(f"{scope}: max rel. error {worst:.3e} (tolerance {tol:g}) "
              f"{'PASS' if ok else 'FAIL'}")
        if not ok:
            for r in sorted(results, key=lambda r: -r.max_error):
                if r.max_error >= tol:
                    print(f"  {r.name}: {r.max_error:.3e}")
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="styleshape",
        description="Explicit single-image 3D reconstruction with style transfer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic ground-truth dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=80, help="total sample count")
    p.add_argument("--domains", type=int, default=2, help="number of style domains")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, choices=[32, 64], help="image size")
    p.add_argument("--force", action="store_true", help="allow a non-empty output dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--metrics", default="side,mad,sdc", help="comma list: side,mad,sdc")
    p.add_argument("--summary", help="also write the metric lines to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="decompose one image into rendering features")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--domain", type=int, default=0, help="style branch for the encoder")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("transfer", help="restyle an image and render novel yaws")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ref", help="style reference image")
    group.add_argument("--noise-seed", type=int, help="latent noise seed for the style network")
    p.add_argument("--domain", type=int, required=True, help="target style domain")
    p.add_argument("--views", default="0", help="comma list of yaw angles in degrees")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    p.add_argument("--scope", default="all",
                   choices=["ops", "renderer", "losses", "end2end", "all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _PACKAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
