"""Finite-difference verification suites behind the `gradcheck` command.

Four scopes, each a list of named checks comparing the tape gradient
against central differences at deterministic, seed-chosen points away
from non-smooth loci:

* ops       every differentiable primitive, tolerance 1e-6
* renderer  normals, shading, rotation, full reprojection, tolerance 1e-6
* losses    every loss term, tolerance 1e-6
* end2end   the full training objective on 8x8 inputs w.r.t. sampled
            elements of every parameter tensor, tolerance 1e-4

Errors are hybrid absolute/relative: |analytic - fd| / max(|analytic|,
|fd|, 1).  Reprojection checks additionally verify that each probe stays
inside one triangle-coverage regime (the rasterizer treats coverage as
locally constant, so a probe that crosses an edge would compare two
different smooth pieces); elements whose probe crosses are excluded and
counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import networks as N
from . import renderer as R
from . import synthdata as S
from . import tensor as T
from . import trainer as TR
from .networks import NetConfig
from .rng import SeededRng
from .tensor import Tape, Tensor

SCOPES = ("ops", "renderer", "losses", "end2end")
TOLERANCES = {"ops": 1e-6, "renderer": 1e-6, "losses": 1e-6, "end2end": 1e-4}


@dataclass
class CheckResult:
    name: str
    max_error: float
    excluded: int = 0


def _hybrid_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1.0)
    return float(np.max(np.abs(analytic - fd) / denom)) if analytic.size else 0.0


def _check(name, f, x0, eps=1e-6) -> CheckResult:
    analytic = T.gradient_of(f, x0)
    fd = T.finite_diff_gradient(lambda x: f(Tensor(x)).item(), x0, eps)
    return CheckResult(name, _hybrid_error(analytic, fd))


# ---------------------------------------------------------------------------
# ops scope
# ---------------------------------------------------------------------------


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    pos = rng.uniform(0.3, 1.7, (3, 4))
    anywhere = rng.normal(size=(3, 4)) + 0.05  # nudge off relu/abs kinks
    weights = rng.normal(size=(3, 4))
    other = rng.uniform(0.4, 1.6, (3, 4))

    def wsum(t):
        return T.sum_(t * Tensor(weights))

    unary = [
        ("exp", T.exp, anywhere), ("log", T.log, pos), ("sqrt", T.sqrt, pos),
        ("abs", T.abs_, anywhere), ("sin", T.sin, anywhere), ("cos", T.cos, anywhere),
        ("tanh", T.tanh, anywhere), ("sigmoid", T.sigmoid, anywhere),
        ("softplus", T.softplus, anywhere), ("relu", T.relu, anywhere),
        ("leaky_relu", lambda t: T.leaky_relu(t, 0.2), anywhere),
        ("maximum", lambda t: T.maximum(t, 0.5), anywhere),
        ("neg", T.neg, anywhere),
    ]
    for name, op, x0 in unary:
        results.append(_check(name, lambda t, op=op: wsum(op(t)), x0))

    for name, op in (("add", T.add), ("sub", T.sub), ("mul", T.mul), ("div", T.div)):
        results.append(_check(f"{name}_lhs", lambda t, op=op: wsum(op(t, Tensor(other))), pos))
        results.append(_check(f"{name}_rhs", lambda t, op=op: wsum(op(Tensor(other), t)), pos))

    m = rng.normal(size=(3, 4))
    m2 = rng.normal(size=(4, 2))
    wrow = rng.normal(size=3)
    results.append(_check("matmul", lambda t: T.sum_(T.matmul(t.reshape((3, 4)), Tensor(m2))), m.copy()))
    results.append(_check("matvec", lambda t: T.sum_(T.matmul(Tensor(m), t)), rng.normal(size=4)))
    results.append(_check("reshape", lambda t: wsum(t.reshape((4, 3)).reshape((3, 4))), anywhere))
    results.append(_check("concat", lambda t: T.sum_(T.concat([t, Tensor(other)], axis=1) * 1.3), anywhere))
    results.append(_check("slice", lambda t: T.sum_(t[1:, :2] * 2.0), anywhere))
    results.append(_check("flip_h", lambda t: wsum(T.flip_h(t)), anywhere))
    results.append(_check("mean_axes", lambda t: T.sum_(T.mean(t, axis=(0,), keepdims=True) * Tensor(weights)), anywhere))
    results.append(_check("sum_axes", lambda t: T.sum_(T.sum_(t, axis=1) * Tensor(wrow)), anywhere))

    x_img = rng.uniform(0.2, 0.8, (2, 5, 5))
    kern = rng.normal(size=(3, 2, 3, 3)) * 0.3
    wk = rng.normal(size=(3, 5, 5))
    results.append(_check("conv2d_input", lambda t: T.sum_(T.conv2d(t, Tensor(kern), pad=1) * Tensor(wk)), x_img))
    results.append(_check("conv2d_kernel", lambda t: T.sum_(T.conv2d(Tensor(x_img), t.reshape((3, 2, 3, 3)), pad=1) * Tensor(wk)), kern.reshape(-1)))
    ws = rng.normal(size=(3, 2, 2))
    results.append(_check("conv2d_strided", lambda t: T.sum_(T.conv2d(t, Tensor(kern), stride=2, pad=0) * Tensor(ws)), x_img))

    pts = rng.uniform(0.4, 3.4, (5, 2)) + 0.17
    wg = rng.normal(size=(2, 5))
    results.append(_check("grid_sample_image", lambda t: T.sum_(T.grid_sample_bilinear(t, Tensor(pts)) * Tensor(wg)), x_img))
    results.append(_check("grid_sample_grid", lambda t: T.sum_(T.grid_sample_bilinear(Tensor(x_img), t.reshape((5, 2))) * Tensor(wg)), pts.reshape(-1)))

    idx = np.array([0, 2, 2, 5])
    wtake = rng.normal(size=4)
    results.append(_check("take", lambda t: T.sum_(T.take(t, idx) * Tensor(wtake)), rng.normal(size=6)))
    cols = np.array([4, 1, 6])
    wcols = rng.normal(size=(2, 8))
    results.append(_check("scatter_cols", lambda t: T.sum_(T.scatter_cols(t.reshape((2, 3)), cols, 8) * Tensor(wcols)), rng.normal(size=6)))
    wup = rng.normal(size=(3, 8, 8))
    wpool = rng.normal(size=(3, 2, 2))
    results.append(_check("upsample2x", lambda t: T.sum_(T.upsample2x(t) * Tensor(wup)), rng.normal(size=(3, 4, 4))))
    results.append(_check("avg_pool2", lambda t: T.sum_(T.avg_pool2(t) * Tensor(wpool)), rng.normal(size=(3, 4, 4))))
    return results


# ---------------------------------------------------------------------------
# renderer scope
# ---------------------------------------------------------------------------


def _smooth_scene(seed: int, size: int = 8):
    rng = np.random.default_rng(seed)
    v, u = np.meshgrid(np.linspace(0, math.pi, size), np.linspace(0, math.pi, size), indexing="ij")
    depth = (1.0 + 0.05 * np.sin(u + rng.uniform(0, 1)) * np.cos(v + rng.uniform(0, 1)))[None]
    canonical = rng.uniform(0.1, 0.9, (3, size, size))
    pose = np.array([0.04, -0.06, 0.02, 0.01, -0.012, 0.02])
    return canonical, depth, pose


def _reproject_loss(canonical, depth, pose, K, wimg, wdep):
    img, warped, _ = R.reproject(canonical, depth, R.Viewpoint(pose), K)
    return T.sum_(img * Tensor(wimg)) + T.sum_(warped * Tensor(wdep))


def _coverage_of(canonical, depth, pose, K):
    out = R.reproject(Tensor(canonical), Tensor(depth), R.Viewpoint.from_values(pose), K,
                      return_coverage=True)
    return out[3]


def _checked_fd(name, f, x0, base_cover, cover_at, eps=1e-6) -> CheckResult:
    """Central differences that verify the coverage regime per element."""
    analytic = T.gradient_of(f, x0)
    fd = np.zeros_like(analytic)
    keep = np.ones(analytic.size, dtype=bool)
    flat = x0.copy().reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi_cover = cover_at(flat.reshape(x0.shape))
        hi = f(Tensor(flat.reshape(x0.shape))).item()
        flat[i] = orig - eps
        lo_cover = cover_at(flat.reshape(x0.shape))
        lo = f(Tensor(flat.reshape(x0.shape))).item()
        flat[i] = orig
        if not (np.array_equal(hi_cover, base_cover) and np.array_equal(lo_cover, base_cover)):
            keep[i] = False
            continue
        fd.reshape(-1)[i] = (hi - lo) / (2.0 * eps)
    err = _hybrid_error(analytic.reshape(-1)[keep], fd.reshape(-1)[keep])
    return CheckResult(name, err, excluded=int((~keep).sum()))


def check_renderer(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 100)
    K = R.make_intrinsics(8, 8, 10.0)
    results = []

    canonical, depth, pose = _smooth_scene(seed)
    wn = rng.normal(size=(3, 8, 8))
    results.append(_check(
        "normals_wrt_depth", lambda d: T.sum_(R.compute_normals(d, K) * Tensor(wn)), depth
    ))

    albedo = rng.uniform(0.1, 0.9, (3, 8, 8))
    light_vals = np.array([0.3, 0.6, 0.25, -0.15])

    def shade_loss_depth(d):
        light = R.LightParams.from_values(*light_vals)
        return T.sum_(R.shade(Tensor(albedo), R.compute_normals(d, K), light) * Tensor(wn))

    def shade_loss_light(lv):
        light = R.LightParams(
            k_s=lv[0:1].reshape(()), k_d=lv[1:2].reshape(()),
            l_x=lv[2:3].reshape(()), l_y=lv[3:4].reshape(()),
        )
        n = R.compute_normals(Tensor(depth), K)
        return T.sum_(R.shade(Tensor(albedo), n, light) * Tensor(wn))

    results.append(_check("shade_wrt_depth", shade_loss_depth, depth))
    results.append(_check("shade_wrt_light", shade_loss_light, light_vals))
    wrot = rng.normal(size=(3, 3))
    results.append(_check(
        "euler_wrt_angles",
        lambda a: T.sum_(R.euler_rotation(a) * Tensor(wrot)),
        np.array([0.2, -0.4, 0.1]),
    ))

    wimg = rng.normal(size=(3, 8, 8))
    wdep = rng.normal(size=(1, 8, 8))
    base_cover = _coverage_of(canonical, depth, pose, K)

    results.append(_checked_fd(
        "reproject_wrt_canonical",
        lambda J: _reproject_loss(J, Tensor(depth), Tensor(pose), K, wimg, wdep),
        canonical,
        base_cover,
        lambda J: _coverage_of(J, depth, pose, K),
    ))
    results.append(_checked_fd(
        "reproject_wrt_depth",
        lambda d: _reproject_loss(Tensor(canonical), d, Tensor(pose), K, wimg, wdep),
        depth,
        base_cover,
        lambda d: _coverage_of(canonical, d, pose, K),
    ))
    results.append(_checked_fd(
        "reproject_wrt_pose",
        lambda w: _reproject_loss(Tensor(canonical), Tensor(depth), w, K, wimg, wdep),
        pose,
        base_cover,
        lambda w: _coverage_of(canonical, depth, w, K),
    ))
    return results


# ---------------------------------------------------------------------------
# losses scope
# ---------------------------------------------------------------------------

_LOSS_CFG = NetConfig(image_size=8, channels=(16,), style_dim=8, z_dim=4,
                      domains=2, style_hidden=16, mlp_hidden=16)


def check_losses(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 200)
    fx = {k: Tensor(v) for k, v in L.init_feature_extractor(SeededRng(seed), _LOSS_CFG).items()}
    image = Tensor(rng.uniform(0.1, 0.9, (3, 8, 8)))
    recon = rng.uniform(0.1, 0.9, (3, 8, 8))
    sigma = rng.uniform(0.5, 1.5, (1, 8, 8))
    sigma_p = rng.uniform(0.5, 1.5, (1, 2, 2))
    results = [
        _check("photometric_wrt_recon",
               lambda r: L.loss_photometric(image, r, Tensor(sigma)), recon),
        _check("photometric_wrt_sigma",
               lambda s: L.loss_photometric(image, Tensor(recon), s), sigma),
        _check("perceptual_wrt_recon",
               lambda r: L.loss_perceptual(image, r, Tensor(sigma_p), fx, _LOSS_CFG), recon),
        _check("perceptual_wrt_sigma",
               lambda s: L.loss_perceptual(image, Tensor(recon), s, fx, _LOSS_CFG), sigma_p),
        _check("adversarial_wrt_logits",
               lambda v: L.loss_adversarial(v[0:1].reshape(()), v[1:2].reshape(()))[0]
               + L.loss_adversarial(v[0:1].reshape(()), v[1:2].reshape(()))[1],
               np.array([0.3, -0.6])),
        _check("style_l1",
               lambda s, ref=Tensor(rng.normal(size=8)): L.loss_style(
                   N.StyleCode(s, 0), N.StyleCode(ref, 0)),
               rng.normal(size=8)),
        _check("source_l1", lambda r: L.loss_source(image, r), recon),
        _check("diversification", lambda r: L.loss_diversification(image, r), recon),
    ]
    ones = Tensor(np.ones((1, 8, 8)))
    ones_p = Tensor(np.ones((1, 2, 2)))
    results.append(_check(
        "rec_combined",
        lambda r: L.loss_rec(image, r, T.flip_h(r), ones, ones, ones_p, ones_p,
                             L.LossWeights(), fx, _LOSS_CFG),
        recon,
    ))
    return results


# ---------------------------------------------------------------------------
# end-to-end scope
# ---------------------------------------------------------------------------

_E2E_CFG = TR.TrainConfig(
    seed=5,
    image_size=8,
    channels=(16,),
    style_dim=8,
    z_dim=4,
    domains=2,
    style_hidden=16,
    mlp_hidden=16,
    batch_size=2,
    iterations=10,
    warmup_fraction=0.0,
    r1_enabled=False,
    checkpoint_interval=0,
)


def _e2e_batch(seed: int):
    spec = S.DatasetSpec(count=2, size=8, seed=seed, domains=2)
    rng = SeededRng(spec.seed)
    return [
        S.DatasetItem(image=S.generate_scene(rng.fork(f"scene:{i}"), spec, i % 2).image,
                      domain=i % 2)
        for i in range(2)
    ]


def check_end2end(seed: int = 0, elements_per_tensor: int = 3) -> list[CheckResult]:
    """FD-check sampled elements of every parameter through the full objective."""
    cfg = _E2E_CFG
    ncfg = cfg.net_config()
    K = ncfg.intrinsics()
    batch = _e2e_batch(seed + 17)
    state = TR.init_state(cfg)
    rng_img = SeededRng(cfg.seed, "e2e")
    picker = np.random.default_rng(seed + 300)

    def objective(params_np) -> float:
        p = {k: Tensor(v) for k, v in params_np.items()}
        fx = {k: p[k] for k in p if k.startswith("fx/")}
        total, _ = TR.generator_image_objective(
            batch[0], batch, 0, p, rng_img, cfg, ncfg, K, False, cfg.weights, fx
        )
        d_real = N.discriminate(Tensor(batch[0].image), batch[0].domain, p, ncfg)
        d_loss, _ = L.loss_adversarial(d_real, Tensor(0.3))
        return (total + d_loss).item()

    def analytic_grads() -> dict[str, np.ndarray]:
        with Tape() as tape:
            p = {}
            for k in sorted(state.params):
                p[k] = tape.watch(state.params[k], k)
            fx = {k: p[k] for k in p if k.startswith("fx/")}
            total, _ = TR.generator_image_objective(
                batch[0], batch, 0, p, rng_img, cfg, ncfg, K, False, cfg.weights, fx
            )
            d_real = N.discriminate(Tensor(batch[0].image), batch[0].domain, p, ncfg)
            d_loss, _ = L.loss_adversarial(d_real, Tensor(0.3))
            loss = total + d_loss
        return {k: v.data for k, v in tape.backward(loss).items()}

    grads = analytic_grads()
    results = []
    eps = 1e-6
    for name in sorted(state.params):
        if name.startswith("fx/"):
            continue  # frozen, never optimized
        arr = state.params[name]
        count = min(elements_per_tensor, arr.size)
        idx = picker.choice(arr.size, size=count, replace=False)
        worst = 0.0
        for i in idx:
            flat = arr.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            hi = objective(state.params)
            flat[i] = orig - eps
            lo = objective(state.params)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            an = grads[name].reshape(-1)[i]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1.0))
        results.append(CheckResult(name, worst))
    return results


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_RUNNERS = {
    "ops": check_ops,
    "renderer": check_renderer,
    "losses": check_losses,
    "end2end": check_end2end,
}


def run_scope(scope: str, seed: int = 0) -> tuple[list[CheckResult], float, bool]:
    """Run one scope; returns (results, tolerance, passed)."""
    if scope not in _RUNNERS:
        raise ValueError(f"unknown gradcheck scope '{scope}'; pick from {SCOPES}")
    results = _RUNNERS[scope](seed)
    tol = TOLERANCES[scope]
    return results, tol, all(r.max_error < tol for r in results)
