"""Trainable networks: shared autoencoder generator, style MLP, discriminator.

The generator is one encoder/decoder pair shared by every output head:
the encoder produces a hidden map h plus the style, light and viewpoint
heads; the decoder (style-conditioned through AdaIN at every block)
produces albedo, depth and the confidence maps.  Downsampling blocks are
conv3x3 + instance norm + leaky-relu + 2x2 average pool; upsampling blocks
are nearest x2 + conv3x3 + AdaIN + leaky-relu.

Networks are pure functions of (inputs, params); params is a flat mapping
from name to Tensor.  `init_*` return the matching numpy arrays, He
fan-in initialized with zero biases, drawn in a fixed order so identical
seeds give bitwise identical parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import renderer as R
from . import tensor as T
from .rng import SeededRng
from .tensor import Tensor

LRELU_SLOPE = 0.2
CONF_FLOOR = 1e-4


class NetworkError(ValueError):
    """Invalid network configuration or input."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; all sizes desk-scale and configurable."""

    image_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 256)
    style_dim: int = 64
    z_dim: int = 16
    domains: int = 2
    style_hidden: int = 256
    mlp_hidden: int = 256
    fov_degrees: float = 10.0

    def __post_init__(self):
        expected = 4 * (2 ** len(self.channels))
        if self.image_size != expected:
            raise NetworkError(
                f"image_size {self.image_size} needs {int(math.log2(self.image_size / 4))}"
                f" blocks, but channels has {len(self.channels)} entries"
            )
        if self.domains < 1:
            raise NetworkError("need at least one domain")

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        inner = tuple(reversed(self.channels[:-1]))
        return inner + (max(self.channels[0] // 2, 8),)

    def intrinsics(self) -> R.CameraIntrinsics:
        return R.make_intrinsics(self.image_size, self.image_size, self.fov_degrees)


@dataclass
class StyleCode:
    """A style vector together with the domain it belongs to."""

    s: Tensor
    domain: int


@dataclass
class DecodedFeatures:
    albedo: Tensor
    depth: Tensor
    conf: Tensor
    conf_flip: Tensor
    conf_percep: Tensor
    conf_percep_flip: Tensor


@dataclass
class GenerateResult:
    """Everything one generator application produces."""

    image: Tensor  # actual-view reconstruction, uncovered pixels 0
    image_flip: Tensor  # flip-branch reconstruction
    features: R.RenderFeatures
    canonical: Tensor  # shaded canonical image J
    canonical_flip: Tensor
    warped_depth: Tensor
    mask: Tensor
    mask_flip: Tensor
    style: StyleCode  # the style actually used by the decoder
    own_style: StyleCode  # E_s(I), the image's inferred style
    hidden: Tensor  # encoder output h, reusable for extra decode passes


def _check_domain(domain: int, cfg: NetConfig) -> None:
    if not (0 <= domain < cfg.domains):
        raise NetworkError(f"domain {domain} out of range [0, {cfg.domains})")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _he(rng: SeededRng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(shape, scale=math.sqrt(2.0 / fan_in))


def _conv_init(rng, name, params, c_out, c_in, k=3):
    params[f"{name}/w"] = _he(rng, (c_out, c_in, k, k), c_in * k * k)


def _linear_init(rng, name, params, c_out, c_in, bias=True):
    params[f"{name}/w"] = _he(rng, (c_out, c_in), c_in)
    if bias:
        params[f"{name}/b"] = np.zeros(c_out)


def init_generator(rng: SeededRng, cfg: NetConfig) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    r = rng.fork("generator")
    c_in = 3
    for i, c_out in enumerate(cfg.channels):
        _conv_init(r.fork(f"enc{i}"), f"gen/enc/conv{i}", p, c_out, c_in)
        c_in = c_out
    top = cfg.channels[-1]
    _linear_init(r.fork("style_trunk"), "gen/style/trunk", p, cfg.style_hidden, top)
    for y in range(cfg.domains):
        _linear_init(r.fork(f"style_branch{y}"), f"gen/style/branch{y}", p, cfg.style_dim, cfg.style_hidden)
    _linear_init(r.fork("light"), "gen/light", p, 4, top)
    _linear_init(r.fork("view"), "gen/view", p, 6, top)
    # damped pose head: training starts from a near-identity warp instead
    # of random +/-30 degree poses, which would swamp the early photometric
    # signal (and blow up rasterizer bounding boxes)
    p["gen/view/w"] *= 0.1

    c_in = top
    for i, c_out in enumerate(cfg.decoder_channels):
        _conv_init(r.fork(f"dec{i}"), f"gen/dec/conv{i}", p, c_out, c_in)
        # zero-bias affine keeps AdaIN an identity instance norm at s = 0
        p[f"gen/dec/ada{i}/scale_w"] = _he(r.fork(f"ada_s{i}"), (c_out, cfg.style_dim), cfg.style_dim)
        p[f"gen/dec/ada{i}/shift_w"] = _he(r.fork(f"ada_b{i}"), (c_out, cfg.style_dim), cfg.style_dim)
        c_in = c_out
    last = cfg.decoder_channels[-1]
    for name, c_out in (("albedo", 3), ("depth", 1), ("conf", 2)):
        _conv_init(r.fork(f"head_{name}"), f"gen/head/{name}", p, c_out, last)
        p[f"gen/head/{name}/b"] = np.zeros(c_out)
    c_src = _percep_source_channels(cfg)
    _conv_init(r.fork("head_conf_p"), "gen/head/conf_p", p, 2, c_src)
    p["gen/head/conf_p/b"] = np.zeros(2)
    return p


def init_style_network(rng: SeededRng, cfg: NetConfig) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    r = rng.fork("style_network")
    c_in = cfg.z_dim
    for j in range(4):
        _linear_init(r.fork(f"layer{j}"), f"sty/layer{j}", p, cfg.mlp_hidden, c_in)
        c_in = cfg.mlp_hidden
    for y in range(cfg.domains):
        _linear_init(r.fork(f"branch{y}"), f"sty/branch{y}", p, cfg.style_dim, cfg.mlp_hidden)
    return p


def init_discriminator(rng: SeededRng, cfg: NetConfig) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    r = rng.fork("discriminator")
    c_in = 3
    for i, c_out in enumerate(cfg.channels):
        _conv_init(r.fork(f"conv{i}"), f"disc/conv{i}", p, c_out, c_in)
        c_in = c_out
    for y in range(cfg.domains):
        _linear_init(r.fork(f"branch{y}"), f"disc/branch{y}", p, 1, cfg.channels[-1])
    return p


def init_params(rng: SeededRng, cfg: NetConfig) -> dict[str, np.ndarray]:
    """All trainable parameter sets (generator, style network, discriminator)."""
    params = init_generator(rng, cfg)
    params.update(init_style_network(rng, cfg))
    params.update(init_discriminator(rng, cfg))
    return params


def parameter_count(params: Mapping[str, np.ndarray]) -> int:
    return sum(int(np.asarray(v).size) for v in params.values())


def as_tensors(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def _percep_source_channels(cfg: NetConfig) -> int:
    quarter = cfg.image_size // 4
    if quarter >= 8:
        # decoder feature at that resolution
        idx = int(math.log2(quarter // 4)) - 1
        return cfg.decoder_channels[idx]
    return cfg.channels[-1]  # h itself (or its pooled version at size 8)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def instance_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    return T.channel_norm(x, eps)


def adain(x: Tensor, s: Tensor, scale_w: Tensor, shift_w: Tensor) -> Tensor:
    """Instance-normalize, then scale/shift each channel from the style code."""
    c = x.shape[0]
    scale = 1.0 + T.matmul(scale_w, s)
    shift = T.matmul(shift_w, s)
    return instance_norm(x) * scale.reshape((c, 1, 1)) + shift.reshape((c, 1, 1))


def _conv(x, p, name, pad=1):
    return T.conv2d(x, p[f"{name}/w"], stride=1, pad=pad)


def _linear(x, p, name):
    out = T.matmul(p[f"{name}/w"], x)
    b = p.get(f"{name}/b")
    return out + b if b is not None else out


def _scalar(vec: Tensor, i: int) -> Tensor:
    return vec[i : i + 1].reshape(())


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def encode(img: Tensor, domain: int, p: Mapping[str, Tensor], cfg: NetConfig):
    """Image -> (hidden map h, StyleCode, LightParams, Viewpoint).

    Light weights squash through sigmoid; direction components and all six
    pose coordinates squash through tanh times their bounds, so outputs can
    never leave the declared ranges.
    """
    _check_domain(domain, cfg)
    if img.shape != (3, cfg.image_size, cfg.image_size):
        raise NetworkError(f"expected [3,{cfg.image_size},{cfg.image_size}], got {img.shape}")
    x = img
    for i in range(len(cfg.channels)):
        x = _conv(x, p, f"gen/enc/conv{i}")
        x = T.leaky_relu(instance_norm(x), LRELU_SLOPE)
        x = T.avg_pool2(x)
    h = x  # [C_top, 4, 4]

    pooled = T.mean(h, axis=(1, 2))
    trunk = T.leaky_relu(_linear(pooled, p, "gen/style/trunk"), LRELU_SLOPE)
    s = _linear(trunk, p, f"gen/style/branch{domain}")

    lraw = _linear(pooled, p, "gen/light")
    light = R.LightParams(
        k_s=T.sigmoid(_scalar(lraw, 0)),
        k_d=T.sigmoid(_scalar(lraw, 1)),
        l_x=T.tanh(_scalar(lraw, 2)),
        l_y=T.tanh(_scalar(lraw, 3)),
    )

    bounds = np.array([R.ROTATION_BOUND] * 3 + [R.TRANSLATION_BOUND] * 3)
    view = R.Viewpoint(T.tanh(_linear(pooled, p, "gen/view")) * Tensor(bounds))
    return h, StyleCode(s, domain), light, view


def decode(h: Tensor, style: StyleCode, p: Mapping[str, Tensor], cfg: NetConfig) -> DecodedFeatures:
    """Hidden map + style -> albedo, depth and confidence maps.

    The style code drives every AdaIN layer.  Albedo squashes to [0,1],
    depth to [0.9,1.1]; confidences are softplus with a 1e-4 floor.
    """
    if style.s.shape != (cfg.style_dim,):
        raise NetworkError(f"style code must have {cfg.style_dim} dims, got {style.s.shape}")
    x = h
    feats = {4: h}
    res = 4
    for i in range(len(cfg.decoder_channels)):
        x = T.upsample2x(x)
        x = _conv(x, p, f"gen/dec/conv{i}")
        x = adain(x, style.s, p[f"gen/dec/ada{i}/scale_w"], p[f"gen/dec/ada{i}/shift_w"])
        x = T.leaky_relu(x, LRELU_SLOPE)
        res *= 2
        feats[res] = x

    def head(name, src):
        b = p[f"gen/head/{name}/b"]
        return _conv(src, p, f"gen/head/{name}") + b.reshape((b.shape[0], 1, 1))

    albedo = T.sigmoid(head("albedo", x))
    depth = R.DEPTH_MIN + (R.DEPTH_MAX - R.DEPTH_MIN) * T.sigmoid(head("depth", x))
    conf_pair = T.softplus(head("conf", x)) + CONF_FLOOR
    quarter = cfg.image_size // 4
    src = feats[quarter] if quarter in feats else T.avg_pool2(feats[4])
    conf_p_pair = T.softplus(head("conf_p", src)) + CONF_FLOOR
    return DecodedFeatures(
        albedo=albedo,
        depth=depth,
        conf=conf_pair[0:1],
        conf_flip=conf_pair[1:2],
        conf_percep=conf_p_pair[0:1],
        conf_percep_flip=conf_p_pair[1:2],
    )


def generate(
    img: Tensor,
    style_target: StyleCode | None,
    domain: int,
    p: Mapping[str, Tensor],
    cfg: NetConfig,
    K: R.CameraIntrinsics | None = None,
    albedo_flip: bool = True,
    depth_flip: bool = True,
) -> GenerateResult:
    """Full generator pass: encode, decode, shade, reproject, twice.

    The second (flip) branch re-renders with horizontally flipped depth
    and albedo; either flip can be disabled for ablations.  Passing
    style_target=None keeps the image's own inferred style
    (self-reconstruction).
    """
    K = K or cfg.intrinsics()
    h, own, light, view = encode(img, domain, p, cfg)
    used = style_target if style_target is not None else own
    dec = decode(h, used, p, cfg)

    normals = R.compute_normals(dec.depth, K)
    canonical = R.shade(dec.albedo, normals, light)
    image, warped_depth, mask = R.reproject(canonical, dec.depth, view, K)

    depth_f = T.flip_h(dec.depth) if depth_flip else dec.depth
    albedo_f = T.flip_h(dec.albedo) if albedo_flip else dec.albedo
    canonical_f = R.shade(albedo_f, R.compute_normals(depth_f, K), light)
    image_f, _, mask_f = R.reproject(canonical_f, depth_f, view, K)

    features = R.RenderFeatures(
        albedo=dec.albedo,
        depth=dec.depth,
        light=light,
        view=view,
        conf=dec.conf,
        conf_flip=dec.conf_flip,
        conf_percep=dec.conf_percep,
        conf_percep_flip=dec.conf_percep_flip,
    )
    return GenerateResult(
        image=image,
        image_flip=image_f,
        features=features,
        canonical=canonical,
        canonical_flip=canonical_f,
        warped_depth=warped_depth,
        mask=mask,
        mask_flip=mask_f,
        style=used,
        own_style=own,
        hidden=h,
    )


def canonical_image(img: Tensor, domain: int, p: Mapping[str, Tensor], cfg: NetConfig,
                    K: R.CameraIntrinsics | None = None) -> Tensor:
    """The generator truncated before reprojection: the shaded canonical J."""
    K = K or cfg.intrinsics()
    h, own, light, _ = encode(img, domain, p, cfg)
    dec = decode(h, own, p, cfg)
    normals = R.compute_normals(dec.depth, K)
    return R.shade(dec.albedo, normals, light)


# ---------------------------------------------------------------------------
# style network
# ---------------------------------------------------------------------------


def style_from_noise(z, domain: int, p: Mapping[str, Tensor], cfg: NetConfig) -> StyleCode:
    """Map latent noise through the shared MLP trunk and a domain branch."""
    _check_domain(domain, cfg)
    x = z if isinstance(z, Tensor) else Tensor(z)
    if x.shape != (cfg.z_dim,):
        raise NetworkError(f"latent noise must have {cfg.z_dim} dims, got {x.shape}")
    for j in range(4):
        x = T.leaky_relu(_linear(x, p, f"sty/layer{j}"), LRELU_SLOPE)
    return StyleCode(_linear(x, p, f"sty/branch{domain}"), domain)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------


def discriminate(img: Tensor, domain: int, p: Mapping[str, Tensor], cfg: NetConfig) -> Tensor:
    """Scalar real/generated logit from the domain's output branch."""
    _check_domain(domain, cfg)
    x = img
    for i in range(len(cfg.channels)):
        x = _conv(x, p, f"disc/conv{i}")
        x = T.leaky_relu(instance_norm(x), LRELU_SLOPE)
        x = T.avg_pool2(x)
    pooled = T.mean(x, axis=(1, 2))
    return _scalar(_linear(pooled, p, f"disc/branch{domain}"), 0)


def _instance_norm_jvp(x: Tensor, t: Tensor, eps: float = 1e-6):
    mu = T.mean(x, axis=(1, 2), keepdims=True)
    c = x - mu
    var = T.mean(c * c, axis=(1, 2), keepdims=True)
    s = T.sqrt(var + eps)
    y = c / s
    tc = t - T.mean(t, axis=(1, 2), keepdims=True)
    ts = T.mean(c * tc, axis=(1, 2), keepdims=True) / s
    ty = tc / s - c * (ts / (s * s))
    return y, ty


def discriminate_jvp(img: Tensor, tangent: np.ndarray, domain: int,
                     p: Mapping[str, Tensor], cfg: NetConfig) -> tuple[Tensor, Tensor]:
    """Logit plus its directional derivative w.r.t. the input image.

    The tangent chain is built from ordinary tape ops, so the returned
    directional derivative is itself differentiable w.r.t. the
    discriminator parameters.  This is what makes the R1 penalty exact
    without second-order tape support.
    """
    _check_domain(domain, cfg)
    x = img
    t = Tensor(tangent)
    for i in range(len(cfg.channels)):
        w = p[f"disc/conv{i}/w"]
        x = T.conv2d(x, w, stride=1, pad=1)
        t = T.conv2d(t, w, stride=1, pad=1)
        x, t = _instance_norm_jvp(x, t)
        gate = Tensor(np.where(x.data > 0, 1.0, LRELU_SLOPE))  # locally constant
        x = T.leaky_relu(x, LRELU_SLOPE)
        t = t * gate
        x = T.avg_pool2(x)
        t = T.avg_pool2(t)
    xp = T.mean(x, axis=(1, 2))
    tp = T.mean(t, axis=(1, 2))
    w = p[f"disc/branch{domain}/w"]
    b = p[f"disc/branch{domain}/b"]
    logit = _scalar(T.matmul(w, xp) + b, 0)
    jvp = _scalar(T.matmul(w, tp), 0)
    return logit, jvp
