"""The six training terms and the full objective, plus the feature extractor.

The reconstruction terms are confidence-weighted negative log-likelihoods:
a Laplacian prior on per-pixel photometric residuals and a Gaussian prior
on per-position perceptual feature residuals,

    L(I, Ihat, sigma)   = mean[ ln(sqrt(2) sigma) + sqrt(2) l1 / sigma ]
    L_p(I, Ihat, sigma) = mean[ ln(sqrt(2 pi) sigma) + l2^2 / (2 sigma^2) ]

with l1 the channel-summed absolute residual and l2^2 the channel-summed
squared feature residual (never an explicit norm, whose derivative blows
up at zero residual).  All terms are means, so values are resolution
independent.  Adversarial losses use the numerically stable softplus
identities; the generator side is the non-saturating form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .networks import NetConfig, StyleCode
from .rng import SeededRng
from .tensor import Tensor

SQRT2 = math.sqrt(2.0)
SQRT_2PI = math.sqrt(2.0 * math.pi)


class LossError(ValueError):
    """Invalid loss input."""


@dataclass(frozen=True)
class LossWeights:
    """Objective weighting factors; defaults follow the training recipe."""

    lambda_rec: float = 0.5
    lambda_p: float = 1.0
    lambda_sty: float = 0.5
    lambda_sou: float = 0.5
    lambda_can: float = 0.3
    lambda_sd: float = 0.5

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_p", "lambda_sty", "lambda_sou",
                     "lambda_can", "lambda_sd"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be nonnegative")


# ---------------------------------------------------------------------------
# frozen perceptual feature extractor
# ---------------------------------------------------------------------------

FX_CHANNELS = (16, 48, 64)  # three layers, 64 output channels, stride total 4


def init_feature_extractor(rng: SeededRng, cfg: NetConfig) -> dict[str, np.ndarray]:
    """Random frozen conv weights standing in for a pretrained extractor.

    Weights live in the regular checkpoint container, so an externally
    converted extractor can be dropped in under the same names.
    """
    p: dict[str, np.ndarray] = {}
    r = rng.fork("feature_extractor")
    c_in = 3
    for i, c_out in enumerate(FX_CHANNELS):
        p[f"fx/conv{i}/w"] = r.fork(f"conv{i}").normal(
            (c_out, c_in, 3, 3), scale=math.sqrt(2.0 / (c_in * 9))
        )
        p[f"fx/conv{i}/b"] = np.zeros(c_out)
        c_in = c_out
    return p


def feature_extract(img: Tensor, p: Mapping[str, Tensor], cfg: NetConfig) -> Tensor:
    """[3,H,W] -> [64,H/4,W/4]; frozen parameters, still differentiable in img."""
    x = img
    for i in range(3):
        b = p[f"fx/conv{i}/b"]
        x = T.conv2d(x, p[f"fx/conv{i}/w"], stride=1, pad=1) + b.reshape((b.shape[0], 1, 1))
        x = T.leaky_relu(x, 0.2)
        if i < 2:
            x = T.avg_pool2(x)
    return x


# ---------------------------------------------------------------------------
# reconstruction terms
# ---------------------------------------------------------------------------


def fill_uncovered(rendered: Tensor, original: Tensor, mask: Tensor) -> Tensor:
    """Replace uncovered pixels with the original so they carry no residual."""
    return rendered * mask + original * (1.0 - mask)


def _check_conf(sigma: Tensor) -> None:
    if np.any(sigma.data <= 0.0):
        raise LossError("confidence map must be strictly positive")


def loss_photometric(image: Tensor, recon: Tensor, sigma: Tensor) -> Tensor:
    """Laplacian NLL with per-pixel confidence scale."""
    _check_conf(sigma)
    l1 = T.sum_(T.abs_(image - recon), axis=0, keepdims=True)
    return T.mean(T.log(SQRT2 * sigma) + SQRT2 * l1 / sigma)


def loss_perceptual(image: Tensor, recon: Tensor, sigma_p: Tensor,
                    fx: Mapping[str, Tensor], cfg: NetConfig,
                    image_features: Tensor | None = None) -> Tensor:
    """Gaussian NLL on feature residuals at quarter resolution.

    `image_features` short-circuits fx(image) when the caller already has
    it; the extractor is frozen for the whole run, so caching is exact.
    """
    _check_conf(sigma_p)
    fi = image_features if image_features is not None else feature_extract(image, fx, cfg)
    fr = feature_extract(recon, fx, cfg)
    diff = fi - fr
    l2sq = T.sum_(diff * diff, axis=0, keepdims=True)
    return T.mean(T.log(SQRT_2PI * sigma_p) + l2sq / (2.0 * sigma_p * sigma_p))


def loss_rec(image: Tensor, recon: Tensor, recon_flip: Tensor,
             conf: Tensor, conf_flip: Tensor,
             conf_p: Tensor, conf_p_flip: Tensor,
             weights: LossWeights, fx: Mapping[str, Tensor], cfg: NetConfig,
             image_features: Tensor | None = None) -> Tensor:
    """Both reconstruction branches, photometric plus perceptual."""
    direct = loss_photometric(image, recon, conf) \
        + weights.lambda_p * loss_perceptual(image, recon, conf_p, fx, cfg, image_features)
    if weights.lambda_rec == 0.0:
        return direct
    flipped = loss_photometric(image, recon_flip, conf_flip) \
        + weights.lambda_p * loss_perceptual(image, recon_flip, conf_p_flip, fx, cfg, image_features)
    return direct + weights.lambda_rec * flipped


# ---------------------------------------------------------------------------
# adversarial and consistency terms
# ---------------------------------------------------------------------------


def loss_adversarial(logit_real: Tensor, logit_fake: Tensor) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) from a real/fake logit pair.

    d = softplus(-real) + softplus(fake) and g = softplus(-fake), i.e. the
    saturating cross-entropy for D and the non-saturating form for G.
    """
    d_loss = T.softplus(-logit_real) + T.softplus(logit_fake)
    g_loss = T.softplus(-logit_fake)
    return d_loss, g_loss


def loss_style(target: StyleCode, recovered: StyleCode) -> Tensor:
    """Mean absolute error between target and re-encoded style codes."""
    if target.domain != recovered.domain:
        raise LossError(
            f"style domain mismatch: target {target.domain}, recovered {recovered.domain}"
        )
    return T.mean(T.abs_(target.s - recovered.s))


def loss_source(image: Tensor, cycled: Tensor) -> Tensor:
    """Mean absolute error of the style round trip G(G(I, s), E_s(I))."""
    return T.mean(T.abs_(image - cycled))


def loss_canonical(canonical: Tensor, recanonical: Tensor) -> Tensor:
    """Mean absolute error between J and the canonical map applied to J."""
    return T.mean(T.abs_(canonical - recanonical))


def loss_diversification(out_a: Tensor, out_b: Tensor) -> Tensor:
    """Negative mean absolute difference of two style-transferred outputs."""
    return -T.mean(T.abs_(out_a - out_b))


def total_objective(terms: Mapping[str, Tensor], weights: LossWeights) -> tuple[Tensor, Tensor]:
    """Weighted sum (generator total, discriminator total).

    Expects keys rec, adv_g, adv_d, sty, sou, can, sd; missing consistency
    terms contribute zero.
    """
    zero = Tensor(0.0)
    g_total = (
        terms.get("rec", zero)
        + terms.get("adv_g", zero)
        + weights.lambda_sty * terms.get("sty", zero)
        + weights.lambda_sou * terms.get("sou", zero)
        + weights.lambda_can * terms.get("can", zero)
        + weights.lambda_sd * terms.get("sd", zero)
    )
    return g_total, terms.get("adv_d", zero)
