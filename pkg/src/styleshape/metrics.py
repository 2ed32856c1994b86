"""Depth evaluation metrics, each paired with a naive reference twin.

* side: scale-invariant depth error, the standard deviation of per-pixel
  log-depth differences over the valid mask.
* mad: mean angular deviation in degrees between normal maps derived from
  the two depth maps with the renderer's tangent stencil.
* sdc: sum over the 66 keypoints of the Pearson correlation between
  predicted and ground-truth keypoint depths across the evaluation set.

The `*_reference` twins recompute everything with explicit Python loops
and are kept deliberately independent of the vectorized paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import renderer as R
from .tensor import Tensor

KEYPOINT_COUNT = 66


class MetricError(ValueError):
    """Invalid metric input."""


@dataclass
class DepthEval:
    """Predicted warped depth against ground truth over a validity mask."""

    predicted: np.ndarray  # [H,W] or [1,H,W]
    truth: np.ndarray
    mask: np.ndarray  # same shape, {0,1}

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pred = np.asarray(self.predicted, dtype=np.float64).reshape(-1)
        true = np.asarray(self.truth, dtype=np.float64).reshape(-1)
        mask = np.asarray(self.mask, dtype=np.float64).reshape(-1) > 0.5
        if pred.shape != true.shape or pred.shape != mask.shape:
            raise MetricError("depth/mask shapes disagree")
        if not mask.any():
            raise MetricError("empty validity mask")
        if np.any(pred[mask] <= 0) or np.any(true[mask] <= 0):
            raise MetricError("depths must be strictly positive where valid")
        return pred, true, mask


@dataclass
class KeypointDepthSet:
    """Predicted and ground-truth keypoint depths, [examples, 66] each."""

    predicted: np.ndarray
    truth: np.ndarray

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        pred = np.asarray(self.predicted, dtype=np.float64)
        true = np.asarray(self.truth, dtype=np.float64)
        if pred.ndim != 2 or pred.shape[1] != KEYPOINT_COUNT:
            raise MetricError(f"expected [n,{KEYPOINT_COUNT}] keypoint depths, got {pred.shape}")
        if pred.shape != true.shape:
            raise MetricError("predicted/truth keypoint shapes disagree")
        if pred.shape[0] < 2:
            raise MetricError("correlation needs at least 2 examples")
        return pred, true


# ---------------------------------------------------------------------------
# SIDE
# ---------------------------------------------------------------------------


def side(ev: DepthEval) -> float:
    """sqrt(mean(delta^2) - mean(delta)^2), delta = log pred - log truth."""
    pred, true, mask = ev.arrays()
    delta = np.log(pred[mask]) - np.log(true[mask])
    variance = float(np.mean(delta * delta) - np.mean(delta) ** 2)
    return math.sqrt(max(variance, 0.0))


def side_reference(ev: DepthEval) -> float:
    pred, true, mask = ev.arrays()
    deltas = []
    for p, t, m in zip(pred.tolist(), true.tolist(), mask.tolist()):
        if m:
            deltas.append(math.log(p) - math.log(t))
    n = len(deltas)
    mean_sq = sum(d * d for d in deltas) / n
    mean = sum(deltas) / n
    return math.sqrt(max(mean_sq - mean * mean, 0.0))


# ---------------------------------------------------------------------------
# MAD
# ---------------------------------------------------------------------------


def _normals(depth_flat: np.ndarray, K: R.CameraIntrinsics) -> np.ndarray:
    d = depth_flat.reshape(1, K.height, K.width)
    return R.compute_normals(Tensor(d), K).data


def mad(ev: DepthEval, K: R.CameraIntrinsics) -> float:
    """Masked mean angle in degrees between the two derived normal maps."""
    pred, true, mask = ev.arrays()
    n_pred = _normals(pred, K).reshape(3, -1)
    n_true = _normals(true, K).reshape(3, -1)
    cosine = np.clip((n_pred * n_true).sum(axis=0), -1.0, 1.0)
    angles = np.degrees(np.arccos(cosine))
    return float(angles[mask].mean())


def _reference_point(d, K, u, v):
    return (
        d[v][u] * (u - K.c_u) / K.f,
        d[v][u] * (v - K.c_v) / K.f,
        d[v][u],
    )


def _reference_normal(d, K, u, v):
    w, h = K.width, K.height

    def tangent(du, dv):
        if 0 < (u if dv == 0 else v) < ((w if dv == 0 else h) - 1):
            a = _reference_point(d, K, u + du, v + dv)
            b = _reference_point(d, K, u - du, v - dv)
            return tuple((x - y) / 2.0 for x, y in zip(a, b))
        if (u if dv == 0 else v) == 0:
            a = _reference_point(d, K, u + du, v + dv)
            b = _reference_point(d, K, u, v)
        else:
            a = _reference_point(d, K, u, v)
            b = _reference_point(d, K, u - du, v - dv)
        return tuple(x - y for x, y in zip(a, b))

    tu = tangent(1, 0)
    tv = tangent(0, 1)
    n = (
        tu[1] * tv[2] - tu[2] * tv[1],
        tu[2] * tv[0] - tu[0] * tv[2],
        tu[0] * tv[1] - tu[1] * tv[0],
    )
    norm = math.sqrt(n[0] ** 2 + n[1] ** 2 + n[2] ** 2)
    sign = 1.0 if n[2] >= 0 else -1.0
    return tuple(sign * x / norm for x in n)


def mad_reference(ev: DepthEval, K: R.CameraIntrinsics) -> float:
    pred, true, mask = ev.arrays()
    dp = pred.reshape(K.height, K.width).tolist()
    dt = true.reshape(K.height, K.width).tolist()
    mk = mask.reshape(K.height, K.width).tolist()
    total, count = 0.0, 0
    for v in range(K.height):
        for u in range(K.width):
            if not mk[v][u]:
                continue
            a = _reference_normal(dp, K, u, v)
            b = _reference_normal(dt, K, u, v)
            dot = min(1.0, max(-1.0, sum(x * y for x, y in zip(a, b))))
            total += math.degrees(math.acos(dot))
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# SDC
# ---------------------------------------------------------------------------


def _pearson(pred: np.ndarray, true: np.ndarray, keypoint: int) -> float:
    pc = pred - pred.mean()
    tc = true - true.mean()
    var_t = float(np.dot(tc, tc))
    if var_t == 0.0:
        raise MetricError(f"zero ground-truth variance at keypoint {keypoint}")
    var_p = float(np.dot(pc, pc))
    if var_p == 0.0:
        return 0.0  # constant prediction: correlation undefined, scored 0
    return float(np.dot(pc, tc) / math.sqrt(var_p * var_t))


def sdc(kps: KeypointDepthSet) -> float:
    """Sum of the 66 per-keypoint Pearson correlations across examples."""
    pred, true = kps.arrays()
    return float(sum(_pearson(pred[:, k], true[:, k], k) for k in range(KEYPOINT_COUNT)))


def sdc_reference(kps: KeypointDepthSet) -> float:
    pred, true = kps.arrays()
    n = pred.shape[0]
    total = 0.0
    for k in range(KEYPOINT_COUNT):
        p = [float(pred[i, k]) for i in range(n)]
        t = [float(true[i, k]) for i in range(n)]
        pm = sum(p) / n
        tm = sum(t) / n
        cov = sum((a - pm) * (b - tm) for a, b in zip(p, t))
        vp = sum((a - pm) ** 2 for a in p)
        vt = sum((b - tm) ** 2 for b in t)
        if vt == 0.0:
            raise MetricError(f"zero ground-truth variance at keypoint {k}")
        total += 0.0 if vp == 0.0 else cov / math.sqrt(vp * vt)
    return total
