"""Optimization loop: Adam with decoupled weight decay, warmup, GAN steps.

Training runs in two phases.  For the first floor(warmup_fraction *
iterations) iterations only the generator trains, on the reconstruction
objective alone; afterwards each iteration runs one discriminator step
followed by one generator step with the full objective.  Every stochastic
choice is drawn from a per-iteration substream of the run seed, and batch
composition is a pure function of (seed, iteration), so two runs with the
same config are bitwise identical and a resumed run continues exactly
where the checkpoint left off.

Gradients are computed image by image (one tape per image, then averaged),
which is exactly the batch-mean gradient by linearity and keeps peak
memory at a single image's tape.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from . import networks as N
from . import renderer as R
from . import tensor as T
from .networks import NetConfig, StyleCode
from .rng import SeededRng
from .synthdata import Dataset, DatasetItem
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"UE3DCKPT"
CHECKPOINT_VERSION = 1

LOG_TERMS = ("rec", "adv_g", "adv_d", "sty", "sou", "can", "sd", "r1", "total")


class TrainError(RuntimeError):
    """Training aborted (bad config, NaN gradient, corrupt checkpoint)."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    image_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 256)
    style_dim: int = 64
    z_dim: int = 16
    domains: int = 2
    style_hidden: int = 256
    mlp_hidden: int = 256
    fov_degrees: float = 10.0
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.99
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    batch_size: int = 16
    iterations: int = 10000
    warmup_fraction: float = 0.2
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    r1_enabled: bool = True
    r1_gamma: float = 1.0
    sd_decay: bool = False
    albedo_flip: bool = True
    depth_flip: bool = True
    confidence: bool = True
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if not (0.0 <= self.warmup_fraction <= 1.0):
            raise TrainError(f"warmup_fraction must be in [0,1], got {self.warmup_fraction}")
        for name in ("lr", "batch_size", "iterations"):
            if getattr(self, name) <= 0:
                raise TrainError(f"{name} must be positive")

    def net_config(self) -> NetConfig:
        return NetConfig(
            image_size=self.image_size,
            channels=self.channels,
            style_dim=self.style_dim,
            z_dim=self.z_dim,
            domains=self.domains,
            style_hidden=self.style_hidden,
            mlp_hidden=self.mlp_hidden,
            fov_degrees=self.fov_degrees,
        )

    @property
    def warmup_iterations(self) -> int:
        return int(math.floor(self.warmup_fraction * self.iterations))


@dataclass
class TrainState:
    params: dict[str, np.ndarray]  # gen/*, sty/*, disc/*, fx/*
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    iteration: int = 0
    gen_steps: int = 0
    disc_steps: int = 0
    seed: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    rng = SeededRng(cfg.seed, "init")
    ncfg = cfg.net_config()
    params = N.init_params(rng, ncfg)
    params.update(L.init_feature_extractor(rng, ncfg))
    trained = {k: v for k, v in params.items() if not k.startswith("fx/")}
    return TrainState(
        params=params,
        adam_m={k: np.zeros_like(v) for k, v in trained.items()},
        adam_v={k: np.zeros_like(v) for k, v in trained.items()},
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(params, grads, m, v, t, *, lr, beta1, beta2, eps, weight_decay):
    """Bias-corrected Adam over `grads`; decoupled decay applied first.

    `t` is the 1-based step count of this parameter group.  Updates the
    dicts in place with fresh arrays; original arrays are not mutated.
    """
    if t < 1:
        raise TrainError("adam step count must be at least 1")
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainError(f"NaN gradient for parameter '{name}'")
        p = params[name] * (1.0 - lr * weight_decay)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1**t)
        v_hat = v[name] / (1.0 - beta2**t)
        params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    """Binary container: magic, version, count, then sorted named arrays."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        code = 1 if arr.dtype == np.float32 else 0
        arr = arr.astype(_DTYPE_CODES[code], copy=False)
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise TrainError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise TrainError(f"{path}: unsupported checkpoint version {version}")
    offset = 16
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            code, rank = struct.unpack_from("<BB", raw, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}Q", raw, offset)
            offset += 8 * rank
            dtype = _DTYPE_CODES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            payload = raw[offset : offset + nbytes]
            if len(payload) != nbytes:
                raise TrainError(f"{path}: truncated payload for entry '{name}'")
            offset += nbytes
            entries[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    except (struct.error, KeyError) as exc:
        raise TrainError(f"{path}: corrupt checkpoint structure") from exc
    if offset != len(raw):
        raise TrainError(f"{path}: {len(raw) - offset} trailing bytes")
    return entries


def state_to_entries(state: TrainState, cfg: TrainConfig) -> dict[str, np.ndarray]:
    entries = {f"param/{k}": v for k, v in state.params.items()}
    entries.update({f"opt/m/{k}": v for k, v in state.adam_m.items()})
    entries.update({f"opt/v/{k}": v for k, v in state.adam_v.items()})
    meta = {
        "iteration": state.iteration,
        "gen_steps": state.gen_steps,
        "disc_steps": state.disc_steps,
        "seed_lo": state.seed & 0xFFFFFFFF,
        "seed_hi": state.seed >> 32,
        "image_size": cfg.image_size,
        "style_dim": cfg.style_dim,
        "z_dim": cfg.z_dim,
        "domains": cfg.domains,
        "style_hidden": cfg.style_hidden,
        "mlp_hidden": cfg.mlp_hidden,
        "fov_degrees": cfg.fov_degrees,
    }
    for key, value in meta.items():
        entries[f"meta/{key}"] = np.asarray(float(value))
    entries["meta/channels"] = np.asarray(cfg.channels, dtype=np.float64)
    return entries


def state_from_entries(entries: dict[str, np.ndarray]) -> tuple[TrainState, dict]:
    """Rebuild training state plus the architecture metadata."""
    params, m, v, meta = {}, {}, {}, {}
    for name, arr in entries.items():
        if name.startswith("param/"):
            params[name[6:]] = np.asarray(arr, dtype=np.float64)
        elif name.startswith("opt/m/"):
            m[name[6:]] = np.asarray(arr, dtype=np.float64)
        elif name.startswith("opt/v/"):
            v[name[6:]] = np.asarray(arr, dtype=np.float64)
        elif name.startswith("meta/"):
            meta[name[5:]] = arr
    if not params:
        raise TrainError("checkpoint holds no parameters")
    seed = int(meta["seed_lo"]) | (int(meta["seed_hi"]) << 32)
    state = TrainState(
        params=params,
        adam_m=m,
        adam_v=v,
        iteration=int(meta["iteration"]),
        gen_steps=int(meta["gen_steps"]),
        disc_steps=int(meta["disc_steps"]),
        seed=seed,
    )
    arch = {
        "image_size": int(meta["image_size"]),
        "channels": tuple(int(c) for c in np.atleast_1d(meta["channels"])),
        "style_dim": int(meta["style_dim"]),
        "z_dim": int(meta["z_dim"]),
        "domains": int(meta["domains"]),
        "style_hidden": int(meta["style_hidden"]),
        "mlp_hidden": int(meta["mlp_hidden"]),
        "fov_degrees": float(meta["fov_degrees"]),
    }
    return state, arch


def net_config_from_arch(arch: dict) -> NetConfig:
    return NetConfig(**arch)


# ---------------------------------------------------------------------------
# step helpers
# ---------------------------------------------------------------------------


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def _confidences(cfg: TrainConfig, feats: R.RenderFeatures):
    if cfg.confidence:
        return feats.conf, feats.conf_flip, feats.conf_percep, feats.conf_percep_flip
    s = cfg.image_size
    full, quarter = (1, s, s), (1, s // 4, s // 4)
    return _ones(full), _ones(full), _ones(quarter), _ones(quarter)


def _sample_style(rng: SeededRng, batch: list[DatasetItem], skip: int, domain: int,
                  use_noise: bool, p, cfg: TrainConfig, ncfg: NetConfig) -> StyleCode:
    if use_noise:
        z = rng.fork("z").normal((cfg.z_dim,))
        return N.style_from_noise(z, domain, p, ncfg)
    others = [j for j in range(len(batch)) if j != skip] or [skip]
    j = others[rng.fork("pick").integers(0, len(others))]
    _, style, _, _ = N.encode(Tensor(batch[j].image), domain, p, ncfg)
    return style


def _render_styled(hidden, light, view, style: StyleCode, p, ncfg, K):
    dec = N.decode(hidden, style, p, ncfg)
    canonical = R.shade(dec.albedo, R.compute_normals(dec.depth, K), light)
    return R.reproject(canonical, dec.depth, view, K)


def _generate_nograd(item: DatasetItem, style: StyleCode | None, p_const, cfg, ncfg, K):
    out = N.generate(
        Tensor(item.image), style, item.domain, p_const, ncfg, K,
        albedo_flip=cfg.albedo_flip, depth_flip=cfg.depth_flip,
    )
    return out


def _effective_weights(cfg: TrainConfig, iteration: int) -> L.LossWeights:
    if not cfg.sd_decay:
        return cfg.weights
    main = max(cfg.iterations - cfg.warmup_iterations, 1)
    progress = min(max(iteration - cfg.warmup_iterations, 0) / main, 1.0)
    return replace(cfg.weights, lambda_sd=cfg.weights.lambda_sd * (1.0 - progress))


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def generator_image_objective(item: DatasetItem, batch: list[DatasetItem], index: int,
                              p, rng_img: SeededRng, cfg: TrainConfig, ncfg: NetConfig,
                              K, warmup: bool, weights: L.LossWeights, fx):
    """Per-image generator objective: the full six-term total (or warmup rec).

    This is the one construction of the training objective; both the
    optimizer step and the end-to-end gradient checks go through it.
    """
    image = Tensor(item.image)
    # the extractor is frozen, so fx(I) of a dataset image never changes
    # within a run; key the cache on the weight array identity
    fingerprint = id(fx["fx/conv0/w"].data)
    if item.fx_cache is None or item.fx_cache[0] != fingerprint:
        item.fx_cache = (fingerprint, L.feature_extract(Tensor(item.image), fx, ncfg).data)
    image_features = Tensor(item.fx_cache[1])

    out = N.generate(
        image, None, item.domain, p, ncfg, K,
        albedo_flip=cfg.albedo_flip, depth_flip=cfg.depth_flip,
    )
    recon = L.fill_uncovered(out.image, image, out.mask)
    recon_f = L.fill_uncovered(out.image_flip, image, out.mask_flip)
    conf, conf_f, conf_p, conf_pf = _confidences(cfg, out.features)
    terms = {
        "rec": L.loss_rec(image, recon, recon_f, conf, conf_f,
                          conf_p, conf_pf, weights, fx, ncfg, image_features)
    }

    if not warmup:
        domain_t = rng_img.fork("domain").integers(0, cfg.domains)
        use_noise = rng_img.fork("coin").coin(0.5)
        s1 = _sample_style(rng_img.fork("s1"), batch, index, domain_t,
                           use_noise, p, cfg, ncfg)
        s2 = _sample_style(rng_img.fork("s2"), batch, index, domain_t,
                           use_noise, p, cfg, ncfg)
        light, view = out.features.light, out.features.view

        styled_raw, _, mask_t = _render_styled(out.hidden, light, view, s1, p, ncfg, K)
        styled = L.fill_uncovered(styled_raw, image, mask_t)
        logit_fake = N.discriminate(styled, domain_t, p, ncfg)
        terms["adv_g"] = L.loss_adversarial(Tensor(0.0), logit_fake)[1]

        h_t, recovered, light_t, view_t = N.encode(styled, domain_t, p, ncfg)
        terms["sty"] = L.loss_style(s1, recovered)

        dec_c = N.decode(h_t, out.own_style, p, ncfg)
        canon_c = R.shade(dec_c.albedo, R.compute_normals(dec_c.depth, K), light_t)
        cycled_raw, _, mask_c = R.reproject(canon_c, dec_c.depth, view_t, K)
        terms["sou"] = L.loss_source(image, L.fill_uncovered(cycled_raw, image, mask_c))

        h_j, own_j, light_j, _ = N.encode(out.canonical, item.domain, p, ncfg)
        dec_j = N.decode(h_j, own_j, p, ncfg)
        canon_j = R.shade(dec_j.albedo, R.compute_normals(dec_j.depth, K), light_j)
        terms["can"] = L.loss_canonical(out.canonical, canon_j)

        styled2_raw, _, mask_t2 = _render_styled(out.hidden, light, view, s2, p, ncfg, K)
        styled2 = L.fill_uncovered(styled2_raw, image, mask_t2)
        terms["sd"] = L.loss_diversification(styled, styled2)

    g_total, _ = L.total_objective(terms, weights)
    return g_total, terms


def generator_step(state: TrainState, batch: list[DatasetItem], cfg: TrainConfig,
                   iteration: int) -> dict[str, float]:
    """One generator (+ style network) update; discriminator untouched."""
    ncfg = cfg.net_config()
    K = ncfg.intrinsics()
    warmup = iteration < cfg.warmup_iterations
    weights = _effective_weights(cfg, iteration)
    rng_iter = SeededRng(state.seed, f"iter:{iteration}/gen")

    trainable = [
        k for k in sorted(state.params)
        if k.startswith("gen/") or (not warmup and k.startswith("sty/"))
    ]
    frozen = {
        k: Tensor(v) for k, v in state.params.items()
        if k.startswith("disc/") or k.startswith("fx/")
        or (warmup and k.startswith("sty/"))
    }
    fx = {k: frozen[k] for k in frozen if k.startswith("fx/")}

    grand: dict[str, np.ndarray] = {}
    record = {k: 0.0 for k in LOG_TERMS}
    for i, item in enumerate(batch):
        rng_img = rng_iter.fork(f"img:{i}")
        with Tape() as tape:
            p = dict(frozen)
            for k in trainable:
                p[k] = tape.watch(state.params[k], k)
            g_total, terms = generator_image_objective(
                item, batch, i, p, rng_img, cfg, ncfg, K, warmup, weights, fx
            )

        for key, value in terms.items():
            record[key] += value.item() / len(batch)
        record["total"] += g_total.item() / len(batch)
        grads = tape.backward(g_total)
        for k in trainable:
            g = grads[k].data
            grand[k] = g if k not in grand else grand[k] + g

    for k in grand:
        grand[k] = grand[k] / len(batch)
    state.gen_steps += 1
    adam_step(state.params, grand, state.adam_m, state.adam_v, state.gen_steps,
              lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
              weight_decay=cfg.weight_decay)
    return record


def discriminator_step(state: TrainState, batch: list[DatasetItem], cfg: TrainConfig,
                       iteration: int) -> dict[str, float]:
    """One discriminator update; generator and style network untouched."""
    ncfg = cfg.net_config()
    K = ncfg.intrinsics()
    rng_iter = SeededRng(state.seed, f"iter:{iteration}/disc")
    const_params = {k: Tensor(v) for k, v in state.params.items()}
    disc_names = sorted(k for k in state.params if k.startswith("disc/"))

    grand: dict[str, np.ndarray] = {}
    record = {"adv_d": 0.0, "r1": 0.0}
    for i, item in enumerate(batch):
        rng_img = rng_iter.fork(f"img:{i}")
        domain_t = rng_img.fork("domain").integers(0, cfg.domains)
        use_noise = rng_img.fork("coin").coin(0.5)
        style = _sample_style(rng_img.fork("s1"), batch, i, domain_t,
                              use_noise, const_params, cfg, ncfg)
        fake_out = _generate_nograd(item, style, const_params, cfg, ncfg, K)
        image = Tensor(item.image)
        fake = L.fill_uncovered(fake_out.image, image, fake_out.mask)

        r1_dir = None
        if cfg.r1_enabled:
            with Tape() as probe:
                leaf = probe.watch(item.image, "img")
                logit = N.discriminate(leaf, item.domain, const_params, ncfg)
            r1_dir = probe.backward(logit)["img"].data

        with Tape() as tape:
            p = dict(const_params)
            for k in disc_names:
                p[k] = tape.watch(state.params[k], k)
            logit_real = N.discriminate(image, item.domain, p, ncfg)
            logit_fake = N.discriminate(Tensor(fake.data), domain_t, p, ncfg)
            d_loss = L.loss_adversarial(logit_real, logit_fake)[0]
            if cfg.r1_enabled:
                # gamma*jvp - (gamma/2)*||g||^2 has the value and the
                # parameter gradient of (gamma/2) * ||grad_img D||^2
                _, jvp = N.discriminate_jvp(image, r1_dir, item.domain, p, ncfg)
                norm_sq = float(np.sum(r1_dir * r1_dir))
                r1_term = cfg.r1_gamma * jvp - Tensor(cfg.r1_gamma / 2.0 * norm_sq)
                record["r1"] += r1_term.item() / len(batch)
                d_loss = d_loss + r1_term

        record["adv_d"] += d_loss.item() / len(batch)
        grads = tape.backward(d_loss)
        for k in disc_names:
            g = grads[k].data
            grand[k] = g if k not in grand else grand[k] + g

    for k in grand:
        grand[k] = grand[k] / len(batch)
    state.disc_steps += 1
    adam_step(state.params, grand, state.adam_m, state.adam_v, state.disc_steps,
              lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
              weight_decay=cfg.weight_decay)
    return record


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def format_log_line(iteration: int, record: dict[str, float]) -> str:
    parts = [str(iteration)]
    parts += [f"{k}={record.get(k, 0.0)!r}" for k in LOG_TERMS]
    return "\t".join(parts)


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None,
          resume: TrainState | None = None, progress=None) -> tuple[TrainState, list[str]]:
    """Run the schedule; returns final state and the per-iteration log lines.

    With `out_dir`, checkpoints land there every `checkpoint_interval`
    iterations plus a `final.ckpt`, and the log is appended to
    `loss_log.txt` as it is produced (so an abort preserves both).
    """
    if len(dataset) == 0:
        raise TrainError("dataset is empty")
    state = resume if resume is not None else init_state(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []

    def emit(line: str):
        log_lines.append(line)
        if out is not None:
            with open(out / "loss_log.txt", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def checkpoint(tag: str):
        if out is not None:
            save_checkpoint(out / tag, state_to_entries(state, cfg))

    for t in range(state.iteration, cfg.iterations):
        record: dict[str, float] = {}
        if t >= cfg.warmup_iterations:
            record.update(discriminator_step(state, dataset.batch(state.seed, cfg.batch_size, t), cfg, t))
        record.update(generator_step(state, dataset.batch(state.seed, cfg.batch_size, t), cfg, t))
        state.iteration = t + 1
        emit(format_log_line(t, record))
        if progress is not None:
            progress(t, record)
        if cfg.checkpoint_interval > 0 and state.iteration % cfg.checkpoint_interval == 0:
            checkpoint(f"ckpt_{state.iteration:06d}.ckpt")
    checkpoint("final.ckpt")
    return state, log_lines
