import numpy as np
import pytest

from styleshape import losses as L
from styleshape import trainer as TR
from styleshape import synthdata as S
from styleshape.rng import SeededRng

TINY = TR.TrainConfig(
    seed=11,
    image_size=16,
    channels=(8, 16),
    style_dim=8,
    z_dim=4,
    domains=2,
    style_hidden=16,
    mlp_hidden=16,
    batch_size=2,
    iterations=4,
    warmup_fraction=0.5,
    checkpoint_interval=0,
)


@pytest.fixture(scope="module")
def tiny_dataset():
    spec = S.DatasetSpec(count=6, size=16, seed=21, domains=2)
    rng = SeededRng(spec.seed)
    items = []
    for i in range(spec.count):
        sample = S.generate_scene(rng.fork(f"scene:{i}"), spec, i % 2)
        items.append(S.DatasetItem(image=sample.image, domain=sample.domain))
    return S.Dataset(items, spec.size)


def fingerprint(params, prefix):
    return {k: v.copy() for k, v in params.items() if k.startswith(prefix)}


def unchanged(before, after):
    return all(np.array_equal(before[k], after[k]) for k in before)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        grads = {"w": np.array([0.5, -4.0, 1e-12])}
        m = {"w": np.zeros(3)}
        v = {"w": np.zeros(3)}
        TR.adam_step(params, grads, m, v, 1, lr=1e-4, beta1=0.0, beta2=0.99,
                     eps=1e-8, weight_decay=0.0)
        step = params["w"] - np.array([1.0, -2.0, 3.0])
        # beta1=0 means m=g and v_hat=g^2, so the move is -lr*sign(g) for |g| >> eps
        assert abs(step[0] + 1e-4) < 1e-8
        assert abs(step[1] - 1e-4) < 1e-8
        assert abs(step[2]) < 1e-4  # tiny gradient is damped by eps

    def test_zero_gradient_zero_decay_is_identity(self):
        params = {"w": np.array([0.7])}
        TR.adam_step(params, {"w": np.zeros(1)}, {"w": np.zeros(1)}, {"w": np.zeros(1)},
                     1, lr=1e-3, beta1=0.0, beta2=0.99, eps=1e-8, weight_decay=0.0)
        assert params["w"][0] == 0.7

    def test_pure_weight_decay_contracts(self):
        params = {"w": np.array([2.0, -2.0])}
        values = [params["w"].copy()]
        for t in range(1, 4):
            TR.adam_step(params, {"w": np.zeros(2)}, {"w": np.zeros(2)}, {"w": np.zeros(2)},
                         t, lr=1e-2, beta1=0.0, beta2=0.99, eps=1e-8, weight_decay=0.1)
            values.append(params["w"].copy())
        mags = [np.abs(v) for v in values]
        assert all(np.all(b < a) for a, b in zip(mags, mags[1:]))

    def test_nan_gradient_names_parameter(self):
        params = {"bad/w": np.zeros(2)}
        with pytest.raises(TR.TrainError, match="bad/w"):
            TR.adam_step(params, {"bad/w": np.array([np.nan, 0.0])},
                         {"bad/w": np.zeros(2)}, {"bad/w": np.zeros(2)}, 1,
                         lr=1e-3, beta1=0.0, beta2=0.99, eps=1e-8, weight_decay=0.0)


class TestCheckpoint:
    def test_empty_state_is_16_bytes(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        TR.save_checkpoint(path, {})
        assert path.stat().st_size == 16

    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        entries = {
            "a/w": rng.normal(size=(3, 4)),
            "scalar": np.asarray(2.5),
            "f32": rng.normal(size=5).astype(np.float32),
        }
        path = tmp_path / "x.ckpt"
        TR.save_checkpoint(path, entries)
        back = TR.load_checkpoint(path)
        assert set(back) == set(entries)
        for k in entries:
            assert back[k].dtype == (np.float32 if k == "f32" else np.float64)
            assert np.array_equal(back[k], entries[k])

    def test_save_load_save_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        entries = {f"p{i}": rng.normal(size=(i + 1,)) for i in range(5)}
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        TR.save_checkpoint(a, entries)
        TR.save_checkpoint(b, TR.load_checkpoint(a))
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTCKPT!" + b"\x00" * 8)
        with pytest.raises(TR.TrainError, match="magic"):
            TR.load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "trunc.ckpt"
        TR.save_checkpoint(path, {"w": np.ones(10)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(TR.TrainError, match="truncated|corrupt"):
            TR.load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "v9.ckpt"
        TR.save_checkpoint(path, {})
        raw = bytearray(path.read_bytes())
        raw[8] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(TR.TrainError, match="version"):
            TR.load_checkpoint(path)


class TestSteps:
    def test_warmup_touches_only_generator(self, tiny_dataset):
        state = TR.init_state(TINY)
        before_sty = fingerprint(state.params, "sty/")
        before_disc = fingerprint(state.params, "disc/")
        before_gen = fingerprint(state.params, "gen/")
        record = TR.generator_step(state, tiny_dataset.batch(TINY.seed, 2, 0), TINY, 0)
        assert unchanged(before_sty, state.params)
        assert unchanged(before_disc, state.params)
        assert not unchanged(before_gen, state.params)
        assert set(TR.LOG_TERMS) <= set(record) | {"adv_d", "r1", "total"} | set(record)
        assert record["rec"] != 0.0

    def test_main_phase_record_has_all_terms(self, tiny_dataset):
        state = TR.init_state(TINY)
        record = TR.generator_step(state, tiny_dataset.batch(TINY.seed, 2, 2), TINY, 2)
        for key in ("rec", "adv_g", "sty", "sou", "can", "sd", "total"):
            assert key in record

    def test_discriminator_step_leaves_generator_untouched(self, tiny_dataset):
        state = TR.init_state(TINY)
        before_gen = fingerprint(state.params, "gen/")
        before_sty = fingerprint(state.params, "sty/")
        before_disc = fingerprint(state.params, "disc/")
        TR.discriminator_step(state, tiny_dataset.batch(TINY.seed, 2, 2), TINY, 2)
        assert unchanged(before_gen, state.params)
        assert unchanged(before_sty, state.params)
        assert not unchanged(before_disc, state.params)

    def test_identical_steps_identical_updates(self, tiny_dataset):
        a = TR.init_state(TINY)
        b = TR.init_state(TINY)
        batch = tiny_dataset.batch(TINY.seed, 2, 0)
        ra = TR.generator_step(a, batch, TINY, 0)
        rb = TR.generator_step(b, batch, TINY, 0)
        assert ra == rb
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_r1_disabled_changes_loss(self, tiny_dataset):
        cfg_on = TINY
        cfg_off = TR.TrainConfig(**{**cfg_on.__dict__, "r1_enabled": False})
        batch_cfg = [cfg_on, cfg_off]
        records = []
        for cfg in batch_cfg:
            state = TR.init_state(cfg)
            records.append(TR.discriminator_step(state, tiny_dataset.batch(cfg.seed, 2, 2), cfg, 2))
        assert records[0]["r1"] != 0.0
        assert records[1]["r1"] == 0.0
        assert abs(records[0]["adv_d"] - records[0]["r1"] - records[1]["adv_d"]) < 1e-9


class TestWeightSchedule:
    def test_sd_decay_off_by_default(self):
        cfg = TR.TrainConfig(**{**TINY.__dict__, "iterations": 10, "warmup_fraction": 0.0})
        assert TR._effective_weights(cfg, 9).lambda_sd == cfg.weights.lambda_sd

    def test_sd_decay_linear_when_enabled(self):
        cfg = TR.TrainConfig(**{**TINY.__dict__, "iterations": 10, "warmup_fraction": 0.0,
                                "sd_decay": True})
        lam = cfg.weights.lambda_sd
        assert TR._effective_weights(cfg, 0).lambda_sd == lam
        assert abs(TR._effective_weights(cfg, 5).lambda_sd - lam * 0.5) < 1e-12
        assert TR._effective_weights(cfg, 10).lambda_sd == 0.0


class TestTrainLoop:
    def test_warmup_boundary_and_log_monotone(self, tiny_dataset):
        state, lines = TR.train(TINY, tiny_dataset)
        assert state.iteration == TINY.iterations
        assert state.gen_steps == TINY.iterations
        assert state.disc_steps == TINY.iterations - TINY.warmup_iterations
        iters = [int(line.split("\t")[0]) for line in lines]
        assert iters == sorted(iters) == list(range(TINY.iterations))

    def test_warmup_count_matches_fraction(self):
        cfg = TR.TrainConfig(**{**TINY.__dict__, "iterations": 10, "warmup_fraction": 0.2})
        assert cfg.warmup_iterations == 2

    def test_determinism_bitwise_logs(self, tiny_dataset):
        _, lines_a = TR.train(TINY, tiny_dataset)
        _, lines_b = TR.train(TINY, tiny_dataset)
        assert lines_a == lines_b

    def test_resume_reproduces_next_losses_bitwise(self, tiny_dataset, tmp_path):
        cfg = TR.TrainConfig(**{**TINY.__dict__, "checkpoint_interval": 2})
        _, full_lines = TR.train(cfg, tiny_dataset, out_dir=tmp_path)

        entries = TR.load_checkpoint(tmp_path / "ckpt_000002.ckpt")
        resumed, arch = TR.state_from_entries(entries)
        assert arch["image_size"] == TINY.image_size
        assert resumed.iteration == 2

        _, tail = TR.train(cfg, tiny_dataset, resume=resumed)
        assert tail == full_lines[2:]

    def test_checkpoint_files_written(self, tiny_dataset, tmp_path):
        cfg = TR.TrainConfig(**{**TINY.__dict__, "checkpoint_interval": 2})
        TR.train(cfg, tiny_dataset, out_dir=tmp_path)
        assert (tmp_path / "ckpt_000002.ckpt").exists()
        assert (tmp_path / "ckpt_000004.ckpt").exists()
        assert (tmp_path / "final.ckpt").exists()
        assert (tmp_path / "loss_log.txt").read_text().count("\n") == cfg.iterations

    def test_state_roundtrip_through_entries(self, tiny_dataset):
        state = TR.init_state(TINY)
        entries = TR.state_to_entries(state, TINY)
        back, arch = TR.state_from_entries(entries)
        assert back.seed == TINY.seed
        assert arch["channels"] == TINY.channels
        assert all(np.array_equal(back.params[k], state.params[k]) for k in state.params)
