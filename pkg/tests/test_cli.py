import numpy as np
import pytest

from styleshape import cli
from styleshape import synthdata as S
from styleshape import trainer as TR
from styleshape.config import ConfigError, build_train_config, parse_config_lines


TINY_CONFIG = """
# tiny run
seed = 11
image_size = 16
channels = 8, 16
style_dim = 8
z_dim = 4
domains = 2
style_hidden = 16
mlp_hidden = 16
batch_size = 2
iterations = 2
warmup_fraction = 0.5
checkpoint_interval = 2
lambda_rec = 0.5
"""


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli_data")
    S.write_dataset(S.DatasetSpec(count=4, size=16, seed=5, domains=2), path)
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("cli_run")
    cfg_file = out / "run.cfg"
    cfg_file.write_text(TINY_CONFIG)
    code = cli.main(["train", "--data", str(data_dir), "--out", str(out / "train"),
                     "--config", str(cfg_file)])
    assert code == 0
    return out


class TestConfig:
    def test_parse_and_defaults(self):
        pairs = parse_config_lines(["lr = 0.001", "# comment", "", "r1_enabled = false"])
        cfg = build_train_config(pairs)
        assert cfg.lr == 0.001 and cfg.r1_enabled is False
        assert cfg.weights.lambda_rec == 0.5  # untouched default

    def test_lambda_rec_override(self):
        cfg = build_train_config({"lambda_rec": "0.25"})
        assert cfg.weights.lambda_rec == 0.25

    def test_unknown_keys_listed_exhaustively(self):
        with pytest.raises(ConfigError) as err:
            build_train_config({"bogus": "1", "lr": "oops", "другое": "x"})
        message = str(err.value)
        assert "bogus" in message and "lr" in message and "другое" in message

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_lines(["a = 1", "a = 2"])

    def test_range_violations_collected(self):
        with pytest.raises(ConfigError) as err:
            build_train_config({"warmup_fraction": "1.5", "batch_size": "-4"})
        assert "warmup_fraction" in str(err.value) and "batch_size" in str(err.value)


class TestGenData:
    def test_writes_triples(self, tmp_path):
        out = tmp_path / "ds"
        code = cli.main(["gen-data", "--out", str(out), "--count", "4",
                         "--domains", "2", "--seed", "3", "--size", "32"])
        assert code == 0
        for d in (0, 1):
            assert len(list((out / f"domain_{d}").glob("img_*.png"))) == 2

    def test_refuses_nonempty_without_force(self, tmp_path):
        out = tmp_path / "ds"
        out.mkdir()
        (out / "existing.txt").write_text("x")
        code = cli.main(["gen-data", "--out", str(out), "--count", "2", "--size", "32"])
        assert code == 2

    def test_byte_identical_for_same_seed(self, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["gen-data", "--out", str(tmp_path / name), "--count", "2",
                             "--domains", "1", "--seed", "9", "--size", "32"]) == 0
        fa = sorted((tmp_path / "a").rglob("img_*"))
        fb = sorted((tmp_path / "b").rglob("img_*"))
        assert [f.name for f in fa] == [f.name for f in fb]
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(fa, fb))

    def test_unsupported_size_rejected(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["gen-data", "--out", str(tmp_path / "x"), "--size", "48"])
        assert exc.value.code == 2

    def test_missing_required_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["gen-data"])
        assert exc.value.code == 2


class TestTrainEval:
    def test_train_outputs(self, run_dir):
        train_dir = run_dir / "train"
        assert (train_dir / "final.ckpt").exists()
        assert (train_dir / "loss_log.txt").exists()
        lines = (train_dir / "loss_log.txt").read_text().strip().splitlines()
        assert len(lines) == 2 and lines[0].startswith("0\t")

    def test_resume_continues_counter(self, run_dir, data_dir, tmp_path):
        out2 = tmp_path / "resumed"
        cfg_file = run_dir / "run.cfg"
        code = cli.main([
            "train", "--data", str(data_dir), "--out", str(out2),
            "--config", str(cfg_file), "--set", "iterations = 3",
            "--resume", str(run_dir / "train" / "final.ckpt"),
        ])
        assert code == 0
        entries = TR.load_checkpoint(out2 / "final.ckpt")
        state, _ = TR.state_from_entries(entries)
        assert state.iteration == 3

    def test_eval_line_format(self, run_dir, data_dir, tmp_path, capsys):
        summary = tmp_path / "summary.tsv"
        code = cli.main(["eval", "--data", str(data_dir), "--ckpt",
                         str(run_dir / "train" / "final.ckpt"),
                         "--metrics", "side,mad,sdc", "--summary", str(summary)])
        assert code == 0
        out = capsys.readouterr().out
        lines = [l for l in out.strip().splitlines() if "\t" in l]
        names = [l.split("\t")[0] for l in lines]
        assert names == ["side", "side_std", "mad", "mad_std", "sdc"]
        for line in lines:
            float(line.split("\t")[1])  # parses
        assert summary.read_text().strip().splitlines() == lines

    def test_eval_unknown_metric_rejected(self, run_dir, data_dir):
        code = cli.main(["eval", "--data", str(data_dir), "--ckpt",
                         str(run_dir / "train" / "final.ckpt"), "--metrics", "fid"])
        assert code == 2

    def test_eval_sdc_needs_two_samples(self, run_dir, tmp_path):
        solo = tmp_path / "solo"
        S.write_dataset(S.DatasetSpec(count=1, size=16, seed=1, domains=1), solo)
        code = cli.main(["eval", "--data", str(solo), "--ckpt",
                         str(run_dir / "train" / "final.ckpt"), "--metrics", "sdc"])
        assert code == 1


class TestRenderTransfer:
    def test_render_writes_six_files(self, run_dir, data_dir, tmp_path):
        image = next((data_dir / "domain_0").glob("img_*.png"))
        out = tmp_path / "render"
        code = cli.main(["render", "--image", str(image), "--ckpt",
                         str(run_dir / "train" / "final.ckpt"), "--out", str(out)])
        assert code == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["albedo.png", "depth.pfm", "depth_vis.png",
                         "normals.png", "recon.png", "shading.png"]

    def test_normals_png_encodes_unit_vectors(self, run_dir, data_dir, tmp_path):
        image = next((data_dir / "domain_0").glob("img_*.png"))
        out = tmp_path / "render2"
        assert cli.main(["render", "--image", str(image), "--ckpt",
                         str(run_dir / "train" / "final.ckpt"), "--out", str(out)]) == 0
        decoded = S.read_png(out / "normals.png") * 2.0 - 1.0
        norms = np.sqrt((decoded**2).sum(axis=0))
        assert np.all(np.abs(norms - 1.0) <= 2.5 / 255.0)

    def test_transfer_deterministic_and_bounded(self, run_dir, data_dir, tmp_path):
        image = next((data_dir / "domain_1").glob("img_*.png"))
        ckpt = str(run_dir / "train" / "final.ckpt")
        outs = []
        for name in ("t1", "t2"):
            out = tmp_path / name
            code = cli.main(["transfer", "--image", str(image), "--ckpt", ckpt,
                             "--noise-seed", "7", "--domain", "1",
                             "--views", "0, 15, -15", "--out", str(out)])
            assert code == 0
            outs.append(sorted(p.read_bytes() for p in out.iterdir()))
        assert outs[0] == outs[1]
        assert len(outs[0]) == 3

    def test_transfer_rejects_out_of_bound_yaw(self, run_dir, data_dir, tmp_path):
        image = next((data_dir / "domain_0").glob("img_*.png"))
        code = cli.main(["transfer", "--image", str(image), "--ckpt",
                         str(run_dir / "train" / "final.ckpt"), "--noise-seed", "1",
                         "--domain", "0", "--views", "75", "--out", str(tmp_path / "x")])
        assert code == 2

    def test_transfer_ref_and_noise_mutually_exclusive(self, run_dir, data_dir, tmp_path):
        image = next((data_dir / "domain_0").glob("img_*.png"))
        with pytest.raises(SystemExit) as exc:
            cli.main(["transfer", "--image", str(image), "--ckpt",
                      str(run_dir / "train" / "final.ckpt"), "--ref", str(image),
                      "--noise-seed", "1", "--domain", "0", "--out", str(tmp_path / "x")])
        assert exc.value.code == 2


class TestRenderTransferAgreement:
    def test_zero_view_transfer_matches_render_recon(self, run_dir, data_dir, tmp_path):
        # with the view head zeroed (predicted pose exactly 0), the render
        # command's reconstruction and a transfer at yaw 0 with the source
        # image as its own style reference follow the identical path
        src_ckpt = run_dir / "train" / "final.ckpt"
        entries = TR.load_checkpoint(src_ckpt)
        entries["param/gen/view/w"] = np.zeros_like(entries["param/gen/view/w"])
        entries["param/gen/view/b"] = np.zeros_like(entries["param/gen/view/b"])
        ckpt = tmp_path / "zeroview.ckpt"
        TR.save_checkpoint(ckpt, entries)

        image = next((data_dir / "domain_0").glob("img_*.png"))
        rdir, tdir = tmp_path / "r", tmp_path / "t"
        assert cli.main(["render", "--image", str(image), "--ckpt", str(ckpt),
                         "--out", str(rdir), "--domain", "0"]) == 0
        assert cli.main(["transfer", "--image", str(image), "--ckpt", str(ckpt),
                         "--ref", str(image), "--domain", "0", "--views", "0",
                         "--out", str(tdir)]) == 0
        recon = (rdir / "recon.png").read_bytes()
        view0 = next(tdir.glob("view_*.png")).read_bytes()
        assert recon == view0

    def test_render_resizes_with_notice(self, run_dir, tmp_path, capsys):
        from styleshape import synthdata as S2

        big = tmp_path / "big.png"
        S2.write_png(big, np.random.default_rng(0).random((3, 40, 40)))
        out = tmp_path / "resized"
        code = cli.main(["render", "--image", str(big), "--ckpt",
                         str(run_dir / "train" / "final.ckpt"), "--out", str(out)])
        assert code == 0
        assert "resizing" in capsys.readouterr().out
        assert (out / "recon.png").exists()


class TestGradcheckCommand:
    def test_unknown_scope_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["gradcheck", "--scope", "bogus"])
        assert exc.value.code == 2

    def test_ops_scope_passes(self, capsys):
        assert cli.main(["gradcheck", "--scope", "ops"]) == 0
        assert "PASS" in capsys.readouterr().out
