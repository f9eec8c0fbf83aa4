import filecmp
import logging

import numpy as np
import pytest

from prdepth import autodiff as ad
from prdepth import data, imageio, network, volume
from prdepth import planes as pr
from prdepth.cli import main
from prdepth.config import ConfigError, RunConfig, build, parse_text

SMALL_NET = ["--D", "4", "--base-channels", "4", "--encoder-depth", "2", "--filter-radius", "2"]


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "ds"
    assert main(["synth", "--out", str(root), "--n-scenes", "2", "--height", "16", "--width", "16",
                 "--samples", "40", "--seed", "5"]) == 0
    return root


def _trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    files = [p for p in a.rglob("*") if p.is_file()]
    return all((a / p.relative_to(a)).read_bytes() == (b / p.relative_to(a)).read_bytes() for p in files)


class TestConfig:
    def test_parse_comments_and_types(self):
        values = parse_text("# header\nD = 16  # planes\nuse_filter = false\n\nlr=0.5\nstrategy = DA\n")
        assert values == {"D": 16, "use_filter": False, "lr": 0.5, "strategy": "DA"}

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_text("planes_count = 3")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_text("D = eight")
        with pytest.raises(ConfigError):
            parse_text("just text")

    def test_flags_win(self):
        run = build({"D": 16, "lr": 0.1}, {"D": 4})
        assert run.D == 4 and run.lr == 0.1 and run.strategy == "UR"

    def test_text_round_trip(self):
        run = RunConfig(D=5, use_filter=False, out="x")
        assert build(parse_text(run.to_text())) == run

    def test_unknown_key_exit_code(self, tmp_path):
        (tmp_path / "c.cfg").write_text("bogus = 1\n")
        assert main(["synth", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o")]) == 2

    def test_config_file_and_echo(self, tmp_path, caplog):
        (tmp_path / "c.cfg").write_text("height = 16\nwidth = 16\nsamples = 10\nn_scenes = 1\nseed = 9\n")
        with caplog.at_level(logging.INFO, logger="prdepth"):
            assert main(["synth", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o"),
                         "--seed", "4"]) == 0
        assert "seed = 4" in caplog.text and "height = 16" in caplog.text
        assert imageio.read_pfm(tmp_path / "o" / "scene_0000" / "depth.pfm").shape == (16, 16)


class TestSynthSample:
    def test_one_scene(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--n-scenes", "1", "--height", "16", "--width", "16",
                     "--samples", "20"]) == 0
        assert sorted(p.name for p in (tmp_path / "scene_0000").iterdir()) == ["depth.pfm", "rgb.ppm", "sparse.pfm"]
        assert "scene_0000 scene_seed=" in capsys.readouterr().out

    def test_same_seed_same_bytes(self, tmp_path):
        args = ["--n-scenes", "3", "--height", "16", "--width", "16", "--samples", "20", "--seed", "2"]
        assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
        assert main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
        assert _trees_equal(tmp_path / "a", tmp_path / "b")

    def test_hundred_scenes_in_range(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--n-scenes", "100", "--height", "16", "--width", "16",
                     "--samples", "10", "--depth-min", "2", "--depth-max", "6"]) == 0
        for path in data.list_scenes(tmp_path):
            d = imageio.read_pfm(path / "depth.pfm")
            assert d.min() >= 2.0 and d.max() <= 6.0

    def test_too_many_samples(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--height", "16", "--width", "16", "--samples", "300"]) == 3

    def test_sample(self, dataset, tmp_path):
        out = tmp_path / "s.pfm"
        assert main(["sample", "--depth", str(dataset / "scene_0000" / "depth.pfm"), "--out", str(out),
                     "--samples", "17"]) == 0
        assert (imageio.read_pfm(out) > 0).sum() == 17


class TestEncodeDecode:
    def _round_trip(self, tmp_path, depth_path, *extra):
        plane, resid, back = tmp_path / "p.pgm", tmp_path / "r.pfm", tmp_path / "back.pfm"
        assert main(["encode", "--depth", str(depth_path), "--plane", str(plane), "--residual", str(resid),
                     *extra]) == 0
        assert main(["decode", "--plane", str(plane), "--residual", str(resid), "--planes", str(plane) + ".planes",
                     "--out", str(back)]) == 0
        return pr.DepthPlaneSet.from_text((tmp_path / "p.pgm.planes").read_text()), imageio.read_pfm(back)

    def test_round_trip(self, dataset, tmp_path):
        depth_path = dataset / "scene_0000" / "depth.pfm"
        _, back = self._round_trip(tmp_path, depth_path, "--D", "8")
        depth = imageio.read_pfm(depth_path)
        np.testing.assert_allclose(back, depth, atol=1e-6 * depth.max())

    def test_ua_range(self, dataset, tmp_path):
        planes, _ = self._round_trip(tmp_path, dataset / "scene_0000" / "depth.pfm", "--strategy", "UA", "--D", "6")
        assert planes.depths[0] == 0.0 and planes.depths[-1] == 10.0

    def test_dr_logged(self, dataset, tmp_path, caplog):
        with caplog.at_level(logging.INFO, logger="prdepth"):
            planes, _ = self._round_trip(
                tmp_path, dataset / "scene_0000" / "depth.pfm", "--strategy", "DR", "--D", "5",
                "--sparse", str(dataset / "scene_0000" / "sparse.pfm"),
            )
        assert np.all(np.diff(planes.depths) > 0)
        assert "planes (DR):" in caplog.text

    def test_malformed_input(self, tmp_path):
        (tmp_path / "bad.pfm").write_bytes(b"P7\n")
        assert main(["encode", "--depth", str(tmp_path / "bad.pfm"), "--plane", str(tmp_path / "p.pgm"),
                     "--residual", str(tmp_path / "r.pfm")]) == 3

    def test_missing_input(self, tmp_path):
        assert main(["encode", "--depth", str(tmp_path / "none.pfm"), "--plane", str(tmp_path / "p.pgm"),
                     "--residual", str(tmp_path / "r.pfm")]) == 3

    def test_missing_flag(self, tmp_path):
        assert main(["decode", "--plane", str(tmp_path / "p.pgm")]) == 2

    def test_argparse_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["encode", "--D", "many"])
        assert exc.value.code == 2


def test_filter_command(tmp_path):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 12, 12))
    guide = rng.uniform(size=(3, 12, 12))
    volume.save_volume(tmp_path / "l.pfm", logits.astype(np.float32), depths=[1.0, 2.0, 3.0])
    imageio.write_pfm_stack(tmp_path / "g.pfm", guide.astype(np.float32))
    assert main(["filter", "--logits", str(tmp_path / "l.pfm"), "--guide", str(tmp_path / "g.pfm"),
                 "--out", str(tmp_path / "o.pfm"), "--filter-radius", "2", "--filter-eps", "1e-3"]) == 0
    got, depths = volume.load_volume(tmp_path / "o.pfm")
    expected = volume.guided_filter(logits.astype(np.float32).astype(np.float64),
                                    guide.astype(np.float32).astype(np.float64), 2, 1e-3)
    np.testing.assert_allclose(got, expected, atol=1e-5)
    assert depths.tolist() == [1.0, 2.0, 3.0]


class TestTrainInferEval:
    def test_train_log_and_decrease(self, dataset, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        assert main(["train", "--data", str(dataset), "--checkpoint", str(ckpt), "--steps", "40", "--lr", "0.01",
                     "--momentum", "0.9", *SMALL_NET]) == 0
        rows = (tmp_path / "m.ckpt.log.csv").read_text().splitlines()
        assert len(rows) == 41
        totals = [float(r.split(",")[4]) for r in rows[1:]]
        assert totals[-1] < totals[0]
        assert (tmp_path / "m.ckpt.cfg").exists()

    def test_zero_steps_writes_initial(self, dataset, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        assert main(["train", "--data", str(dataset), "--checkpoint", str(ckpt), "--steps", "0", *SMALL_NET]) == 0
        config = network.ToyPRNetConfig(D=4, base_channels=4, encoder_depth=2, filter_radius=2)
        init = network.params_to_arrays(network.init_params(config))
        saved = ad.load_checkpoint(ckpt)
        assert all(saved[k].tobytes() == v.tobytes() for k, v in init.items())

    def test_divergence_exit(self, dataset, tmp_path):
        with np.errstate(all="ignore"):
            code = main(["train", "--data", str(dataset), "--checkpoint", str(tmp_path / "m.ckpt"),
                         "--steps", "20", "--lr", "1e12", *SMALL_NET])
        assert code == 4

    def test_size_mismatch(self, dataset, tmp_path):
        # 16x16 is not divisible by 2^5
        assert main(["train", "--data", str(dataset), "--checkpoint", str(tmp_path / "m.ckpt"), "--steps", "1",
                     "--encoder-depth", "5"]) == 3

    def test_infer_and_eval(self, dataset, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        assert main(["train", "--data", str(dataset), "--checkpoint", str(ckpt), "--steps", "2", *SMALL_NET]) == 0
        out = tmp_path / "pred"
        for scene in ("scene_0000", "scene_0001"):
            assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(dataset / scene),
                         "--out", str(out / scene)]) == 0
        files = sorted(p.name for p in (out / "scene_0000").iterdir())
        assert files == ["conf.pfm", "depth.pfm", "plane.pgm"]
        depth = imageio.read_pfm(out / "scene_0000" / "depth.pfm")
        plane = imageio.read_pgm(out / "scene_0000" / "plane.pgm")
        conf = imageio.read_pfm(out / "scene_0000" / "conf.pfm")
        assert depth.shape == plane.shape == conf.shape == (16, 16)
        assert plane.dtype == np.uint16 and plane.min() >= 1 and plane.max() <= 4

        report_a, report_b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["eval", "--gt-dir", str(dataset), "--pred-dir", str(out), "--report", str(report_a)]) == 0
        assert main(["eval", "--gt-dir", str(dataset), "--checkpoint", str(ckpt), "--data", str(dataset),
                     "--report", str(report_b)]) == 0
        # depth files hold float32, the in-memory path keeps float64
        rows_a, rows_b = (np.loadtxt(p, delimiter=",", skiprows=1, usecols=range(1, 10)) for p in (report_a, report_b))
        np.testing.assert_allclose(rows_a, rows_b, rtol=1e-6)

    def test_infer_config_mismatch(self, dataset, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        assert main(["train", "--data", str(dataset), "--checkpoint", str(ckpt), "--steps", "0", *SMALL_NET]) == 0
        assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(dataset / "scene_0000"),
                     "--out", str(tmp_path / "o"), "--base-channels", "8"]) == 3


class TestEval:
    def _fixture(self, root, values):
        path = root / "scene_0000"
        path.mkdir(parents=True)
        imageio.write_pfm(path / "depth.pfm", np.array([values], dtype=np.float32))

    def test_identical_dirs(self, dataset, tmp_path):
        report = tmp_path / "r.csv"
        assert main(["eval", "--gt-dir", str(dataset), "--pred-dir", str(dataset), "--report", str(report)]) == 0
        last = report.read_text().splitlines()[-1].split(",")
        assert last[0] == "all" and [float(v) for v in last[1:6]] == [0.0] * 5

    def test_two_pixel_fixture(self, tmp_path):
        self._fixture(tmp_path / "gt", [2.0, 2.0])
        self._fixture(tmp_path / "pred", [1.0, 3.0])
        report = tmp_path / "r.csv"
        assert main(["eval", "--gt-dir", str(tmp_path / "gt"), "--pred-dir", str(tmp_path / "pred"),
                     "--report", str(report), "--inverse-unit", "1/km"]) == 0
        header, row, _ = report.read_text().splitlines()
        values = dict(zip(header.split(","), row.split(",")))
        assert float(values["rmse"]) == 1.0 and float(values["mae"]) == 1.0 and float(values["rel"]) == 0.5
        # |1/1 - 1/2| and |1/3 - 1/2| in 1/km
        assert float(values["imae"]) == pytest.approx(1000 * (0.5 + 1 / 6) / 2)

    def test_needs_one_source(self, dataset, tmp_path):
        assert main(["eval", "--gt-dir", str(dataset), "--report", str(tmp_path / "r.csv")]) == 2

    def test_shape_mismatch(self, tmp_path):
        self._fixture(tmp_path / "gt", [2.0, 2.0])
        self._fixture(tmp_path / "pred", [1.0, 3.0, 4.0])
        assert main(["eval", "--gt-dir", str(tmp_path / "gt"), "--pred-dir", str(tmp_path / "pred"),
                     "--report", str(tmp_path / "r.csv")]) == 3
