import json
import shutil

import numpy as np
import pytest

from gsavatar import bodymodel as bm
from gsavatar.avatar import FramePose, GaussianSet, articulate, init_from_model
from gsavatar.cli import EXIT_INVALID, EXIT_OK, main
from gsavatar.pipeline import (PSNR_CAP, Adam, DatasetError, NumericalError, TrainConfig, evaluate, load_avatar,
                               load_config, load_dataset, make_synthetic_fixture, parse_overrides, psnr, region_boxes,
                               render_avatar, render_novel, save_avatar, synthetic_pose, train)
from gsavatar.rasterizer import Camera


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    make_synthetic_fixture(root, seed=3, n_train=3, n_test=2, size=32)
    return root


@pytest.fixture(scope="module")
def model(fixture_dir):
    return bm.load_model(fixture_dir / "model.json")


class TestDataset:
    def test_loads_sorted(self, fixture_dir, model):
        ds = load_dataset(fixture_dir, "train", model)
        names = [f.name for f in ds.frames]
        assert names == sorted(names) and len(ds) == 3
        assert ds.resolution == (32, 32)
        assert ds.load_image(0).shape == (32, 32, 3)
        assert ds.load_mask(0).shape == (32, 32)
        assert ds.frames[0].detections is not None

    def test_test_split(self, fixture_dir):
        assert len(load_dataset(fixture_dir, "test")) == 2

    def test_unknown_split(self, fixture_dir):
        with pytest.raises(DatasetError):
            load_dataset(fixture_dir, "val")

    def test_missing_mask_named(self, fixture_dir, tmp_path):
        root = tmp_path / "ds"
        shutil.copytree(fixture_dir, root)
        victim = sorted((root / "masks").glob("*.png"))[1]
        victim.unlink()
        with pytest.raises(DatasetError) as info:
            load_dataset(root, "train")
        assert any(victim.name in p and "masks" in p for p in info.value.problems)

    def test_missing_camera(self, tmp_path):
        with pytest.raises(DatasetError, match="camera.json"):
            load_dataset(tmp_path)

    def test_pose_size_checked(self, fixture_dir, tmp_path, model):
        root = tmp_path / "ds"
        shutil.copytree(fixture_dir, root)
        p = sorted((root / "poses").glob("*.json"))[0]
        data = json.loads(p.read_text())
        data["theta"] = data["theta"][:-3]
        p.write_text(json.dumps(data))
        with pytest.raises(DatasetError, match="theta"):
            load_dataset(root, "train", model)


class TestMetrics:
    def test_identical_capped(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(img, img) == PSNR_CAP

    def test_uniform_residual(self):
        a = np.zeros((6, 6, 3))
        assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)

    def test_mse_oracle(self, rng):
        a, b = rng.uniform(size=(2, 9, 7, 3))
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)


class TestRegions:
    def test_hand_inside_full(self, model, rng):
        cam = Camera(160.0, 160.0, 64.0, 64.0, 128, 128)
        pose = synthetic_pose(rng, model)
        boxes = region_boxes(model, pose, cam)
        fx0, fy0, fx1, fy1 = boxes.boxes["full"]
        for region in ("hand", "face"):
            x0, y0, x1, y1 = boxes.boxes[region]
            assert not boxes.empty[region]
            assert fx0 <= x0 < x1 <= fx1 and fy0 <= y0 < y1 <= fy1

    def test_padding_monotone(self, model, rng):
        cam = Camera(160.0, 160.0, 64.0, 64.0, 128, 128)
        pose = synthetic_pose(rng, model)
        prev = None
        for pad in (0.0, 0.1, 0.3):
            x0, y0, x1, y1 = region_boxes(model, pose, cam, pad).boxes["hand"]
            if prev is not None:
                assert x0 <= prev[0] and y0 <= prev[1] and x1 >= prev[2] and y1 >= prev[3]
            prev = (x0, y0, x1, y1)

    def test_off_screen_flagged(self, model, rng):
        cam = Camera(160.0, 160.0, 64.0, 64.0, 128, 128)
        pose = synthetic_pose(rng, model)
        pose.translation = pose.translation + [50.0, 0, 0]
        boxes = region_boxes(model, pose, cam)
        assert all(boxes.empty.values())
        assert boxes.crop(np.zeros((128, 128, 3)), "hand").size == 0


class TestRendering:
    def test_repeatable(self, fixture_dir, model):
        ds = load_dataset(fixture_dir)
        gt, _ = load_avatar(fixture_dir / "gt_avatar")
        a, _, _ = render_avatar(gt, model, ds.load_pose(0), ds.camera)
        b, _, _ = render_avatar(gt, model, ds.load_pose(0), ds.camera)
        np.testing.assert_array_equal(a.color, b.color)
        # the stored frame is the 8-bit quantisation of this render
        assert np.max(np.abs(a.color - ds.load_image(0))) <= 0.5 / 255 + 1e-12

    def test_rear_camera(self, fixture_dir, model):
        ds = load_dataset(fixture_dir)
        gt, _ = load_avatar(fixture_dir / "gt_avatar")
        pose = ds.load_pose(0)
        rot = np.diag([-1.0, 1.0, -1.0])
        center = pose.translation + np.array([0.35, 0.0, 1.3])
        cam = Camera(ds.camera.fx, ds.camera.fy, ds.camera.cx, ds.camera.cy, 32, 32, rotation=rot,
                     translation=-rot @ center)
        out, _, _ = render_avatar(gt, model, pose, cam)
        assert out.alpha.max() > 0.5

    def test_rest_pose_is_canonical(self, model):
        av = init_from_model(model, sh_degree=0)
        art = articulate(av, model, FramePose.rest(model))
        np.testing.assert_allclose(art.means, av.gaussians.centers, atol=1e-12)

    def test_render_novel_writes(self, fixture_dir, model, tmp_path):
        ds = load_dataset(fixture_dir, "test")
        gt, _ = load_avatar(fixture_dir / "gt_avatar")
        outs = render_novel(gt, model, [ds.load_pose(0)], ds.camera, tmp_path, ["x"])
        assert len(outs) == 1
        assert {p.name for p in tmp_path.iterdir()} == {"x.png", "x_alpha.png", "x_depth.gsd"}

    def test_render_novel_bad_pose(self, fixture_dir, model):
        gt, _ = load_avatar(fixture_dir / "gt_avatar")
        bad = FramePose(np.zeros(3), np.zeros(model.num_betas), np.zeros(model.num_expressions), np.zeros(3))
        with pytest.raises(ValueError, match="theta"):
            render_novel(gt, model, [bad], Camera(10, 10, 4, 4, 8, 8))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.iterations, c.densify_start, c.densify_end) == (2000, 400, 1000)

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\niterations = 50\nadaptive_density = false\nlr_sh = 1e-3  # inline\n")
        c = load_config(p, ["iterations=7"])
        assert c.iterations == 7 and c.adaptive_density is False and c.lr_sh == 1e-3

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            parse_overrides(["bogus=1"])

    def test_bad_bool(self):
        with pytest.raises(ValueError):
            parse_overrides(["adaptive_density=maybe"])

    def test_bad_window(self):
        with pytest.raises(ValueError):
            TrainConfig(densify_start=500, densify_end=400)


class TestArchive:
    def test_round_trip(self, model, tmp_path):
        av = init_from_model(model, sh_degree=2, seed=4)
        save_avatar(tmp_path / "a", av)
        back, conf = load_avatar(tmp_path / "a")
        assert conf is None
        for f in GaussianSet.FIELDS:
            np.testing.assert_array_equal(getattr(back.gaussians, f), getattr(av.gaussians, f))
        for n1, n2 in ((av.lbs_net, back.lbs_net), (av.pose_net, back.pose_net)):
            for a, b in zip(n1.params(), n2.params()):
                np.testing.assert_array_equal(a, b)
        save_avatar(tmp_path / "b", back)
        for p in sorted((tmp_path / "a").iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_not_an_archive(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_avatar(tmp_path)


class TestAdam:
    def test_first_step_is_lr_sign(self):
        opt = Adam()
        p = np.array([1.0, -2.0, 0.5])
        opt.tick()
        opt.step("p", p, np.array([3.0, -0.1, 0.0]), 0.01)
        np.testing.assert_allclose(p, [0.99, -1.99, 0.5], atol=1e-12)

    def test_remap(self):
        opt = Adam()
        p = np.ones((3, 2))
        opt.tick()
        opt.step("p", p, np.full((3, 2), 2.0), 0.1)
        m = opt.m["p"].copy()
        opt.remap(["p"], np.array([2, 0, 0]), np.array([False, False, True]))
        np.testing.assert_array_equal(opt.m["p"][:2], m[[2, 0]])
        assert np.all(opt.m["p"][2] == 0) and np.all(opt.v["p"][2] == 0)


class TestTrain:
    def test_zero_iterations_is_init(self, fixture_dir, model):
        ds = load_dataset(fixture_dir)
        res = train(ds, model, TrainConfig(iterations=0, sh_degree=1, seed=5))
        ref = init_from_model(model, sh_degree=1, beta=ds.load_pose(0).beta, seed=5)
        for f in GaussianSet.FIELDS:
            np.testing.assert_array_equal(getattr(res.avatar.gaussians, f), getattr(ref.gaussians, f))
        assert res.losses == []

    def test_short_run_reduces_loss(self, fixture_dir, model, tmp_path):
        ds = load_dataset(fixture_dir)
        cfg = TrainConfig(iterations=60, densify_start=20, densify_end=50, densify_interval=10, sh_degree=1)
        res = train(ds, model, cfg, tmp_path)
        assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])
        assert (tmp_path / "avatar" / "manifest.json").is_file()
        assert (tmp_path / "train_log.csv").read_text().startswith("iteration,frame,loss")
        header = (tmp_path / "densify_log.csv").read_text().splitlines()[0]
        assert header == "step,part,splits,clones,prunes,live"
        assert res.gaussian_counts[-1] == len(res.avatar.gaussians)

    def test_non_finite_raises(self, fixture_dir, model, tmp_path):
        ds = load_dataset(fixture_dir)
        av = init_from_model(model, sh_degree=0)
        av.gaussians.sh[0, 0, 0] = np.nan
        with pytest.raises(NumericalError) as info:
            train(ds, model, TrainConfig(iterations=3, sh_degree=0), tmp_path, avatar=av)
        assert info.value.frame is not None
        assert (info.value.checkpoint / "manifest.json").is_file()

    def test_evaluate(self, fixture_dir, model, tmp_path):
        gt, _ = load_avatar(fixture_dir / "gt_avatar")
        res = evaluate(gt, model, load_dataset(fixture_dir, "test"))
        assert res.summary["full"]["psnr"] > 45 and res.summary["full"]["frames"] == 2
        res.write_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "frame,region,psnr,ssim" and lines[-1].startswith("mean,")


class TestCli:
    def test_synth_and_eval(self, tmp_path, capsys):
        d = tmp_path / "s"
        assert main(["synth", str(d), "--train-frames", "1", "--test-frames", "1", "--size", "32"]) == EXIT_OK
        rc = main(["eval", str(d), "--avatar", str(d / "gt_avatar"), "--model", str(d / "model.json"),
                   "--out", str(tmp_path / "m.csv")])
        assert rc == EXIT_OK and "PSNR" in capsys.readouterr().out

    def test_invalid_dataset(self, tmp_path, fixture_dir, capsys):
        rc = main(["train", str(tmp_path), "--model", str(fixture_dir / "model.json"), "--out", str(tmp_path / "o")])
        assert rc == EXIT_INVALID
        assert "camera.json" in capsys.readouterr().err

    def test_fit(self, fixture_dir, tmp_path):
        rc = main(["fit", str(fixture_dir / "detections"), "--model", str(fixture_dir / "model.json"),
                   "--out", str(tmp_path)])
        assert rc == EXIT_OK
        report = json.loads((tmp_path / "fit_report.json").read_text())
        assert len(report["frames"]) == 5
