import dataclasses
import sys
import time
from unittest import mock

import numpy as np
import pytest
from testfixtures import compare

from nikrecon import __main__ as cli
from nikrecon import nik, pipeline, storage
from nikrecon.experiment import resolve_config
from nikrecon.navigator import NavigatorSource
from nikrecon.simulator import PHANTOMS, coil_maps_analytic, phantom_image
from nikrecon.utils import ConfigError, DataError


def _with(cfg, section, **changes):
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})


def test_simulate_writes_dataset_and_truth(tiny_cfg):
    path = pipeline.run_simulate(tiny_cfg)

    compare(path, expected=tiny_cfg.output_dir / "dataset.nkd")
    ds = storage.load_dataset(path)
    compare(ds.meta.n_spokes, expected=24)
    compare(ds.coils.n_coils, expected=2)
    assert not (tiny_cfg.output_dir / "reference.nkd").exists()

    frames = sorted(p.name for p in (tiny_cfg.output_dir / "truth").iterdir())
    compare(frames, expected=["frame_000.png", "frame_001.png", "frame_002.png"])

    rerun = resolve_config(tiny_cfg.output_dir / "config.toml")
    compare(rerun.simulator, expected=tiny_cfg.simulator)


def test_simulate_undersampled_keeps_reference(tiny_cfg):
    cfg = _with(tiny_cfg, "simulator", undersample=2.0)
    path = pipeline.run_simulate(cfg)

    compare(storage.load_dataset(path).meta.n_spokes, expected=12)
    reference = storage.load_dataset(cfg.output_dir / "reference.nkd")
    compare(reference.meta.n_spokes, expected=24)


def test_navigator_csv(tiny_cfg, tmp_path):
    path = pipeline.run_simulate(tiny_cfg)
    cfg = dataclasses.replace(tiny_cfg, output_dir=tmp_path / "navigator")
    nav = pipeline.run_navigator(cfg, path)

    lines = (cfg.output_dir / "navigator.csv").read_text().splitlines()
    compare(lines[0], expected="spoke,nav,true_nav")
    compare(len(lines), expected=len(nav) + 1)
    compare(nav.source, expected=NavigatorSource.self)
    rerun = resolve_config(cfg.output_dir / "config.toml")
    compare(rerun.navigator, expected=tiny_cfg.navigator)


def test_recon_inufft_outputs(tiny_cfg):
    path = pipeline.run_simulate(tiny_cfg)
    out = pipeline.run_recon(tiny_cfg, "inufft", path)

    compare(out, expected=tiny_cfg.output_dir / "inufft")
    compare(storage.read_complex(out / "images.npy").shape, expected=(2, 16, 16))
    assert (out / "state_00.png").exists()
    assert (out / "state_01.png").exists()
    assert (out / "config.toml").exists()

    recon = storage.read_json(out / "recon.json")
    compare(
        sorted(recon),
        expected=[
            "config_hash",
            "line_search_failed",
            "method",
            "n_states",
            "nav_ranges",
            "navigator",
            "query_navs",
            "reference_navs",
        ],
    )
    compare(recon["method"], expected="inufft")
    compare(recon["n_states"], expected=2)
    compare(recon["navigator"]["source"], expected="self")
    assert recon["reference_navs"][0] > recon["reference_navs"][1]


def test_recon_unknown_method_fails_before_loading(tiny_cfg):
    with pytest.raises(ConfigError, match="Unsupported reconstruction method"):
        pipeline.run_recon(tiny_cfg, "grasp", tiny_cfg.output_dir / "missing.nkd")


def test_recon_nik_then_iconik(tiny_cfg):
    path = pipeline.run_simulate(tiny_cfg)
    pipeline.run_recon(tiny_cfg, "nik", path)

    with mock.patch("nikrecon.methods.iconik.train_and_save") as train:
        out = pipeline.run_recon(tiny_cfg, "iconik", path)

    train.assert_not_called()
    assert (out / "iconik.ckpt").exists()
    compare(storage.read_complex(out / "images.npy").shape, expected=(2, 16, 16))


def test_eval_scores_every_reconstruction(tiny_cfg):
    path = pipeline.run_simulate(tiny_cfg)
    for method in ("inufft", "xdgrasp"):
        pipeline.run_recon(tiny_cfg, method, path)

    rows = pipeline.run_eval(tiny_cfg, tiny_cfg.output_dir)

    compare([r["method"] for r in rows], expected=["inufft", "xdgrasp"])
    for row in rows:
        assert 0 < row["nrmse"]
        assert row["ssim"] <= 1

    lines = (tiny_cfg.output_dir / "metrics.csv").read_text().splitlines()
    compare(lines[0], expected="method,ssim,psnr,nrmse")
    summary = storage.read_json(tiny_cfg.output_dir / "metrics.json")
    compare(summary["state"], expected=0)
    compare(summary["reference"], expected="truth")
    compare([r["method"] for r in summary["reports"]], expected=["inufft", "xdgrasp"])


def test_eval_truth_against_itself(tiny_cfg):
    path = pipeline.run_simulate(tiny_cfg)
    out = pipeline.run_recon(tiny_cfg, "inufft", path)

    recon = storage.read_json(out / "recon.json")
    sim = tiny_cfg.simulator
    phantom = PHANTOMS[sim.phantom]()
    truth = np.stack(
        [phantom_image(phantom, nav, sim.n_fe, sim.n_fe) for nav in recon["reference_navs"]]
    )
    storage.write_complex(truth, out / "images.npy")

    (row,) = pipeline.run_eval(tiny_cfg, tiny_cfg.output_dir)

    compare(row["nrmse"], expected=0.0)
    assert row["ssim"] == pytest.approx(1.0)


def test_eval_gated_reference(tiny_cfg):
    cfg = _with(tiny_cfg, "evaluation", reference="gated")
    path = pipeline.run_simulate(cfg)
    pipeline.run_recon(cfg, "inufft", path)

    with pytest.raises(DataError, match="gated reference needs --dataset"):
        pipeline.run_eval(cfg, cfg.output_dir)

    # fully sampled, so the gated reference is the inufft reconstruction itself
    (row,) = pipeline.run_eval(cfg, cfg.output_dir, path)
    assert row["nrmse"] < 1e-12


def test_eval_gated_reference_needs_coil_maps(tiny_cfg):
    cfg = _with(tiny_cfg, "evaluation", reference="gated")
    path = pipeline.run_simulate(cfg)
    pipeline.run_recon(cfg, "inufft", path)

    bare = cfg.output_dir / "bare" / "dataset.nkd"
    bare.parent.mkdir()
    storage.save_dataset(dataclasses.replace(storage.load_dataset(path), coils=None), bare)

    with pytest.raises(DataError, match="no coil maps for the gated reference"):
        pipeline.run_eval(cfg, cfg.output_dir, bare)


def test_eval_aggregates_seeds(tiny_config_file, tmp_path):
    runs = []
    for seed in (1, 2):
        cfg = resolve_config(
            tiny_config_file, profile="desk", seed=seed, out=tmp_path / f"seed_{seed}"
        )
        path = pipeline.run_simulate(cfg)
        pipeline.run_recon(cfg, "inufft", path)
        runs.append(cfg.output_dir)

    cfg = resolve_config(tiny_config_file, profile="desk", out=tmp_path / "summary")
    (row,) = pipeline.run_eval_seeds(cfg, runs)

    compare(row["method"], expected="inufft")
    compare(row["n"], expected=2)
    per_seed = [storage.read_json(run / "metrics.json")["reports"][0]["psnr"] for run in runs]
    assert row["psnr_mean"] == pytest.approx(np.mean(per_seed))
    assert row["psnr_std"] == pytest.approx(np.std(per_seed))

    lines = (tmp_path / "summary" / "metrics_summary.csv").read_text().splitlines()
    compare(lines[0].split(",")[:2], expected=["method", "n"])
    summary = storage.read_json(tmp_path / "summary" / "metrics_summary.json")
    compare(summary["runs"], expected=[str(run) for run in runs])
    assert (tmp_path / "summary" / "config.toml").exists()

    with pytest.raises(DataError, match="no reconstruction directories"):
        pipeline.run_eval_seeds(cfg, [])


def test_eval_without_reconstructions(tiny_cfg):
    tiny_cfg.output_dir.mkdir(parents=True)
    with pytest.raises(DataError, match="no reconstructions found"):
        pipeline.run_eval(tiny_cfg, tiny_cfg.output_dir)


def test_eval_state_out_of_range(tiny_cfg):
    path = pipeline.run_simulate(tiny_cfg)
    pipeline.run_recon(tiny_cfg, "inufft", path)

    with pytest.raises(DataError, match="no motion state 5"):
        pipeline.run_eval(_with(tiny_cfg, "evaluation", state=5), tiny_cfg.output_dir)


def test_animate_frames(tiny_cfg, tmp_path):
    path = pipeline.run_simulate(tiny_cfg)
    out = pipeline.run_recon(tiny_cfg, "nik", path)

    frames = pipeline.run_animate(tiny_cfg, out / "nik.ckpt", 4, tmp_path / "frames")
    compare([p.name for p in frames], expected=[f"frame_{i:03d}.png" for i in range(4)])
    rerun = resolve_config(tmp_path / "frames" / "config.toml")
    compare(rerun.nik, expected=tiny_cfg.nik)

    (first,) = pipeline.run_animate(tiny_cfg, out / "nik.ckpt", 1, tmp_path / "first")
    (again,) = pipeline.run_animate(tiny_cfg, out / "nik.ckpt", 1, tmp_path / "again")
    compare(again.read_bytes(), expected=first.read_bytes())

    with pytest.raises(DataError, match="n_states must be at least 1"):
        pipeline.run_animate(tiny_cfg, out / "nik.ckpt", 0, tmp_path / "none")


def _full_run(cfg):
    path = pipeline.run_simulate(cfg)
    for method in cfg.evaluation.methods:
        pipeline.run_recon(cfg, method, path)
    pipeline.run_eval(cfg, cfg.output_dir)
    return (cfg.output_dir / "metrics.csv").read_text()


def test_runs_are_repeatable(tiny_config_file, tmp_path):
    first = _full_run(resolve_config(tiny_config_file, profile="desk", out=tmp_path / "a"))
    second = _full_run(resolve_config(tiny_config_file, profile="desk", out=tmp_path / "b"))

    compare(second, expected=first)
    compare(len(first.splitlines()), expected=5)


def _cli(*argv):
    with mock.patch.object(sys, "argv", ["nikrecon", *argv]), mock.patch(
        "nikrecon.config.FORMAT", "json"
    ):
        cli.main()


def test_cli_end_to_end(tiny_config_file, tmp_path):
    out = tmp_path / "cli"
    common = ["--profile", "desk", "--config", str(tiny_config_file), "--out", str(out)]

    _cli("simulate", *common)
    _cli("navigator", "--dataset", str(out / "dataset.nkd"), *common)
    _cli("recon", "--method", "inufft", "--dataset", str(out / "dataset.nkd"), *common)
    _cli("eval", "--recon-dir", str(out), "--profile", "desk", "--config", str(tiny_config_file))

    assert (out / "navigator.csv").exists()
    assert (out / "metrics.csv").exists()


def test_cli_eval_over_seeds(tiny_config_file, tmp_path):
    config = ["--profile", "desk", "--config", str(tiny_config_file)]
    for seed in ("1", "2"):
        out = str(tmp_path / f"seed_{seed}")
        _cli("simulate", *config, "--seed", seed, "--out", out)
        dataset = f"{out}/dataset.nkd"
        _cli("recon", "--method", "inufft", "--dataset", dataset, *config, "--out", out)

    _cli(
        "eval",
        "--recon-dir",
        str(tmp_path / "seed_1"),
        "--recon-dir",
        str(tmp_path / "seed_2"),
        "--out",
        str(tmp_path / "summary"),
        *config,
    )

    summary = storage.read_json(tmp_path / "summary" / "metrics_summary.json")
    compare([row["n"] for row in summary["summary"]], expected=[2])


def test_cli_animate_reuses_training_config(tiny_config_file, tmp_path):
    out = tmp_path / "cli"
    common = ["--profile", "desk", "--config", str(tiny_config_file), "--out", str(out)]
    _cli("simulate", *common)
    _cli("recon", "--method", "nik", "--dataset", str(out / "dataset.nkd"), *common)

    movie = tmp_path / "movie"
    checkpoint = str(out / "nik" / "nik.ckpt")
    _cli("animate", "--checkpoint", checkpoint, "--n-states", "2", "--out", str(movie))

    compare(
        sorted(p.name for p in movie.iterdir()),
        expected=["config.toml", "frame_000.png", "frame_001.png"],
    )
    compare(
        resolve_config(movie / "config.toml").nik_train,
        expected=resolve_config(out / "nik" / "config.toml").nik_train,
    )


def test_cli_unknown_method_exits_with_config_code(tiny_config_file, tmp_path):
    with pytest.raises(SystemExit) as exc:
        _cli(
            "recon",
            "--method",
            "sense",
            "--dataset",
            str(tmp_path / "dataset.nkd"),
            "--config",
            str(tiny_config_file),
        )

    compare(exc.value.code, expected=2)


@pytest.mark.slow
def test_desk_simulation_keeps_full_reference(tmp_path):
    cfg = resolve_config(profile="desk", out=tmp_path / "desk")
    path = pipeline.run_simulate(cfg)

    compare(storage.load_dataset(path).meta.n_spokes, expected=200)
    reference = storage.load_dataset(cfg.output_dir / "reference.nkd")
    compare(reference.meta.n_spokes, expected=600)
    compare(reference.meta.n_fe, expected=128)


@pytest.mark.slow
def test_desk_experiment_ranks_methods(tmp_path):
    cfg = resolve_config(profile="desk", out=tmp_path / "desk")
    path = pipeline.run_simulate(cfg)
    for method in ("xdgrasp", "nik", "iconik"):
        pipeline.run_recon(cfg, method, path)

    rows = {r["method"]: r for r in pipeline.run_eval(cfg, cfg.output_dir)}

    assert rows["nik"]["psnr"] > rows["xdgrasp"]["psnr"]
    assert rows["iconik"]["ssim"] >= rows["nik"]["ssim"] - 0.02
    assert rows["iconik"]["nrmse"] <= rows["nik"]["nrmse"] + 0.02

    nik_images = storage.read_complex(cfg.output_dir / "nik" / "images.npy")
    ico_images = storage.read_complex(cfg.output_dir / "iconik" / "images.npy")
    assert np.linalg.norm(ico_images - nik_images) > 1e-4 * np.linalg.norm(nik_images)


@pytest.mark.slow
def test_animate_desk_throughput(tmp_path):
    cfg = resolve_config(profile="desk")
    sim = cfg.simulator
    ckpt = storage.Checkpoint(
        nik=nik.init_model(cfg.nik, sim.n_coils, seed=0),
        coils=coil_maps_analytic(sim.n_coils, sim.n_fe, sim.n_fe),
    )
    storage.save_checkpoint(ckpt, tmp_path / "nik.ckpt")

    started = time.perf_counter()
    frames = pipeline.run_animate(cfg, tmp_path / "nik.ckpt", 20, tmp_path / "frames")

    compare(len(frames), expected=20)
    assert time.perf_counter() - started < 60
