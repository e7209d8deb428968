"""
Commands running the reconstruction experiment end to end.
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import invoke
import numpy as np

from nikrecon import metrics, navigator, nik, storage, utils
from nikrecon.classic import DynamicImage, inufft_recon
from nikrecon.experiment import ExperimentConfig, config_hash, resolve_config, write_resolved
from nikrecon.geometry import golden_angle_trajectory
from nikrecon.ico import iconik_infer
from nikrecon.methods import ReconContext, get_method, method_names
from nikrecon.simulator import (
    PHANTOMS,
    KSpaceDataset,
    center_magnitude,
    coil_maps_analytic,
    ground_truth_states,
    retrospective_undersample,
    simulate_acquisition,
)
from nikrecon.utils import ConfigError, DataError

LOG = logging.getLogger(__name__)

DATASET_NAME = "dataset.nkd"
REFERENCE_NAME = "reference.nkd"

CONFIG_HELP = {
    "config": "TOML file merged over the profile",
    "profile": "built-in profile: desk or paper",
}
SEED_HELP = {"seed": "seed for simulation and training"}


def _config(config=None, profile=None, seed=None, out=None) -> ExperimentConfig:
    return resolve_config(
        path=Path(config) if config else None,
        profile=profile,
        seed=int(seed) if seed is not None else None,
        out=Path(out) if out else None,
    )


def run_simulate(cfg: ExperimentConfig) -> Path:
    """
    Simulates the acquisition and writes the dataset, the fully sampled
    reference (when undersampling) and ground-truth frames.
    """
    sim = cfg.simulator
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)

    phantom = PHANTOMS[sim.phantom]()
    coils = coil_maps_analytic(sim.n_coils, sim.n_fe, sim.n_fe)
    traj = golden_angle_trajectory(sim.n_spokes, sim.n_fe)
    noise_std = sim.relative_noise * center_magnitude(phantom, coils)

    full = simulate_acquisition(phantom, cfg.motion, coils, traj, noise_std, sim.seed)
    ds = full
    if sim.undersample > 1:
        ds = retrospective_undersample(full, sim.undersample)
        storage.save_dataset(full, out / REFERENCE_NAME)

    path = out / DATASET_NAME
    storage.save_dataset(ds, path)

    truth_dir = out / "truth"
    truth_dir.mkdir(exist_ok=True)
    lo, hi = float(ds.meta.true_nav.min()), float(ds.meta.true_nav.max())
    navs = np.linspace(hi, lo, cfg.evaluation.n_states)
    frames = ground_truth_states(phantom, navs, sim.n_fe, sim.n_fe)
    window = storage.magnitude_window(frames)
    for i, frame in enumerate(frames):
        storage.write_png(frame, truth_dir / f"frame_{i:03d}.png", window)

    write_resolved(cfg, out)
    return path


def load_navigator(cfg: ExperimentConfig, ds: KSpaceDataset) -> navigator.NavigatorSignal:
    if cfg.navigator.source == navigator.NavigatorSource.oracle:
        return navigator.oracle_navigator(ds)
    return navigator.extract_navigator(ds, cfg.navigator.smooth_window)


def run_navigator(cfg: ExperimentConfig, dataset: Path) -> navigator.NavigatorSignal:
    ds = storage.load_dataset(dataset)
    nav = load_navigator(cfg, ds)

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    navigator.write_navigator_csv(nav, cfg.output_dir / "navigator.csv", ds.spoke_ids)
    write_resolved(cfg, cfg.output_dir)
    return nav


def write_images(result: DynamicImage, out: Path) -> None:
    storage.write_complex(result.images, out / "images.npy")
    window = storage.magnitude_window(result.images)
    for i, image in enumerate(result.images):
        storage.write_png(image, out / f"state_{i:02d}.png", window)


def run_recon(
    cfg: ExperimentConfig,
    method: str,
    dataset: Path,
    checkpoint: Optional[Path] = None,
) -> Path:
    """
    Reconstructs every motion bin with `method` into `<out>/<method>/`.
    """
    reconstructor = get_method(method, cfg)
    ds = storage.load_dataset(dataset)
    if ds.coils is None:
        raise DataError(f"{dataset} carries no coil maps")

    nav = load_navigator(cfg, ds)
    ds_nav = navigator.with_navigator(ds, nav)
    bins = navigator.bin_by_navigator(ds_nav, nav, cfg.navigator.n_bins)

    out = cfg.output_dir / method
    out.mkdir(parents=True, exist_ok=True)
    ctx = ReconContext(
        cfg=cfg,
        dataset=ds_nav,
        navigator=nav,
        bins=bins,
        coils=ds.coils,
        out_dir=out,
        checkpoint=checkpoint,
    )

    utils.alert(f"Reconstructing {len(bins)} motion states with {method}\n")
    result = reconstructor.reconstruct(ctx)
    write_images(result, out)

    reference_navs = None
    if ds.meta.true_nav is not None:
        positions = navigator.bin_spokes(nav, cfg.navigator.n_bins)
        reference_navs = [float(np.mean(ds.meta.true_nav[p])) for p in positions]

    storage.write_json(
        {
            "method": method,
            "config_hash": result.config_hash or config_hash(cfg.resolved),
            "n_states": result.n_states,
            "nav_ranges": [list(r) for r in result.nav_ranges],
            "query_navs": ctx.query_navs,
            "reference_navs": reference_navs,
            "navigator": {
                "source": nav.source,
                "sign_flipped": nav.sign_flipped,
                "correlation": nav.correlation(),
            },
            "line_search_failed": result.line_search_failed,
        },
        out / "recon.json",
    )
    write_resolved(cfg, out)
    return out


def _report_row(report: metrics.MetricReport) -> Dict[str, Any]:
    return {
        "method": report.method,
        "ssim": report.ssim,
        "psnr": report.psnr,
        "nrmse": report.nrmse,
    }


def _reference_images(
    cfg: ExperimentConfig, recon: Dict[str, Any], dataset: Optional[Path]
) -> np.ndarray:
    sim = cfg.simulator
    if cfg.evaluation.reference == "truth":
        navs = recon.get("reference_navs")
        if not navs:
            raise DataError("no ground-truth navigator available for the reference")
        phantom = PHANTOMS[sim.phantom]()
        return ground_truth_states(phantom, navs, sim.n_fe, sim.n_fe)

    if dataset is None:
        raise DataError("a gated reference needs --dataset")

    reference = dataset.parent / REFERENCE_NAME
    source = reference if reference.exists() else dataset
    ds = storage.load_dataset(source)
    if ds.coils is None:
        raise DataError(f"{source} carries no coil maps for the gated reference")

    nav = load_navigator(cfg, ds)
    bins = navigator.bin_by_navigator(ds, nav, cfg.navigator.n_bins)
    return inufft_recon(bins, ds.coils).images


def run_eval(
    cfg: ExperimentConfig, recon_dir: Path, dataset: Optional[Path] = None
) -> List[Dict[str, Any]]:
    """
    Scores every reconstructed method at the evaluated motion state and
    writes `metrics.csv` and `metrics.json` into `recon_dir`.
    """
    return [_report_row(r) for r in score_reconstructions(cfg, recon_dir, dataset)]


def run_eval_seeds(
    cfg: ExperimentConfig, recon_dirs: Sequence[Path], dataset: Optional[Path] = None
) -> List[Dict[str, Any]]:
    """
    Scores one run per seed, then writes the mean and standard deviation of
    every metric to `metrics_summary.csv` and `.json` in the output directory.
    """
    if not recon_dirs:
        raise DataError("no reconstruction directories to aggregate")

    reports = []
    for recon_dir in recon_dirs:
        reports.extend(score_reconstructions(cfg, recon_dir, dataset))

    rows = metrics.aggregate(reports)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    storage.write_csv(rows, out / "metrics_summary.csv")
    storage.write_json(
        {"runs": [str(d) for d in recon_dirs], "state": cfg.evaluation.state, "summary": rows},
        out / "metrics_summary.json",
    )
    write_resolved(cfg, out)
    return rows


def score_reconstructions(
    cfg: ExperimentConfig, recon_dir: Path, dataset: Optional[Path] = None
) -> List[metrics.MetricReport]:
    state = cfg.evaluation.state
    reports = []
    references = None

    for method in cfg.evaluation.methods:
        method_dir = recon_dir / method
        if not (method_dir / "recon.json").exists():
            LOG.info(f"No {method} reconstruction in {recon_dir}")
            continue

        recon = storage.read_json(method_dir / "recon.json")
        images = storage.read_complex(method_dir / "images.npy")
        if references is None:
            references = _reference_images(cfg, recon, dataset)

        if state >= len(images) or state >= len(references):
            raise DataError(f"{method} has no motion state {state}")

        reports.append(metrics.evaluate(images[state], references[state], method, state))

    if not reports:
        raise DataError(f"no reconstructions found in {recon_dir}")

    rows = [_report_row(r) for r in reports]
    storage.write_csv(rows, recon_dir / "metrics.csv")
    storage.write_json(
        {
            "state": state,
            "reference": cfg.evaluation.reference,
            "reports": reports,
        },
        recon_dir / "metrics.json",
    )
    return reports


def run_animate(
    cfg: ExperimentConfig, checkpoint: Path, n_states: int, out: Path
) -> List[Path]:
    """
    Renders `n_states` frames spanning the navigator range seen in training,
    with one intensity window for all frames.
    """
    if n_states < 1:
        raise DataError(f"n_states must be at least 1, got {n_states}")

    ckpt = storage.load_checkpoint(checkpoint)
    if ckpt.coils is None:
        raise DataError(f"{checkpoint} carries no coil maps")

    lo, hi = ckpt.nik.nav_range
    height, width = ckpt.coils.shape
    frames = []
    for nav in np.linspace(hi, lo, n_states):
        if ckpt.ico is not None:
            grid = iconik_infer(ckpt.nik, ckpt.ico, nav, height, width)
        else:
            grid = nik.infer_grid(ckpt.nik, nav, height, width)
        frames.append(nik.grid_to_image(grid, ckpt.coils))

    out.mkdir(parents=True, exist_ok=True)
    window = storage.magnitude_window(frames)
    paths = []
    for i, frame in enumerate(frames):
        path = out / f"frame_{i:03d}.png"
        storage.write_png(frame, path, window)
        paths.append(path)
    write_resolved(cfg, out)
    return paths


@invoke.task(help={**CONFIG_HELP, **SEED_HELP, "out": "output directory"})
@utils.die_on_pipeline_errors
def simulate(_, config=None, profile=None, seed=None, out=None):
    """
    Simulate a free-breathing radial acquisition.
    """
    cfg = _config(config, profile, seed, out)
    path = run_simulate(cfg)
    utils.success(f"Dataset written to {path}\n")
    utils.printfmt(storage.dataset_summary(storage.load_dataset(path)))


@invoke.task(
    name="navigator",
    help={**CONFIG_HELP, "dataset": "dataset file", "out": "output directory"},
)
@utils.die_on_pipeline_errors
def extract(_, dataset, config=None, profile=None, out=None):
    """
    Extract the respiratory navigator and write it as CSV.
    """
    cfg = _config(config, profile, None, out)
    nav = run_navigator(cfg, Path(dataset))

    correlation = nav.correlation()
    summary = {"spokes": len(nav), "source": nav.source, "sign flipped": nav.sign_flipped}
    if correlation is not None:
        summary["correlation with truth"] = correlation
    utils.printfmt(summary)


@invoke.task(
    help={
        **CONFIG_HELP,
        **SEED_HELP,
        "method": f"one of {', '.join(method_names())}",
        "dataset": "dataset file",
        "out": "output directory",
        "checkpoint": "NIK checkpoint reused by iconik",
    }
)
@utils.die_on_pipeline_errors
def recon(_, method, dataset, config=None, profile=None, seed=None, out=None, checkpoint=None):
    """
    Reconstruct the motion states of a dataset.
    """
    cfg = _config(config, profile, seed, out)
    path = run_recon(cfg, method, Path(dataset), Path(checkpoint) if checkpoint else None)
    utils.success(f"{method} reconstruction written to {path}\n")


@invoke.task(
    name="eval",
    iterable=["recon_dir"],
    help={
        **CONFIG_HELP,
        "recon-dir": "directory holding one sub-directory per method, repeat once per seed",
        "dataset": "dataset file, needed for a gated reference",
        "out": "directory of the summary over seeds",
    },
)
@utils.die_on_pipeline_errors
def evaluate(_, recon_dir=None, dataset=None, config=None, profile=None, out=None):
    """
    Score reconstructions against the reference.
    """
    if not recon_dir:
        raise ConfigError("give at least one --recon-dir")

    cfg = _config(config, profile, None, out)
    dataset = Path(dataset) if dataset else None
    if len(recon_dir) == 1:
        rows = run_eval(cfg, Path(recon_dir[0]), dataset)
    else:
        rows = run_eval_seeds(cfg, [Path(d) for d in recon_dir], dataset)
    utils.printfmt(rows, tabular=True)


@invoke.task(
    help={
        **CONFIG_HELP,
        "checkpoint": "nik.ckpt or iconik.ckpt",
        "n-states": "number of frames",
        "out": "output directory",
    }
)
@utils.die_on_pipeline_errors
def animate(_, checkpoint, n_states=20, out="frames", config=None, profile=None):
    """
    Render a movie of motion states from a trained checkpoint.
    """
    checkpoint = Path(checkpoint)
    trained_with = checkpoint.parent / "config.toml"
    if config is None and trained_with.exists():
        config = trained_with

    cfg = _config(config, profile)
    paths = run_animate(cfg, checkpoint, int(n_states), Path(out))
    utils.success(f"{len(paths)} frames written to {out}\n")

