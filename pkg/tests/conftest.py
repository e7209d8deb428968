import pytest

from nikrecon import experiment

TINY_EXPERIMENT = """
[simulator]
n_spokes = 24
n_fe = 16
n_coils = 2
relative_noise = 0.02
undersample = 1.0

[motion]
period = 8.0

[navigator]
smooth_window = 3
n_bins = 2

[xdgrasp]
n_iter = 5

[nik]
n_layers = 2
width = 16

[nik.train]
lr = 1e-3
batch_size = 128
epochs = 5

[ico.train]
lr = 1e-3
batch_size = 64
epochs = 2

[evaluation]
n_states = 3
methods = ["inufft", "xdgrasp", "nik", "iconik"]
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_EXPERIMENT)
    return path


@pytest.fixture
def tiny_cfg(tiny_config_file, tmp_path):
    return experiment.resolve_config(
        tiny_config_file, profile="desk", out=tmp_path / "run"
    )
