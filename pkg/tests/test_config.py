import pytest

from bghnet.config import RunConfig
from bghnet.errors import ConfigError


def test_defaults_build_configs():
    cfg = RunConfig()
    net, tr = cfg.network_config(), cfg.train_config()
    assert net.stage.channels == cfg.stage_channels
    assert tr.momentum == 0.9 and tr.weight_decay == 1e-4 and tr.base_lr == 0.01 and tr.power == 0.9
    assert tr.boundary.theta == 3 and tr.ssim.window == 11


def test_text_round_trip():
    cfg = RunConfig().updated({"stage_channels": "8,16,24,32", "dilations": "1;1,2;2,5;9,17",
                               "use_grb": "false", "max_iter": "12", "ssim_c1": "0.0002", "loss": "bce"})
    assert cfg.stage_channels == (8, 16, 24, 32)
    assert cfg.dilations == ((1,), (1, 2), (2, 5), (9, 17))
    assert cfg.use_grb is False and cfg.max_iter == 12 and cfg.loss == "bce"
    assert RunConfig.from_text(cfg.to_text()) == cfg
    assert RunConfig.from_text(RunConfig().to_text()) == RunConfig()


def test_file_comments_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nepochs = 3  # short\n\nbatch-size = 2\n", encoding="utf-8")
    cfg = RunConfig.from_file(path)
    assert cfg.epochs == 3 and cfg.batch_size == 2
    # flags are applied after the file
    assert cfg.updated({"epochs": "5"}).epochs == 5


def test_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig().updated({"learning_rate": "1"})
    with pytest.raises(ConfigError, match="epochs"):
        RunConfig().updated({"epochs": "many"})
    with pytest.raises(ConfigError, match="line 2"):
        RunConfig.from_text("epochs = 3\nnonsense\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "absent.cfg")
    with pytest.raises(ConfigError):
        RunConfig(loss="dice").train_config()
    with pytest.raises(ConfigError):
        RunConfig().updated({"use_grb": "maybe"})


def test_every_key_has_a_kind():
    kinds = RunConfig.kinds()
    assert kinds["dilations"] == "nested" and kinds["max_iter"] == "opt_int"
    assert kinds["final_bf1"] == "bool" and kinds["ssim_sigma"] == "float"
    assert set(kinds.values()) <= {"nested", "tuple_int", "opt_int", "bool", "int", "float", "str"}
