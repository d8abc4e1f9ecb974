import numpy as np
import pytest

from manetpp import checkpoint as C
from manetpp import checks, config
from manetpp.adapters import Manet


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = Manet(checks.small_net_config(), n_branches=3, seed=5)
    m.ma["thermal"][1].ic.running_var[...] = 2.5
    C.save(m, tmp_path / "m.ckpt", extra={"note": "x"})
    back, extra = C.load(tmp_path / "m.ckpt")
    assert extra == {"note": "x"} and back.cfg == m.cfg and len(back.ia.instance) == 3
    a, b = C.model_tensors(m), C.model_tensors(back)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype
        np.testing.assert_array_equal(a[k], b[k])
    assert C.to_bytes(back, {"note": "x"}) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_layout():
    raw = C.to_bytes(Manet(checks.small_net_config(), n_branches=1))
    assert raw[:8] == b"MANETPP1"


def test_checkpoint_rejects_garbage():
    with pytest.raises(C.CheckpointError, match="magic"):
        C.from_bytes(b"NOTACKPT" + bytes(20))
    raw = C.to_bytes(Manet(checks.small_net_config(), n_branches=1))
    with pytest.raises(C.CheckpointError, match="truncated"):
        C.from_bytes(raw[:-10])


def test_config_defaults_and_overrides(tmp_path):
    cfg = config.resolve()
    assert cfg["lr"] == 1e-4 and cfg["weight_decay"] == 5e-4 and cfg["iterations"] == 1000
    assert cfg["nu2_schedule"] == ((0, 1.0), (200, 0.1), (500, 0.01))
    f = tmp_path / "c.txt"
    f.write_text("# comment\nlr = 0.001  # trailing\nga_channels = 8,16,16\n")
    cfg = config.resolve(f, {"lr": "0.002"})
    assert cfg["lr"] == 0.002 and cfg["ga_channels"] == (8, 16, 16)


def test_config_rejects_unknown_and_bad_values(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("learning_rate = 0.1\n")
    with pytest.raises(config.ConfigError, match="unknown"):
        config.resolve(f)
    f.write_text("lr = fast\n")
    with pytest.raises(config.ConfigError, match=":1:"):
        config.resolve(f)


def test_config_dump_roundtrip(tmp_path):
    cfg = config.resolve(overrides={"lr": "0.003", "track_refine_gate": "0.4", "overlay": "yes"})
    f = tmp_path / "echo.txt"
    f.write_text(config.dump(cfg, "train"))
    assert config.resolve(f) == cfg


def test_config_builders():
    cfg = config.resolve(overrides={"fc_width": "32", "track_long_interval": "7", "seed": "3"})
    assert config.net_config(cfg).fc_width == 32
    u = config.update_config(cfg)
    assert u.long_interval == 7 and u.seed == 3
    assert config.loss_config(cfg).lambda1 == 0.5
    assert config.kernel_family(cfg).d == 11
