"""Run configuration: a flat table of typed keys, read from ``key = value`` files.

Every tunable default of the library is exposed here under one key.  The
effective configuration of a run is written back in the same format, so
feeding it to ``--config`` reproduces the run.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .adapters import NetConfig
from .layers import BN_DEFAULTS, LRN_DEFAULTS
from .losses import KernelFamily, LossConfig
from .synthgen import SynthConfig
from .tracker import UpdateConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _ints(s):
    return tuple(int(v) for v in str(s).replace(" ", "").split(",") if v)


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _steps(s):
    """"0:1,200:0.1,500:0.01" -> ((0, 1.0), (200, 0.1), (500, 0.01))."""
    out = []
    for part in str(s).replace(" ", "").split(","):
        it, val = part.split(":")
        out.append((int(it), float(val)))
    return tuple(out)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ",".join(f"{a}:{b!r}" for a, b in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _str(s):
    return str(s)


def _path(s):
    return None if s in ("", None) else str(s)


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    help: str


_net, _train, _upd, _loss, _syn = NetConfig(), TrainConfig(), UpdateConfig(), LossConfig.offline(), SynthConfig()

KEYS: dict[str, Key] = {
    # paths and run control
    "seed": Key(int, 0, "master random seed"),
    "data": Key(_path, None, "input directory (sequences for train, one sequence for track)"),
    "checkpoint": Key(_path, None, "checkpoint file to read"),
    "trajectory": Key(_path, None, "trajectory CSV to evaluate"),
    "groundtruth": Key(_path, None, "ground-truth file (or sequence directory) for eval"),
    "groundtruth_thermal": Key(_path, None, "second ground truth for MPR/MSR"),
    "overlay": Key(_bool, False, "track: also write overlay images"),
    "frame": Key(int, 1, "dump-features: 1-based frame number"),
    "log_level": Key(_str, "INFO", "logging level"),
    # synthetic data
    "n_train": Key(int, 5, "synth: training sequences"),
    "n_test": Key(int, 2, "synth: held-out sequences"),
    "length": Key(int, _syn.length, "synth: frames per sequence"),
    # network
    "ga_channels": Key(_ints, _net.ga_channels, "GA output channels per layer"),
    "ga_kernels": Key(_ints, _net.ga_kernels, "GA kernel sizes"),
    "ga_strides": Key(_ints, _net.ga_strides, "GA conv strides"),
    "ga_dilations": Key(_ints, _net.ga_dilations, "GA conv dilations"),
    "ga_paddings": Key(_ints, _net.ga_paddings, "GA conv paddings"),
    "ma_kernels": Key(_ints, _net.ma_kernels, "MA kernel sizes"),
    "fc_width": Key(int, _net.fc_width, "width of the IA fully connected layers"),
    "lrn_size": Key(int, LRN_DEFAULTS[0], "LRN window"),
    "lrn_k": Key(float, LRN_DEFAULTS[1], "LRN k"),
    "lrn_alpha": Key(float, LRN_DEFAULTS[2], "LRN alpha"),
    "lrn_beta": Key(float, LRN_DEFAULTS[3], "LRN beta"),
    "bn_momentum": Key(float, BN_DEFAULTS[0], "IC layer running-stat momentum"),
    "bn_eps": Key(float, BN_DEFAULTS[1], "IC layer epsilon"),
    "dropout_rate": Key(float, _net.dropout_rate, "dropout rate"),
    "init_std": Key(float, _net.init_std, "std of new-layer Gaussian init"),
    # offline training
    "iterations": Key(int, _train.iterations, "offline SGD iterations"),
    "lr": Key(float, _train.lr, "offline learning rate"),
    "weight_decay": Key(float, _train.weight_decay, "weight decay"),
    "momentum": Key(float, _train.momentum, "SGD momentum (0 = plain SGD)"),
    "n_frames": Key(int, _train.n_frames, "frames per minibatch"),
    "n_pos": Key(int, _train.n_pos, "positives per frame"),
    "n_neg": Key(int, _train.n_neg, "negatives per frame"),
    "crop_size": Key(int, _train.crop_size, "training crop side"),
    "lambda1": Key(float, _loss.lambda1, "offline weight of the RGB BCE term"),
    "lambda2": Key(float, _loss.lambda2, "offline weight of the thermal BCE term"),
    "nu1": Key(float, _loss.nu1, "instance-embedding loss weight"),
    "nu2_schedule": Key(_steps, _loss.nu2_steps, "HD loss weight steps iter:value,..."),
    "kernel_count": Key(int, 11, "MK-MMD kernel count d"),
    "kernel_budget": Key(float, 1.0, "MK-MMD weight budget D (uniform betas)"),
    # online tracking
    **{f"track_{name}": Key(type(val) if not isinstance(val, bool) else _bool, val, "tracker setting")
       for name, val in vars(_upd).items() if name != "seed"},
}


def defaults() -> dict:
    return {k: v.default for k, v in KEYS.items()}


def parse_value(key, raw):
    if key not in KEYS:
        raise ConfigError(f"unknown config key: {key!r}")
    try:
        return KEYS[key].parse(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, raw)
        except ConfigError as e:
            raise ConfigError(f"{path}:{lineno}: {e}") from None
    return out


def resolve(file_path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then explicit overrides (already-typed or raw strings)."""
    cfg = defaults()
    if file_path:
        cfg.update(read_config_file(file_path))
    for k, v in (overrides or {}).items():
        if k not in KEYS:
            raise ConfigError(f"unknown config key: {k!r}")
        cfg[k] = parse_value(k, v) if isinstance(v, str) else v
    return cfg


def dump(cfg: dict, command: str) -> str:
    lines = [f"# effective configuration of 'manetpp {command}'"]
    lines += [f"{k} = {_fmt(cfg[k])}" for k in KEYS]
    return "\n".join(lines) + "\n"


# -- builders for the library config objects ---------------------------------


def net_config(cfg) -> NetConfig:
    return NetConfig(ga_channels=cfg["ga_channels"], ga_kernels=cfg["ga_kernels"],
                     ga_strides=cfg["ga_strides"], ga_dilations=cfg["ga_dilations"],
                     ga_paddings=cfg["ga_paddings"], ma_kernels=cfg["ma_kernels"],
                     fc_width=cfg["fc_width"],
                     lrn_params=(cfg["lrn_size"], cfg["lrn_k"], cfg["lrn_alpha"], cfg["lrn_beta"]),
                     bn_params=(cfg["bn_momentum"], cfg["bn_eps"]),
                     dropout_rate=cfg["dropout_rate"], init_std=cfg["init_std"])


def train_config(cfg) -> TrainConfig:
    return TrainConfig(iterations=cfg["iterations"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                       momentum=cfg["momentum"], n_frames=cfg["n_frames"], n_pos=cfg["n_pos"],
                       n_neg=cfg["n_neg"], crop_size=cfg["crop_size"], seed=cfg["seed"])


def loss_config(cfg) -> LossConfig:
    return LossConfig(cfg["lambda1"], cfg["lambda2"], cfg["nu1"], cfg["nu2_schedule"], "offline")


def kernel_family(cfg) -> KernelFamily:
    return KernelFamily.default(cfg["kernel_count"], cfg["kernel_budget"])


def update_config(cfg) -> UpdateConfig:
    kw = {name: cfg[f"track_{name}"] for name in vars(UpdateConfig()) if name != "seed"}
    return UpdateConfig(seed=cfg["seed"], **kw)
