"""Experiment configuration: sectioned ``key = value`` text.

Grammar (what :mod:`configparser` accepts with interpolation off)::

    # comment
    [section]
    key = value

Every section and key must appear in :data:`SCHEMA`; anything else is
rejected with its line number.  Lists are comma separated; floats accept
``inf``.  ``auto`` is a legal value wherever the default is ``auto``.
The resolved config echoes every key, defaults included, with floats at full
round-trip precision.
"""

from __future__ import annotations

import configparser
import re
from pathlib import Path

import numpy as np

from .flow import FlowModel
from .losses import KINDS, LossConfig
from .sampler import PTConfig
from .targets import DoubleWell, GaussianTarget
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


def _opt(parse):
    def inner(s):
        return None if s.strip() == "auto" else parse(s)
    return inner


_TRAIN_KEYS = {
    "iters": (_opt(int), None),
    "batch_size": (int, 256),
    "optimizer": (_choice("adam", "sgd"), "adam"),
    "learning_rate": (_opt(float), None),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "eval_every": (int, 10),
    "n_eval": (int, 2000),
    "mode_threshold": (_opt(float), None),
    "energy_cap_threshold": (float, np.inf),
    "partial_fraction": (float, 1.0),
    "record_time": (_bool, False),
}

SCHEMA = {
    "experiment": {
        "seed": (int, 0),
        "output_dir": (str, "out"),
    },
    "target": {
        "kind": (_choice("double_well", "gaussian"), "double_well"),
        "dim": (int, 12),
        "a": (float, 1.0),
        "b": (float, 6.0),
        "c": (float, 1.0),
        "sigma_wide": (float, 10.0),
        "sigma": (float, 1.0),
        "cap_threshold": (float, np.inf),
    },
    "model": {
        "blocks": (int, 32),
        "hidden": (int, 64),
        "sigma": (float, 1.0),
        "celu_alpha": (float, 1.0),
        "scale_clamp": (float, 4.0),
    },
    "sampler": {
        "temperatures": (_floats, PTConfig().temperatures),
        "steps_per_exchange": (int, 10),
        "proposal_std": (_opt(_floats), None),
        "total_samples": (int, 100_000),
        "burn_in": (int, 2000),
        "thinning": (int, 20),
        "n_replicas": (int, 256),
        "format": (_choice("text", "binary"), "text"),
        "dataset": (_opt(str), None),
    },
    "pretrain": dict(_TRAIN_KEYS),
    "finetune": {
        **_TRAIN_KEYS,
        "iters": (int, 10_000),
        "loss": (_choice(*[k for k in KINDS if k != "klz"]), "l2_masked"),
        "from_scratch": (_bool, False),
    },
    "l2": {
        "detach_k": (_bool, True),
        "mask": (_bool, True),
    },
    "klz_df": {
        "self_normalize": (_bool, True),
    },
    "trick": {
        "enabled": (_bool, False),
        "decay": (float, 0.99),
    },
    "eval": {
        "n": (int, 10_000),
        "bins": (int, 60),
    },
    "pitfall": {
        "grid_points": (int, 64),
        "T": (float, 10.0),
        "dt": (float, 1e-3),
        "steps": (int, 50),
        "learning_rate": (float, 0.05),
        "trials": (int, 10_000),
        "batch": (int, 8),
        "states": (int, 8),
        "minibatch": (int, 2),
    },
}


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section:
            m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
            if m and m.group(1).strip() == key:
                return i
    return None


def _where(path, text, section, key=None):
    line = _line_of(text, section, key)
    loc = f"{path}:{line}" if line else str(path)
    return f"{loc}: [{section}]" + (f" {key}" if key else "")


class ExperimentConfig:
    """Parsed and validated settings; ``values[section][key]`` holds typed values."""

    def __init__(self, values: dict, source: str = "<defaults>"):
        self.values = values
        self.source = source

    @classmethod
    def defaults(cls) -> ExperimentConfig:
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> ExperimentConfig:
        cp = configparser.ConfigParser(interpolation=None, strict=True)
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(str(e).replace("\n", " ")) from e
        cfg = cls.defaults()
        cfg.source = source
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{_where(source, text, section)}: unknown section")
            for key, raw in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{_where(source, text, section, key)}: unknown key")
                parse, _ = SCHEMA[section][key]
                try:
                    cfg.values[section][key] = parse(raw)
                except ValueError as e:
                    raise ConfigError(
                        f"{_where(source, text, section, key)}: bad value {raw!r} ({e})") from e
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        return cls.parse(text, str(path))

    def __getitem__(self, section):
        return self.values[section]

    def validate(self) -> None:
        """Build every component once so bad combinations fail up front."""
        try:
            target = self.target()
            self.model_kwargs()
            self.pt_config(target)
            self.train_config("pretrain")
            self.train_config("finetune")
        except ValueError as e:
            raise ConfigError(f"{self.source}: {e}") from e

    # -- component builders ---------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    def target(self):
        t = self.values["target"]
        if t["kind"] == "gaussian":
            return GaussianTarget(dim=t["dim"], sigma=t["sigma"])
        return DoubleWell(dim=t["dim"], a=t["a"], b=t["b"], c=t["c"],
                          sigma_wide=t["sigma_wide"], cap_threshold=t["cap_threshold"])

    def model_kwargs(self) -> dict:
        m = self.values["model"]
        if m["blocks"] < 1 or m["hidden"] < 1:
            raise ValueError("model needs blocks >= 1 and hidden >= 1")
        return dict(block_count=m["blocks"], hidden=m["hidden"], sigma=m["sigma"],
                    celu_alpha=m["celu_alpha"], scale_clamp=m["scale_clamp"])

    def build_model(self, rng) -> FlowModel:
        return FlowModel(self.values["target"]["dim"], rng=rng, **self.model_kwargs())

    def pt_config(self, target=None) -> PTConfig:
        s = self.values["sampler"]
        return PTConfig(
            temperatures=s["temperatures"], steps_per_exchange=s["steps_per_exchange"],
            proposal_std=s["proposal_std"], total_samples=s["total_samples"],
            burn_in=s["burn_in"], thinning=s["thinning"], seed=self.seed,
            n_replicas=s["n_replicas"])

    def train_config(self, phase: str) -> TrainConfig:
        sec = dict(self.values[phase])
        iters = sec.pop("iters")
        if iters is None:
            # pre-training defaults to a tenth of fine-tuning
            iters = max(self.values["finetune"]["iters"] // 10, 1)
        if phase == "finetune":
            loss = LossConfig(kind=sec.pop("loss"), detach_K=self.values["l2"]["detach_k"],
                              apply_mask=self.values["l2"]["mask"],
                              self_normalize=self.values["klz_df"]["self_normalize"])
            sec.pop("from_scratch")
            trick = self.values["trick"]
            extra = dict(trick_enabled=trick["enabled"], trick_decay=trick["decay"])
        else:
            loss = LossConfig(kind="klz")
            extra = {}
        return TrainConfig(phase=phase, loss=loss, iters=iters, seed=self.seed, **sec, **extra)

    # -- output -----------------------------------------------------------------

    def resolved_text(self) -> str:
        """Every key with its effective value; parses back to the same config."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_format(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def write_resolved(self, path) -> None:
        Path(path).write_text(self.resolved_text())


def _format(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)
