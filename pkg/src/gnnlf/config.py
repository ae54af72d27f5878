"""Run configuration: INI file sections merged with defaults and command-line overrides."""

from __future__ import annotations

import configparser
import dataclasses
import io
import os

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


PATH_DEFAULTS = {"data": "", "checkpoint": "", "output_dir": "runs", "input": "", "output": ""}
RUN_DEFAULTS = {"n_train": 0, "n_val": 0, "split_seed": 0, "workers": 1, "long_run": False}


def _defaults() -> dict[str, dict]:
    model = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
    train = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    return {"model": model, "train": train, "run": dict(RUN_DEFAULTS), "paths": dict(PATH_DEFAULTS)}


def _coerce(value: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.replace(",", " ").split())
        return value
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    run: dict
    paths: dict
    sources: dict  # "section.key" -> "default" | "file" | "cli"

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        sections = {"model": self.model.to_dict(), "train": dataclasses.asdict(self.train),
                    "run": self.run, "paths": self.paths}
        for name, values in sections.items():
            parser[name] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def load_run_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge built-in defaults < config file < ``overrides`` (``{"section.key": value}``).

    Unknown sections or keys are rejected so typos do not pass silently.
    """
    values = _defaults()
    sources = {f"{s}.{k}": "default" for s, sec in values.items() for k in sec}
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config: file {os.fspath(path)!r} does not exist")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"config: {exc}") from None
        for section in parser.sections():
            if section not in values:
                raise ConfigError(f"config: unknown section [{section}]")
            for key, raw in parser[section].items():
                if key not in values[section]:
                    raise ConfigError(f"config: unknown key {section}.{key}")
                values[section][key] = _coerce(raw, values[section][key], f"{section}.{key}")
                sources[f"{section}.{key}"] = "file"
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if key not in values.get(section, {}):
            raise ConfigError(f"unknown option {dotted}")
        default = values[section][key]
        values[section][key] = _coerce(value, default, dotted) if isinstance(value, str) else value
        sources[dotted] = "cli"
    try:
        model = ModelConfig(**values["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    try:
        train = TrainConfig(**values["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    if values["run"]["workers"] < 1:
        raise ConfigError("run.workers: must be at least 1")
    return RunConfig(model, train, values["run"], values["paths"], sources)
