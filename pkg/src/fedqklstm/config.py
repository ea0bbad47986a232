"""Flat ``section.key=value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Every key has a default (see
``DEFAULTS``); unknown keys are rejected so typos fail loudly. Values are
parsed to the type of their default. ``auto`` model dimensions are filled in
from the loaded dataset.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import (
    NormStats,
    WindowedDataset,
    gen_synthetic,
    load_dataset,
    load_rwhar,
    normalize,
    train_test_split,
)
from .federated.training import FedConfig
from .model import ModelConfig
from .numerics import AdamHyper

DEFAULTS: dict[str, object] = {
    # data source: synthetic | rwhar | cache
    "data.source": "synthetic",
    "data.path": "",
    "data.test_fraction": 0.2,
    "data.split": "window",  # window | subject
    "data.normalize": True,
    "synth.classes": 4,
    "synth.windows_per_class": 200,
    "synth.window": 64,
    "synth.channels": 3,
    "synth.noise_sd": 0.3,
    "synth.seed": 0,
    "rwhar.sensor": "acc",
    "rwhar.position": "chest",
    "rwhar.window": 100,
    "rwhar.stride": 50,
    "rwhar.sample_rate": 50.0,
    "rwhar.time_column": "attr_time",
    "rwhar.axes": "attr_x,attr_y,attr_z",
    "rwhar.time_scale": 1e-3,
    "rwhar.labels": "climbingdown,climbingup,jumping,lying,running,sitting,standing,walking",
    "model.input_channels": "auto",
    "model.window": "auto",
    "model.num_classes": "auto",
    "model.conv_filters": 64,
    "model.conv_width": 11,
    "model.conv_layers": 1,
    "model.hidden": 64,
    "model.lstm_layers": 2,
    "model.landmarks": 16,
    "model.dropout": 0.5,
    "model.gate_bias": False,
    "model.baseline": False,
    "model.pooling": "last",
    "kernel.block_size": 4,
    "kernel.depth": 0,
    "optim.lr": 1e-4,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "optim.weight_decay": 1e-4,
    "fed.clients": 3,
    "fed.local_epochs": 4,
    "fed.rounds": 30,
    "fed.batch_size": 32,
    "fed.partition": "iid",
    "fed.eval_every": 1,
    "fed.persist_optimizer": False,
    "fed.weighting": "samples",
    "fed.record_time": False,
    "grid.clients": "2,4,8,16,32",
    "grid.epochs": "1,2,3,4",
    "run.seed": 0,
    "run.out": "runs/default",
}

_AUTO_KEYS = {"model.input_channels", "model.window", "model.num_classes"}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, raw: object):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key in _AUTO_KEYS:
            return "auto" if text == "auto" else int(text)
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return text


def parse_config_text(text: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key = key.strip()
        values[key] = _coerce(key, value)
    return values


@dataclass
class ExperimentConfig:
    values: dict[str, object]

    @classmethod
    def load(cls, path=None, overrides: dict[str, object] | None = None) -> "ExperimentConfig":
        values = dict(DEFAULTS)
        if path is not None:
            values.update(parse_config_text(Path(path).read_text()))
        for key, raw in (overrides or {}).items():
            values[key] = _coerce(key, raw)
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> None:
        self.values[key] = _coerce(key, value)

    def resolved_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(self.values.items()))

    @property
    def seed(self) -> int:
        return int(self["run.seed"])

    def hyper(self) -> AdamHyper:
        return AdamHyper(
            lr=self["optim.lr"], beta1=self["optim.beta1"], beta2=self["optim.beta2"],
            eps=self["optim.eps"], weight_decay=self["optim.weight_decay"],
        )

    def fed_config(self) -> FedConfig:
        return FedConfig(
            clients=self["fed.clients"], local_epochs=self["fed.local_epochs"],
            rounds=self["fed.rounds"], batch_size=self["fed.batch_size"], hyper=self.hyper(),
            partition=self["fed.partition"], seed=self.seed, eval_every=self["fed.eval_every"],
            persist_optimizer=self["fed.persist_optimizer"], weighting=self["fed.weighting"],
            record_time=self["fed.record_time"],
        )

    def model_config(self, dataset: WindowedDataset | None = None) -> ModelConfig:
        dims = {}
        for key, from_data in (
            ("model.input_channels", lambda d: d.windows.shape[2]),
            ("model.window", lambda d: d.windows.shape[1]),
            ("model.num_classes", lambda d: d.num_classes),
        ):
            value = self[key]
            if value == "auto":
                if dataset is None:
                    raise ConfigError(f"{key}=auto needs a dataset to infer it from")
                value = from_data(dataset)
            dims[key.split(".", 1)[1]] = int(value)
        return ModelConfig(
            **dims,
            conv_filters=self["model.conv_filters"], conv_width=self["model.conv_width"],
            conv_layers=self["model.conv_layers"], hidden=self["model.hidden"],
            lstm_layers=self["model.lstm_layers"], landmarks=self["model.landmarks"],
            block_size=self["kernel.block_size"], depth=self["kernel.depth"],
            dropout=self["model.dropout"], gate_bias=self["model.gate_bias"],
            baseline=self["model.baseline"], pooling=self["model.pooling"],
        )

    def label_map(self) -> dict[str, int]:
        names = [n.strip() for n in str(self["rwhar.labels"]).split(",") if n.strip()]
        if not names:
            raise ConfigError("rwhar.labels is empty")
        return {name: i for i, name in enumerate(names)}

    def load_dataset(self) -> WindowedDataset:
        source = self["data.source"]
        if source == "synthetic":
            return gen_synthetic(
                self["synth.classes"], self["synth.windows_per_class"], self["synth.window"],
                self["synth.channels"], self["synth.noise_sd"], self["synth.seed"],
            )
        path = str(self["data.path"])
        if not path:
            raise ConfigError(f"data.source={source} needs data.path")
        if source == "rwhar":
            return load_rwhar(
                path, self.label_map(), sensor=self["rwhar.sensor"],
                body_position=self["rwhar.position"], window=self["rwhar.window"],
                stride=self["rwhar.stride"], sample_rate=self["rwhar.sample_rate"],
                time_column=self["rwhar.time_column"],
                axis_columns=tuple(a.strip() for a in str(self["rwhar.axes"]).split(",")),
                time_scale=self["rwhar.time_scale"],
            )
        if source == "cache":
            return load_dataset(path)
        raise ConfigError(f"unknown data.source {source!r} (synthetic | rwhar | cache)")

    def prepare_data(self) -> tuple[WindowedDataset, WindowedDataset]:
        """Load, split and normalize with training-split statistics."""
        dataset = self.load_dataset()
        split = self["data.split"]
        if split not in ("window", "subject"):
            raise ConfigError("data.split must be 'window' or 'subject'")
        train, test = train_test_split(
            dataset, self["data.test_fraction"], seed=self.seed, by_subject=split == "subject"
        )
        if self["data.normalize"]:
            stats = NormStats.fit(train)
            train, test = normalize(train, stats), normalize(test, stats)
        return train, test


def parse_int_list(text: str) -> list[int]:
    try:
        out = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise ConfigError("empty integer list")
    return out


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
