"""Experiment configuration: topology strings, INI files and presets.

Grammar of the INI file (``configparser`` dialect, ``key = value``):

``[experiment]``
    name, dataset (``mnist`` | ``cifar10``), topology (e.g. ``36C3-36C3-2P-1024FC-10FC``),
    seed, preprocess (``none`` | ``gcn`` | ``gcn+zca``), zca_epsilon, gcn_eps,
    train_limit / test_limit (blank = whole split), and the network-wide simulation
    constants (signed_input, dt_ms, theta_pool, t_sim_ms, tau_lpf_ms,
    activation_rate_hz, feature_layers, w_low, w_high).
``[layer.N]`` (one per conv layer, 1-based)
    Every ConvLayerSpec field except ``maps``/``kernel`` (those come from the
    topology string).  ``residuals`` is a comma list of ``source`` or
    ``source:invert`` items.  Window fields are prefixed ``exc.`` / ``inh.``.
``[classifier]``
    lr, batch_size, epochs, p_drop.
``[fcsnn]``
    Every FcsnnConfig field; window fields prefixed ``window.``.
``[paths]``
    data_dir, out_dir.

Floats are written with ``repr`` so a file round-trips exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .classifier import TrainConfig
from .convnet import ConvLayerSpec, NetworkTopology, ResidualSource
from .fcsnn import FcsnnConfig, layout_window
from .plasticity import Layout, StdpWindowConfig


class ConfigError(ValueError):
    """Malformed topology string or configuration file."""


DATASET_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}
PREPROCESS_MODES = ("none", "gcn", "gcn+zca")

_CONV = re.compile(r"(\d+)C(\d+)")
_POOL = re.compile(r"(\d+)P")
_FC = re.compile(r"(\d+)FC")


def parse_topology(text: str, input_shape=(1, 28, 28), base: ConvLayerSpec | None = None,
                   **topology_fields) -> NetworkTopology:
    """Build a NetworkTopology from ``<n>C<k>-...-<s>P-[<n>FC-...]<classes>FC``.

    Conv layers copy every field but ``maps``/``kernel`` from ``base``;
    residual wiring is not part of the string.
    """
    if not text or not text.strip():
        raise ConfigError("empty topology string")
    base = base or ConvLayerSpec(maps=1)
    convs, fcs, pool = [], [], None
    for token in text.strip().split("-"):
        if m := _CONV.fullmatch(token):
            if pool is not None or fcs:
                raise ConfigError(f"conv layer {token!r} after pooling/FC")
            maps, k = int(m.group(1)), int(m.group(2))
            if maps < 1 or k < 1:
                raise ConfigError(f"bad conv token {token!r}")
            convs.append(replace(base, maps=maps, kernel=k))
        elif m := _POOL.fullmatch(token):
            if pool is not None or fcs:
                raise ConfigError(f"misplaced pooling token {token!r}")
            if not convs:
                raise ConfigError("pooling before any conv layer")
            pool = int(m.group(1))
            if pool < 1:
                raise ConfigError(f"bad pooling token {token!r}")
        elif m := _FC.fullmatch(token):
            if not convs:
                raise ConfigError("fully-connected layer before any conv layer")
            if int(m.group(1)) < 1:
                raise ConfigError(f"bad FC token {token!r}")
            fcs.append(int(m.group(1)))
        else:
            raise ConfigError(f"malformed token {token!r}")
    if not convs:
        raise ConfigError("topology has no conv layer")
    if pool is None:
        raise ConfigError("topology has no pooling token")
    if not fcs:
        raise ConfigError("topology has no output FC layer")
    topo = NetworkTopology(tuple(input_shape), convs, pool=pool, hidden=tuple(fcs[:-1]),
                           n_classes=fcs[-1], **topology_fields)
    try:
        topo.layer_shapes()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return topo


def format_topology(topo: NetworkTopology) -> str:
    tokens = [f"{s.maps}C{s.kernel}" for s in topo.layers] + [f"{topo.pool}P"]
    tokens += [f"{n}FC" for n in (*topo.hidden, topo.n_classes)]
    return "-".join(tokens)


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "out"


@dataclass
class ExperimentConfig:
    name: str
    dataset: str
    topology: NetworkTopology
    seed: int = 0
    preprocess: str = "none"
    zca_epsilon: float = 1e-2
    gcn_eps: float = 0.0
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    classifier: TrainConfig = field(default_factory=TrainConfig)
    fcsnn: FcsnnConfig = field(default_factory=FcsnnConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.dataset not in DATASET_SHAPES:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.preprocess not in PREPROCESS_MODES:
            raise ConfigError(f"unknown preprocess mode {self.preprocess!r}")
        try:
            self.topology.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        """Classifier settings with the head shape taken from the topology."""
        return replace(self.classifier, hidden=self.topology.hidden,
                       n_classes=self.topology.n_classes)


# --------------------------------------------------------------------------
# Scalar (de)serialization driven by dataclass field annotations

_TOPOLOGY_KEYS = ("signed_input", "dt_ms", "theta_pool", "t_sim_ms", "tau_lpf_ms",
                  "activation_rate_hz", "feature_layers", "w_low", "w_high")
_LAYER_SKIP = ("maps", "kernel", "residuals", "exc_window", "inh_window")
_CLASSIFIER_KEYS = ("lr", "batch_size", "epochs", "p_drop")


def _annotation(cls, name: str) -> str:
    return {f.name: f.type for f in dataclasses.fields(cls)}[name]


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Layout):
        return value.value
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(kind: str, text: str, key: str):
    text = text.strip()
    try:
        if kind.startswith("Optional["):
            return None if text == "" else _parse(kind[len("Optional["):-1], text, key)
        if kind == "bool":
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError(text)
            return lowered == "true"
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if kind == "Layout":
            return Layout(text)
        if kind == "tuple":
            return tuple(int(v) for v in text.split(",")) if text else ()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    raise ConfigError(f"unsupported field type {kind} for {key}")


def _kind(cls, name: str) -> str:
    kind = _annotation(cls, name)
    if kind.startswith("Optional[tuple"):
        return "Optional[tuple]"
    return kind


def _window_items(window: StdpWindowConfig, prefix: str) -> dict:
    return {f"{prefix}{f.name}": _format(getattr(window, f.name))
            for f in dataclasses.fields(StdpWindowConfig)}


def _window_from(section, prefix: str, default: StdpWindowConfig) -> StdpWindowConfig:
    kwargs = {}
    for f in dataclasses.fields(StdpWindowConfig):
        key = prefix + f.name
        if key in section:
            kwargs[f.name] = _parse(_kind(StdpWindowConfig, f.name), section[key], key)
    try:
        return replace(default, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _format_residuals(residuals) -> str:
    return ",".join(f"{r.source}:invert" if r.invert else str(r.source) for r in residuals)


def _parse_residuals(text: str) -> tuple:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        source, _, flag = item.partition(":")
        if flag not in ("", "invert") or not source.isdigit():
            raise ConfigError(f"bad residual item {item!r}")
        out.append(ResidualSource(int(source), flag == "invert"))
    return tuple(out)


def dumps(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    topo = cfg.topology
    exp = {"name": cfg.name, "dataset": cfg.dataset, "topology": format_topology(topo)}
    for key in ("seed", "preprocess", "zca_epsilon", "gcn_eps", "train_limit", "test_limit"):
        exp[key] = _format(getattr(cfg, key))
    for key in _TOPOLOGY_KEYS:
        exp[key] = _format(getattr(topo, key))
    parser["experiment"] = exp
    for l, spec in enumerate(topo.layers, start=1):
        items = {"residuals": _format_residuals(spec.residuals)}
        for f in dataclasses.fields(ConvLayerSpec):
            if f.name not in _LAYER_SKIP:
                items[f.name] = _format(getattr(spec, f.name))
        items.update(_window_items(spec.exc_window, "exc."))
        items.update(_window_items(spec.inh_window, "inh."))
        parser[f"layer.{l}"] = items
    parser["classifier"] = {k: _format(getattr(cfg.classifier, k)) for k in _CLASSIFIER_KEYS}
    fc = {f.name: _format(getattr(cfg.fcsnn, f.name))
          for f in dataclasses.fields(FcsnnConfig) if f.name != "window"}
    fc.update(_window_items(cfg.fcsnn.window, "window."))
    parser["fcsnn"] = fc
    parser["paths"] = dataclasses.asdict(cfg.paths)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    if "experiment" not in parser:
        raise ConfigError("missing [experiment] section")
    exp = parser["experiment"]
    for key in ("name", "dataset", "topology"):
        if key not in exp:
            raise ConfigError(f"[experiment] lacks {key!r}")
    dataset = exp["dataset"]
    if dataset not in DATASET_SHAPES:
        raise ConfigError(f"unknown dataset {dataset!r}")
    topo_fields = {k: _parse(_kind(NetworkTopology, k), exp[k], k)
                   for k in _TOPOLOGY_KEYS if k in exp}
    topo = parse_topology(exp["topology"], DATASET_SHAPES[dataset], **topo_fields)

    known = {f"layer.{i}" for i in range(1, len(topo.layers) + 1)}
    extra = [s for s in parser.sections() if s.startswith("layer.") and s not in known]
    if extra:
        raise ConfigError(f"sections {extra} do not match the topology's conv layers")
    layers = []
    for l, spec in enumerate(topo.layers, start=1):
        section = parser[f"layer.{l}"] if f"layer.{l}" in parser else {}
        kwargs = {}
        for f in dataclasses.fields(ConvLayerSpec):
            if f.name not in _LAYER_SKIP and f.name in section:
                kwargs[f.name] = _parse(_kind(ConvLayerSpec, f.name), section[f.name], f.name)
        if "residuals" in section:
            kwargs["residuals"] = _parse_residuals(section["residuals"])
        kwargs["exc_window"] = _window_from(section, "exc.", spec.exc_window)
        kwargs["inh_window"] = _window_from(section, "inh.", spec.inh_window)
        layers.append(replace(spec, **kwargs))
    topo = replace(topo, layers=layers)

    scalars = {}
    for key in ("seed", "preprocess", "zca_epsilon", "gcn_eps", "train_limit", "test_limit"):
        if key in exp:
            scalars[key] = _parse(_kind(ExperimentConfig, key), exp[key], key)
    classifier = TrainConfig()
    if "classifier" in parser:
        sec = parser["classifier"]
        classifier = replace(classifier, **{k: _parse(_kind(TrainConfig, k), sec[k], k)
                                            for k in _CLASSIFIER_KEYS if k in sec})
    fcsnn = FcsnnConfig()
    if "fcsnn" in parser:
        sec = parser["fcsnn"]
        kwargs = {f.name: _parse(_kind(FcsnnConfig, f.name), sec[f.name], f.name)
                  for f in dataclasses.fields(FcsnnConfig)
                  if f.name != "window" and f.name in sec}
        kwargs["window"] = _window_from(sec, "window.", fcsnn.window)
        try:
            fcsnn = replace(fcsnn, **kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    paths = PathsConfig()
    if "paths" in parser:
        unknown = set(parser["paths"]) - {f.name for f in dataclasses.fields(PathsConfig)}
        if unknown:
            raise ConfigError(f"unknown [paths] keys: {sorted(unknown)}")
        paths = PathsConfig(**dict(parser["paths"]))
    return ExperimentConfig(exp["name"], dataset, topo, classifier=classifier, fcsnn=fcsnn,
                            paths=paths, **scalars)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


# --------------------------------------------------------------------------
# Presets


def _mnist_c1(train_count: int) -> ConvLayerSpec:
    return ConvLayerSpec(
        maps=1, alpha_init=75.0, stdp_rate_hz=200.0, train_start=0, train_count=train_count,
        exc_window=StdpWindowConfig(0.05, 0.005, 0.01, 0.01),
        inh_window=StdpWindowConfig(0.05, 0.005, 0.01, 0.01, inhibitory=True))


def _cifar_c1() -> ConvLayerSpec:
    return ConvLayerSpec(
        maps=1, alpha_init=30.0, stdp_rate_hz=200.0, train_start=0, train_count=5000,
        exc_window=StdpWindowConfig(0.02, 0.005, 0.05, 0.01),
        inh_window=StdpWindowConfig(0.02, 0.005, 0.05, 0.01, inhibitory=True))


def _cifar_deep(layer: int, residuals=()) -> ConvLayerSpec:
    p_near, p_far = 0.05 / 25, 0.01 / 25
    return ConvLayerSpec(
        maps=1, residuals=tuple(residuals), alpha_init=30.0, stdp_rate_hz=500.0,
        beta_thresh=6e-4 if layer == 2 else 8e-4,
        train_start=5000 * (layer - 1), train_count=5000,
        exc_window=StdpWindowConfig(0.02, 0.005, p_near, p_far),
        inh_window=StdpWindowConfig(0.02, 0.005, p_near, p_far, inhibitory=True))


def _with_layers(topo: NetworkTopology, specs) -> NetworkTopology:
    layers = [replace(s, maps=t.maps, kernel=t.kernel) for s, t in zip(specs, topo.layers)]
    return replace(topo, layers=layers)


def _mnist(name, text, train_count, lr=1.5e-3) -> ExperimentConfig:
    topo = parse_topology(text, DATASET_SHAPES["mnist"])
    topo = _with_layers(topo, [_mnist_c1(train_count)])
    return ExperimentConfig(name, "mnist", topo, classifier=TrainConfig(lr=lr))


def _cifar(name, text, specs, feature_layers=None, lr=1e-4) -> ExperimentConfig:
    topo = parse_topology(text, DATASET_SHAPES["cifar10"], signed_input=True,
                          feature_layers=feature_layers)
    topo = _with_layers(topo, specs)
    return ExperimentConfig(name, "cifar10", topo, preprocess="gcn+zca",
                            classifier=TrainConfig(lr=lr))


def _fcsnn(layout: str) -> ExperimentConfig:
    cfg = _mnist(f"fcsnn-{layout.lower()}", "16C3-2P-10FC", 2000)
    return replace(cfg, fcsnn=FcsnnConfig(window=layout_window(layout)))


def _builders() -> dict:
    inv = (ResidualSource(0, True), ResidualSource(1, True))
    res2 = (ResidualSource(0),)
    c3 = "36C3-36C3-36C3-2P-1024FC-10FC"
    fp = replace(_cifar_c1(), full_precision=True)
    return {
        "mnist-16c3": lambda: _mnist("mnist-16c3", "16C3-2P-10FC", 2000),
        "mnist-36c3": lambda: _mnist("mnist-36c3", "36C3-2P-10FC", 10000),
        "mnist-36c3-128fc": lambda: _mnist("mnist-36c3-128fc", "36C3-2P-128FC-10FC", 10000),
        "cifar-1": lambda: _cifar("cifar-1", "36C3-2P-1024FC-10FC", [_cifar_c1()]),
        "cifar-1-fp": lambda: _cifar("cifar-1-fp", "36C3-2P-1024FC-10FC", [fp]),
        "cifar-2": lambda: _cifar("cifar-2", "36C3-36C3-2P-1024FC-10FC",
                                  [_cifar_c1(), _cifar_deep(2, res2)]),
        "cifar-2-nores": lambda: _cifar("cifar-2-nores", "36C3-36C3-2P-1024FC-10FC",
                                        [_cifar_c1(), _cifar_deep(2)]),
        "cifar-3": lambda: _cifar("cifar-3", c3,
                                  [_cifar_c1(), _cifar_deep(2, res2), _cifar_deep(3, inv)]),
        "cifar-3a": lambda: _cifar("cifar-3a", c3,
                                   [_cifar_c1(), _cifar_deep(2, res2), _cifar_deep(3)], (3,)),
        "cifar-3b": lambda: _cifar("cifar-3b", c3,
                                   [_cifar_c1(), _cifar_deep(2, res2), _cifar_deep(3, inv)], (3,)),
        "fcsnn-hb": lambda: _fcsnn("HB"),
        "fcsnn-hb2": lambda: _fcsnn("HB2"),
        "fcsnn-hb3": lambda: _fcsnn("HB3"),
    }


PRESETS = tuple(_builders())


def preset(name: str) -> ExperimentConfig:
    builders = _builders()
    if name not in builders:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return builders[name]()
