"""Run configuration: a line-based ``key = value`` format with dotted sections.

Example::

    task = BISR
    model.K = 4
    train.max_iters = 3000
    degrade.sigma = 0.8, 1.6

``#`` starts a comment. Later keys override earlier ones; ``--set`` overrides
from the command line are applied after the file. Unknown keys, malformed
values and cross-field inconsistencies raise :class:`ConfigError` naming the
key and line.
"""

import dataclasses
from dataclasses import dataclass, field

from edpn.degradation import DegradeSpec
from edpn.errors import ConfigError
from edpn.inference import EnsembleSpec
from edpn.model import ModelConfig
from edpn.training import TrainConfig

_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "degrade": DegradeSpec,
    "ensemble": EnsembleSpec,
}
_EXCLUDED = {("model", "task"), ("degrade", "task"), ("degrade", "scale")}  # derived from ``task``


@dataclass
class Paths:
    corpus: str = ""
    out: str = ""
    checkpoint: str = ""
    input: str = ""


@dataclass
class InferOptions:
    tile: int = 0  # 0: whole image
    overlap: int = 16


@dataclass
class RunConfig:
    task: str = "BISR"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    degrade: DegradeSpec = field(default_factory=DegradeSpec)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    infer: InferOptions = field(default_factory=InferOptions)
    paths: Paths = field(default_factory=Paths)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.degrade.validate()
        self.ensemble.validate()
        mult = self.model.multiple
        if self.train.patch % mult:
            raise ConfigError(f"patch {self.train.patch} not divisible by pyramid factor {mult}", key="train.patch")
        if self.task == "BISR" and self.train.patch % self.model.scale:
            raise ConfigError(f"patch {self.train.patch} not divisible by scale {self.model.scale}", key="train.patch")
        if self.infer.tile and self.infer.tile % mult:
            raise ConfigError(f"tile {self.infer.tile} not divisible by {mult}", key="infer.tile")
        if self.infer.tile and self.infer.tile < 2 * self.infer.overlap:
            raise ConfigError("tile smaller than twice the overlap", key="infer.tile")
        return self


_ALL_SECTIONS = dict(_SECTIONS, infer=InferOptions, paths=Paths)


def _field_types():
    table = {"task": str}
    for sec, cls in _ALL_SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (sec, f.name) in _EXCLUDED:
                continue
            name = "lambda" if (sec, f.name) == ("train", "lam") else f.name
            table[f"{sec}.{name}"] = (f.type, f.name)
    return table


def _parse_bool(text):
    t = text.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_value(ftype, text, default):
    ftype = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    if ftype == "bool":
        return _parse_bool(text)
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    if ftype == "str":
        return text
    if ftype == "tuple":
        parts = [float(p) for p in text.split(",")]
        if len(parts) == 1:
            parts *= 2
        if len(parts) != 2:
            raise ValueError(f"expected 'lo, hi', got {text!r}")
        return tuple(parts)
    if ftype == "list":
        items = [p.strip() for p in text.split(",") if p.strip()]
        if default is not None and default and isinstance(default[0], float):
            return [float(p) for p in items]
        return items
    raise ValueError(f"unsupported field type {ftype}")


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def parse_entries(text, source="<config>"):
    """Split config text into ``{key: (value_text, line_no)}``; later lines win."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: expected 'key = value'", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}: empty key", line=lineno)
        entries[key] = (value, lineno)
    return entries


def build_config(entries):
    """Construct and validate a :class:`RunConfig` from parsed entries."""
    types = _field_types()
    for key, (_, lineno) in entries.items():
        if key not in types:
            raise ConfigError("unknown key", key=key, line=lineno)

    task_text, task_line = entries.get("task", ("BISR", None))
    if task_text not in ("BISR", "BID"):
        raise ConfigError(f"task must be BISR or BID, got {task_text!r}", key="task", line=task_line)
    task = task_text

    values = {sec: {} for sec in _ALL_SECTIONS}
    for key, (text, lineno) in entries.items():
        if key == "task":
            continue
        sec = key.split(".", 1)[0]
        ftype, attr = types[key]
        default = _defaults(sec).get(attr)
        try:
            values[sec][attr] = _parse_value(ftype, text, default)
        except ValueError as exc:
            raise ConfigError(f"bad value {text!r}: {exc}", key=key, line=lineno) from exc

    def line_of(key):
        return entries.get(key, (None, None))[1]

    model_vals = values["model"]
    if "scale" not in model_vals:
        model_vals["scale"] = 4 if task == "BISR" else 1
    elif (model_vals["scale"] == 4) != (task == "BISR"):
        raise ConfigError(
            f"scale {model_vals['scale']} is inconsistent with task {task}",
            key="model.scale",
            line=line_of("model.scale"),
        )
    if task == "BID" and "patch" not in values["train"]:
        values["train"]["patch"] = 160

    try:
        cfg = RunConfig(
            task=task,
            model=ModelConfig(task=task, **model_vals),
            train=TrainConfig(**values["train"]),
            degrade=DegradeSpec(task=task, scale=4, **values["degrade"]),
            ensemble=EnsembleSpec(**values["ensemble"]),
            infer=InferOptions(**values["infer"]),
            paths=Paths(**values["paths"]),
        )
        return cfg.validate()
    except ConfigError as exc:
        if exc.key is not None and exc.line is None and line_of(exc.key) is not None:
            raise ConfigError(str(exc).rsplit(" (", 1)[0], key=exc.key, line=line_of(exc.key)) from exc
        raise


def _defaults(sec):
    cls = _ALL_SECTIONS[sec]
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    if sec == "ensemble":
        out["model_weights"] = [0.0]  # marks the list as float-valued
    return out


def parse_config(text, overrides=(), source="<config>"):
    """Parse config text, then apply ``key=value`` override strings."""
    entries = parse_entries(text, source)
    for i, ov in enumerate(overrides, 1):
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value", line=f"--set #{i}")
        key, value = (p.strip() for p in ov.split("=", 1))
        entries[key] = (value, f"--set #{i}")
    return build_config(entries)


def load_config(path=None, overrides=()):
    text = ""
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_config(text, overrides, source=path or "<config>")


def to_text(cfg: RunConfig):
    """Serialise every key explicitly; ``parse_config(to_text(c)) == c``."""
    lines = [f"task = {cfg.task}"]
    for sec in _ALL_SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            if (sec, f.name) in _EXCLUDED:
                continue
            name = "lambda" if (sec, f.name) == ("train", "lam") else f.name
            lines.append(f"{sec}.{name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
