"""Flat ``key = value`` run configuration shared by every subcommand."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .attention import AttentionVariant
from .dataset import DEFAULT_BOUNDARIES, DEFAULT_MIN_EMIT, BucketSpec
from .errors import ConfigError
from .model import EncoderConfig
from .train import TrainConfig

_BOOL = {"true": True, "1": True, "yes": True, "on": True, "false": False, "0": False, "no": False, "off": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {text!r}") from None


def _parse_boundaries(text: str):
    out = []
    for part in text.split(","):
        lo, sep, hi = part.strip().partition("-")
        if not sep:
            raise ValueError(f"bucket interval {part!r} is not 'lo-hi'")
        out.append((int(lo), int(hi)))
    return tuple(out)


def _format_boundaries(value) -> str:
    return ",".join(f"{lo}-{hi}" for lo, hi in value)


def _parse_ints(text: str):
    return tuple(int(x) for x in text.split(","))


def _choice(*options):
    def parse(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text

    return parse


_MODEL_KEYS = ("layers", "heads", "hidden", "ffn", "variant", "dropout", "features",
               "feature_kind", "scale_scores", "rotary_base", "ln_eps", "dtype")
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed")

# key -> (parser, formatter, default)
SCHEMA: dict[str, tuple] = {}


def _register(key, parser, default, formatter=str):
    SCHEMA[key] = (parser, formatter, default)


def _field_parser(tp, default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


_register("seed", int, 0)
_register("preset", _choice("toy", "xl"), "toy")
_enc_defaults = {f.name: f.default for f in dataclasses.fields(EncoderConfig)}
for key in _MODEL_KEYS:
    d = _enc_defaults[key]
    if key == "variant":
        _register(key, lambda t: AttentionVariant(t.strip()).value, d.value)
    elif key == "feature_kind":
        _register(key, _choice("relu", "elu1"), d)
    elif key == "dtype":
        _register(key, _choice("float32", "float64"), d)
    else:
        _register(key, _field_parser(type(d), d), d, lambda v: repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v))
_train_defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
for key in _TRAIN_KEYS:
    d = _train_defaults[key]
    _register(key, _field_parser(type(d), d), d, lambda v: repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v))
_register("bucket_boundaries", _parse_boundaries, DEFAULT_BOUNDARIES, _format_boundaries)
_register("bucket_min_emit", _parse_ints, DEFAULT_MIN_EMIT, lambda v: ",".join(map(str, v)))
_register("task", _choice("regression", "classification"), "regression")
_register("mode", _choice("frozen", "finetuned"), "frozen")
_register("analysis_layers", str, "all")
_register("distance_transform", _choice("exp", "inverse", "indicator"), "exp")
_register("distance_d0", float, 2.0, repr)
_register("analysis_max_len", int, 256)
_register("fingerprint_width", int, 2048)
_register("fingerprint_max_n", int, 3)

# Explicit preset values; individual keys set in a file or on the command line win.
PRESETS = {
    "toy": {"layers": 2, "heads": 2, "hidden": 64, "ffn": 256},
    "xl": {"layers": 12, "heads": 12, "hidden": 768, "ffn": 3072},
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def encoder(self, vocab_size: int) -> EncoderConfig:
        kw = {k: self.values[k] for k in _MODEL_KEYS}
        return EncoderConfig(vocab_size=vocab_size, seed=self.values["seed"], **kw)

    def train(self) -> TrainConfig:
        kw = {k: self.values[k] for k in _TRAIN_KEYS}
        return TrainConfig(seed=self.values["seed"], **kw)

    def buckets(self) -> BucketSpec:
        try:
            return BucketSpec(self.values["bucket_boundaries"], self.values["bucket_min_emit"])
        except ValueError as exc:
            raise ConfigError([f"bucket_boundaries/bucket_min_emit: {exc}"]) from None

    def layers(self, n_layers: int):
        spec = self.values["analysis_layers"].strip()
        if spec == "all":
            return list(range(n_layers))
        try:
            layers = [int(x) for x in spec.split(",")]
        except ValueError:
            raise ConfigError([f"analysis_layers: expected 'all' or comma-separated ints, got {spec!r}"]) from None
        bad = [l for l in layers if not 0 <= l < n_layers]
        if bad:
            raise ConfigError([f"analysis_layers: {bad} outside 0..{n_layers - 1}"])
        return layers

    def dump(self) -> str:
        lines = []
        for key, (_, fmt, _) in SCHEMA.items():
            lines.append(f"{key} = {fmt(self.values[key])}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")
        return path


def parse_pairs(pairs, source: str, problems: list[str]) -> dict:
    """Parse ``(key, text)`` pairs against the schema, collecting every problem."""
    out = {}
    for key, text in pairs:
        if key not in SCHEMA:
            problems.append(f"{source}: unknown key {key!r}")
            continue
        try:
            out[key] = SCHEMA[key][0](text)
        except (ValueError, TypeError) as exc:
            problems.append(f"{source}: {key}: {exc}")
    return out


def read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError([f"{path}:{lineno}: expected 'key = value', got {raw!r}"])
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then preset, then file values, then overrides (later wins)."""
    problems: list[str] = []
    file_values = parse_pairs(read_pairs(path), str(path), problems) if path else {}
    override_values = parse_pairs(overrides, "command line", problems)
    if problems:
        raise ConfigError(problems)
    values = {k: spec[2] for k, spec in SCHEMA.items()}
    preset = override_values.get("preset", file_values.get("preset", "toy"))
    values.update(PRESETS[preset])
    values.update(file_values)
    values.update(override_values)
    cfg = RunConfig(values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    problems = []
    for key in ("layers", "heads", "hidden", "ffn", "features", "batch_size", "finetune_batch_size", "head_hidden"):
        if v[key] < 1:
            problems.append(f"{key}: must be >= 1")
    if v["hidden"] >= 1 and v["heads"] >= 1:
        if v["hidden"] % v["heads"]:
            problems.append(f"hidden: {v['hidden']} not divisible by heads {v['heads']}")
        elif (v["hidden"] // v["heads"]) % 2:
            problems.append("hidden/heads: head dimension must be even")
    if v["features"] % 2:
        problems.append("features: must be even")
    for key in ("dropout", "head_dropout", "select_p", "mask_p", "random_p"):
        if not 0.0 <= v[key] <= 1.0:
            problems.append(f"{key}: must lie in [0, 1]")
    if v["mask_p"] + v["random_p"] > 1.0:
        problems.append("mask_p + random_p: must not exceed 1")
    for key in ("lr", "finetune_lr"):
        if v[key] < 0:
            problems.append(f"{key}: must be >= 0")
    for key in ("epochs", "finetune_epochs", "checkpoint_every", "eval_every"):
        if v[key] < 0:
            problems.append(f"{key}: must be >= 0")
    try:
        BucketSpec(v["bucket_boundaries"], v["bucket_min_emit"])
    except ValueError as exc:
        problems.append(f"bucket_boundaries/bucket_min_emit: {exc}")
    if v["fingerprint_width"] < 1 or v["fingerprint_max_n"] < 1:
        problems.append("fingerprint_width/fingerprint_max_n: must be >= 1")
    if problems:
        raise ConfigError(problems)
