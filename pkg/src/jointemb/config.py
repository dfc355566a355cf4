"""Run configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

# every valid (mode, loss) combination; anything else is rejected at parse time
LOSSES_BY_MODE = {
    "classical": ("xent",),
    "siamese": ("smcl", "dmcl"),
    "triplet": ("triplet-offline", "triplet-random", "triplet-semihard", "triplet-hardest",
                "npair-all", "npair-hard"),
}
DEFAULT_LOSS = {"classical": "xent", "siamese": "smcl", "triplet": "triplet-semihard"}
METRICS = ("seuclidean", "cosine")


class ConfigError(ValueError):
    """A bad key or value; ``key`` names the offender."""

    def __init__(self, key, msg):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    mode: str = "siamese"
    loss: str = "smcl"
    k: int = 8
    lr: float = 1e-4
    batch: int = 4
    epochs: int = 50
    gamma: float = 0.1
    step_epochs: int = 8
    seed: int = 0
    margin: float = 1.0
    margin_pos: float = 0.5
    margin_neg: float = 0.5
    triplet_margin: float = 1.0
    metric: str = "seuclidean"
    manifest: str = ""
    model: str = ""
    out: str = ""

    def __post_init__(self):
        if self.mode not in LOSSES_BY_MODE:
            raise ConfigError("mode", f"unknown mode {self.mode!r}; "
                                      f"choose from {sorted(LOSSES_BY_MODE)}")
        if self.loss not in LOSSES_BY_MODE[self.mode]:
            raise ConfigError("loss", f"{self.loss!r} is not a {self.mode} loss; valid: "
                                      f"{', '.join(LOSSES_BY_MODE[self.mode])}")
        if self.metric not in METRICS:
            raise ConfigError("metric", f"unknown metric {self.metric!r}")
        for key in ("k", "batch", "step_epochs"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be a positive integer")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.mode != "classical" and (self.batch < 4 or self.batch % 2):
            raise ConfigError("batch", "pair and triplet modes need an even batch >= 4")
        for key in ("lr", "gamma", "margin", "margin_pos", "margin_neg", "triplet_margin"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be > 0")


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key, raw, types=None):
    types = _TYPES if types is None else types
    if key not in types:
        raise ConfigError(key, "unknown key")
    kind = types[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from None
    return str(raw)


def parse_kv(text, types=None):
    """Parse ``key = value`` lines (``#`` comments, blank lines ignored)."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {n} is not of the form key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = coerce(key, value, types)
    return out


def load_config(path=None, overrides=None):
    """Build a RunConfig from an optional file, then apply non-None overrides.

    If the mode is set but the loss is not, the mode's default loss is used.
    """
    values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
        values.update(parse_kv(text))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    if "mode" in values and "loss" not in values:
        values["loss"] = DEFAULT_LOSS.get(values["mode"], "")
    return replace(RunConfig(), **values) if values else RunConfig()
