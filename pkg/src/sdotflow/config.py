"""Plain-text ``key = value`` run configuration shared by all subcommands.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Every key has a default (see :data:`KEYS`); unknown keys are rejected.
:meth:`RunConfig.to_text` writes every key, sorted, in canonical form, so
parsing that text gives back an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ValidationError
from .flow import SHORTCUT_STEPS, Coupling, Target, TrainConfig
from .sampler import POLICIES, SCHEMES
from .sdot import SdotConfig, Stage


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_stages(text: str) -> tuple[Stage, ...]:
    stages = []
    for item in text.split(","):
        fields = item.strip().split(":")
        if len(fields) != 5:
            raise ValueError(f"stage {item.strip()!r} needs steps:lr:batch:beta:eps")
        stages.append(Stage(int(fields[0]), float(fields[1]), int(fields[2]),
                            float(fields[3]), float(fields[4])))
    return tuple(stages)


def _format_stages(stages) -> str:
    return ",".join(f"{s.num_steps}:{s.learning_rate!r}:{s.batch_size}:{s.ema_beta!r}:{s.entropic_eps!r}"
                    for s in stages)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _format_seq(values) -> str:
    return ",".join(repr(v) for v in values)


def _parse_mix(text: str) -> tuple[tuple[int, int], ...]:
    pairs = []
    for item in text.split(","):
        if not item.strip():
            continue
        c, n = item.split(":")
        pairs.append((int(c), int(n)))
    return tuple(sorted(pairs))


def _format_mix(mix) -> str:
    return ",".join(f"{c}:{n}" for c, n in mix)


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"{value!r} is not one of {tuple(options)}")
        return value
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str
    fmt: Callable[[Any], str] = str


_FLOAT = dict(parse=float, fmt=repr)

KEYS: dict[str, Key] = {
    "data": Key(str, "", "input point file"),
    "out": Key(str, "out", "output directory"),
    "duals": Key(str, "", "directory of dual-weight files; empty means the output directory"),
    "pairs": Key(str, "", "pair file; empty means <out>/pairs.bin"),
    "model": Key(str, "", "network checkpoint; empty means <out>/model.ckpt"),
    "samples": Key(str, "", "sample point file; empty means <out>/samples.txt"),
    "reference": Key(str, "", "reference point file for W2; empty means the data file"),
    "trajectories": Key(str, "", "trajectory CSV; empty means <out>/trajectories.csv"),
    "checkerboard.n": Key(int, 1000, "number of checkerboard points"),
    "checkerboard.seed": Key(int, 0, "seed of the checkerboard sample"),
    "sdot.stages": Key(_parse_stages, (Stage(2000, 0.1, 4096, 0.99, 0.0),),
                       "comma-separated stages steps:lr:batch:ema_beta:entropic_eps", _format_stages),
    "sdot.adam_beta1": Key(default=0.9, doc="Adam first-moment decay", **_FLOAT),
    "sdot.adam_beta2": Key(default=0.999, doc="Adam second-moment decay", **_FLOAT),
    "sdot.adam_eps": Key(default=1e-8, doc="Adam denominator offset", **_FLOAT),
    "sdot.seed": Key(int, 0, "seed of the dual-ascent noise stream"),
    "sdot.threshold": Key(default=0.2, doc="fail when the final mre_est is at or above this", **_FLOAT),
    "pairs.count": Key(int, 0, "number of pairs M; 0 means train.steps * train.batch_size"),
    "pairs.seed": Key(int, 0, "master seed of the pair stream"),
    "pairs.rebalance": Key(_parse_bool, False, "equalize per-point frequencies", lambda v: str(v).lower()),
    "pairs.shuffle": Key(_parse_bool, True, "permute the records after a rebalance", lambda v: str(v).lower()),
    "pairs.class_mix": Key(_parse_mix, (), "class:count list; empty means proportional to class sizes",
                           _format_mix),
    "train.batch_size": Key(int, 256, "minibatch size B"),
    "train.steps": Key(int, 20000, "number of training steps K"),
    "train.lr": Key(default=1e-3, doc="Adam learning rate", **_FLOAT),
    "train.loss_p": Key(default=2.0, doc="loss exponent p", **_FLOAT),
    "train.coupling": Key(_choice([c.value for c in Coupling]), "independent", "noise-data coupling"),
    "train.target": Key(_choice([t.value for t in Target]), "vanilla", "regression target"),
    "train.shortcut_kappa": Key(int, 0, "flow-matching slots per shortcut batch"),
    "train.shortcut_steps": Key(_parse_floats, SHORTCUT_STEPS, "admissible shortcut step sizes", _format_seq),
    "train.meanflow_equal_prob": Key(default=0.75, doc="probability of r = t for the mean-flow target",
                                     **_FLOAT),
    "train.hidden": Key(_parse_ints, (128, 128, 128), "hidden layer widths", _format_seq),
    "train.embed_width": Key(int, 16, "sinusoidal embedding width"),
    "train.seed": Key(int, 0, "seed of initialization and the training stream"),
    "train.loss_ema_beta": Key(default=0.99, doc="smoothing of the logged loss", **_FLOAT),
    "sample.count": Key(int, 1024, "number of samples"),
    "sample.first": Key(int, 0, "index of the first sample in the seed range"),
    "sample.seed": Key(int, 0, "master seed; sample j starts from the noise of mix_seed(seed, j)"),
    "sample.steps": Key(int, 100, "integration steps"),
    "sample.scheme": Key(_choice(SCHEMES), "euler", "integration scheme"),
    "sample.policy": Key(_choice(POLICIES), "plain", "extra-input policy of the network"),
    "sample.trajectories": Key(int, 64, "number of trajectories written to the CSV"),
}


class RunConfig:
    """Resolved configuration; every key of :data:`KEYS` has a value."""

    def __init__(self, values: dict | None = None):
        self._values = {k: key.default for k, key in KEYS.items()}
        for key, value in (values or {}).items():
            self._check_key(key)
            self._values[key] = value

    @staticmethod
    def _check_key(key: str) -> None:
        if key not in KEYS:
            raise ValidationError(f"unknown config key {key!r}")

    def __getitem__(self, key: str):
        self._check_key(key)
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.to_text() == other.to_text()

    def __repr__(self) -> str:
        return f"RunConfig({len(self._values)} keys)"

    def with_values(self, updates: dict) -> "RunConfig":
        """Copy with already-typed values replaced."""
        return RunConfig({**self._values, **updates})

    def with_text(self, assignments) -> "RunConfig":
        """Apply ``key=value`` strings on top of this config."""
        parsed = dict(self._values)
        for line_no, item in enumerate(assignments, start=1):
            key, value = _split(item, line_no)
            parsed[key] = _parse_value(key, value, line_no)
        return RunConfig(parsed)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        assignments = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            assignments.append(line)
        return cls().with_text(a for a in assignments if a)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {KEYS[k].fmt(self._values[k])}\n" for k in sorted(KEYS))

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    # --- typed views --------------------------------------------------------

    def sdot_config(self) -> SdotConfig:
        return SdotConfig(self["sdot.stages"], self["sdot.adam_beta1"], self["sdot.adam_beta2"],
                          self["sdot.adam_eps"], self["sdot.seed"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self["train.batch_size"], num_steps=self["train.steps"],
            learning_rate=self["train.lr"], loss_p=self["train.loss_p"],
            coupling=self["train.coupling"], target=self["train.target"],
            shortcut_kappa=self["train.shortcut_kappa"], shortcut_steps=self["train.shortcut_steps"],
            meanflow_equal_prob=self["train.meanflow_equal_prob"], hidden=self["train.hidden"],
            embed_width=self["train.embed_width"], master_seed=self["train.seed"],
            loss_ema_beta=self["train.loss_ema_beta"],
        )


def _split(item: str, line_no: int) -> tuple[str, str]:
    if "=" not in item:
        raise ValidationError(f"config entry {line_no}: expected key=value, got {item!r}")
    key, value = item.split("=", 1)
    key = key.strip()
    if key not in KEYS:
        raise ValidationError(f"config entry {line_no}: unknown key {key!r}")
    return key, value.strip()


def _parse_value(key: str, value: str, line_no: int = 0):
    try:
        return KEYS[key].parse(value)
    except (ValueError, ValidationError) as exc:
        raise ValidationError(f"config entry {line_no}: bad value for {key}: {exc}") from None


def describe_keys() -> str:
    """One line per key with its default, for ``--help`` output."""
    return "\n".join(f"  {k} = {KEYS[k].fmt(KEYS[k].default)}    {KEYS[k].doc}" for k in sorted(KEYS))
