"""Run configuration: a TOML file plus command-line overrides.

Layout (every table and key is optional; missing keys take the defaults)::

    seed = 0
    steps = 60000

    [data]
    source = "synthetic"        # or "folder" (a tree with dataset.toml)
    path = ""                   # folder root, required when source = "folder"
    train_split = "train"
    eval_split = "test"
    val_split = ""              # empty: no validation
    train_classes = 32          # synthetic generator settings
    test_classes = 8
    val_classes = 0
    per_class = 20
    glyph = 8
    scale = 2
    density = 0.4
    smooth = 1.0
    flip = 0.02
    noise = 0.2
    rotate_train = false

    [model]
    filters = 64
    key_dim = 512
    hidden = 512
    # width = 64                # D_w; omitted means `filters`
    # capacity = 25             # omitted means one slot per support sample

    [strategy]
    kind = "uniform"            # uniform | mixed_k | mixed_ck
    ways = [5, 5]               # inclusive range
    shots = [1, 1]
    queries = 5

    [optim]
    lr = 0.001
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8
    decay = 0.5
    decay_every = 20000
    batch = 16

    [train]
    checkpoint_every = 1000
    val_every = 1000
    val_episodes = 100
    average_matches = false

    [eval]
    ways = 5
    shots = 1
    episodes = 500
    queries = 15
    threads = 1
    per_class = false

    [output]
    checkpoint = "runs/model.ckpt"
    metrics = "runs/metrics.csv"
    eval_csv = "runs/eval.csv"
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .episodes import Dataset, SamplingStrategy, augment_rotations, glyph_splits, load_split, read_manifest
from .trainer import Adam, ModelConfig, TrainSettings


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    train_split: str = "train"
    eval_split: str = "test"
    val_split: str = ""
    train_classes: int = 32
    test_classes: int = 8
    val_classes: int = 0
    per_class: int = 20
    glyph: int = 8
    scale: int = 2
    density: float = 0.4
    smooth: float = 1.0
    flip: float = 0.02
    noise: float = 0.2
    rotate_train: bool = False


@dataclass
class ModelSection:
    filters: int = 64
    key_dim: int = 512
    hidden: int = 512
    width: int | None = None
    capacity: int | None = None


@dataclass
class StrategyConfig:
    kind: str = "uniform"
    ways: tuple[int, int] = (5, 5)
    shots: tuple[int, int] = (1, 1)
    queries: int = 5


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.5
    decay_every: int = 20000
    batch: int = 16


@dataclass
class TrainConfig:
    checkpoint_every: int = 1000
    val_every: int = 1000
    val_episodes: int = 100
    average_matches: bool = False


@dataclass
class EvalConfig:
    ways: int = 5
    shots: int = 1
    episodes: int = 500
    queries: int = 15
    threads: int = 1
    per_class: bool = False


@dataclass
class OutputConfig:
    checkpoint: str = "runs/model.ckpt"
    metrics: str = "runs/metrics.csv"
    eval_csv: str = "runs/eval.csv"


SECTIONS = {
    "data": DataConfig,
    "model": ModelSection,
    "strategy": StrategyConfig,
    "optim": OptimConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "output": OutputConfig,
}
STRATEGY_KINDS = ("uniform", "mixed_k", "mixed_ck")


@dataclass
class RunConfig:
    seed: int = 0
    steps: int = 60000
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "RunConfig":
        def need(cond: bool, name: str, msg: str):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(0 <= self.seed < 2**64, "seed", f"must be an unsigned 64-bit integer, got {self.seed}")
        need(self.steps >= 0, "steps", f"must be >= 0, got {self.steps}")
        d = self.data
        need(d.source in ("synthetic", "folder"), "data.source", f"must be 'synthetic' or 'folder', got {d.source!r}")
        if d.source == "folder":
            need(bool(d.path), "data.path", "required when data.source = 'folder'")
        else:
            for name in ("train_classes", "test_classes", "per_class", "glyph", "scale"):
                need(getattr(d, name) >= 1, f"data.{name}", f"must be >= 1, got {getattr(d, name)}")
            need(d.val_classes >= 0, "data.val_classes", f"must be >= 0, got {d.val_classes}")
            need(0.0 < d.density < 1.0, "data.density", f"must be in (0, 1), got {d.density}")
            need(0.0 <= d.flip <= 1.0, "data.flip", f"must be in [0, 1], got {d.flip}")
            need(d.smooth >= 0.0, "data.smooth", f"must be >= 0, got {d.smooth}")
            need(d.noise >= 0.0, "data.noise", f"must be >= 0, got {d.noise}")
        m = self.model
        for name in ("filters", "key_dim", "hidden"):
            need(getattr(m, name) >= 1, f"model.{name}", f"must be >= 1, got {getattr(m, name)}")
        for name in ("width", "capacity"):
            v = getattr(m, name)
            need(v is None or v >= 1, f"model.{name}", f"must be >= 1, got {v}")
        s = self.strategy
        need(s.kind in STRATEGY_KINDS, "strategy.kind", f"must be one of {', '.join(STRATEGY_KINDS)}, got {s.kind!r}")
        for name in ("ways", "shots"):
            lo, hi = getattr(s, name)
            need(lo >= 1, f"strategy.{name}", f"lower bound must be >= 1, got {lo}")
            need(lo <= hi, f"strategy.{name}", f"range is empty ({lo} > {hi})")
        need(s.kind != "uniform" or (s.ways[0] == s.ways[1] and s.shots[0] == s.shots[1]),
             "strategy.kind", "uniform needs single-valued ways and shots ranges")
        need(s.kind != "mixed_k" or s.ways[0] == s.ways[1], "strategy.ways", "mixed_k needs a single-valued ways range")
        need(s.queries >= 1, "strategy.queries", f"must be >= 1, got {s.queries}")
        o = self.optim
        need(o.lr > 0, "optim.lr", f"must be > 0, got {o.lr}")
        need(0 <= o.beta1 < 1, "optim.beta1", f"must be in [0, 1), got {o.beta1}")
        need(0 <= o.beta2 < 1, "optim.beta2", f"must be in [0, 1), got {o.beta2}")
        need(o.eps > 0, "optim.eps", f"must be > 0, got {o.eps}")
        need(0 < o.decay <= 1, "optim.decay", f"must be in (0, 1], got {o.decay}")
        need(o.decay_every >= 1, "optim.decay_every", f"must be >= 1, got {o.decay_every}")
        need(o.batch >= 1, "optim.batch", f"must be >= 1, got {o.batch}")
        t = self.train
        for name in ("checkpoint_every", "val_every", "val_episodes"):
            need(getattr(t, name) >= 0, f"train.{name}", f"must be >= 0, got {getattr(t, name)}")
        e = self.eval
        for name in ("ways", "shots", "episodes", "queries", "threads"):
            need(getattr(e, name) >= 1, f"eval.{name}", f"must be >= 1, got {getattr(e, name)}")
        return self

    # derived objects

    def input_shape(self) -> tuple[int, int, int]:
        if self.data.source == "folder":
            return read_manifest(self.data.path).spec.shape
        size = self.data.glyph * self.data.scale
        return (1, size, size)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(self.input_shape(), m.filters, m.key_dim, m.hidden, m.width, m.capacity)

    def sampling_strategy(self) -> SamplingStrategy:
        s = self.strategy
        return SamplingStrategy(
            tuple(range(s.ways[0], s.ways[1] + 1)), tuple(range(s.shots[0], s.shots[1] + 1)), s.queries
        )

    def optimizer(self) -> Adam:
        o = self.optim
        return Adam(base_lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, decay=o.decay, decay_every=o.decay_every)

    def train_settings(self) -> TrainSettings:
        t = self.train
        return TrainSettings(
            steps=self.steps,
            strategy=self.sampling_strategy(),
            seed=self.seed,
            batch=self.optim.batch,
            checkpoint_every=t.checkpoint_every,
            val_every=t.val_every,
            val_episodes=t.val_episodes,
            val_ways=self.eval.ways,
            val_shots=self.eval.shots,
            average_matches=t.average_matches,
        )

    def datasets(self) -> dict[str, Dataset]:
        """Splits keyed "train", "eval" and (if configured) "val"."""
        d = self.data
        if d.source == "folder":
            out = {"train": load_split(d.path, d.train_split), "eval": load_split(d.path, d.eval_split)}
            if d.val_split:
                out["val"] = load_split(d.path, d.val_split)
        else:
            sp = glyph_splits(
                self.seed,
                train_classes=d.train_classes,
                test_classes=d.test_classes,
                val_classes=d.val_classes,
                per_class=d.per_class,
                glyph=d.glyph,
                scale=d.scale,
                density=d.density,
                smooth=d.smooth,
                flip=d.flip,
                noise=d.noise,
            )
            out = {"train": sp["train"], "eval": sp["test"]}
            if "val" in sp:
                out["val"] = sp["val"]
            if d.rotate_train:
                out["train"] = augment_rotations(out["train"])
        return out


def _coerce(section: str, f, value):
    name = f"{section}.{f.name}" if section else f.name
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if kind.startswith("tuple"):
        if not (isinstance(value, (list, tuple)) and len(value) == 2 and all(_is_int(v) for v in value)):
            raise ConfigError(f"{name}: expected a [low, high] pair of integers, got {value!r}")
        return (int(value[0]), int(value[1]))
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true or false, got {value!r}")
        return value
    if kind.startswith("int"):
        if not _is_int(value):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _build(cls, section: str, table: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        prefix = f"{section}." if section else ""
        raise ConfigError(f"{prefix}{unknown[0]}: unknown key")
    return cls(**{k: _coerce(section, known[k], v) for k, v in table.items()})


def from_dict(raw: dict) -> RunConfig:
    top = {k: v for k, v in raw.items() if k not in SECTIONS}
    cfg = _build(RunConfig, "", {k: v for k, v in top.items()})
    for name, cls in SECTIONS.items():
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"{name}: expected a table")
        setattr(cfg, name, _build(cls, name, table))
    return cfg.validate()


def parse_config(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: invalid TOML ({exc})") from exc
    return from_dict(raw)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path} ({exc.strerror})") from exc
    return parse_config(text)


def to_dict(cfg: RunConfig) -> dict:
    def clean(d: dict) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items() if v is not None}

    raw = asdict(cfg)
    out = {"seed": raw.pop("seed"), "steps": raw.pop("steps")}
    for name in SECTIONS:
        out[name] = clean(raw[name])
    return out


def serialize_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def with_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Apply command-line values (None means "not given"); flags win over the file."""
    out = from_dict(to_dict(cfg))
    mapping = {
        "seed": ("", "seed"),
        "steps": ("", "steps"),
        "checkpoint": ("output", "checkpoint"),
        "ways": ("eval", "ways"),
        "shots": ("eval", "shots"),
        "episodes": ("eval", "episodes"),
        "threads": ("eval", "threads"),
    }
    for flag, value in flags.items():
        if value is None:
            continue
        if flag not in mapping:
            raise ConfigError(f"{flag}: not an overridable setting")
        section, key = mapping[flag]
        if section:
            setattr(out, section, replace(getattr(out, section), **{key: value}))
        else:
            setattr(out, key, value)
    return out.validate()
