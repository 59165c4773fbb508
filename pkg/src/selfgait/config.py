"""Run configuration: a flat ``key = value`` file validated against a fixed schema.

Resolution order, later wins: schema default, profile overrides, config file,
command-line flags.  Unknown keys and unparseable values are hard errors
raised before any work starts.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .backbone import ABLATIONS, BackboneConfig
from .errors import ConfigError
from .finetune import FinetuneConfig
from .pretrain import PretrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    parse.__name__ = "choice"
    return parse


def _str(s: str) -> str:
    return s.strip()


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str
    path: bool = False  # machine-local; kept out of checkpoint metadata


SCHEMA: dict[str, Key] = {
    "profile": Key(_choice("standard", "desk"), "standard", "default set: full-size model or the small desk-scale one"),
    # locations
    "data_root": Key(_str, "", "dataset root directory", path=True),
    "out": Key(_str, "runs", "output directory", path=True),
    "from_pretrained": Key(_str, "", "pre-training checkpoint to fine-tune from (empty: random init)", path=True),
    "checkpoint": Key(_str, "", "checkpoint to evaluate", path=True),
    "device": Key(_str, "cpu", "torch device string"),
    # data
    "layout": Key(_choice("casia_b", "ou_mvlp"), "casia_b", "directory layout of data_root"),
    "split": Key(_choice("all", "custom", "casia_b_lt", "ou_mvlp"), "all",
                 "train/test identity split; 'all' trains on every identity and cannot be evaluated"),
    "train_ids": Key(_strs, (), "custom split: training identities (empty: everything not in test_ids)"),
    "test_ids": Key(_strs, (), "custom split: test identities (empty: everything not in train_ids)"),
    "pretrain_max_sequences": Key(int, 0, "cap on pre-training sequences, 0 = all"),
    "finetune_fraction": Key(float, 1.0, "fraction of labelled training data used for fine-tuning"),
    "fraction_mode": Key(_choice("identity", "sequence"), "identity", "how finetune_fraction is drawn"),
    # synthetic data
    "synth_identities": Key(int, 8, "synthetic identities"),
    "synth_sequences": Key(int, 4, "synthetic sequences per identity and condition"),
    "synth_views": Key(_ints, (0, 90), "synthetic view angles"),
    "synth_conditions": Key(_strs, ("NM",), "synthetic walking conditions"),
    "synth_frames": Key(int, 40, "frames per synthetic sequence"),
    # backbone
    "ablation": Key(_choice(*ABLATIONS), "full", "backbone variant"),
    "S": Key(int, 5, "pyramid scales"),
    "r": Key(int, 1, "temporal window radius"),
    "c": Key(int, 128, "per-stripe feature size"),
    "d1": Key(int, 128, "embedding size"),
    "cnn_channels": Key(_ints, (32, 32, 64), "shallow CNN widths"),
    "input_pool": Key(int, 1, "average-pool factor applied to frames before the CNN"),
    # optimisation
    "P": Key(int, 8, "identities per batch"),
    "K": Key(int, 2, "sequences per identity"),
    "k": Key(int, 30, "clip length"),
    "lr": Key(float, 1e-4, "Adam learning rate for fine-tuning"),
    "pretrain_lr": Key(float, 1e-4, "Adam learning rate for pre-training"),
    "iterations": Key(int, 1000, "training steps"),
    "seed": Key(int, 0, "run seed"),
    "log_every": Key(int, 1, "log a row every N steps"),
    "checkpoint_every": Key(int, 0, "periodic checkpoint interval, 0 = final only"),
    # pre-training
    "d2": Key(int, 256, "projection size"),
    "tau": Key(float, 0.99, "target EMA rate"),
    "share_fc_bins": Key(_bool, True, "target branch borrows the online FC bins"),
    "batch_norm": Key(_bool, True, "batch norm in the projection head"),
    # fine-tuning
    "margin": Key(float, 0.2, "triplet margin"),
    # evaluation
    "eval_protocol": Key(_choice("casia_b", "ou_mvlp", "custom"), "casia_b", "gallery/probe protocol"),
    "gallery_sequences": Key(_ints, (1, 2), "custom protocol: NM sequences in the gallery"),
    "probe_sequences": Key(_ints, (3, 4), "custom protocol: NM sequences used as probes"),
    "condition_probe_sequences": Key(_ints, (1, 2), "custom protocol: BG/CL sequences used as probes"),
    "exclude_identical_view": Key(_bool, True, "leave identical-view pairs out of the means"),
}

PROFILES: dict[str, dict[str, Any]] = {
    "standard": {},
    "desk": {"cnn_channels": (8, 8, 16), "c": 32, "d1": 32, "input_pool": 2, "d2": 64, "k": 8,
             "iterations": 500, "pretrain_lr": 1e-3},
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    raw: dict[str, str] = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r}")
        raw[key] = value
    return raw


def _convert(key: str, value: Any) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    try:
        return SCHEMA[key].parse(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from None


class RunConfig(Mapping[str, Any]):
    """Fully resolved settings; read keys as attributes or items."""

    def __init__(self, values: Mapping[str, Any]):
        missing = set(SCHEMA) - set(values)
        if missing:
            raise ConfigError(f"missing keys {sorted(missing)}")
        self._values = {k: _convert(k, v) for k, v in values.items()}
        self._check()

    @classmethod
    def resolve(cls, file: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        file_vals: dict[str, Any] = {}
        if file is not None:
            p = Path(file)
            try:
                text = p.read_text()
            except OSError as e:
                raise ConfigError(f"cannot read config file {p}: {e.strerror}") from None
            file_vals = {k: _convert(k, v) for k, v in parse_text(text, str(p)).items()}
        flag_vals = {k: _convert(k, v) for k, v in (overrides or {}).items()}
        profile = flag_vals.get("profile", file_vals.get("profile", SCHEMA["profile"].default))
        values = {k: key.default for k, key in SCHEMA.items()}
        values.update(PROFILES[profile])
        values.update(file_vals)
        values.update(flag_vals)
        values["profile"] = profile
        return cls(values)

    def _check(self) -> None:
        v = self._values
        positive = ("S", "c", "d1", "d2", "P", "K", "k", "log_every", "input_pool",
                    "synth_identities", "synth_sequences", "synth_frames")
        for key in positive:
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {v[key]}")
        for key in ("r", "iterations", "checkpoint_every", "pretrain_max_sequences"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {v[key]}")
        if not 0.0 <= v["tau"] <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if v["margin"] <= 0:
            raise ConfigError("margin must be positive")
        if v["lr"] < 0 or v["pretrain_lr"] < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 < v["finetune_fraction"] <= 1.0:
            raise ConfigError("finetune_fraction must lie in (0, 1]")
        if len(v["cnn_channels"]) != 3:
            raise ConfigError("cnn_channels needs three widths")
        if not v["synth_views"] or not v["synth_conditions"]:
            raise ConfigError("synth_views and synth_conditions must be non-empty")
        bad = set(v["synth_conditions"]) - {"NM", "BG", "CL"}
        if bad:
            raise ConfigError(f"unknown conditions {sorted(bad)}")
        try:
            self.backbone()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # Mapping protocol
    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(SCHEMA)

    def __len__(self) -> int:
        return len(self._values)

    def __getattr__(self, key: str) -> Any:
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def with_values(self, **changes) -> "RunConfig":
        return RunConfig({**self._values, **changes})

    # derived configs
    def backbone(self) -> BackboneConfig:
        v = self._values
        return BackboneConfig(cnn_channels=tuple(v["cnn_channels"]), scales=v["S"], stripe_dim=v["c"], d1=v["d1"],
                              radius=v["r"], ablation=v["ablation"], input_pool=v["input_pool"])

    def pretrain(self) -> PretrainConfig:
        v = self._values
        return PretrainConfig(lr=v["pretrain_lr"], iterations=v["iterations"], P=v["P"], K=v["K"], k=v["k"],
                              tau=v["tau"], d2=v["d2"], seed=v["seed"], share_fc_bins=v["share_fc_bins"],
                              batch_norm=v["batch_norm"], log_every=v["log_every"],
                              checkpoint_every=v["checkpoint_every"])

    def finetune(self) -> FinetuneConfig:
        v = self._values
        return FinetuneConfig(lr=v["lr"], iterations=v["iterations"], P=v["P"], K=v["K"], k=v["k"],
                              margin=v["margin"], seed=v["seed"], log_every=v["log_every"],
                              checkpoint_every=v["checkpoint_every"])

    # serialisation
    def echo(self, include_paths: bool = False) -> dict[str, Any]:
        """JSON-friendly copy; path keys are dropped unless asked for."""
        return {k: list(val) if isinstance(val, tuple) else val for k, val in self._values.items()
                if include_paths or not SCHEMA[k].path}

    def dump(self) -> str:
        return "".join(f"{k} = {format_value(self._values[k])}\n" for k in SCHEMA)

    def write(self, path: str | Path) -> Path:
        p = Path(path)
        p.write_text(self.dump())
        return p


def parse_assignments(items: Iterable[str]) -> dict[str, str]:
    """``["k=v", ...]`` from repeated ``--set`` flags."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out
