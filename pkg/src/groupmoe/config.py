"""Run configuration: one YAML file with sections mirroring the module
configs. Command-line flags override file values (flag > file > default).

Defaults pin the reference hyperparameters: lr 5e-4, loss weights
alpha 2e-3 / beta 1, window length 5, 60 max epochs, top-8 routing over
7 groups of 9 experts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .encoders import EncoderConfig
from .moe import MoEConfig
from .objective import LossWeights
from .panel import SplitSpec
from .synth import SynthConfig
from .train import TrainConfig


class RunConfigError(ValueError):
    """Carries every violation found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("\n".join(problems))


@dataclass
class PortfolioConfig:
    mode: str = "long_only"
    fraction: float = 0.05

    def validate(self) -> list[str]:
        problems = []
        if self.mode not in ("long_only", "long_short"):
            problems.append(f"portfolio.mode must be long_only|long_short, got {self.mode!r}")
        if not (0 < self.fraction <= 1):
            problems.append(f"portfolio.fraction must be in (0, 1], got {self.fraction}")
        return problems


@dataclass
class RunConfig:
    data: str = "panel.csv"
    output: str = "runs/default"
    window: int = 5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    split: SplitSpec | None = None
    portfolio: PortfolioConfig = field(default_factory=PortfolioConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> list[str]:
        problems = []
        if self.window < 1:
            problems.append(f"window must be >= 1, got {self.window}")
        problems += self.encoder.validate()
        problems += self.moe.validate()
        problems += self.train.validate()
        problems += self.loss.validate()
        problems += self.portfolio.validate()
        problems += self.synth.validate()
        if self.split is not None:
            problems += self.split.validate()
        return problems

    def to_dict(self) -> dict:
        d = {
            "data": self.data,
            "output": self.output,
            "window": self.window,
            "encoder": asdict(self.encoder),
            "moe": asdict(self.moe),
            "train": asdict(self.train),
            "loss": asdict(self.loss),
            "portfolio": asdict(self.portfolio),
            "synth": asdict(self.synth),
        }
        if self.split is not None:
            d["split"] = {
                "train": list(self.split.train),
                "validation": list(self.split.validation),
                "test": list(self.split.test),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        problems = []
        known = {"data", "output", "window", "encoder", "moe", "train", "loss", "split", "portfolio", "synth"}
        for key in d:
            if key not in known:
                problems.append(f"unknown config section {key!r}")

        def build(section, klass, default):
            raw = d.get(section)
            if raw is None:
                return default()
            if not isinstance(raw, dict):
                problems.append(f"section {section!r} must be a mapping")
                return default()
            import dataclasses

            names = {f.name for f in dataclasses.fields(klass)}
            bad = [k for k in raw if k not in names]
            if bad:
                problems.append(f"section {section!r}: unknown key(s) {bad}")
            try:
                return klass(**{k: v for k, v in raw.items() if k in names})
            except (TypeError, ValueError) as e:
                problems.append(f"section {section!r}: {e}")
                return default()

        split = None
        if "split" in d and d["split"] is not None:
            raw = d["split"]
            try:
                split = SplitSpec(
                    train=tuple(str(x) for x in raw["train"]),
                    validation=tuple(str(x) for x in raw["validation"]),
                    test=tuple(str(x) for x in raw["test"]),
                )
            except (KeyError, TypeError) as e:
                problems.append(f"section 'split': needs train/validation/test [start, end) pairs ({e})")

        cfg = cls(
            data=str(d.get("data", cls.data)),
            output=str(d.get("output", cls.output)),
            window=int(d.get("window", cls.window)),
            encoder=build("encoder", EncoderConfig, EncoderConfig),
            moe=build("moe", MoEConfig, MoEConfig),
            train=build("train", TrainConfig, TrainConfig),
            loss=build("loss", LossWeights, LossWeights),
            split=split,
            portfolio=build("portfolio", PortfolioConfig, PortfolioConfig),
            synth=build("synth", SynthConfig, SynthConfig),
        )
        problems += cfg.validate()
        if problems:
            raise RunConfigError(problems)
        return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise RunConfigError([f"config file not found: {path}"]) from None
    except yaml.YAMLError as e:
        raise RunConfigError([f"config file {path} is not valid YAML: {e}"]) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise RunConfigError([f"config file {path} must contain a mapping at top level"])
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
