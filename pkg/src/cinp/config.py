"""JSON configuration: desk-scale defaults, strict validation, presets.

Empty input yields the full desk-scale default config. Unknown keys are
errors; out-of-range values raise with the dotted field path. The
``full-scale`` preset documents the original operating point (96^3 volumes,
116 ROIs, 768-dim embeddings, batch 256, 400 epochs) without making it the
default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .encoders import NetworkEncoderCfg, VisualEncoderCfg
from .errors import ParseError, UnknownKey, ValidationError
from .evalkit import ProbeCfg, SplitSpec
from .objectives import Hyper, TrainSetup
from .synthdata import AugmentCfg, CohortKnobs

_POS_INT = ("a positive integer", lambda v: isinstance(v, int) and not isinstance(v, bool) and v > 0)
_NONNEG_INT = ("a non-negative integer", lambda v: isinstance(v, int) and not isinstance(v, bool) and v >= 0)
_INT_GE2 = ("an integer >= 2", lambda v: isinstance(v, int) and not isinstance(v, bool) and v >= 2)
_NONNEG_NUM = ("a number >= 0", lambda v: isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0)
_POS_NUM = ("a number > 0", lambda v: isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0)
_UNIT_OPEN = ("a number in (0, 1)", lambda v: isinstance(v, (int, float)) and not isinstance(v, bool) and 0 < v < 1)
_UNIT_HALF_OPEN = ("a number in (0, 1]", lambda v: isinstance(v, (int, float)) and not isinstance(v, bool) and 0 < v <= 1)
_PROB = ("a number in [0, 1]", lambda v: isinstance(v, (int, float)) and not isinstance(v, bool) and 0 <= v <= 1)
_BOOL = ("a boolean", lambda v: isinstance(v, bool))
_SEED = ("an integer", lambda v: isinstance(v, int) and not isinstance(v, bool))


def _dims3(v) -> bool:
    return (isinstance(v, list) and len(v) == 3
            and all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in v))


def _pair(v) -> bool:
    return (isinstance(v, list) and len(v) == 2
            and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
            and v[0] <= v[1])


def _ratio3(v) -> bool:
    return (isinstance(v, list) and len(v) == 3
            and all(isinstance(x, (int, float)) and not isinstance(x, bool) and x >= 0 for x in v)
            and abs(sum(v) - 1.0) < 1e-12)


def _r_list(v) -> bool:
    return (isinstance(v, list) and len(v) >= 1
            and all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v))


# section -> field -> (default, description-of-valid-values, predicate)
_SCHEMA: dict[str, dict[str, tuple]] = {
    "cohort": {
        "n_subjects": (256, *_INT_GE2),
        "k_classes": (2, *_INT_GE2),
        "dims": ([16, 16, 16], "three positive integers", _dims3),
        "n_rois": (16, *_INT_GE2),
        "n_timepoints": (200, *_INT_GE2),
    },
    "visual": {
        "patch_size": (4, *_POS_INT),
        "embed_dim": (64, *_POS_INT),
        "n_layers": (2, *_POS_INT),
        "n_heads": (2, *_POS_INT),
    },
    "network": {
        "embed_dim": (64, *_POS_INT),
        "n_layers": (2, *_POS_INT),
        "n_heads": (2, *_POS_INT),
        "use_positional": (False, *_BOOL),
    },
    "hyper": {
        "epochs": (50, *_NONNEG_INT),
        "batch_size": (16, *_INT_GE2),
        "lr_initial": (3e-3, *_POS_NUM),
        "lr_min": (3e-4, *_NONNEG_NUM),
        "alpha": (1.0, *_NONNEG_NUM),
        "beta": (1.0, *_NONNEG_NUM),
        "weight_decay": (1e-5, *_NONNEG_NUM),
        "mask_ratio": (0.30, *_UNIT_OPEN),
    },
    "augment": {
        "noise_sigma": (0.05, *_NONNEG_NUM),
        "flip_prob": (0.5, *_PROB),
        "scale_range": ([0.9, 1.1], "a [lo, hi] pair with lo <= hi", _pair),
        "shift_range": ([-0.1, 0.1], "a [lo, hi] pair with lo <= hi", _pair),
    },
    "eval": {
        "split": ([0.70, 0.10, 0.20], "three ratios summing to 1", _ratio3),
        "probe_l2": (1e-3, *_NONNEG_NUM),
        "probe_epochs": (2000, *_POS_INT),
        "probe_lr": (0.5, *_POS_NUM),
        "prompt_r": ([1, 5, 10], "a list of integers >= 1", _r_list),
        "fcn_fraction": (0.10, *_UNIT_HALF_OPEN),
    },
}

_TOP_LEVEL_SCALARS = {"seed": (0, *_SEED)}


@dataclass
class Config:
    """Validated configuration; see _SCHEMA for fields and defaults."""

    seed: int
    cohort: dict
    visual: dict
    network: dict
    hyper: dict
    augment: dict
    eval: dict

    # -- constructors ---------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        if not isinstance(data, dict):
            raise ValidationError("config root must be a JSON object")
        for key in data:
            if key not in _SCHEMA and key not in _TOP_LEVEL_SCALARS:
                raise UnknownKey(f"unknown config key {key!r}")
        values: dict = {}
        for key, (default, desc, check) in _TOP_LEVEL_SCALARS.items():
            v = data.get(key, default)
            if not check(v):
                raise ValidationError(f"{key}: expected {desc}, got {v!r}")
            values[key] = v
        for section, fields in _SCHEMA.items():
            given = data.get(section, {})
            if not isinstance(given, dict):
                raise ValidationError(f"{section}: expected an object")
            for key in given:
                if key not in fields:
                    raise UnknownKey(f"unknown config key {section!r}.{key!r}")
            out = {}
            for key, (default, desc, check) in fields.items():
                v = given.get(key, default)
                if not check(v):
                    raise ValidationError(f"{section}.{key}: expected {desc}, got {v!r}")
                out[key] = v
            values[section] = out
        cfg = cls(**values)
        cfg._validate_cross_fields()
        return cfg

    @classmethod
    def default(cls) -> "Config":
        return cls.from_dict({})

    def _validate_cross_fields(self) -> None:
        if self.network["embed_dim"] != self.visual["embed_dim"]:
            raise ValidationError(
                "network.embed_dim: must equal visual.embed_dim "
                f"({self.network['embed_dim']} != {self.visual['embed_dim']})")
        if any(d % self.visual["patch_size"] != 0 for d in self.cohort["dims"]):
            raise ValidationError(
                f"visual.patch_size: {self.visual['patch_size']} does not divide "
                f"cohort.dims {self.cohort['dims']}")
        if self.visual["embed_dim"] % self.visual["n_heads"] != 0:
            raise ValidationError("visual.n_heads: must divide visual.embed_dim")
        if self.network["embed_dim"] % self.network["n_heads"] != 0:
            raise ValidationError("network.n_heads: must divide network.embed_dim")
        if self.hyper["lr_min"] > self.hyper["lr_initial"]:
            raise ValidationError("hyper.lr_min: must be <= hyper.lr_initial")
        if self.cohort["n_subjects"] < self.cohort["k_classes"]:
            raise ValidationError("cohort.n_subjects: must be >= cohort.k_classes")
        if self.cohort["n_subjects"] < self.hyper["batch_size"]:
            raise ValidationError("hyper.batch_size: must be <= cohort.n_subjects")

    # -- derived objects ------------------------------------------------------

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "cohort": dict(self.cohort),
            "visual": dict(self.visual),
            "network": dict(self.network),
            "hyper": dict(self.hyper),
            "augment": dict(self.augment),
            "eval": dict(self.eval),
        }

    def visual_cfg(self) -> VisualEncoderCfg:
        return VisualEncoderCfg(
            patch_size=self.visual["patch_size"],
            embed_dim=self.visual["embed_dim"],
            n_layers=self.visual["n_layers"],
            n_heads=self.visual["n_heads"],
            input_dims=tuple(self.cohort["dims"]),
        )

    def network_cfg(self) -> NetworkEncoderCfg:
        return NetworkEncoderCfg(
            embed_dim=self.network["embed_dim"],
            n_layers=self.network["n_layers"],
            n_heads=self.network["n_heads"],
            n_rois=self.cohort["n_rois"],
            use_positional=self.network["use_positional"],
        )

    def augment_cfg(self) -> AugmentCfg:
        return AugmentCfg(
            noise_sigma=self.augment["noise_sigma"],
            flip_prob=self.augment["flip_prob"],
            intensity_scale_range=tuple(self.augment["scale_range"]),
            intensity_shift_range=tuple(self.augment["shift_range"]),
        )

    def train_setup(self) -> TrainSetup:
        return TrainSetup(
            vcfg=self.visual_cfg(),
            ncfg=self.network_cfg(),
            augment=self.augment_cfg(),
            mask_ratio=self.hyper["mask_ratio"],
        )

    def hyper_cfg(self) -> Hyper:
        return Hyper(
            epochs=self.hyper["epochs"],
            batch_size=self.hyper["batch_size"],
            lr_initial=float(self.hyper["lr_initial"]),
            lr_min=float(self.hyper["lr_min"]),
            alpha=float(self.hyper["alpha"]),
            beta=float(self.hyper["beta"]),
            weight_decay=float(self.hyper["weight_decay"]),
            seed=self.seed,
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(ratios=tuple(self.eval["split"]), seed=self.seed)

    def probe_cfg(self) -> ProbeCfg:
        return ProbeCfg(
            l2=float(self.eval["probe_l2"]),
            epochs=self.eval["probe_epochs"],
            lr=float(self.eval["probe_lr"]),
            seed=self.seed,
        )

    def cohort_knobs(self) -> CohortKnobs:
        return CohortKnobs()


def load_config(path: str | Path) -> Config:
    """Parse and validate a JSON config file; defaults fill absent fields."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc}") from exc
    return Config.from_dict(data)


def preset_path(name: str) -> Path:
    """Path of a packaged preset config (e.g. 'full-scale')."""
    candidate = resources.files("cinp").joinpath("presets", f"{name}.json")
    with resources.as_file(candidate) as p:
        if not p.exists():
            raise ParseError(f"no preset named {name!r}")
        return Path(p)
