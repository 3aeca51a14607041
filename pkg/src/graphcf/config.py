"""Run configuration: one structured YAML file, strict keys, CLI overrides,
and a single root seed fanned out per subsystem."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import yaml

from graphcf.errors import ConfigError

_SEED_STREAMS = {
    "synth": 0,
    "split": 1,
    "refine": 2,
    "model-init": 3,
    "train": 4,
    "evaluate": 5,
    "estimate": 6,
}


def derive_seed(root_seed: int, stream: str) -> int:
    """Deterministic per-subsystem seed: SeedSequence(root, spawn_key=(index,))."""
    try:
        idx = _SEED_STREAMS[stream]
    except KeyError:
        raise ConfigError(f"unknown seed stream {stream!r}") from None
    seq = np.random.SeedSequence(root_seed, spawn_key=(idx,))
    return int(seq.generate_state(1)[0])


@dataclass
class PathsBlock:
    expression: str = "expression.tsv"
    covariates: str = "covariates.tsv"
    treatments: str = "treatments.tsv"
    graph_edges: str = "graph.edges.tsv"
    graph_features: str = "graph.features.tsv"
    output_dir: str = "out"


@dataclass
class ModelBlock:
    latent_dim: int = 32
    graph_dim: int = 8
    encoder_hidden: list = field(default_factory=lambda: [128])
    decoder_hidden: list = field(default_factory=lambda: [128])
    gcn_hidden: list = field(default_factory=list)
    attention_mode: str = "key-independent"
    aggr: str = "mean"
    attention_init_gain: float = 5.0
    output_logvar_init: float = 1.0


@dataclass
class TrainingBlock:
    omega1: float = 1.0
    omega2: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 4
    eval_every: int = 5
    cf_mode: str = "uniform-other"
    seed: Optional[int] = None


@dataclass
class RefinementBlock:
    keep_rate_prior: float = 0.9
    keep_rate_other: float = 0.1
    lasso_weight: float = 0.01
    threshold: float = 0.3
    epochs: int = 30
    learning_rate: float = 1e-2
    batch_size: int = 64
    hidden_width: int = 64
    penalize_diagonal: bool = False
    diagonal_weight: float = 0.0
    top_k_weights: Optional[int] = None
    seed: Optional[int] = None


@dataclass
class SplitBlock:
    covariate: str = "cell_type"
    category: str = "c0"
    k: int = 20
    control: str = "control"
    de_count: int = 50
    seed: Optional[int] = None


@dataclass
class EstimatorBlock:
    strata: object = "all"  # "all" or list of [treatment, covariate category]
    repeats: int = 1
    sample_latent: bool = False
    seed: Optional[int] = None


@dataclass
class SynthBlock:
    n_genes: int = 50
    n_cells: int = 2000
    n_treatments: int = 5
    covariate_levels: int = 2
    edge_probability: float = 0.08
    effect_targets: int = 8
    noise_low: float = 0.3
    noise_high: float = 0.6
    baseline_scale: float = 1.0
    corrupt_delete_rate: float = 0.2
    nonlinear: bool = False
    seed: Optional[int] = None


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsBlock = field(default_factory=PathsBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    refinement: RefinementBlock = field(default_factory=RefinementBlock)
    split: SplitBlock = field(default_factory=SplitBlock)
    estimator: EstimatorBlock = field(default_factory=EstimatorBlock)
    synth: SynthBlock = field(default_factory=SynthBlock)

    def seed_for(self, stream: str, override: Optional[int]) -> int:
        return override if override is not None else derive_seed(self.seed, stream)


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def _build_block(cls, payload: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(payload) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {sorted(unknown)}")
    return cls(**payload)


def config_from_dict(payload: dict) -> RunConfig:
    payload = dict(payload or {})
    blocks = {}
    section_types = {
        "paths": PathsBlock,
        "model": ModelBlock,
        "training": TrainingBlock,
        "refinement": RefinementBlock,
        "split": SplitBlock,
        "estimator": EstimatorBlock,
        "synth": SynthBlock,
    }
    unknown = set(payload) - set(section_types) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    for name, cls in section_types.items():
        sub = payload.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        blocks[name] = _build_block(cls, sub, name)
    seed = payload.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return RunConfig(seed=seed, **blocks)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            payload = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None
    return config_from_dict(payload or {})


def apply_override(config: RunConfig, assignment: str) -> RunConfig:
    """Apply one 'section.key=value' (or 'seed=value') override in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    parts = key.split(".")
    if parts == ["seed"]:
        if not isinstance(value, int):
            raise ConfigError("seed must be an integer")
        config.seed = value
        return config
    if len(parts) != 2:
        raise ConfigError(f"override key {key!r} must be section.key")
    section, attr = parts
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    block = getattr(config, section)
    if attr not in {f.name for f in fields(block)}:
        raise ConfigError(f"unknown key {attr!r} in section {section!r}")
    setattr(block, attr, value)
    return config
