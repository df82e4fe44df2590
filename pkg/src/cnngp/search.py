"""Random search over kernel architectures and hyperparameters, scored on validation error."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .architecture import (
    ArchitectureSpec,
    FanInMode,
    Hyperparameters,
    KernelConfig,
    Nonlinearity,
    Padding,
    uniform_layers,
)
from .data import LabelledDataset
from .errors import CnnGpError, ConfigError
from .gp import encode_targets, error_rate, predict, solve
from .kernel import gram_matrix

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "seed", "digest", "sigma_b_sq", "sigma_w_sq", "depth", "filter", "stride",
    "padding", "nonlinearity", "skip", "val_error", "seconds", "status",
)


@dataclass(frozen=True)
class SearchSpace:
    """Sampling ranges.  σ² are log-uniform, integers uniform, choices uniform."""

    sigma_b_sq: tuple[float, float] = (0.05, 20.0)
    sigma_w_sq: tuple[float, float] = (0.05, 20.0)
    depth: tuple[int, int] = (2, 12)
    filter_size: tuple[int, int] = (2, 8)
    strides: tuple[int, ...] = (1, 2)
    paddings: tuple[str, ...] = ("same", "valid")
    nonlinearities: tuple[str, ...] = ("relu", "erf")
    skips: tuple[int | None, ...] = (None, 1, 2, 3)
    fan_in_mode: str = "channels_and_filter"
    input_hw: tuple[int, int] = (28, 28)
    max_retries: int = 200

    def __post_init__(self):
        for name in ("sigma_b_sq", "sigma_w_sq"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} range must satisfy 0 < lo <= hi, got {(lo, hi)}")
        for name in ("depth", "filter_size"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} range must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        for name in ("strides", "paddings", "nonlinearities", "skips"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must offer at least one choice")
        for p in self.paddings:
            Padding(p)
        for n in self.nonlinearities:
            Nonlinearity(n)
        FanInMode(self.fan_in_mode)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown search-space keys {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv)

    @classmethod
    def load(cls, path: str | Path) -> "SearchSpace":
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(d)


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return float(lo)
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _choice(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def sample_config(space: SearchSpace, seed: int) -> KernelConfig:
    """Deterministic draw for ``seed``; geometrically invalid draws are redrawn."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    last = None
    for _ in range(space.max_retries):
        params = {
            "sigma_b_sq": _log_uniform(rng, *space.sigma_b_sq),
            "sigma_w_sq": _log_uniform(rng, *space.sigma_w_sq),
            "depth": int(rng.integers(space.depth[0], space.depth[1] + 1)),
            "filter": int(rng.integers(space.filter_size[0], space.filter_size[1] + 1)),
            "stride": int(_choice(rng, space.strides)),
            "padding": _choice(rng, space.paddings),
            "nonlinearity": _choice(rng, space.nonlinearities),
            "skip": _choice(rng, space.skips),
        }
        try:
            arch = ArchitectureSpec(
                uniform_layers(
                    params["depth"], params["filter"], params["stride"],
                    params["padding"], params["skip"],
                ),
                params["nonlinearity"],
            )
            arch.validate(space.input_hw)
        except ConfigError as exc:
            last = exc
            continue
        hyper = Hyperparameters(params["sigma_b_sq"], params["sigma_w_sq"], space.fan_in_mode)
        return KernelConfig(arch, hyper, name=f"sample-{seed}", extra=params)
    raise ConfigError(f"no valid architecture after {space.max_retries} draws (last: {last})")


@dataclass
class SearchRecord:
    index: int
    seed: int
    config: KernelConfig | None
    val_error: float  # nan when the evaluation failed
    seconds: float
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def row(self) -> str:
        p = self.config.extra if self.config else {}
        vals = [
            self.seed,
            self.config.digest() if self.config else "-",
            f"{p.get('sigma_b_sq', math.nan):.6g}",
            f"{p.get('sigma_w_sq', math.nan):.6g}",
            p.get("depth", "-"),
            p.get("filter", "-"),
            p.get("stride", "-"),
            p.get("padding", "-"),
            p.get("nonlinearity", "-"),
            p.get("skip") or "none",
            f"{self.val_error:.6f}",
            f"{self.seconds:.3f}",
            self.status.replace("\t", " ").replace("\n", " "),
        ]
        return "\t".join(str(v) for v in vals)


@dataclass
class SearchResult:
    best: SearchRecord | None
    records: list[SearchRecord] = field(default_factory=list)

    def best_so_far(self) -> list[float]:
        out, cur = [], math.inf
        for r in self.records:
            if r.ok and r.val_error < cur:
                cur = r.val_error
            out.append(cur)
        return out

    def write_log(self, path: str | Path) -> None:
        lines = ["# " + "\t".join(LOG_COLUMNS)] + [r.row() for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")


Evaluator = Callable[[KernelConfig, LabelledDataset, LabelledDataset, int], float]


def evaluate_config(cfg: KernelConfig, train: LabelledDataset, val: LabelledDataset, parallelism: int = 1) -> float:
    """Validation error of the GP fitted on ``train`` (no refit on validation data)."""
    num_classes = int(max(train.labels.max(), val.labels.max())) + 1
    k = gram_matrix(train.images, None, cfg.arch, cfg.hyper, parallelism)
    k_star = gram_matrix(val.images, train.images, cfg.arch, cfg.hyper, parallelism)
    sol = solve(k, encode_targets(train.labels, num_classes))
    return error_rate(predict(k_star, sol.alpha), val.labels)


def sample_seeds(seed: int, m: int) -> list[int]:
    """Per-sample seeds spawned from one root seed."""
    return [int(s.generate_state(1, np.uint64)[0] >> 1) for s in np.random.SeedSequence(int(seed)).spawn(m)]


def random_search(
    m: int,
    train: LabelledDataset,
    val: LabelledDataset,
    space: SearchSpace,
    seed: int,
    evaluator: Evaluator = evaluate_config,
    parallelism: int = 1,
    progress: Callable[[SearchRecord], None] | None = None,
) -> SearchResult:
    """Score ``m`` sampled configs; the lowest validation error wins, ties to the earliest."""
    if m < 1:
        raise ConfigError("number of search samples must be at least 1")
    space = SearchSpace(**{**space.__dict__, "input_hw": tuple(train.images.shape[2:])})
    records: list[SearchRecord] = []
    best = None
    for i, s in enumerate(sample_seeds(seed, m)):
        t0 = time.perf_counter()
        cfg = None
        try:
            cfg = sample_config(space, s)
            err = float(evaluator(cfg, train, val, parallelism))
            if not 0.0 <= err <= 1.0:
                raise CnnGpError(f"evaluator returned error rate {err} outside [0, 1]")
            rec = SearchRecord(i, s, cfg, err, time.perf_counter() - t0)
        except (CnnGpError, ArithmeticError, ValueError, MemoryError) as exc:
            log.warning("search sample %d (seed %d) failed: %s", i, s, exc)
            rec = SearchRecord(i, s, cfg, math.nan, time.perf_counter() - t0, f"error: {exc}")
        records.append(rec)
        if rec.ok and (best is None or rec.val_error < best.val_error):
            best = rec
        if progress:
            progress(rec)
    return SearchResult(best, records)
