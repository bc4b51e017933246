"""Progressively focused training: motion, then expression, then temporal.

Each stage is a masked call to :func:`diffusion.train`.  The motion stage sees
only the global rotation, trains everything, and uses the most mobile
sequences.  The expression stage freezes the motion block and adds the
remaining condition slices.  The temporal stage trains only the temporal
mixer on frame windows.  ``joint_baseline`` trains everything on everything
at once, which is what lets tracker leakage bleed into head pose.
"""

from __future__ import annotations

import configparser
import hashlib
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffusion
from .condition import COND_DIM, EXPRESSION_PART, GLOBAL
from .diffusion import BLOCKS, DenoiserParams, TrainConfig
from .synth_data import select_top_variance

STAGE_ORDER = ("motion", "expression", "temporal")
STAGES = STAGE_ORDER + ("joint_baseline",)
DEFAULT_STEPS = {"motion": 2000, "expression": 2000, "temporal": 1000, "joint_baseline": 5000}


def slice_mask(*slices) -> np.ndarray:
    m = np.zeros(COND_DIM, dtype=bool)
    for s in slices:
        m[s] = True
    return m


def mask_to_ranges(mask) -> list:
    """[[start, stop], ...] runs of True entries, for reports."""
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.r_[idx[0], idx[breaks + 1]]
    stops = np.r_[idx[breaks], idx[-1]] + 1
    return [[int(a), int(b)] for a, b in zip(starts, stops)]


def parse_mask(text: str) -> np.ndarray:
    """``"0:3, 20:120"`` -> boolean mask of the kept condition entries."""
    slices = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ValueError(f"mask range {part!r} is not start:stop")
        a, b = int(lo), int(hi)
        if not 0 <= a < b <= COND_DIM:
            raise ValueError(f"mask range {part!r} outside [0, {COND_DIM})")
        slices.append(slice(a, b))
    return slice_mask(*slices)


@dataclass(frozen=True)
class StageConfig:
    stage: str
    condition_mask: np.ndarray
    trainable: tuple
    data_filter: str | tuple = "all"  # "all" or ("top_variance", fraction)
    steps: int = 1000
    lr: float = 0.5
    seed: int = 0
    batch_size: int = 32
    windowed: bool = False
    clip: float | None = 10.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {', '.join(STAGES)}")
        unknown = set(self.trainable) - set(BLOCKS)
        if unknown:
            raise ValueError(f"unknown blocks: {sorted(unknown)}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    def train_config(self, window: int) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            lr=self.lr,
            batch_size=self.batch_size,
            seed=self.seed,
            trainable=self.trainable,
            condition_mask=self.condition_mask,
            window=window if self.windowed else None,
            stage=self.stage,
            clip=self.clip,
        )


def stage_defaults(stage: str, stage2_motion: str = "fed", **overrides) -> StageConfig:
    """Masks and filters per stage; ``overrides`` replace steps, lr, seed, etc.

    ``stage2_motion`` chooses whether the expression stage still feeds the
    global rotation through the frozen motion block ("fed") or masks it
    ("withheld").
    """
    if stage2_motion not in ("fed", "withheld"):
        raise ValueError("stage2_motion must be 'fed' or 'withheld'")
    everything = tuple(BLOCKS)
    if stage == "motion":
        cfg = StageConfig(stage, slice_mask(GLOBAL), everything, ("top_variance", 0.2))
    elif stage == "expression":
        mask = slice_mask(GLOBAL, EXPRESSION_PART) if stage2_motion == "fed" else slice_mask(EXPRESSION_PART)
        cfg = StageConfig(stage, mask, tuple(b for b in BLOCKS if b != "motion_block"))
    elif stage == "temporal":
        cfg = StageConfig(stage, slice_mask(GLOBAL, EXPRESSION_PART), ("temporal_block",), windowed=True)
    elif stage == "joint_baseline":
        cfg = StageConfig(stage, slice_mask(GLOBAL, EXPRESSION_PART), everything)
    else:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    return replace(cfg, **{"steps": DEFAULT_STEPS[stage], **overrides})


def filter_dataset(dataset, data_filter):
    if data_filter == "all":
        return list(dataset)
    kind, fraction = data_filter
    if kind != "top_variance":
        raise ValueError(f"unknown data filter {kind!r}")
    return select_top_variance(dataset, fraction)


def params_digest(params: DenoiserParams) -> str:
    h = hashlib.sha256()
    for b in BLOCKS:
        for k in sorted(params.blocks[b]):
            h.update(f"{b}.{k}".encode())
            h.update(np.ascontiguousarray(params.blocks[b][k], dtype="<f8").tobytes())
    h.update(np.asarray(params.cond_mask, dtype=np.uint8).tobytes())
    return h.hexdigest()[:16]


@dataclass
class StageReport:
    stage: str
    condition_mask: list
    trainable: list
    n_sequences: int
    steps: int
    initial_loss: float
    final_loss: float
    checkpoint: str
    wall_clock: float

    def as_dict(self, with_timing=True):
        d = dict(self.__dict__)
        if not with_timing:
            d.pop("wall_clock")
        return d


@dataclass
class PipelineReport:
    stages: list = field(default_factory=list)
    log: list = field(default_factory=list, repr=False)

    @property
    def wall_clock(self) -> float:
        return sum(s.wall_clock for s in self.stages)

    def as_dict(self, with_timing=True):
        return {"stages": [s.as_dict(with_timing) for s in self.stages]}


def check_stage_order(stages) -> None:
    names = [s.stage if isinstance(s, StageConfig) else s for s in stages]
    if "joint_baseline" in names:
        if names != ["joint_baseline"]:
            raise ValueError("joint_baseline runs alone")
        return
    ranks = [STAGE_ORDER.index(n) if n in STAGE_ORDER else -1 for n in names]
    if -1 in ranks:
        raise ValueError(f"unknown stage in {names}")
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise ValueError(f"stages out of order: {' -> '.join(names)}; expected motion -> expression -> temporal")


def _blocks_equal(a: DenoiserParams, b: DenoiserParams, blocks) -> bool:
    return all(np.array_equal(a.blocks[n][k], b.blocks[n][k]) for n in blocks for k in a.blocks[n])


def run_pipeline(
    dataset,
    stages,
    params: DenoiserParams,
    schedule: diffusion.NoiseSchedule,
    checkpoint_dir=None,
    eval_seed: int = 0,
):
    """Run ``stages`` (names or StageConfigs) in order, each resuming from the last.

    Returns (params, PipelineReport).  Raises if frozen blocks moved.
    """
    stages = [stage_defaults(s) if isinstance(s, str) else s for s in stages]
    check_stage_order(stages)
    report = PipelineReport()
    seen = None  # union of the condition slices any stage trained with
    for cfg in stages:
        start = time.perf_counter()
        data = diffusion.TrainingSet.from_samples(filter_dataset(dataset, cfg.data_filter), params)
        window = params.config.window if cfg.windowed else None
        init_loss = diffusion.evaluation_loss(
            params, data, schedule, seed=eval_seed, window=window, condition_mask=cfg.condition_mask
        )
        log = []
        new = diffusion.train(params, data, cfg.train_config(params.config.window), schedule, log)
        frozen = [b for b in BLOCKS if b not in cfg.trainable]
        if not _blocks_equal(params, new, frozen):
            raise RuntimeError(f"{cfg.stage}: frozen blocks changed during training")
        seen = cfg.condition_mask.copy() if seen is None else seen | cfg.condition_mask
        params = new
        params.cond_mask = seen.copy()
        final_loss = diffusion.evaluation_loss(
            params, data, schedule, seed=eval_seed, window=window, condition_mask=cfg.condition_mask
        )
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"{len(report.stages):02d}_{cfg.stage}.ckpt"
            diffusion.save_checkpoint(params, path, extra={"stage": cfg.stage})
            ckpt = path.name
        else:
            ckpt = params_digest(params)
        report.log.extend(log)
        report.stages.append(
            StageReport(
                stage=cfg.stage,
                condition_mask=mask_to_ranges(cfg.condition_mask),
                trainable=list(cfg.trainable),
                n_sequences=data.targets.shape[0],
                steps=cfg.steps,
                initial_loss=init_loss,
                final_loss=final_loss,
                checkpoint=ckpt,
                wall_clock=time.perf_counter() - start,
            )
        )
    return params, report


def run_joint_baseline(dataset, params: DenoiserParams, schedule, steps=5000, lr=0.5, seed=0, **overrides):
    cfg = stage_defaults("joint_baseline", steps=steps, lr=lr, seed=seed, **overrides)
    return run_pipeline(dataset, [cfg], params, schedule)


# ---------------------------------------------------------------------------
# config file: INI sections [pipeline] and one per stage


def load_stage_configs(path_or_text, seed: int | None = None):
    """Parse a pipeline config.

    ``[pipeline]`` holds ``stages`` (comma list), ``stage2_motion`` and
    ``seed``; ``[motion]``/``[expression]``/... override steps, lr,
    batch_size, clip, seed, mask (``start:stop`` list) and top_variance.
    """
    cp = configparser.ConfigParser()
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else path_or_text
    cp.read_string(text)
    pipe = cp["pipeline"] if cp.has_section("pipeline") else {}
    base_seed = int(pipe.get("seed", 0)) if seed is None else seed
    names = [s.strip() for s in pipe.get("stages", ",".join(STAGE_ORDER)).split(",") if s.strip()]
    stage2 = pipe.get("stage2_motion", "fed")
    out = []
    for i, name in enumerate(names):
        sec = cp[name] if cp.has_section(name) else {}
        over = {"seed": int(sec.get("seed", base_seed * 1000 + i))}
        for key, conv in (("steps", int), ("lr", float), ("batch_size", int), ("clip", float)):
            if key in sec:
                over[key] = conv(sec[key])
        if "mask" in sec:
            over["condition_mask"] = parse_mask(sec["mask"])
        if "top_variance" in sec:
            over["data_filter"] = ("top_variance", float(sec["top_variance"]))
        out.append(stage_defaults(name, stage2_motion=stage2, **over))
    check_stage_order(out)
    return out
