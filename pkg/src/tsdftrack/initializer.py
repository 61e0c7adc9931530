"""Coarse relative-pose initializers for frame-to-model tracking.

A proposal is the relative pose from frame t to frame t-1 (camera t in
camera t-1 coordinates); the absolute initial estimate is
``compose(prev_pose, relative)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .se3 import Pose, compose
from .tracker import SearchSize, sample_delta_poses

IDENTITY = "identity"
CONSTANT_VELOCITY = "constant_velocity"
ORACLE = "oracle"
EXTERNAL = "external"
KINDS = (IDENTITY, CONSTANT_VELOCITY, ORACLE, EXTERNAL)


@dataclass
class InitializerKind:
    name: str = IDENTITY
    rot_noise_deg: float = 0.0
    trans_noise_cm: float = 0.0
    seed: int = 0
    path: Optional[str] = None
    guesses: Dict[int, Pose] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown initializer {self.name!r}; expected one of {', '.join(KINDS)}")
        if self.rot_noise_deg < 0 or self.trans_noise_cm < 0:
            raise ValueError("initializer noise must be non-negative")
        if self.name == EXTERNAL and not self.guesses:
            if not self.path:
                raise ValueError("external initializer needs a guess file")
            from .io import read_guesses

            self.guesses = read_guesses(Path(self.path))

    @classmethod
    def identity(cls) -> "InitializerKind":
        return cls(IDENTITY)

    @classmethod
    def constant_velocity(cls) -> "InitializerKind":
        return cls(CONSTANT_VELOCITY)

    @classmethod
    def oracle(cls, rot_noise_deg: float, trans_noise_cm: float, seed: int = 0) -> "InitializerKind":
        return cls(ORACLE, rot_noise_deg, trans_noise_cm, seed)

    @classmethod
    def external(cls, source: Union[str, Path, Dict[int, Pose]]) -> "InitializerKind":
        if isinstance(source, dict):
            return cls(EXTERNAL, guesses=dict(source))
        return cls(EXTERNAL, path=str(source))


@dataclass
class InitContext:
    frame_index: int
    prev_pose: Pose
    prev_relative: Optional[Pose] = None
    gt_relative: Optional[Pose] = None

    def __post_init__(self):
        if self.frame_index < 1:
            raise ValueError(f"frame_index must be >= 1, got {self.frame_index}")
        if not self.prev_pose.is_valid():
            raise ValueError("prev_pose is not a valid rigid transform")


def propose_relative(kind: InitializerKind, ctx: InitContext) -> Pose:
    if kind.name == IDENTITY:
        return Pose.identity()
    if kind.name == CONSTANT_VELOCITY:
        return ctx.prev_relative if ctx.prev_relative is not None else Pose.identity()
    if kind.name == ORACLE:
        if ctx.gt_relative is None:
            raise ValueError(f"oracle initializer has no ground truth for frame {ctx.frame_index}")
        rng = np.random.default_rng([kind.seed, ctx.frame_index])
        noise = sample_delta_poses(SearchSize(kind.rot_noise_deg, kind.trans_noise_cm), 1, rng)[0]
        return compose(ctx.gt_relative, noise)
    try:
        return kind.guesses[ctx.frame_index]
    except KeyError:
        raise KeyError(f"external guesses have no entry for frame {ctx.frame_index}") from None


def compose_world(ctx: InitContext, relative: Pose) -> Pose:
    return compose(ctx.prev_pose, relative)
