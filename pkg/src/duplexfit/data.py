"""Per-frame observation containers shared by initialization, fitting and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera


@dataclass
class Frame:
    index: int
    camera: Camera            # intrinsics + SfM extrinsics g_cam (world -> camera)
    timestamp: float          # tau in [0, 1]
    rgb: np.ndarray           # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray          # (H, W) bool
    embedding: np.ndarray     # (H, W, d_e) float32, zeros off-mask
    keypoints: np.ndarray     # (K, 2) detected pixels
    kp_visible: np.ndarray    # (K,) bool

    @property
    def shape(self):
        return self.mask.shape


@dataclass
class ObservationSet:
    frames: list
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError("all frames must share one resolution")
        if not self.train and not self.test:
            self.train = list(range(len(self.frames)))
        both = sorted(self.train + self.test)
        if both != list(range(len(self.frames))):
            raise ValueError("train/test split must be disjoint and exhaustive")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]

    def subset(self, split: str):
        idx = {"train": self.train, "test": self.test, "all": list(range(len(self.frames)))}[split]
        return [self.frames[i] for i in idx]

    @property
    def resolution(self):
        return self.frames[0].shape
