"""One training record for a network element."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Sample:
    in_static: np.ndarray   # (channels, n_x) or (width,); all zeros means "no static input"
    in_dyn: np.ndarray      # (n_t, d)
    out: np.ndarray         # (n_t, output_width)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.in_static = np.asarray(self.in_static, dtype=float)
        self.in_dyn = np.asarray(self.in_dyn, dtype=float)
        self.out = np.asarray(self.out, dtype=float)
        if self.in_dyn.ndim != 2 or self.out.ndim != 2:
            raise ValueError("in_dyn and out must be 2-D (n_t, width)")
        if self.in_dyn.shape[0] != self.out.shape[0]:
            raise ValueError(f"in_dyn has {self.in_dyn.shape[0]} steps, out has {self.out.shape[0]}")

    @property
    def n_t(self) -> int:
        return self.out.shape[0]
