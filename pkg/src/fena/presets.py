"""Named run configurations tying a problem to data sizes, a layout and a training schedule.

``paper-case*`` presets carry the full-size settings; ``desk-case*`` presets
shrink data, cells and epochs so each model trains in minutes on one core.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import dataset as D
from .errors import ConfigError
from .sfne import ArchSpec, Block, TrainConfig, beam_arch, rod_arch


@dataclass(frozen=True)
class Preset:
    name: str
    case: str
    sources: int             # oracle solves per member dataset
    source_steps: int
    n_t: int                 # training window length
    windows: int             # windows per source (0: zero-IC view of the first n_t steps)
    arch: ArchSpec
    train: TrainConfig
    ensemble: int = 1
    horizon: int = 0         # default simulate horizon in steps (0: one window)

    @property
    def problem(self) -> D.ProblemSpec:
        return D.problem_for_case(self.case)

    @property
    def records(self) -> int:
        n = self.sources * (self.windows or 1)
        return n * self.problem.n_x if self.case == "ondemand" else n

    def to_json(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_json()
        return d

    def with_overrides(self, epochs=None, lr=None, ensemble=None, sources=None, horizon=None) -> "Preset":
        p = self
        if epochs is not None or lr is not None:
            p = replace(p, train=replace(p.train, epochs=p.train.epochs if epochs is None else epochs,
                                         lr=p.train.lr if lr is None else lr))
        if ensemble is not None:
            if ensemble < 1:
                raise ConfigError("--ensemble must be >= 1")
            p = replace(p, ensemble=ensemble)
        if sources is not None:
            if sources < 2:
                raise ConfigError("need at least 2 source samples to split")
            p = replace(p, sources=sources)
        if horizon is not None:
            if horizon < 1:
                raise ConfigError("--horizon must be positive")
            p = replace(p, horizon=horizon)
        return p


def _rod_arch(cells, n_t, static_rows, width):
    return replace(rod_arch(cells=cells, n_t=n_t, in_static_shape=(static_rows, 51)), output_width=width)


def _ic_arch(cells, n_t):
    # nonzero initial states need a wider initialiser than the rest-start layout
    blk = Block.of((100, cells), ("tanh", "eswish"))
    return replace(_rod_arch(cells, n_t, 2, 102), fhs=blk, bhs=blk, fcs=blk, bcs=blk)


def _ondemand_arch(cells, n_t):
    return replace(rod_arch(cells=cells, n_t=n_t, in_static_shape=(3, 51)), output_width=2)


def _desk_beam(channels, n_t):
    return beam_arch(cells=25, init_width=40, ind=(20, 40, 40), out_width=64, out_layers=3,
                     channels=channels, n_t=n_t)


def _table() -> dict:
    rod = TrainConfig.rod
    beam = TrainConfig.beam
    presets = [
        Preset("paper-case1", "1", 60_000, 500, 500, 0, _rod_arch(50, 500, 1, 51), rod()),
        Preset("paper-case2", "2", 60_000, 500, 100, 1, _rod_arch(50, 100, 2, 102), rod(), ensemble=3,
               horizon=1000),
        Preset("paper-case3", "3", 60_000, 500, 100, 1, _rod_arch(50, 100, 2, 102), rod(), ensemble=3),
        Preset("paper-ondemand", "ondemand", 60_000, 500, 100, 1, _ondemand_arch(50, 100), rod(), ensemble=3),
        Preset("paper-case4", "4", 10_000, 400, 400, 0, beam_arch(channels=2, n_t=400), beam(), ensemble=3),
        Preset("paper-case5", "5", 10_000, 400, 100, 1, beam_arch(channels=4, n_t=100), beam(), ensemble=3),
        Preset("desk-case1", "1", 2_000, 100, 100, 0, _rod_arch(25, 100, 1, 51),
               rod(epochs=200, step_period=80)),
        Preset("desk-case2", "2", 500, 500, 100, 4, _ic_arch(50, 100),
               rod(epochs=75, step_period=50), ensemble=3, horizon=1000),
        Preset("desk-case3", "3", 500, 500, 100, 4, _ic_arch(50, 100),
               rod(epochs=75, step_period=50), ensemble=3),
        Preset("desk-ondemand", "ondemand", 60, 500, 100, 1, _ondemand_arch(25, 100),
               rod(epochs=30, step_period=12), ensemble=1),
        Preset("desk-case4", "4", 500, 100, 100, 0, _desk_beam(2, 100),
               beam(epochs=120, patience=15), ensemble=1),
        Preset("desk-case5", "5", 500, 400, 100, 2, _desk_beam(4, 100),
               beam(epochs=60, patience=15), ensemble=3, horizon=300),
    ]
    return {p.name: p for p in presets}


PRESETS = _table()


def get(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


def member_seed(seed: int, member: int) -> int:
    return int(np.random.SeedSequence([seed, 7, member]).generate_state(1)[0])


def member_data(preset: Preset, seed: int, member: int = 0, jobs: int = 1):
    """Independent (train, test) sets for ensemble member ``member``.

    Sources are drawn with their own seed, split by source, and only then
    windowed or exploded, so no test window shares a source with training.
    """
    s = member_seed(seed, member)
    case = "3" if preset.case == "ondemand" else preset.case
    src = D.generate(case, preset.sources, seed=s, n_steps=preset.source_steps, jobs=jobs)
    if preset.case == "ondemand":
        src.manifest["case"] = "ondemand"
    split_frac = preset.train.split
    if preset.windows == 0:
        view = D.zero_ic_view(src, n_t=preset.n_t)
        return D.split(view, split_frac, seed=s)
    tr_src, te_src = D.split(src, split_frac, seed=s)
    tr = D.augment_nonzero_ic(tr_src, preset.windows, w=preset.n_t, seed=s)
    te = D.augment_nonzero_ic(te_src, preset.windows, w=preset.n_t, seed=s + 1)
    if preset.case == "ondemand":
        tr, te = D.explode_locations(tr), D.explode_locations(te)
    return tr, te
