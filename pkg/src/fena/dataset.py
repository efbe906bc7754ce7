"""Training data: oracle-backed generation, window augmentation, splitting, persistence.

Every dataset holds stacked arrays with a leading sample axis:

* ``in_static`` (N, channels, n_x): time-constant inputs,
* ``in_dyn``    (N, n_t, 1): load amplitude at each output step,
* ``out``       (N, n_t, channels * n_x): fields at steps 1..n_t laid out ``[u | u_dot]``,
* ``params``    (N, P): the sampled frequencies that produced each record,
* ``source``    (N,): index of the zero-initial-condition source record,
* ``t_s``       (N,): start step inside the source (0 for sources).

Source records (from :func:`generate`) always carry both field channels and the
initial state as the last two static rows, so windows can be cut from them.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import __version__
from .beam import (L_BEAM, OMEGA0_RANGE, SPATIAL_RANGE, BeamSpec, NewmarkConfig, beam_sample_fields,
                   newmark_transient)
from .errors import ChecksumError, DatasetFormatError, FormatVersionError, ResonanceError, TruncatedBlobError
from .rod import (HarmonicLoad, RodSpec, fixed_free_frequencies, rod_case1_response,
                  rod_spring_distributed_response, rod_spring_frequencies)
from .sample import Sample

FORMAT_VERSION = 1
DT = 1e-3
ROD_OMEGA_RANGE = (52.5, 366.5)
ARRAYS = ("in_static", "in_dyn", "out", "params", "source", "t_s")


@dataclass(frozen=True)
class ProblemSpec:
    """Physical setup behind a dataset."""
    case: str                   # "1".."5" or "ondemand"
    structure: str              # "rod" or "beam"
    bc: str                     # "fixed-free", "spring-spring", "pinned-pinned"
    load: str                   # "boundary" or "distributed"
    n_x: int
    source_steps: int
    dt: float = DT
    length: float = 1.0
    param_names: tuple = ("omega0",)
    param_ranges: tuple = (ROD_OMEGA_RANGE,)
    zero_ic: bool = True
    window: int | None = None
    t_s_range: tuple | None = None

    @property
    def channels(self) -> int:
        return 2

    @property
    def n_props(self) -> int:
        """Static property rows ahead of the initial-state rows."""
        return 2 if self.structure == "beam" else 0


def problem_for_case(case) -> ProblemSpec:
    case = str(case)
    if case in ("1", "2"):
        extra = {} if case == "1" else dict(zero_ic=False, window=100, t_s_range=(0, 400))
        return ProblemSpec(case, "rod", "fixed-free", "boundary", 51, 500, **extra)
    if case in ("3", "ondemand"):
        return ProblemSpec(case, "rod", "spring-spring", "distributed", 51, 500, zero_ic=False,
                           window=100, t_s_range=(0, 400))
    if case in ("4", "5"):
        extra = {} if case == "4" else dict(zero_ic=False, window=100, t_s_range=(1, 300))
        return ProblemSpec(case, "beam", "pinned-pinned", "distributed", 101, 400, length=L_BEAM,
                           param_names=("omega0", "omega_E", "omega_r"),
                           param_ranges=(OMEGA0_RANGE, SPATIAL_RANGE, SPATIAL_RANGE), **extra)
    raise ValueError(f"unknown case {case!r}")


@dataclass
class Dataset:
    in_static: np.ndarray
    in_dyn: np.ndarray
    out: np.ndarray
    params: np.ndarray
    source: np.ndarray
    t_s: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.in_static.shape[0]
        for name in ARRAYS:
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} records, expected {n}")

    def __len__(self) -> int:
        return self.in_static.shape[0]

    @property
    def n_t(self) -> int:
        return self.out.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(*(getattr(self, a)[idx] for a in ARRAYS), manifest=dict(self.manifest, count=int(idx.size)))

    def sample(self, i: int) -> Sample:
        return Sample(self.in_static[i], self.in_dyn[i], self.out[i],
                      meta={"params": self.params[i], "t_s": int(self.t_s[i]), "source": int(self.source[i])})

    @staticmethod
    def empty(static_shape, n_t, width, n_params, manifest) -> "Dataset":
        return Dataset(np.zeros((0, *static_shape)), np.zeros((0, n_t, 1)), np.zeros((0, n_t, width)),
                       np.zeros((0, n_params)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                       manifest)


# ---- parameter draws ------------------------------------------------------------

def _resonances(problem: ProblemSpec) -> np.ndarray:
    if problem.structure != "rod":
        return np.zeros(0)   # damped beam: no singular frequencies
    if problem.bc == "fixed-free":
        return fixed_free_frequencies(RodSpec.reference(), 10)
    return rod_spring_frequencies(RodSpec.reference_springs(), 10)


def draw_parameters(problem: ProblemSpec, count: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Frequencies inside the case's ranges; LHS keeps one draw per stratum per dimension.

    Draws within 1e-6 relative of a rod natural frequency are redrawn inside
    the same stratum (LHS) or uniformly (random mode).
    """
    lo = np.array([r[0] for r in problem.param_ranges])
    hi = np.array([r[1] for r in problem.param_ranges])
    d = lo.size
    if count == 0:
        return np.zeros((0, d))
    if mode == "lhs":
        unit = qmc.LatinHypercube(d=d, seed=rng).random(count)
    elif mode == "uniform":
        unit = rng.random((count, d))
    else:
        raise ValueError(f"unknown draw mode {mode!r}")
    res = _resonances(problem)
    for i in range(count):
        for _ in range(1000):
            w0 = lo[0] + unit[i, 0] * (hi[0] - lo[0])
            if not res.size or np.min(np.abs(w0 - res) / res) >= 1e-6:
                break
            if mode == "lhs":
                stratum = np.floor(unit[i, 0] * count)
                unit[i, 0] = (stratum + rng.random()) / count
            else:
                unit[i, 0] = rng.random()
    return lo + unit * (hi - lo)


# ---- oracle solves ----------------------------------------------------------------

def solve_source(problem: ProblemSpec, params, n_steps: int | None = None):
    """One zero-initial-condition record: (in_static, in_dyn, out) from the oracle."""
    n_steps = n_steps or problem.source_steps
    t = np.arange(n_steps + 1) * problem.dt
    x = np.linspace(0.0, problem.length, problem.n_x)
    w0 = float(params[0])
    if problem.structure == "rod":
        if problem.bc == "fixed-free":
            load = HarmonicLoad(1.0, w0, "boundary")
            hist = rod_case1_response(RodSpec.reference(), load, x, t)
        else:
            load = HarmonicLoad(1.0, w0, "distributed")
            hist = rod_spring_distributed_response(RodSpec.reference_springs(), load, x, t)
        static = np.zeros((2, problem.n_x))
    else:
        load = HarmonicLoad(1.0, w0, "distributed")
        E, R, E_fn, R_fn = beam_sample_fields(omega_r=float(params[2]), omega_E=float(params[1]),
                                              n_x=problem.n_x, L=problem.length)
        hist = newmark_transient(BeamSpec(E_fn, R_fn, L=problem.length), NewmarkConfig(), load, t, x_out=x)
        static = np.stack([R, E, np.zeros(problem.n_x), np.zeros(problem.n_x)])
    dyn = load.value(t[1:])[:, None]
    out = np.concatenate([hist.u[1:], hist.u_dot[1:]], axis=1)
    return static, dyn, out


def _solve_task(args):
    problem, p, n_steps = args
    try:
        return solve_source(problem, p, n_steps)
    except ResonanceError as exc:
        raise ResonanceError(f"{exc} (draw {dict(zip(problem.param_names, map(float, p)))})") from exc


def generate(case, count: int, mode: str = "lhs", seed: int = 0, n_steps: int | None = None,
             jobs: int = 1) -> Dataset:
    """Zero-initial-condition source records for ``case`` from its oracle.

    ``n_steps`` truncates the simulated horizon (defaults to 500 rod / 400 beam steps).
    """
    problem = problem_for_case(case)
    n_steps = n_steps or problem.source_steps
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    params = draw_parameters(problem, count, mode, rng)
    manifest = {
        "format_version": FORMAT_VERSION, "case": problem.case, "problem": asdict(problem),
        "count": int(count), "n_x": problem.n_x, "n_t": int(n_steps), "dt": problem.dt,
        "draw_mode": mode, "seed": int(seed), "kind": "source",
        "param_names": list(problem.param_names),
        "provenance": {"generator": f"fena {__version__}",
                       "oracle": "modal series" if problem.structure == "rod" else "hermite FE + newmark"},
    }
    static_shape = (2 + problem.n_props, problem.n_x)
    if count == 0:
        return Dataset.empty(static_shape, n_steps, 2 * problem.n_x, len(problem.param_names), manifest)
    tasks = [(problem, p, n_steps) for p in params]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_task, tasks, chunksize=max(1, count // (4 * jobs))))
    else:
        results = [_solve_task(t) for t in tasks]
    static, dyn, out = (np.stack(z) for z in zip(*results))
    idx = np.arange(count)
    return Dataset(static, dyn, out, params, idx.copy(), np.zeros(count, dtype=np.int64), manifest)


def zero_ic_view(ds: Dataset, n_t: int | None = None, velocity: bool | None = None) -> Dataset:
    """Training view for the zero-initial-condition cases.

    Keeps the first ``n_t`` steps; drops the (zero) initial-state rows from the
    static input, leaving rod records with all-zero static input of shape
    (1, n_x).  The fixed-free rod keeps displacement only unless ``velocity``.
    """
    problem = problem_for_case(ds.manifest["case"])
    n_t = n_t or ds.n_t
    if n_t > ds.n_t:
        raise ValueError(f"view of {n_t} steps from {ds.n_t}-step records")
    if velocity is None:
        velocity = problem.case != "1"
    cols = slice(None) if velocity else slice(0, problem.n_x)
    if problem.n_props:
        static = ds.in_static[:, :problem.n_props].copy()
    else:
        static = np.zeros((len(ds), 1, problem.n_x))
    m = dict(ds.manifest, kind="zero-ic", n_t=int(n_t), velocity=bool(velocity))
    return Dataset(static, ds.in_dyn[:, :n_t].copy(), ds.out[:, :n_t, cols].copy(), ds.params.copy(),
                   ds.source.copy(), ds.t_s.copy(), m)


def window_record(ds: Dataset, i: int, t_s: int, w: int, n_props: int):
    """(in_static, in_dyn, out) for a window of ``w`` steps after state ``t_s`` of record ``i``."""
    if t_s < 0 or t_s + w > ds.n_t:
        raise ValueError(f"window [{t_s}, {t_s + w}] overruns source history of {ds.n_t} steps")
    n_x = ds.in_static.shape[-1]
    if t_s == 0:
        state = ds.in_static[i, n_props:n_props + 2]
    else:
        state = ds.out[i, t_s - 1].reshape(2, n_x)
    static = np.concatenate([ds.in_static[i, :n_props], state])
    return static, ds.in_dyn[i, t_s:t_s + w], ds.out[i, t_s:t_s + w]


def augment_nonzero_ic(source: Dataset, windows_per_sample: int = 1, w: int = 100,
                       t_s_range: tuple | None = None, seed: int = 0) -> Dataset:
    """Cut ``windows_per_sample`` random windows of ``w`` steps from every source record.

    Start steps are drawn uniformly from ``t_s_range`` (inclusive); the state
    at the start step becomes the last two static rows of the window.
    """
    problem = problem_for_case(source.manifest["case"])
    lo, hi = t_s_range or problem.t_s_range or (0, source.n_t - w)
    if hi + w > source.n_t or lo < 0:
        raise ValueError(f"t_s range [{lo}, {hi}] with window {w} overruns {source.n_t}-step sources")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    n = len(source) * windows_per_sample
    starts = rng.integers(lo, hi + 1, size=n)
    rec = np.repeat(np.arange(len(source)), windows_per_sample)
    parts = [window_record(source, i, int(s), w, problem.n_props) for i, s in zip(rec, starts)]
    m = dict(source.manifest, kind="windows", n_t=int(w), window_seed=int(seed),
             windows_per_sample=int(windows_per_sample), t_s_range=[int(lo), int(hi)], count=int(n))
    if not parts:
        return Dataset.empty((problem.n_props + 2, source.in_static.shape[-1]), w, source.out.shape[-1],
                             source.params.shape[1], m)
    static, dyn, out = (np.stack(z) for z in zip(*parts))
    return Dataset(static, dyn, out, source.params[rec], source.source[rec], starts.astype(np.int64), m)


def explode_locations(ds: Dataset, length: float = 1.0) -> Dataset:
    """One record per grid node: static ``[u0; u_dot0; x0]`` and output ``[u(x0), u_dot(x0)]``."""
    n, n_x = len(ds), ds.in_static.shape[-1]
    x = np.linspace(0.0, length, n_x)
    static = np.concatenate([np.repeat(ds.in_static[:, -2:], n_x, axis=0),
                             np.tile(np.repeat(x, n_x).reshape(n_x, 1, n_x), (n, 1, 1))], axis=1)
    node = np.tile(np.arange(n_x), n)
    rec = np.repeat(np.arange(n), n_x)
    out = np.stack([ds.out[rec, :, node], ds.out[rec, :, n_x + node]], axis=-1)
    m = dict(ds.manifest, kind="on-demand", count=int(n * n_x))
    return Dataset(static, ds.in_dyn[rec], out, ds.params[rec], ds.source[rec], ds.t_s[rec], m)


def split(ds: Dataset, fraction: float = 0.85, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded split by source record so derived windows never straddle the boundary."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    sources = np.unique(ds.source)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    perm = rng.permutation(sources)
    n_train = int(round(fraction * sources.size))
    train_src = np.isin(ds.source, perm[:n_train])
    tr, te = ds.subset(np.flatnonzero(train_src)), ds.subset(np.flatnonzero(~train_src))
    tr.manifest.update(split="train", split_seed=int(seed), split_fraction=fraction)
    te.manifest.update(split="test", split_seed=int(seed), split_fraction=fraction)
    return tr, te


# ---- persistence -------------------------------------------------------------------

def _checksum(raw: bytes) -> str:
    return hashlib.blake2b(raw, digest_size=8).hexdigest()


def save(ds: Dataset, path) -> None:
    """Directory with ``manifest.json`` plus one little-endian float64 blob per array."""
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"parent directory {path.parent} does not exist")
    path.mkdir(exist_ok=True)
    blobs = {}
    for name in ARRAYS:
        arr = np.ascontiguousarray(getattr(ds, name), dtype="<f8")
        raw = arr.tobytes()
        (path / f"{name}.bin").write_bytes(raw)
        blobs[name] = {"file": f"{name}.bin", "shape": list(arr.shape), "nbytes": len(raw),
                       "checksum": _checksum(raw)}
    manifest = dict(ds.manifest, format_version=FORMAT_VERSION, count=len(ds), blobs=blobs)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DatasetFormatError(f"{path}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format_version {manifest.get('format_version')!r}, "
                                 f"expected {FORMAT_VERSION}")
    arrays = {}
    for name in ARRAYS:
        info = manifest["blobs"][name]
        blob = path / info["file"]
        raw = blob.read_bytes() if blob.exists() else b""
        if len(raw) != info["nbytes"]:
            raise TruncatedBlobError(f"{blob}: {len(raw)} bytes, manifest says {info['nbytes']}")
        if _checksum(raw) != info["checksum"]:
            raise ChecksumError(f"{blob}: checksum mismatch")
        arr = np.frombuffer(raw, dtype="<f8").reshape(info["shape"]).astype(np.float64)
        if name in ("source", "t_s"):
            arr = arr.astype(np.int64)
        arrays[name] = arr
    manifest.pop("blobs")
    return Dataset(**arrays, manifest=manifest)


def export_csv(ds: Dataset, index: int, path) -> None:
    """One record as long-format CSV: step, node, load, then every output channel."""
    n_x = ds.in_static.shape[-1]
    n_ch = ds.out.shape[-1] // n_x if ds.out.shape[-1] % n_x == 0 else 1
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        if n_ch == 1 and ds.out.shape[-1] != n_x:
            wr.writerow(["step", "load"] + [f"out{k}" for k in range(ds.out.shape[-1])])
            for s in range(ds.n_t):
                wr.writerow([s + 1, repr(float(ds.in_dyn[index, s, 0]))] + [repr(float(v)) for v in ds.out[index, s]])
            return
        wr.writerow(["step", "node", "load"] + [f"ch{c}" for c in range(n_ch)])
        for s in range(ds.n_t):
            for j in range(n_x):
                vals = [repr(float(ds.out[index, s, c * n_x + j])) for c in range(n_ch)]
                wr.writerow([s + 1, j, repr(float(ds.in_dyn[index, s, 0]))] + vals)
