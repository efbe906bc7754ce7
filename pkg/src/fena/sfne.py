"""Super finite network element: a BRNN surrogate whose LSTM states are set from static inputs.

Data flow for a batch of B samples with T steps::

    in_static (B, C, L) --[encoder]--> NN_FHS / NN_FCS / NN_BHS / NN_BCS --> (h0, c0) per direction
    in_dyn (B, T, d) --> NN_InD --> forward + backward LSTM --> NN_out --> out (B, T, W)

Inputs are standardised and outputs scaled by a :class:`Normaliser` fitted on
the training set, so the network works in order-one units while callers see
physical ones.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .nn import ops
from .nn.checkpoint import load_tensors, save_tensors
from .nn.layers import ACTIVATIONS, LSTM, MLP, ConvEncoder, Dense, LstmState, Module, BEAM_CNN, brnn_forward
from .nn.optim import OptimizerState, Plateau, StepDecay, adam_step, scheduler_step
from .nn.tensor import Tensor, no_grad, parameter

ENCODERS = ("none", "mlp", "cnn")
LOSSES = ("mse", "weighted")
W_CLAMP = (0.1, 10.0)


@dataclass(frozen=True)
class Block:
    sizes: tuple
    activations: tuple

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.sizes) != len(self.activations):
            raise ConfigError(f"block has {len(self.sizes)} sizes but {len(self.activations)} activations")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ConfigError(f"unknown activation(s) {bad}")

    @classmethod
    def of(cls, sizes, acts) -> "Block":
        return cls(tuple(sizes), tuple(acts))


@dataclass(frozen=True)
class ArchSpec:
    """Layer layout of one network element.

    ``out`` lists the hidden layers of the output block; a linear layer of
    width ``output_width`` is always appended after them.
    """
    n_t: int
    n_x: int
    in_dyn_width: int
    in_static_shape: tuple          # (channels, length)
    cells: int
    fhs: Block
    bhs: Block
    fcs: Block
    bcs: Block
    ind: Block
    out: Block
    static_encoder: str = "mlp"
    output_width: int = 51
    cnn_layers: tuple = BEAM_CNN
    length: float = 1.0             # domain length, bounds the on-demand location channel

    def __post_init__(self):
        object.__setattr__(self, "in_static_shape", tuple(int(s) for s in self.in_static_shape))
        object.__setattr__(self, "cnn_layers", tuple(tuple(s) for s in self.cnn_layers))
        if self.static_encoder not in ENCODERS:
            raise ConfigError(f"static_encoder must be one of {ENCODERS}, got {self.static_encoder!r}")
        if len(self.in_static_shape) != 2:
            raise ConfigError(f"in_static_shape must be (channels, length), got {self.in_static_shape}")
        if min(self.n_t, self.n_x, self.in_dyn_width, self.cells, self.output_width) < 1:
            raise ConfigError("n_t, n_x, in_dyn_width, cells and output_width must be positive")
        if self.static_encoder != "none":
            for name in ("fhs", "bhs", "fcs", "bcs"):
                blk = getattr(self, name)
                if not blk.sizes or blk.sizes[-1] != self.cells:
                    raise ConfigError(f"last layer of NN_{name.upper()} has size "
                                      f"{blk.sizes[-1] if blk.sizes else 0}, must equal cells={self.cells}")
        if not self.ind.sizes:
            raise ConfigError("NN_InD needs at least one layer")

    @property
    def out_channels(self) -> int:
        """Number of physical channels (displacement, velocity) packed in an output row."""
        if self.output_width == 2 and self.n_x != 1:
            return 2
        if self.output_width % self.n_x == 0:
            return self.output_width // self.n_x
        return 1

    def to_json(self) -> dict:
        d = asdict(self)
        for name in ("fhs", "bhs", "fcs", "bcs", "ind", "out"):
            d[name] = {"sizes": list(d[name]["sizes"]), "activations": list(d[name]["activations"])}
        d["in_static_shape"] = list(self.in_static_shape)
        d["cnn_layers"] = [list(s) for s in self.cnn_layers]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        for name in ("fhs", "bhs", "fcs", "bcs", "ind", "out"):
            d[name] = Block.of(d[name]["sizes"], d[name]["activations"])
        d["cnn_layers"] = tuple(tuple(s) for s in d["cnn_layers"])
        return cls(**d)


def rod_arch(cells: int = 50, n_x: int = 51, output_width: int | None = None, in_static_shape=(1, 51),
                n_t: int = 500) -> ArchSpec:
    """Rod layout: init blocks {20, cells}, NN_InD {20,60,60,60}, NN_out {50, 60 x 6}."""
    init = Block.of((20, cells), ("tanh", "eswish"))
    return ArchSpec(
        n_t=n_t, n_x=n_x, in_dyn_width=1, in_static_shape=in_static_shape, cells=cells,
        fhs=init, bhs=init, fcs=init, bcs=init,
        ind=Block.of((20, 60, 60, 60), ("tanh", "eswish", "eswish", "eswish")),
        out=Block.of((50,) + (60,) * 6, ("eswish",) * 7),
        static_encoder="mlp", output_width=n_x if output_width is None else output_width)


def beam_arch(cells: int = 100, init_width: int = 100, ind=(50, 150, 150, 150), out_width: int = 200,
              out_layers: int = 7, channels: int = 2, n_x: int = 101, n_t: int = 400) -> ArchSpec:
    """Beam layout: a CNN encoder per init block, Snake activations in the output block."""
    init = Block.of((init_width, cells), ("tanh", "eswish"))
    return ArchSpec(
        n_t=n_t, n_x=n_x, in_dyn_width=1, in_static_shape=(channels, n_x), cells=cells,
        fhs=init, bhs=init, fcs=init, bcs=init,
        ind=Block.of(ind, ("tanh",) + ("eswish",) * (len(ind) - 1)),
        out=Block.of((out_width,) * out_layers, ("snake",) * out_layers),
        static_encoder="cnn", output_width=2 * n_x)


# -- normalisation ----------------------------------------------------------------

def _safe(s: np.ndarray) -> np.ndarray:
    return np.where(s > 1e-12 * (np.abs(s).max() + 1e-300), s, 1.0)


@dataclass
class Normaliser:
    """Per-channel affine maps: inputs standardised, outputs divided by a scale."""
    static_mean: np.ndarray
    static_std: np.ndarray
    dyn_mean: np.ndarray
    dyn_std: np.ndarray
    out_scale: np.ndarray

    @classmethod
    def identity(cls, arch: ArchSpec) -> "Normaliser":
        c = arch.in_static_shape[0]
        return cls(np.zeros(c), np.ones(c), np.zeros(arch.in_dyn_width), np.ones(arch.in_dyn_width),
                   np.ones(arch.output_width))

    @classmethod
    def fit(cls, arch: ArchSpec, in_static, in_dyn, out) -> "Normaliser":
        s = np.asarray(in_static, dtype=float)
        d = np.asarray(in_dyn, dtype=float)
        o = np.asarray(out, dtype=float)
        s_mean = s.mean(axis=(0, 2))
        s_std = s.std(axis=(0, 2))
        s_std = np.where(s_std > 1e-12 * (np.abs(s_mean) + 1e-300), s_std, 1.0)
        d_mean = d.mean(axis=(0, 1))
        d_std = _safe(d.std(axis=(0, 1)))
        groups = np.split(o, arch.out_channels, axis=2)
        rms = np.array([np.sqrt(np.mean(g * g)) for g in groups])
        rms = np.where(rms > 0, rms, 1.0)
        scale = np.repeat(rms, arch.output_width // arch.out_channels)
        return cls(s_mean, s_std, d_mean, d_std, scale)

    def to_json(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "Normaliser":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


# -- model ----------------------------------------------------------------------

class InitBlock(Module):
    """Optional CNN feature extractor followed by an MLP producing one LSTM state."""

    def __init__(self, arch: ArchSpec, blk: Block, rng: np.random.Generator, name: str):
        c, length = arch.in_static_shape
        self.name = name
        self.cnn = None
        if arch.static_encoder == "cnn":
            self.cnn = ConvEncoder(c, length, rng, layers=arch.cnn_layers, name=f"{name}.cnn")
            n_in = self.cnn.n_out
        else:
            n_in = c * length
        self.mlp = MLP(n_in, blk.sizes, blk.activations, rng, name=name)

    def __call__(self, s: Tensor) -> Tensor:
        if self.cnn is not None:
            feats = self.cnn(s)
        else:
            feats = ops.reshape(s, (s.shape[0], s.shape[1] * s.shape[2]))
        return self.mlp(feats)


class SfneModel(Module):
    def __init__(self, arch: ArchSpec, seed: int, weighted: bool = False):
        self.arch = arch
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        rng = self.rng
        if arch.static_encoder != "none":
            self.fhs = InitBlock(arch, arch.fhs, rng, "NN_FHS")
            self.fcs = InitBlock(arch, arch.fcs, rng, "NN_FCS")
            self.bhs = InitBlock(arch, arch.bhs, rng, "NN_BHS")
            self.bcs = InitBlock(arch, arch.bcs, rng, "NN_BCS")
        self.ind = MLP(arch.in_dyn_width, arch.ind.sizes, arch.ind.activations, rng, name="NN_InD")
        self.lstm_f = LSTM(self.ind.n_out, arch.cells, rng)
        self.lstm_b = LSTM(self.ind.n_out, arch.cells, rng)
        self.out = MLP(2 * arch.cells, arch.out.sizes, arch.out.activations, rng, name="NN_out")
        prev = self.out.n_out if arch.out.sizes else 2 * arch.cells
        self.head = Dense(prev, arch.output_width, "linear", rng, name="NN_out[linear]")
        self.loss_kind = "weighted" if weighted else "mse"
        if weighted:
            self.loss_w = parameter(np.ones(2), name="loss_w")
        self.norm = Normaliser.identity(arch)
        self.eval()

    @property
    def weighted(self) -> bool:
        return self.loss_kind == "weighted"

    def network_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n != "loss_w"]

    def initial_states(self, s: Tensor) -> tuple[LstmState, LstmState]:
        B = s.shape[0]
        if self.arch.static_encoder == "none":
            z = LstmState.zeros(B, self.arch.cells)
            return z, LstmState.zeros(B, self.arch.cells)
        return (LstmState(self.fhs(s), self.fcs(s)), LstmState(self.bhs(s), self.bcs(s)))

    def core(self, s: Tensor, d: Tensor) -> Tensor:
        """Network map on normalised inputs, (B, C, L) x (B, T, d) -> (B, T, W) normalised output."""
        B, T, width = d.shape
        init_f, init_b = self.initial_states(s)
        z = self.ind(ops.reshape(d, (B * T, width)))
        seq = brnn_forward(self.lstm_f, self.lstm_b, ops.reshape(z, (B, T, z.shape[1])), init_f, init_b)
        y = self.head(self.out(ops.reshape(seq, (B * T, seq.shape[2]))))
        ops.check_finite(y, "NN_out")
        return ops.reshape(y, (B, T, self.arch.output_width))


def build(arch: ArchSpec, seed: int = 0, loss: str = "mse") -> SfneModel:
    """Allocate and initialise a network element (Glorot weights, E-Swish beta = 1, loss weights = 1)."""
    if loss not in LOSSES:
        raise ConfigError(f"loss must be one of {LOSSES}, got {loss!r}")
    return SfneModel(arch, seed, weighted=(loss == "weighted"))


def count_parameters(model: SfneModel, include_loss_weights: bool = False) -> int:
    params = model.parameters() if include_loss_weights else [p for _, p in model.network_parameters()]
    return int(sum(p.size for p in params))


def _batched(model: SfneModel, in_static, in_dyn):
    s = np.asarray(in_static, dtype=float)
    d = np.asarray(in_dyn, dtype=float)
    squeeze = d.ndim == 2
    if squeeze:
        s, d = s[None], d[None]
    if s.ndim == 2 and s.shape[0] == d.shape[0] and model.arch.in_static_shape[0] == 1:
        s = s[:, None, :]
    arch = model.arch
    if s.ndim != 3 or s.shape[1:] != arch.in_static_shape:
        raise ShapeError("sfne.forward", s.shape, arch.in_static_shape, detail="static input (B, C, L)")
    if d.ndim != 3 or d.shape[2] != arch.in_dyn_width or d.shape[1] < 1:
        raise ShapeError("sfne.forward", d.shape, (arch.in_dyn_width,), detail="dynamic input (B, T, d)")
    if s.shape[0] != d.shape[0]:
        raise ShapeError("sfne.forward", s.shape, d.shape, detail="batch sizes differ")
    return s, d, squeeze


def normalise_inputs(model: SfneModel, s: np.ndarray, d: np.ndarray):
    nm = model.norm
    return ((s - nm.static_mean[None, :, None]) / nm.static_std[None, :, None],
            (d - nm.dyn_mean) / nm.dyn_std)


def forward(model: SfneModel, in_static, in_dyn) -> Tensor:
    """Differentiable prediction in physical units, (B, T, W) or (T, W) for a single sample."""
    s, d, squeeze = _batched(model, in_static, in_dyn)
    sn, dn = normalise_inputs(model, s, d)
    y = model.core(Tensor(sn), Tensor(dn))
    y = ops.mul_const(y, np.broadcast_to(model.norm.out_scale, y.shape))
    return ops.reshape(y, y.shape[1:]) if squeeze else y


def predict(model: SfneModel, in_static, in_dyn, batch: int = 256) -> np.ndarray:
    """Inference-mode prediction as a numpy array (no tape, dropout off)."""
    s, d, squeeze = _batched(model, in_static, in_dyn)
    was = model.training
    model.eval()
    try:
        with no_grad():
            chunks = [forward(model, s[i:i + batch], d[i:i + batch]).data for i in range(0, len(d), batch)]
    finally:
        model.train(was)
    out = np.concatenate(chunks) if chunks else np.zeros((0, d.shape[1], model.arch.output_width))
    return out[0] if squeeze else out


# -- losses and metrics -------------------------------------------------------------

def plain_mse(pred: Tensor, truth) -> Tensor:
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError("loss", pred.shape, truth.shape)
    return ops.mean(ops.square(ops.sub(pred, Tensor(truth))))


def weighted_range_loss(pred: Tensor, truth, weights: Tensor, channels: int = 2) -> Tensor:
    """W1 * mean_i sum_c MSE_c(i) + W2 * mean_i sum_c MSE_c(i) / rng_c(i)^2.

    Arrays are (B, T, W) with the W columns split evenly into ``channels``
    groups (displacement then velocity).  Ranges are max - min of the truth
    per sample and channel.
    """
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.data.ndim != 3:
        raise ShapeError("loss", pred.shape, truth.shape, detail="need equal (B, T, W)")
    B, T, W = truth.shape
    if W % channels:
        raise ShapeError("loss", truth.shape, detail=f"width not divisible into {channels} channels")
    w1, w2 = weights[0:1], weights[1:2]
    width = W // channels
    err = ops.sub(pred, Tensor(truth))
    t1 = t2 = None
    for c in range(channels):
        cols = slice(c * width, (c + 1) * width)
        mse_i = ops.mean(ops.square(err[:, :, cols]), axis=(1, 2))          # (B,)
        rng = np.ptp(truth[:, :, cols].reshape(B, -1), axis=1)
        if weights.data[1] != 0.0 and np.any(rng == 0.0):
            i = int(np.argmax(rng == 0.0))
            raise NumericError(f"weighted loss: truth of sample {i} channel {c} is constant (zero range)")
        inv = np.divide(1.0, rng * rng, out=np.zeros_like(rng), where=rng > 0)
        a = ops.mean(mse_i)
        b = ops.mean(ops.mul_const(mse_i, inv))
        t1 = a if t1 is None else ops.add(t1, a)
        t2 = b if t2 is None else ops.add(t2, b)
    return ops.add(ops.scalar_mul(ops.reshape(t1, (1,)), w1), ops.scalar_mul(ops.reshape(t2, (1,)), w2))


def loss(kind: str, pred: Tensor, truth, weights: Tensor | None = None, channels: int = 2) -> Tensor:
    if kind == "mse":
        return plain_mse(pred, truth)
    if kind == "weighted":
        if weights is None:
            raise ConfigError("weighted loss needs the loss weights")
        return ops.reshape(weighted_range_loss(pred, truth, weights, channels), ())
    raise ConfigError(f"unknown loss kind {kind!r}")


def relative_error(pred, truth) -> float:
    """Mean absolute error over all entries divided by the global range of ``truth``, in percent."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError("relative_error", pred.shape, truth.shape)
    r = np.ptp(truth)
    if r == 0.0:
        raise NumericError("relative_error: truth is constant (zero range)")
    return float(np.mean(np.abs(pred - truth)) / r * 100.0)


def sample_errors(pred, truth, channels: int = 1) -> np.ndarray:
    """Per-sample e_r for (N, T, W) arrays, averaged over the ``channels`` column groups."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError("sample_errors", pred.shape, truth.shape)
    N = truth.shape[0]
    out = np.zeros(N)
    for p, t in zip(np.split(pred, channels, axis=2), np.split(truth, channels, axis=2)):
        r = np.ptp(t.reshape(N, -1), axis=1)
        if np.any(r == 0.0):
            raise NumericError(f"sample {int(np.argmax(r == 0.0))}: truth is constant (zero range)")
        out += np.mean(np.abs(p - t), axis=(1, 2)) / r * 100.0
    return out / channels


def step_profile(pred, truth, channels: int = 1) -> np.ndarray:
    """e_r(t): per-step mean absolute error over nodes, normalised by each sample's range, averaged."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    N, T, _ = truth.shape
    prof = np.zeros(T)
    for p, t in zip(np.split(pred, channels, axis=2), np.split(truth, channels, axis=2)):
        r = np.ptp(t.reshape(N, -1), axis=1)
        if np.any(r == 0.0):
            raise NumericError("step_profile: a truth sample is constant")
        prof += np.mean(np.mean(np.abs(p - t), axis=2) / r[:, None], axis=0) * 100.0
    return prof / channels


# -- training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    scheduler: str = "step"          # "step" | "plateau" | "none"
    step_period: int = 300
    patience: int = 75
    factor: float = 2.0
    loss: str = "mse"
    seed: int = 0
    split: float = 0.85

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.scheduler not in ("step", "plateau", "none"):
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must lie in (0, 1), got {self.split}")

    @classmethod
    def rod(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 1000, "lr": 1e-3, "scheduler": "step", "loss": "mse", **kw})

    @classmethod
    def beam(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 1500, "lr": 2e-4, "scheduler": "plateau", "loss": "weighted", **kw})

    def make_optimizer(self) -> OptimizerState:
        sch = {"step": StepDecay(self.step_period, self.factor),
               "plateau": Plateau(self.patience, self.factor), "none": None}[self.scheduler]
        return OptimizerState(lr=self.lr, scheduler=sch)


@dataclass
class Curves:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def append(self, epoch, train, test, lr):
        self.epoch.append(int(epoch))
        self.train_loss.append(float(train))
        self.test_loss.append(float(test))
        self.lr.append(float(lr))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,test_loss,lr\n")
            for row in zip(self.epoch, self.train_loss, self.test_loss, self.lr):
                fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")


@dataclass
class TrainResult:
    model: SfneModel
    curves: Curves
    opt: OptimizerState
    epochs_done: int


def _arrays(ds):
    return (np.asarray(ds.in_static, dtype=float), np.asarray(ds.in_dyn, dtype=float),
            np.asarray(ds.out, dtype=float))


def _batch_loss(model: SfneModel, s, d, y) -> Tensor:
    sn, dn = normalise_inputs(model, s, d)
    pred = model.core(Tensor(sn), Tensor(dn))
    truth = y / model.norm.out_scale
    return loss(model.loss_kind, pred, truth, getattr(model, "loss_w", None), model.arch.out_channels)


def evaluate_loss(model: SfneModel, ds, batch: int = 256) -> float:
    """Loss over a whole dataset in inference mode, weighted by batch size."""
    s, d, y = _arrays(ds)
    if len(y) == 0:
        return float("nan")
    was = model.training
    model.eval()
    total = 0.0
    try:
        with no_grad():
            for i in range(0, len(y), batch):
                total += float(_batch_loss(model, s[i:i + batch], d[i:i + batch], y[i:i + batch]).data) \
                    * len(y[i:i + batch])
    finally:
        model.train(was)
    return total / len(y)


def train(model: SfneModel, train_set, test_set, cfg: TrainConfig, resume: TrainResult | None = None,
          epochs: int | None = None, fit_normaliser: bool = True, log=None) -> TrainResult:
    """Minibatch Adam on ``train_set``; the test set is only monitored.

    Passing ``resume`` continues from a previous result (or a loaded
    checkpoint) with its optimiser moments, schedule and RNG stream intact.
    ``epochs`` caps how many epochs this call runs (default: up to
    ``cfg.epochs`` in total).
    """
    if cfg.loss != model.loss_kind:
        raise ConfigError(f"model was built for loss {model.loss_kind!r} but config asks for {cfg.loss!r}")
    s_all, d_all, y_all = _arrays(train_set)
    if len(y_all) == 0:
        raise ConfigError("training set is empty")
    if resume is None:
        if fit_normaliser:
            model.norm = Normaliser.fit(model.arch, s_all, d_all, y_all)
        opt, curves, start = cfg.make_optimizer(), Curves(), 0
    else:
        opt, curves, start = resume.opt, resume.curves, resume.epochs_done
    stop = cfg.epochs if epochs is None else min(cfg.epochs, start + epochs)
    named = model.named_parameters()
    names, params = zip(*named)
    ascent = [i for i, n in enumerate(names) if n == "loss_w"]
    n = len(y_all)
    for epoch in range(start, stop):
        model.train()
        order = model.rng.permutation(n)
        total = 0.0
        for b0 in range(0, n, cfg.batch_size):
            idx = np.sort(order[b0:b0 + cfg.batch_size])
            model.zero_grad()
            val = _batch_loss(model, s_all[idx], d_all[idx], y_all[idx])
            lv = float(val.data)
            if not np.isfinite(lv):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b0 // cfg.batch_size}")
            val.backward()
            adam_step(opt, params, [p.grad for p in params], ascent=ascent)
            if ascent:
                np.clip(model.loss_w.data, *W_CLAMP, out=model.loss_w.data)
            total += lv * len(idx)
        train_loss = total / n
        test_loss = evaluate_loss(model, test_set) if test_set is not None and len(test_set) else float("nan")
        curves.append(epoch, train_loss, test_loss, opt.lr)
        scheduler_step(opt, epoch, train_loss)
        if log is not None:
            log(epoch, train_loss, test_loss, opt.lr)
    model.eval()
    return TrainResult(model, curves, opt, stop)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, result_or_model, cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    """Parameters, normaliser, architecture, optimiser moments, curves and RNG state in one file."""
    if isinstance(result_or_model, TrainResult):
        model, opt, curves, done = (result_or_model.model, result_or_model.opt,
                                    result_or_model.curves, result_or_model.epochs_done)
    else:
        model, opt, curves, done = result_or_model, None, None, 0
    tensors = {f"param/{n}": p.data for n, p in model.named_parameters()}
    meta = {
        "kind": "sfne",
        "arch": model.arch.to_json(),
        "seed": model.seed,
        "loss": model.loss_kind,
        "norm": model.norm.to_json(),
        "rng": model.rng.bit_generator.state,
        "epochs_done": done,
        "config": asdict(cfg) if cfg is not None else None,
        "extra": extra or {},
    }
    if opt is not None:
        meta["opt"] = {k: getattr(opt, k) for k in ("lr", "beta1", "beta2", "eps", "step", "lr0",
                                                    "best_loss", "bad_epochs")}
        meta["opt"]["best_loss"] = repr(opt.best_loss)
        sch = opt.scheduler
        meta["opt"]["scheduler"] = None if sch is None else {"kind": type(sch).__name__, **asdict(sch)}
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            tensors[f"adam_m/{i}"] = m
            tensors[f"adam_v/{i}"] = v
    if curves is not None:
        meta["curves"] = asdict(curves)
        meta["curves"]["train_loss"] = [repr(x) for x in curves.train_loss]
        meta["curves"]["test_loss"] = [repr(x) for x in curves.test_loss]
        meta["curves"]["lr"] = [repr(x) for x in curves.lr]
    json.dumps(meta)  # fail before writing anything
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> tuple[TrainResult, dict]:
    """Inverse of :func:`save_checkpoint`; returns the result and the raw metadata."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "sfne":
        raise ConfigError(f"{path}: not a network element checkpoint")
    arch = ArchSpec.from_json(meta["arch"])
    model = build(arch, meta["seed"], meta["loss"])
    params = dict(model.named_parameters())
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors or tensors[key].shape != p.shape:
            raise ShapeError("load_checkpoint", p.shape, getattr(tensors.get(key), "shape", None),
                             detail=f"parameter {name}")
        p.data[...] = tensors[key]
    model.norm = Normaliser.from_json(meta["norm"])
    model.rng.bit_generator.state = meta["rng"]
    opt = OptimizerState(lr=1e-3)
    if "opt" in meta:
        o = dict(meta["opt"])
        sch = o.pop("scheduler")
        o["best_loss"] = float(o["best_loss"])
        if sch is not None:
            kind = sch.pop("kind")
            sch = {"StepDecay": StepDecay, "Plateau": Plateau}[kind](**sch)
        opt = OptimizerState(scheduler=sch, **o)
        k = sum(1 for key in tensors if key.startswith("adam_m/"))
        opt.m = [tensors[f"adam_m/{i}"].copy() for i in range(k)]
        opt.v = [tensors[f"adam_v/{i}"].copy() for i in range(k)]
    curves = Curves()
    if "curves" in meta:
        c = meta["curves"]
        curves = Curves(c["epoch"], [float(x) for x in c["train_loss"]], [float(x) for x in c["test_loss"]],
                        [float(x) for x in c["lr"]])
    return TrainResult(model, curves, opt, meta.get("epochs_done", 0)), meta


# -- ensembles and the on-demand variant ----------------------------------------------

class Ensemble:
    """Elementwise mean of member predictions."""

    def __init__(self, models):
        self.models = list(models)
        if not self.models:
            raise ConfigError("an ensemble needs at least one model")
        self.arch = self.models[0].arch

    def __len__(self):
        return len(self.models)

    def predict(self, in_static, in_dyn, k: int | None = None) -> np.ndarray:
        members = self.models[:k] if k else self.models
        acc = None
        for m in members:
            p = predict(m, in_static, in_dyn)
            acc = p if acc is None else acc + p
        return acc / len(members)


def _train_member(args):
    arch, dataset_factory, cfg, j = args
    train_set, test_set = dataset_factory(j)
    model = build(arch, cfg.seed, cfg.loss)
    return train(model, train_set, test_set, cfg)


def train_ensemble(arch: ArchSpec, dataset_factory, k: int, cfg: TrainConfig, jobs: int = 1,
                   on_member=None) -> tuple[Ensemble, list]:
    """Train ``k`` members, member j with seed ``cfg.seed + j`` on ``dataset_factory(j)``.

    ``dataset_factory(j)`` returns ``(train_set, test_set)``; independent draws
    per member give bagging.  Returns the ensemble and the members' results.
    """
    from .errors import EnsembleTrainingError

    if k < 1:
        raise ConfigError("ensemble size must be >= 1")
    tasks = [(arch, dataset_factory, replace(cfg, seed=cfg.seed + j), j) for j in range(k)]
    results, failures = [None] * k, []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_train_member, t) for t in tasks]
            for j, f in enumerate(futs):
                try:
                    results[j] = f.result()
                except Exception as exc:  # collected and reported together
                    failures.append((j, repr(exc)))
    else:
        for j, t in enumerate(tasks):
            try:
                results[j] = _train_member(t)
            except Exception as exc:
                failures.append((j, repr(exc)))
            if on_member is not None and results[j] is not None:
                on_member(j, results[j])
    survivors = [r for r in results if r is not None]
    if failures:
        raise EnsembleTrainingError(
            f"{len(failures)} of {k} ensemble members failed: " + "; ".join(f"#{j}: {e}" for j, e in failures),
            survivors=survivors, failures=failures)
    return Ensemble([r.model for r in results]), results


def on_demand_forward(model, in_static_with_x0, in_dyn) -> np.ndarray:
    """Predict {u(x0, t), u_dot(x0, t)} where x0 fills the last static channel."""
    s = np.asarray(in_static_with_x0, dtype=float)
    arch = model.arch
    if arch.output_width != 2:
        raise ConfigError(f"on-demand prediction needs output_width 2, model has {arch.output_width}")
    x0 = s[..., -1, :]
    if np.any(x0 < 0.0) or np.any(x0 > arch.length):
        bad = x0[(x0 < 0.0) | (x0 > arch.length)].flat[0]
        raise ValueError(f"location x0 = {bad:g} outside [0, {arch.length:g}]")
    if isinstance(model, Ensemble):
        return model.predict(s, in_dyn)
    return predict(model, s, in_dyn)
