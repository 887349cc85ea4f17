"""MLP building blocks: shared feature extractor, binary head, class head.

Parameters of one MLP are a flat float64 vector; layer ``k`` occupies a
``(fan_in, fan_out)`` weight block followed by a ``fan_out`` bias block.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .bagdata import Instance, atomic_write_text


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def shapes(self) -> list:
        w = self.layer_widths
        return [(w[k], w[k + 1]) for k in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.shapes)


def init_params(spec: MlpSpec, seed) -> np.ndarray:
    """He initialization: weights ~ N(0, 2 / fan_in), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.shapes:
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


@dataclass
class Mlp:
    spec: MlpSpec
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got {self.params.shape}")

    @classmethod
    def init(cls, widths, seed) -> "Mlp":
        spec = MlpSpec(tuple(widths))
        return cls(spec, init_params(spec, seed))


class BoundMlp:
    """An MLP whose parameter vector lives on a tape as ``theta``."""

    def __init__(self, spec: MlpSpec, theta: Node):
        self.spec = spec
        self.theta = theta
        self.layers = []
        off = 0
        for fan_in, fan_out in spec.shapes:
            w = ad.reshape(theta[off: off + fan_in * fan_out], (fan_in, fan_out))
            off += fan_in * fan_out
            b = theta[off: off + fan_out]
            off += fan_out
            self.layers.append((w, b))


MlpLike = Union[Mlp, BoundMlp]


def bind(mlp: MlpLike, tape: Tape, trainable: bool = True) -> BoundMlp:
    if isinstance(mlp, BoundMlp):
        return mlp
    theta = tape.leaf(mlp.params) if trainable else tape.const(mlp.params)
    return BoundMlp(mlp.spec, theta)


def _as_input(x, tape: Tape) -> Node:
    if isinstance(x, Instance):
        x = x.features
    if isinstance(x, Node):
        return x
    return tape.const(np.asarray(x, dtype=np.float64))


def mlp_forward(mlp: MlpLike, x, tape: Tape) -> Node:
    """ReLU between layers, linear output.  ``x`` is ``(d,)`` or ``(n, d)``."""
    net = bind(mlp, tape)
    h = _as_input(x, tape)
    single = h.value.ndim == 1
    if h.shape[-1] != net.spec.n_in:
        raise ValueError(f"input dimension {h.shape[-1]} does not match {net.spec.n_in}")
    if single:
        h = ad.reshape(h, (1, -1))
    for k, (w, b) in enumerate(net.layers):
        h = h @ w + b
        if k < len(net.layers) - 1:
            h = ad.relu(h)
    return h[0] if single else h


def forward_feature(f: MlpLike, x, tape: Tape) -> Node:
    return mlp_forward(f, x, tape)


def instance_score(g: MlpLike, feat: Node, tape: Tape) -> Node:
    """Positive-instance score in (0, 1); scalar for one instance, ``(n,)`` for a batch."""
    out = ad.sigmoid(mlp_forward(g, feat, tape))
    if out.value.ndim == 1:
        return out[0]
    return ad.reshape(out, (out.shape[0],))


def instance_class_probs(h: MlpLike, feat: Node, tape: Tape) -> Node:
    return ad.softmax(mlp_forward(h, feat, tape), axis=-1)


# -- models ---------------------------------------------------------------

@dataclass
class _Blocks:
    def block_names(self) -> tuple:
        return tuple(k for k in self._order if getattr(self, k) is not None)

    def blocks(self) -> dict:
        return {k: getattr(self, k) for k in self.block_names()}

    def flat(self, names=None) -> np.ndarray:
        names = self.block_names() if names is None else names
        return np.concatenate([getattr(self, k).params for k in names])

    def slices(self, names=None) -> dict:
        names = self.block_names() if names is None else names
        out, off = {}, 0
        for k in names:
            n = getattr(self, k).spec.n_params
            out[k] = slice(off, off + n)
            off += n
        return out

    def with_flat(self, vec: np.ndarray, names=None):
        names = self.block_names() if names is None else names
        upd = {k: Mlp(getattr(self, k).spec, vec[s].copy()) for k, s in self.slices(names).items()}
        return replace(self, **upd)

    def bind_vector(self, theta: Node) -> dict:
        """Blocks read from one parameter node laid out like :meth:`flat`."""
        return {k: BoundMlp(getattr(self, k).spec, theta[s]) for k, s in self.slices().items()}

    def bind(self, tape: Tape, trainable=None):
        """Place parameters on ``tape``.

        Trainable blocks share one leaf (returned second) so the flat gradient
        is read off a single adjoint; other blocks become constants.
        """
        trainable = self.block_names() if trainable is None else tuple(trainable)
        leaf = tape.leaf(self.flat(trainable)) if trainable else None
        sl = self.slices(trainable)
        bound = {}
        for k in self.block_names():
            mlp = getattr(self, k)
            theta = leaf[sl[k]] if k in sl else tape.const(mlp.params)
            bound[k] = BoundMlp(mlp.spec, theta)
        return bound, leaf


@dataclass
class ModelTriple(_Blocks):
    """Feature extractor ``f``, binary head ``g``, C-class head ``h``.

    ``f_llp`` is set only for two-stage models whose class head reads a
    separately trained extractor.
    """
    f: Mlp
    g: Mlp
    h: Mlp
    f_llp: Optional[Mlp] = None
    _order = ("f", "g", "h", "f_llp")

    def __post_init__(self):
        if self.g.spec.n_out != 1:
            raise ValueError("g must have a single output")
        if self.g.spec.n_in != self.f.spec.n_out:
            raise ValueError("g input must match f output")
        hf = self.f_llp or self.f
        if self.h.spec.n_in != hf.spec.n_out:
            raise ValueError("h input must match its feature extractor output")
        if self.f_llp is not None and self.f_llp.spec.n_in != self.f.spec.n_in:
            raise ValueError("both extractors must read the same input dimension")

    @property
    def num_classes(self) -> int:
        return self.h.spec.n_out

    @property
    def input_dim(self) -> int:
        return self.f.spec.n_in

    @classmethod
    def init(cls, d: int, C: int, seed, hidden=(32, 16)) -> "ModelTriple":
        rng = np.random.default_rng(seed)
        k = hidden[-1]
        return cls(Mlp.init((d, *hidden), rng), Mlp.init((k, 1), rng), Mlp.init((k, C), rng))


@dataclass
class FlatClassifier(_Blocks):
    """Single (C+1)-way classifier used by the CE, PL and PPL baselines.

    Output index ``c < C`` is positive class ``c + 1``; index ``C`` is the
    negative class, matching the layout of full proportion vectors.
    """
    f: Mlp
    head: Mlp
    _order = ("f", "head")

    def __post_init__(self):
        if self.head.spec.n_in != self.f.spec.n_out:
            raise ValueError("head input must match f output")

    @property
    def num_classes(self) -> int:
        return self.head.spec.n_out - 1

    @property
    def input_dim(self) -> int:
        return self.f.spec.n_in

    @classmethod
    def init(cls, d: int, C: int, seed, hidden=(32, 16)) -> "FlatClassifier":
        rng = np.random.default_rng(seed)
        return cls(Mlp.init((d, *hidden), rng), Mlp.init((hidden[-1], C + 1), rng))


# -- checkpoints ----------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def checkpoint_to_text(model, epoch: int = 0, best_val_loss: float = float("inf"),
                       meta: Optional[dict] = None) -> str:
    kind = "triple" if isinstance(model, ModelTriple) else "flat"
    lines = ["lplp-checkpoint\t1", f"model\t{kind}", f"C\t{model.num_classes}",
             f"d\t{model.input_dim}", f"epoch\t{epoch}", f"best_val_loss\t{_fmt(best_val_loss)}"]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta\t{key}\t{value}")
    for name, mlp in model.blocks().items():
        widths = ",".join(str(w) for w in mlp.spec.layer_widths)
        lines.append(f"block\t{name}\t{widths}\t{mlp.spec.activation}\t{mlp.spec.n_params}")
        lines.append("\t".join(_fmt(v) for v in mlp.params))
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(path, model, epoch: int = 0, best_val_loss: float = float("inf"),
                    meta: Optional[dict] = None):
    atomic_write_text(path, checkpoint_to_text(model, epoch, best_val_loss, meta))


@dataclass
class Checkpoint:
    model: object
    epoch: int
    best_val_loss: float
    meta: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "lplp-checkpoint\t1" or lines[-1] != "end":
        raise CheckpointFormatError(f"{path}: not a complete checkpoint file")
    header, meta, blocks = {}, {}, {}
    i = 1
    while i < len(lines) - 1:
        rec = lines[i].split("\t")
        if rec[0] == "meta":
            meta[rec[1]] = rec[2]
        elif rec[0] == "block":
            widths = tuple(int(w) for w in rec[2].split(","))
            values = np.array([float(v) for v in lines[i + 1].split("\t")])
            if values.size != int(rec[4]):
                raise CheckpointFormatError(f"line {i + 2}: block {rec[1]} has wrong length")
            blocks[rec[1]] = Mlp(MlpSpec(widths, rec[3]), values)
            i += 1
        elif len(rec) == 2:
            header[rec[0]] = rec[1]
        else:
            raise CheckpointFormatError(f"line {i + 1}: unrecognized record")
        i += 1
    cls = ModelTriple if header.get("model") == "triple" else FlatClassifier
    model = cls(**blocks)
    return Checkpoint(model, int(header["epoch"]), float(header["best_val_loss"]), meta)
