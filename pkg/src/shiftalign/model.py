"""Feature extractor plus either a joint (c+1)-way head or split classifier/discriminator heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_EPS, Tape
from .errors import ConfigurationError, DimensionError

JOINT = "joint"
SPLIT = "split"


@dataclass(frozen=True)
class Architecture:
    d: int
    c: int
    K: int = 16
    extractor_hidden: tuple = (64, 64)
    head_hidden: int = 32
    head: str = JOINT

    def __post_init__(self):
        if self.head not in (JOINT, SPLIT):
            raise ConfigurationError(f"unknown head kind {self.head!r}")
        object.__setattr__(self, "extractor_hidden", tuple(self.extractor_hidden))

    def layer_shapes(self) -> dict[str, list[tuple[int, int]]]:
        """Weight shapes per sub-network, keyed by parameter prefix."""
        f_sizes = [self.d, *self.extractor_hidden, self.K]
        shapes = {"f": list(zip(f_sizes[:-1], f_sizes[1:]))}
        if self.head == JOINT:
            shapes["h"] = [(self.K, self.head_hidden), (self.head_hidden, self.c + 1)]
        else:
            shapes["cls"] = [(self.K, self.head_hidden), (self.head_hidden, self.c)]
            shapes["dis"] = [(self.K, self.head_hidden), (self.head_hidden, 1)]
        return shapes


@dataclass
class ModelBundle:
    arch: Architecture
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> list[str]:
        return [name for name in self.params if name.split(".")[0] == prefix]

    @property
    def extractor_names(self) -> list[str]:
        return self.group("f")

    @property
    def head_names(self) -> list[str]:
        return [n for n in self.params if n.split(".")[0] != "f"]

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.arch, {k: v.copy() for k, v in self.params.items()})


def init_model(arch: Architecture, rng: np.random.Generator) -> ModelBundle:
    """Glorot-uniform weights, zero biases, drawn in a fixed parameter order."""
    params = {}
    for prefix, shapes in arch.layer_shapes().items():
        for i, (fan_in, fan_out) in enumerate(shapes):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{prefix}.{i}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"{prefix}.{i}.b"] = np.zeros(fan_out)
    return ModelBundle(arch, params)


# -- graph builders ---------------------------------------------------------------


def put_params(tape: Tape, model: ModelBundle, names=None) -> dict[str, ad.Node]:
    """Record parameters on ``tape``; names outside ``names`` go in as constants."""
    nodes = {}
    for name, value in model.params.items():
        if names is None or name in names:
            nodes[name] = tape.param(name, value)
        else:
            nodes[name] = tape.const(value)
    return nodes


def mlp(x: ad.Node, nodes: dict, prefix: str, n_layers: int) -> ad.Node:
    """Dense layers with relu between them and a linear last layer."""
    h = x
    for i in range(n_layers):
        h = ad.add_bias(ad.matmul(h, nodes[f"{prefix}.{i}.W"]), nodes[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def extract_graph(x: ad.Node, nodes: dict, arch: Architecture) -> ad.Node:
    if x.shape[1] != arch.d:
        raise DimensionError(f"input has {x.shape[1]} columns, extractor expects {arch.d}")
    return mlp(x, nodes, "f", len(arch.extractor_hidden) + 1)


def joint_logits_graph(features: ad.Node, nodes: dict, arch: Architecture) -> ad.Node:
    if arch.head != JOINT:
        raise ConfigurationError("joint head requested on a split-head model")
    return mlp(features, nodes, "h", 2)


def split_logits_graph(features: ad.Node, nodes: dict, arch: Architecture):
    if arch.head != SPLIT:
        raise ConfigurationError("split heads requested on a joint-head model")
    return mlp(features, nodes, "cls", 2), mlp(features, nodes, "dis", 2)


def log_conditional_score(joint_probs: ad.Node, labels, c: int) -> ad.Node:
    """log of p(y) / (1 - p(domain)) per row: the class score given "source-like"."""
    log_num = ad.log(ad.take(joint_probs, labels))
    log_den = ad.log(ad.one_minus(ad.column(joint_probs, c)))
    return ad.sub(log_num, log_den)


# -- array-level API ---------------------------------------------------------------


def extract(model: ModelBundle, x) -> np.ndarray:
    tape = Tape()
    nodes = put_params(tape, model, names=())
    return extract_graph(tape.const(x), nodes, model.arch).value


@dataclass
class ScoreVector:
    """Joint (c+1)-way probabilities and the renormalised class scores.

    ``conditional_probs`` has c+1 columns with the last fixed at zero.
    ``saturated`` flags rows whose domain unit sat within the clamp of 1.
    """

    joint_probs: np.ndarray
    conditional_probs: np.ndarray
    saturated: np.ndarray


def conditional_from_joint(joint_probs) -> ScoreVector:
    joint_probs = np.asarray(joint_probs, dtype=np.float64)
    c = joint_probs.shape[1] - 1
    denom = 1.0 - joint_probs[:, c]
    saturated = denom < PROB_EPS
    denom = np.maximum(denom, PROB_EPS)
    cond = np.zeros_like(joint_probs)
    cond[:, :c] = joint_probs[:, :c] / denom[:, None]
    return ScoreVector(joint_probs, cond, saturated)


def joint_scores(model: ModelBundle, features) -> ScoreVector:
    tape = Tape()
    nodes = put_params(tape, model, names=())
    logits = joint_logits_graph(tape.const(features), nodes, model.arch)
    return conditional_from_joint(ad.softmax(logits).value)


def split_scores(model: ModelBundle, features):
    """Returns ``(class_probs (n x c), domain_prob (n,))``."""
    tape = Tape()
    nodes = put_params(tape, model, names=())
    cls_logits, dis_logit = split_logits_graph(tape.const(features), nodes, model.arch)
    return ad.softmax(cls_logits).value, ad.sigmoid(dis_logit).value[:, 0]


def class_posterior(model: ModelBundle, x) -> np.ndarray:
    """Source-trained class posterior p_s(y | f(x)) as an n x c array, whichever head is used."""
    feats = extract(model, x)
    if model.arch.head == JOINT:
        return joint_scores(model, feats).conditional_probs[:, : model.arch.c]
    return split_scores(model, feats)[0]


def domain_prob(model: ModelBundle, x) -> np.ndarray:
    """Model's own probability that each row comes from the target domain."""
    feats = extract(model, x)
    if model.arch.head == JOINT:
        return joint_scores(model, feats).joint_probs[:, model.arch.c]
    return split_scores(model, feats)[1]


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(model: ModelBundle, path):
    arch = asdict(model.arch)
    arch["extractor_hidden"] = list(arch["extractor_hidden"])
    payload = {
        "architecture": arch,
        "params": {
            name: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for name, v in model.params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> ModelBundle:
    with open(path) as fh:
        payload = json.load(fh)
    arch = Architecture(**payload["architecture"])
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    expected = {f"{p}.{i}.{k}": shape for p, shapes in arch.layer_shapes().items()
                for i, shape in enumerate(shapes) for k in ("W", "b")}
    if set(params) != set(expected):
        raise ConfigurationError("checkpoint parameters do not match its architecture")
    return ModelBundle(arch, params)
