"""Differentiable models: student network, domain experts, and aggregators.

Everything here is a pure function of a :class:`~moedistill.params.ParamStore`
plus inputs, so updated parameter sets built from gradients remain inside the
autograd graph. The student splits into a feature extractor (the part that is
adapted at test time) and a single affine classifier (never adapted). Experts
reuse the extractor architecture and are frozen after pretraining.

The aggregator turns the stack of per-expert feature vectors for one input
into a single supervision feature. Five kinds are supported:

* ``transformer`` -- one pre-norm encoder layer (multi-head self-attention +
  MLP, residuals around both), mean-pooled over the expert-token axis.
* ``avg`` / ``max`` -- parameter-free element-wise pooling over experts.
* ``mlp_ws`` -- a shared MLP scores each expert; output is the score-weighted
  (softmax-normalized) sum of expert features.
* ``mlp_p`` -- expert features are flattened and projected back to feature
  dimension by a two-layer MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .params import ParamStore

_ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "linear": lambda t: t,
}

AGGREGATOR_KINDS = ("transformer", "max", "avg", "mlp_ws", "mlp_p")
LN_EPS = 1e-5


@dataclass(frozen=True)
class StudentConfig:
    """Architecture of the student (and, by default, each expert).

    The extractor is an MLP ``input_dim -> hidden_dims... -> feature_dim``
    with the activation applied between layers (the feature output itself is
    affine). The classifier is a single affine map ``feature_dim -> outputs``.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    num_classes: int = 5
    activation: str = "relu"
    task: str = "classification"

    def __post_init__(self):
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ValueError("input_dim and feature_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ValueError("classification needs at least 2 classes")

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    @property
    def extractor_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.feature_dim)


@dataclass(frozen=True)
class AggregatorConfig:
    """Aggregator kind and dimensions.

    ``d`` is the token dimension (the expert feature dimension). ``out_dim``
    defaults to ``d``; when it differs (transformer kind only) a trailing
    affine + layernorm projects the pooled output. ``head_classes`` adds an
    affine logit head on the aggregated feature, used by logit distillation.
    """

    kind: str
    d: int
    num_experts: int
    k: int = 4
    d_k: int | None = None
    inner_dim: int | None = None
    out_dim: int | None = None
    head_classes: int | None = None

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(f"unknown aggregator kind {self.kind!r}")
        if self.d < 1 or self.num_experts < 1:
            raise ValueError("d and num_experts must be positive")
        if self.kind == "transformer":
            if self.k < 1:
                raise ValueError("need at least one attention head")
            if self.d_k is None and self.d % self.k != 0:
                raise ValueError(f"d={self.d} not divisible by k={self.k}; set d_k explicitly")
        if self.kind in ("max", "avg") and self.head_classes is not None:
            raise ValueError(f"{self.kind} aggregator is parameter-free; no logit head allowed")
        if self.out_dim is not None and self.out_dim != self.d and self.kind != "transformer":
            raise ValueError("out_dim != d is only supported by the transformer aggregator")

    @property
    def head_dim(self) -> int:
        return self.d_k if self.d_k is not None else self.d // self.k

    @property
    def mlp_dim(self) -> int:
        return self.inner_dim if self.inner_dim is not None else 2 * self.d

    @property
    def output_dim(self) -> int:
        return self.out_dim if self.out_dim is not None else self.d


@dataclass
class ModelState:
    """Bundle of everything needed to adapt and predict.

    Experts are frozen teachers; ``theta_e``/``theta_c``/``phi`` are the
    student extractor, student classifier, and aggregator parameters.
    """

    student_cfg: StudentConfig
    expert_cfg: StudentConfig
    agg_cfg: AggregatorConfig
    theta_e: ParamStore
    theta_c: ParamStore
    phi: ParamStore
    experts: list[ParamStore] = field(default_factory=list)

    @property
    def task(self) -> str:
        return self.student_cfg.task

    def detached(self) -> "ModelState":
        return ModelState(
            self.student_cfg,
            self.expert_cfg,
            self.agg_cfg,
            self.theta_e.detach(),
            self.theta_c.detach(),
            self.phi.detach(),
            [e.detach() for e in self.experts],
        )


# ---------------------------------------------------------------------------
# Initialization


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _student_arrays(cfg: StudentConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    dims = cfg.extractor_dims
    for i in range(len(dims) - 1):
        arrays[f"ext{i}.w"] = _uniform(rng, (dims[i], dims[i + 1]), dims[i])
        arrays[f"ext{i}.b"] = _uniform(rng, (dims[i + 1],), dims[i])
    arrays["cls.w"] = _uniform(rng, (cfg.feature_dim, cfg.output_dim), cfg.feature_dim)
    arrays["cls.b"] = _uniform(rng, (cfg.output_dim,), cfg.feature_dim)
    return arrays


def _aggregator_arrays(cfg: AggregatorConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    d, dk, inner = cfg.d, cfg.head_dim, cfg.mlp_dim
    if cfg.kind == "transformer":
        arrays["ln1.g"] = np.ones(d)
        arrays["ln1.b"] = np.zeros(d)
        for h in range(cfg.k):
            arrays[f"msa.h{h}.w_qkv"] = _uniform(rng, (d, 3 * dk), d)
        arrays["msa.w_o"] = _uniform(rng, (cfg.k * dk, d), cfg.k * dk)
        arrays["ln2.g"] = np.ones(d)
        arrays["ln2.b"] = np.zeros(d)
        arrays["mlp.w1"] = _uniform(rng, (d, inner), d)
        arrays["mlp.b1"] = _uniform(rng, (inner,), d)
        arrays["mlp.w2"] = _uniform(rng, (inner, d), inner)
        arrays["mlp.b2"] = _uniform(rng, (d,), inner)
        if cfg.output_dim != d:
            arrays["out.w"] = _uniform(rng, (d, cfg.output_dim), d)
            arrays["out.b"] = _uniform(rng, (cfg.output_dim,), d)
            arrays["out_ln.g"] = np.ones(cfg.output_dim)
            arrays["out_ln.b"] = np.zeros(cfg.output_dim)
    elif cfg.kind == "mlp_ws":
        arrays["score.w1"] = _uniform(rng, (d, d), d)
        arrays["score.b1"] = _uniform(rng, (d,), d)
        arrays["score.w2"] = _uniform(rng, (d, 1), d)
        arrays["score.b2"] = _uniform(rng, (1,), d)
    elif cfg.kind == "mlp_p":
        nd = cfg.num_experts * d
        arrays["proj.w1"] = _uniform(rng, (nd, d), nd)
        arrays["proj.b1"] = _uniform(rng, (d,), nd)
        arrays["proj.w2"] = _uniform(rng, (d, d), d)
        arrays["proj.b2"] = _uniform(rng, (d,), d)
    # max / avg: no parameters
    if cfg.head_classes is not None:
        arrays["head.w"] = _uniform(rng, (cfg.output_dim, cfg.head_classes), cfg.output_dim)
        arrays["head.b"] = _uniform(rng, (cfg.head_classes,), cfg.output_dim)
    return arrays


def init_params(
    config: StudentConfig | AggregatorConfig, seed: int, dtype: torch.dtype = torch.float32
) -> ParamStore:
    """Deterministic fan-in-scaled uniform initialization for any config."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if isinstance(config, StudentConfig):
        arrays = _student_arrays(config, rng)
    elif isinstance(config, AggregatorConfig):
        arrays = _aggregator_arrays(config, rng)
    else:
        raise TypeError(f"cannot initialize parameters for {type(config).__name__}")
    return ParamStore({name: torch.as_tensor(a, dtype=dtype) for name, a in arrays.items()})


def split_student(params: ParamStore) -> tuple[ParamStore, ParamStore]:
    """Split a full student store into (extractor theta_e, classifier theta_c)."""
    theta_e = ParamStore({n: t for n, t in params.items() if n.startswith("ext")})
    theta_c = ParamStore({n: t for n, t in params.items() if n.startswith("cls")})
    return theta_e, theta_c


def merge_student(theta_e: ParamStore, theta_c: ParamStore) -> ParamStore:
    return ParamStore({**dict(theta_e.items()), **dict(theta_c.items())})


def init_student(
    cfg: StudentConfig, seed: int, dtype: torch.dtype = torch.float32
) -> tuple[ParamStore, ParamStore]:
    return split_student(init_params(cfg, seed, dtype))


# ---------------------------------------------------------------------------
# Forward passes


def _check_input(x: torch.Tensor, input_dim: int) -> None:
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ValueError(f"expected input of shape [batch, {input_dim}], got {tuple(x.shape)}")


def student_features(theta_e: ParamStore, x: torch.Tensor, cfg: StudentConfig) -> torch.Tensor:
    """Feature extractor forward: [batch, input_dim] -> [batch, feature_dim]."""
    _check_input(x, cfg.input_dim)
    act = _ACTIVATIONS[cfg.activation]
    h = x.to(theta_e.dtype)
    n_layers = len(cfg.extractor_dims) - 1
    for i in range(n_layers):
        h = h @ theta_e[f"ext{i}.w"] + theta_e[f"ext{i}.b"]
        if i < n_layers - 1:
            h = act(h)
    return h


def student_logits(
    theta_e: ParamStore, theta_c: ParamStore, x: torch.Tensor, cfg: StudentConfig
) -> torch.Tensor:
    """Classifier outputs: affine map of the extracted features."""
    feats = student_features(theta_e, x, cfg)
    return feats @ theta_c["cls.w"] + theta_c["cls.b"]


def expert_features(expert: ParamStore, x: torch.Tensor, cfg: StudentConfig) -> torch.Tensor:
    """Features from an expert (its pre-classifier extractor output)."""
    return student_features(expert, x, cfg)


def expert_logits(expert: ParamStore, x: torch.Tensor, cfg: StudentConfig) -> torch.Tensor:
    theta_e, theta_c = split_student(expert)
    return student_logits(theta_e, theta_c, x, cfg)


def expert_feature_tokens(
    experts: list[ParamStore], x: torch.Tensor, cfg: StudentConfig
) -> torch.Tensor:
    """Per-sample expert feature stack: [batch, num_experts, feature_dim].

    Computed without autograd history: experts are frozen teachers, so their
    outputs enter downstream losses as constants.
    """
    with torch.no_grad():
        return torch.stack([expert_features(e, x, cfg) for e in experts], dim=-2)


def _layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS) * gamma + beta


def _self_attention(z: torch.Tensor, w_qkv: torch.Tensor, d_k: int) -> torch.Tensor:
    # z: [..., N, d]; w_qkv: [d, 3*d_k]
    qkv = z @ w_qkv
    q, k, v = qkv[..., :d_k], qkv[..., d_k : 2 * d_k], qkv[..., 2 * d_k :]
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d_k), dim=-1)
    return attn @ v


def _transformer_tokens(phi: ParamStore, z0: torch.Tensor, cfg: AggregatorConfig) -> torch.Tensor:
    h = _layer_norm(z0, phi["ln1.g"], phi["ln1.b"])
    heads = [_self_attention(h, phi[f"msa.h{i}.w_qkv"], cfg.head_dim) for i in range(cfg.k)]
    z = torch.cat(heads, dim=-1) @ phi["msa.w_o"] + z0
    h2 = _layer_norm(z, phi["ln2.g"], phi["ln2.b"])
    mlp = F.gelu(h2 @ phi["mlp.w1"] + phi["mlp.b1"]) @ phi["mlp.w2"] + phi["mlp.b2"]
    return mlp + z


def aggregate(phi: ParamStore, expert_feats: torch.Tensor, cfg: AggregatorConfig) -> torch.Tensor:
    """Combine per-expert features into one supervision feature per sample.

    ``expert_feats`` has shape ``[..., num_experts, d]`` (one token per
    expert); the result has shape ``[..., output_dim]``. The transformer kind
    runs one pre-norm encoder layer over the expert tokens and mean-pools; it
    carries no positional information, so the pooled output is invariant to
    expert order.
    """
    if expert_feats.shape[-1] != cfg.d:
        raise ValueError(f"token dim {expert_feats.shape[-1]} != configured d={cfg.d}")
    if expert_feats.shape[-2] != cfg.num_experts:
        raise ValueError(
            f"got {expert_feats.shape[-2]} expert tokens, configured for {cfg.num_experts}"
        )
    feats = expert_feats.to(phi.dtype) if len(phi) else expert_feats
    if cfg.kind == "avg":
        return feats.mean(dim=-2)
    if cfg.kind == "max":
        return feats.amax(dim=-2)
    if cfg.kind == "transformer":
        tokens = _transformer_tokens(phi, feats, cfg)
        if cfg.output_dim != cfg.d:
            tokens = tokens @ phi["out.w"] + phi["out.b"]
            tokens = _layer_norm(tokens, phi["out_ln.g"], phi["out_ln.b"])
        return tokens.mean(dim=-2)
    if cfg.kind == "mlp_ws":
        s = torch.relu(feats @ phi["score.w1"] + phi["score.b1"]) @ phi["score.w2"] + phi["score.b2"]
        weights = torch.softmax(s, dim=-2)
        return (weights * feats).sum(dim=-2)
    # mlp_p
    flat = feats.reshape(*feats.shape[:-2], cfg.num_experts * cfg.d)
    return torch.relu(flat @ phi["proj.w1"] + phi["proj.b1"]) @ phi["proj.w2"] + phi["proj.b2"]


def aggregator_head(phi: ParamStore, aggregated: torch.Tensor, cfg: AggregatorConfig) -> torch.Tensor:
    """Logit head on an aggregated (or student) feature vector."""
    if cfg.head_classes is None or "head.w" not in phi:
        raise ValueError("aggregator has no logit head; set head_classes in AggregatorConfig")
    return aggregated @ phi["head.w"] + phi["head.b"]
