"""Minimal dense-network stack: forward/backward passes, losses, SGD.

All models are plain MLPs with ReLU hidden activations and a linear output
layer (the discriminator additionally passes its scalar output through a
sigmoid). Everything is float64 and deterministic: given the same parameters
and inputs, forward, backward and optimizer steps are bitwise reproducible.

Gradients are exact reverse-mode derivatives of the losses defined here; see
`gradcheck` for the finite-difference verification used by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError

ROLE_EXTRACTOR = "extractor"
ROLE_CLASSIFIER = "classifier"
ROLE_DISCRIMINATOR = "discriminator"
_ROLES = (ROLE_EXTRACTOR, ROLE_CLASSIFIER, ROLE_DISCRIMINATOR)

# Discriminator probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] so the
# log terms in the adversarial losses stay finite.
PROB_EPS = 1e-7


@dataclass
class ModelParams:
    """Stack of dense layers; weights are (out, in), biases are (out,).

    Hidden layers use ReLU; the last layer is linear. `role` tags what the
    stack computes so composition mistakes fail fast.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    role: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ConfigError(f"unknown model role {self.role!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("weights and biases must be nonempty and congruent")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ConfigError(f"layer {k}: weight {w.shape} and bias {b.shape} do not compose")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ConfigError(
                    f"layer {k}: input dim {w.shape[1]} != layer {k - 1} output dim "
                    f"{self.weights[k - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ConfigError(f"layer {k}: non-finite parameter values")
        if self.role == ROLE_DISCRIMINATOR and self.output_dim != 1:
            raise ConfigError("discriminator must have output dim 1")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            role=self.role,
        )


@dataclass
class Gradients:
    """Per-layer gradients, shape-congruent with a ModelParams."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def add(self, other: "Gradients") -> "Gradients":
        return Gradients(
            weights=[a + b for a, b in zip(self.weights, other.weights)],
            biases=[a + b for a, b in zip(self.biases, other.biases)],
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )


@dataclass
class Batch:
    """Labeled examples: inputs (n, d) float64, labels (n,) ints in [0, C)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ConfigError("batch inputs must be a nonempty (n, d) matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError("labels must be one id per input row")


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bitwise equality of two parameter sets (used by freeze contracts)."""
    return all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights)) and all(
        np.array_equal(x, y) for x, y in zip(a.biases, b.biases)
    )


def init_mlp(dims: list[int], role: str, rng: np.random.Generator) -> ModelParams:
    """Build an MLP with uniform(-a, a) weights, a = sqrt(6/(fan_in+fan_out)).

    Biases start at zero. Draw order is fixed (layer by layer) so a seeded
    generator always yields the same parameters.
    """
    if len(dims) < 2:
        raise ConfigError("an MLP needs at least one layer (two dims)")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights=weights, biases=biases, role=role)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Activations recorded during a forward pass, consumed by `backward`."""

    inputs: list[np.ndarray]  # input to each layer (first entry is x)
    pre: list[np.ndarray]  # pre-activation of each layer


def forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the MLP on a batch; returns the linear output and the cache."""
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ConfigError(
            f"{params.role} expects inputs of dim {params.input_dim}, got {x.shape}"
        )
    last = len(params.weights) - 1
    inputs, pre = [], []
    a = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        a = z if k == last else np.maximum(z, 0.0)
    return a, ForwardCache(inputs=inputs, pre=pre)


def backward(
    params: ModelParams, cache: ForwardCache, d_out: np.ndarray
) -> tuple[Gradients, np.ndarray]:
    """Reverse-mode pass: gradient of a scalar loss w.r.t. params and input.

    `d_out` is the loss gradient w.r.t. the forward output for the same batch
    the cache was recorded on.
    """
    if len(cache.pre) != len(params.weights):
        raise ConfigError("forward cache does not match this model")
    last = len(params.weights) - 1
    g_w = [np.empty(0)] * len(params.weights)
    g_b = [np.empty(0)] * len(params.weights)
    da = d_out
    for k in range(last, -1, -1):
        dz = da if k == last else da * (cache.pre[k] > 0.0)
        g_w[k] = dz.T @ cache.inputs[k]
        g_b[k] = dz.sum(axis=0)
        da = dz @ params.weights[k]
    return Gradients(weights=g_w, biases=g_b), da


def forward_features(params: ModelParams, batch: Batch | np.ndarray) -> np.ndarray:
    """Feature matrix (n, k) for a batch under an extractor."""
    if params.role != ROLE_EXTRACTOR:
        raise ConfigError(f"forward_features needs an extractor, got {params.role}")
    x = batch.inputs if isinstance(batch, Batch) else batch
    return forward(params, x)[0]


def forward_classify(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Class logits (n, C) for a feature matrix under a classifier."""
    if params.role != ROLE_CLASSIFIER:
        raise ConfigError(f"forward_classify needs a classifier, got {params.role}")
    return forward(params, features)[0]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax via stable log-sum-exp."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    d_logits = softmax(logits)
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    return loss, d_logits


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class DiscCache:
    mlp: ForwardCache
    probs: np.ndarray  # clamped sigmoid outputs


def discriminate_with_cache(
    params: ModelParams, features: np.ndarray
) -> tuple[np.ndarray, DiscCache]:
    """Discriminator probabilities (n,) in [PROB_EPS, 1 - PROB_EPS], plus cache."""
    if params.role != ROLE_DISCRIMINATOR:
        raise ConfigError(f"discriminate needs a discriminator, got {params.role}")
    raw, cache = forward(params, features)
    probs = np.clip(_sigmoid(raw[:, 0]), PROB_EPS, 1.0 - PROB_EPS)
    return probs, DiscCache(mlp=cache, probs=probs)


def discriminate(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Probability that each feature row came from the designated source."""
    return discriminate_with_cache(params, features)[0]


def disc_backward(
    params: ModelParams, cache: DiscCache, d_probs: np.ndarray
) -> tuple[Gradients, np.ndarray]:
    """Backward through sigmoid + MLP given the loss gradient w.r.t. probs.

    The clamp is treated as identity: it only binds where the sigmoid slope
    is below PROB_EPS, so p*(1-p) is the right derivative to within 1e-7.
    """
    p = cache.probs
    d_raw = (d_probs * p * (1.0 - p))[:, None]
    return backward(params, cache.mlp, d_raw)


def disc_loss(
    d_global: np.ndarray, d_local: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Discriminator objective: mean log(1 - D(f_global)) + mean log(D(f_local)).

    Minimized by gradient descent as-is. The sign convention is deliberate:
    descent drives D toward 1 on global features and 0 on local ones, and the
    regularizer below is consistent with it. Do not flip the signs to the
    textbook GAN form.
    """
    loss = float(np.mean(np.log1p(-d_global)) + np.mean(np.log(d_local)))
    d_dg = -1.0 / ((1.0 - d_global) * d_global.size)
    d_dl = 1.0 / (d_local * d_local.size)
    return loss, d_dg, d_dl


def reg_loss(d_local: np.ndarray) -> tuple[float, np.ndarray]:
    """Feature regularizer: mean log(1 - D(f_local)).

    Descent on this (with the discriminator frozen) pushes D(f_local) toward
    1, i.e. local features toward the global feature distribution.
    """
    loss = float(np.mean(np.log1p(-d_local)))
    d_dl = -1.0 / ((1.0 - d_local) * d_local.size)
    return loss, d_dl


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """SGD with classic momentum: v <- mu*v + g; p <- p - lr*v."""

    lr: float
    momentum: float
    vel_w: list[np.ndarray] = field(default_factory=list)
    vel_b: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ModelParams, lr: float, momentum: float) -> "OptimizerState":
        if lr < 0 or not 0.0 <= momentum < 1.0:
            raise ConfigError("need lr >= 0 and momentum in [0, 1)")
        return cls(
            lr=lr,
            momentum=momentum,
            vel_w=[np.zeros_like(w) for w in params.weights],
            vel_b=[np.zeros_like(b) for b in params.biases],
        )

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            lr=self.lr,
            momentum=self.momentum,
            vel_w=[v.copy() for v in self.vel_w],
            vel_b=[v.copy() for v in self.vel_b],
        )


def sgd_step(params: ModelParams, grads: Gradients, opt: OptimizerState) -> ModelParams:
    """Update `params` in place (the caller owns them) and return them."""
    if not grads.is_finite():
        raise NumericalError(f"non-finite gradient in {params.role} update")
    for w, v, g in zip(params.weights, opt.vel_w, grads.weights):
        v *= opt.momentum
        v += g
        w -= opt.lr * v
    for b, v, g in zip(params.biases, opt.vel_b, grads.biases):
        v *= opt.momentum
        v += g
        b -= opt.lr * v
    return params


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def numerical_gradients(loss_fn, params: ModelParams, step: float = 1e-4) -> Gradients:
    """Central finite differences of `loss_fn(params)` over every parameter.

    Independent of the analytic backward path by construction; only calls the
    loss forward. O(2 * n_params) loss evaluations, so keep models small.
    """
    work = params.copy()
    out_w, out_b = [], []
    for arrays, out in ((work.weights, out_w), (work.biases, out_b)):
        for arr in arrays:
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + step
                up = loss_fn(work)
                arr[idx] = orig - step
                down = loss_fn(work)
                arr[idx] = orig
                g[idx] = (up - down) / (2.0 * step)
                it.iternext()
            out.append(g)
    return Gradients(weights=out_w, biases=out_b)


def max_relative_error(analytic: Gradients, numeric: Gradients, guard: float = 1e-6) -> float:
    """Elementwise |a - n| / max(guard, |a|, |n|), maximized over all params.

    The guard keeps exactly-zero gradients (dead ReLU units, frozen paths)
    from blowing up the ratio.
    """
    worst = 0.0
    for a_list, n_list in ((analytic.weights, numeric.weights), (analytic.biases, numeric.biases)):
        for a, n in zip(a_list, n_list):
            denom = np.maximum(guard, np.maximum(np.abs(a), np.abs(n)))
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
