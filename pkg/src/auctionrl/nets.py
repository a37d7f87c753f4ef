"""Minimal feed-forward networks with manual backpropagation and Adam.

Everything is plain numpy in float64: small tanh MLPs, a Gaussian bidding
policy with a state-independent log-std, a softmax policy over a discrete bid
grid, and a scalar value head. Forward passes cache activations; backward
passes accumulate parameter gradients, so callers drive
zero_grads / forward / backward / optimizer step explicitly.
"""

from __future__ import annotations

import json
import math

import numpy as np

LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = 0.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _orthogonal(rows: int, cols: int, rng: np.random.Generator, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))  # fix QR sign ambiguity
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Mlp:
    """Tanh hidden layers, identity output, batched forward/backward."""

    def __init__(
        self,
        layer_sizes: list[int],
        rng: np.random.Generator,
        final_scale: float = 1.0,
        final_bias: float = 0.0,
    ):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layer_sizes = list(layer_sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(layer_sizes) - 1
        for li in range(n_layers):
            fan_in, fan_out = layer_sizes[li], layer_sizes[li + 1]
            gain = final_scale if li == n_layers - 1 else math.sqrt(2.0)
            self.weights.append(_orthogonal(fan_out, fan_in, rng, gain))
            self.biases.append(np.zeros(fan_out))
        self.biases[-1] += final_bias
        self.zero_grads()
        self._cache: list[np.ndarray] | None = None

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def grads(self) -> list[np.ndarray]:
        return self.w_grads + self.b_grads

    def zero_grads(self) -> None:
        self.w_grads = [np.zeros_like(w) for w in self.weights]
        self.b_grads = [np.zeros_like(b) for b in self.biases]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """x: (batch, in) -> (batch, out); caches activations for backward."""
        a = np.atleast_2d(np.asarray(x, dtype=float))
        cache = [a]
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            a = z if li == last else np.tanh(z)
            cache.append(a)
        self._cache = cache
        return a

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the input gradient."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cache = self._cache
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        for li in range(len(self.weights) - 1, -1, -1):
            a_in = cache[li]
            if li != len(self.weights) - 1:
                g = g * (1.0 - cache[li + 1] ** 2)  # through tanh
            self.w_grads[li] += g.T @ a_in
            self.b_grads[li] += g.sum(axis=0)
            g = g @ self.weights[li]
        return g


class Adam:
    """Standard Adam with bias correction; set maximize for gradient ascent."""

    def __init__(
        self,
        params: list[np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        maximize: bool = False,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.maximize = maximize
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float | None = None) -> None:
        if len(params) != len(self.m):
            raise ValueError("parameter count changed under the optimizer")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
        self.t += 1
        lr = self.lr if lr is None else lr
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        sign = 1.0 if self.maximize else -1.0
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p += sign * lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class GaussianPolicy:
    """Gaussian bidding policy on the normalised action scale.

    The mean network maps a normalised state to the mean of a Gaussian over
    the unit action interval; the spread comes from a single state-independent
    log-std parameter. Sampled actions are clamped to [0, 1] and scaled by
    ``action_scale`` for execution, while log-probabilities refer to the
    unclamped Gaussian.
    """

    kind = "gaussian"

    def __init__(
        self,
        input_dim: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (64, 64),
        init_log_std: float = math.log(0.3),
        action_scale: float = 1.0,
    ):
        self.input_dim = input_dim
        self.action_scale = float(action_scale)
        # Final layer scaled down and biased to mid-support: early bids hover
        # around the middle with high entropy.
        self.mean_net = Mlp(
            [input_dim, *hidden, 1], rng, final_scale=0.01, final_bias=0.5
        )
        self.log_std = np.array([float(np.clip(init_log_std, LOG_STD_MIN, LOG_STD_MAX))])
        self.log_std_grad = np.zeros(1)

    @property
    def std(self) -> float:
        return float(np.exp(self.log_std[0]))

    def params(self) -> list[np.ndarray]:
        return self.mean_net.params() + [self.log_std]

    def grads(self) -> list[np.ndarray]:
        return self.mean_net.grads() + [self.log_std_grad]

    def zero_grads(self) -> None:
        self.mean_net.zero_grads()
        self.log_std_grad = np.zeros(1)

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def mean(self, states: np.ndarray) -> np.ndarray:
        return self.mean_net.forward(states)[:, 0]

    def mean_bids(self, states: np.ndarray) -> np.ndarray:
        return np.clip(self.mean(states), 0.0, 1.0) * self.action_scale

    def sample(
        self, states: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (raw actions, executed bids, log probs) for a state batch."""
        mu = self.mean(states)
        if not np.all(np.isfinite(mu)):
            raise FloatingPointError("policy mean diverged")
        sigma = self.std
        actions = mu + sigma * rng.standard_normal(mu.shape)
        bids = np.clip(actions, 0.0, 1.0) * self.action_scale
        return actions, bids, self.log_prob_from_mean(mu, actions)

    def log_prob_from_mean(self, mu: np.ndarray, actions: np.ndarray) -> np.ndarray:
        sigma = self.std
        z = (actions - mu) / sigma
        return -0.5 * z * z - math.log(sigma) - _HALF_LOG_2PI

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.log_prob_from_mean(self.mean(states), actions)

    def log_prob_backward(
        self, states: np.ndarray, actions: np.ndarray, coeffs: np.ndarray
    ) -> np.ndarray:
        """Accumulate d(sum_i coeffs_i * log pi(a_i|s_i))/d theta; returns log probs.

        Requires a fresh forward pass, which this method performs itself.
        """
        mu = self.mean(states)
        sigma = self.std
        z = (actions - mu) / sigma
        self.mean_net.backward((coeffs * z / sigma)[:, None])
        self.log_std_grad += np.sum(coeffs * (z * z - 1.0))
        return -0.5 * z * z - math.log(sigma) - _HALF_LOG_2PI

    def entropy(self) -> float:
        return 0.5 * math.log(2.0 * math.pi * math.e) + float(self.log_std[0])

    def add_entropy_grad(self, coef: float) -> None:
        # dH/d log_std = 1 per action dimension.
        self.log_std_grad += coef


class SoftmaxPolicy:
    """Categorical policy over a fixed discrete bid grid."""

    kind = "softmax"

    def __init__(
        self,
        input_dim: int,
        num_actions: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (64, 64),
    ):
        self.input_dim = input_dim
        self.num_actions = num_actions
        self.logit_net = Mlp([input_dim, *hidden, num_actions], rng, final_scale=0.01)

    def params(self) -> list[np.ndarray]:
        return self.logit_net.params()

    def grads(self) -> list[np.ndarray]:
        return self.logit_net.grads()

    def zero_grads(self) -> None:
        self.logit_net.zero_grads()

    def probs(self, states: np.ndarray) -> np.ndarray:
        logits = self.logit_net.forward(states)
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("policy logits diverged")
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def sample(
        self, states: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        p = self.probs(states)
        u = rng.random((p.shape[0], 1))
        idx = (p.cumsum(axis=1) < u).sum(axis=1)
        idx = np.minimum(idx, self.num_actions - 1)
        logp = np.log(p[np.arange(p.shape[0]), idx])
        return idx, logp

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        p = self.probs(states)
        return np.log(p[np.arange(p.shape[0]), actions])

    def log_prob_backward(
        self, states: np.ndarray, actions: np.ndarray, coeffs: np.ndarray
    ) -> np.ndarray:
        p = self.probs(states)
        rows = np.arange(p.shape[0])
        grad_logits = -p * coeffs[:, None]
        grad_logits[rows, actions] += coeffs
        self.logit_net.backward(grad_logits)
        return np.log(p[rows, actions])

    def entropy(self, states: np.ndarray) -> np.ndarray:
        p = self.probs(states)
        return -(p * np.log(p + 1e-300)).sum(axis=1)

    def add_entropy_backward(self, states: np.ndarray, coef: float) -> None:
        p = self.probs(states)
        h = -(p * np.log(p + 1e-300)).sum(axis=1, keepdims=True)
        self.logit_net.backward(-coef * p * (np.log(p + 1e-300) + h))


class ValueNet:
    """Scalar state-value approximator."""

    def __init__(
        self, input_dim: int, rng: np.random.Generator, hidden: tuple[int, ...] = (64, 64)
    ):
        self.input_dim = input_dim
        self.net = Mlp([input_dim, *hidden, 1], rng)

    def params(self) -> list[np.ndarray]:
        return self.net.params()

    def grads(self) -> list[np.ndarray]:
        return self.net.grads()

    def zero_grads(self) -> None:
        self.net.zero_grads()

    def values(self, states: np.ndarray) -> np.ndarray:
        return self.net.forward(states)[:, 0]

    def mse_backward(self, states: np.ndarray, targets: np.ndarray) -> float:
        """Accumulate gradients of mean((V(s) - target)^2); returns the loss."""
        v = self.values(states)
        diff = v - targets
        self.net.backward((2.0 * diff / diff.size)[:, None])
        return float(np.mean(diff * diff))


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    modules: dict[str, object],
    meta: dict,
) -> None:
    """Persist named networks plus run metadata to a single .npz file.

    The header records the format version, per-module layer sizes and kinds,
    and caller metadata (auction id, seed, iteration, ...). Parameters are
    stored as flat arrays named ``<module>.<index>``.
    """
    header = {"version": CHECKPOINT_VERSION, "meta": meta, "modules": {}}
    arrays: dict[str, np.ndarray] = {}
    for name, mod in modules.items():
        params = mod.params()
        header["modules"][name] = {
            "kind": getattr(mod, "kind", type(mod).__name__.lower()),
            "num_params": len(params),
            "shapes": [list(p.shape) for p in params],
        }
        for i, p in enumerate(params):
            arrays[f"{name}.{i}"] = p
    arrays["header"] = np.array(json.dumps(header))
    np.savez(path, **arrays)


def load_checkpoint(path, modules: dict[str, object]) -> dict:
    """Load parameters into pre-built networks; returns the metadata dict."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        for name, mod in modules.items():
            info = header["modules"][name]
            params = mod.params()
            if len(params) != info["num_params"]:
                raise ValueError(f"parameter count mismatch for module {name}")
            for i, p in enumerate(params):
                stored = data[f"{name}.{i}"]
                if stored.shape != p.shape:
                    raise ValueError(f"shape mismatch for {name}.{i}")
                p[...] = stored
    return header["meta"]
