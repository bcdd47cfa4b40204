"""Recurrent Gaussian latent predictors (prior and posterior heads).

Each head pools its branch features to a vector, advances a vector LSTM and
emits a diagonal Gaussian as (mean, log_std). Prior heads see features of
frames up to t-1, posterior heads additionally see frame t.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import ConvLstmState, conv_lstm_step, init_conv_lstm

LOG_STD_MIN, LOG_STD_MAX = -10.0, 10.0
BRANCHES = ("p", "fw", "bw")
ROLES = ("prior", "posterior")
HEAD_IDS = {("prior", "p"): 0, ("prior", "fw"): 1, ("prior", "bw"): 2, ("posterior", "p"): 3, ("posterior", "fw"): 4, ("posterior", "bw"): 5}


@dataclass
class GaussianParams:
    mean: T.Tensor
    log_std: T.Tensor


@dataclass
class LatentTriple:
    z_p: T.Tensor
    z_fw: T.Tensor
    z_bw: T.Tensor

    def __getitem__(self, branch):
        return getattr(self, f"z_{branch}")


def init_latent_head(scope, feature_channels, hidden, latent_dim, rng):
    init_conv_lstm(scope.scope("lstm"), feature_channels, hidden, 1, rng)
    scope.add("mean.weight", rng.normal(0.0, np.sqrt(1.0 / hidden), (latent_dim, hidden)))
    scope.add("mean.bias", np.zeros(latent_dim))
    scope.add("log_std.weight", rng.normal(0.0, 0.1 * np.sqrt(1.0 / hidden), (latent_dim, hidden)))
    scope.add("log_std.bias", np.zeros(latent_dim))


def head_state(n, hidden):
    return ConvLstmState.zeros(n, hidden, 1, 1)


def latent_head_step(features, state, params, role):
    """Pool -> vector LSTM -> (mean, log_std). ``params`` is the head's Scope.

    The scope prefix carries the role ("prior.*" / "posterior.*"); calling a
    head with the wrong role is rejected.
    """
    if role not in ROLES:
        raise ValueError(f"unknown latent role {role!r}")
    if not params.prefix.startswith(role + "."):
        raise ValueError(f"head {params.prefix!r} evaluated with role {role!r}")
    n, c = features.shape[:2]
    if state.hidden.shape[0] != n:
        raise ValueError(f"latent head: state batch {state.hidden.shape[0]} != feature batch {n}")
    pooled = T.mean(features, axes=(2, 3), keepdims=True)
    state = conv_lstm_step(pooled, state, params["lstm.weight"], params["lstm.bias"])
    h = T.reshape(state.hidden, (n, state.hidden.shape[1]))
    mean = T.linear(h, params["mean.weight"], params["mean.bias"])
    log_std = T.clamp(T.linear(h, params["log_std.weight"], params["log_std.bias"]), LOG_STD_MIN, LOG_STD_MAX)
    return GaussianParams(mean, log_std), state


def reparameterize(params, noise):
    """z = mean + exp(log_std) * noise; noise carries no gradient."""
    noise = np.asarray(noise.data if isinstance(noise, T.Tensor) else noise, dtype=params.mean.dtype)
    if noise.shape != params.mean.shape:
        raise ValueError(f"noise shape {noise.shape} != latent shape {params.mean.shape}")
    return T.add(params.mean, T.mul(T.exp(params.log_std), T.Tensor(noise, dtype=noise.dtype)))


def kl_diagonal_gaussian(q, p):
    """KL(q || p) for diagonal Gaussians, summed over the latent axis -> [N]."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"KL: shapes {q.mean.shape} and {p.mean.shape} differ")
    diff = T.sub(q.mean, p.mean)
    var_q = T.exp(T.mul(q.log_std, 2.0))
    var_p = T.exp(T.mul(p.log_std, 2.0))
    term = T.add(
        T.sub(p.log_std, q.log_std),
        T.div(T.add(var_q, T.square(diff)), T.mul(var_p, 2.0)),
    )
    return T.sum_(T.sub(term, 0.5), axes=1)


class NoiseStream:
    """Standard-normal draws keyed by (seed, *key), independent of call order.

    Every key gets its own counter-based Philox stream, so a sample depends
    only on (seed, step, head id) and never on what was drawn before it.
    """

    def __init__(self, seed):
        self.seed = int(seed)

    def normal(self, shape, *key):
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in key]])
        gen = np.random.Generator(np.random.Philox(ss))
        return gen.standard_normal(shape)
