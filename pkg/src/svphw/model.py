"""Hybrid-warping stochastic video predictor.

Per step the model produces three candidate frames from the last one or two
frames: an appearance frame decoded directly, a forward-splatted frame and a
backward-sampled frame, and fuses them with per-pixel softmax masks.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .latent import (
    BRANCHES,
    HEAD_IDS,
    GaussianParams,
    LatentTriple,
    NoiseStream,
    head_state,
    init_latent_head,
    kl_diagonal_gaussian,
    latent_head_step,
    reparameterize,
)
from .layers import (
    ConvLstmState,
    build_stack,
    conv_lstm_step,
    decoder_spec,
    encoder_spec,
    head_spec,
    init_conv_lstm,
    init_stack,
    level_widths,
)
from .params import ParameterStore
from .warp import DEFAULT_EPSILON, backward_warp, forward_warp_average


@dataclass
class ModelConfig:
    channels: int = 1
    height: int = 64
    width: int = 64
    cond_frames: int = 5
    horizon: int = 5
    base_channels: int = 32
    width_mult: float = 1.0
    levels: int = 3
    kernel_size: int = 3
    se_reduction: int = 4
    lstm_channels: int = 32
    lstm_kernel: int = 3
    latent_dim: int = 16
    head_hidden: int = 32
    mask_hidden: int = 16
    beta: float = 1e-4
    lr: float = 2e-3
    steps: int = 2000
    batch_size: int = 1
    seed: int = 0
    warmup_loss: bool = True
    splat_epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.cond_frames < 2:
            raise ValueError("cond_frames must be >= 2 (motion encoders need two frames)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        scale = 2 ** self.levels
        if self.height % scale or self.width % scale:
            raise ValueError(f"frame size {self.height}x{self.width} not divisible by 2**levels = {scale}")

    @property
    def base(self):
        return max(1, int(round(self.base_channels * self.width_mult)))

    @property
    def bottleneck_channels(self):
        return level_widths(self.base, self.levels)[-1] if self.levels else self.base

    @property
    def bottleneck_size(self):
        return self.height >> self.levels, self.width >> self.levels

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class ModelState:
    lstm: dict
    prior: dict
    posterior: dict


@dataclass
class PredictionBundle:
    x_p: T.Tensor
    x_fw: T.Tensor
    x_bw: T.Tensor
    flow_fw: T.Tensor
    flow_bw: T.Tensor
    masks: T.Tensor
    fused: T.Tensor
    splat_validity: T.Tensor

    def frame(self, which):
        return {"p": self.x_p, "fw": self.x_fw, "bw": self.x_bw, "fused": self.fused}[which]


@dataclass
class LossBreakdown:
    recon_p: float
    recon_fw: float
    recon_bw: float
    recon_fused: float
    kl_p: float
    kl_fw: float
    kl_bw: float
    beta: float
    total: float
    tensor: T.Tensor = field(default=None, repr=False, compare=False)

    COLUMNS = ("recon_p", "recon_fw", "recon_bw", "recon_fused", "kl_p", "kl_fw", "kl_bw", "total")

    @staticmethod
    def combine(recon_p, recon_fw, recon_bw, recon_fused, kl_p, kl_fw, kl_bw, beta):
        return recon_p + recon_fw + recon_bw + recon_fused + beta * (kl_p + kl_fw + kl_bw)

    def values(self):
        return [getattr(self, c) for c in self.COLUMNS]


@dataclass
class RolloutResult:
    frames: np.ndarray  # [horizon, N, C, H, W] fused predictions for t >= k
    bundles: list
    steps: list  # target frame index of every bundle
    q_params: list
    p_params: list
    roles: set
    fused: list  # fused Tensors for t >= k (graph-connected)


def fuse(x_p, x_fw, x_bw, mask_logits):
    """Per-pixel convex combination of the three candidates; returns (fused, masks)."""
    if not (x_p.shape == x_fw.shape == x_bw.shape):
        raise ValueError(f"fuse: candidate shapes differ {x_p.shape}, {x_fw.shape}, {x_bw.shape}")
    n, _, h, w = x_p.shape
    if mask_logits.shape != (n, 3, h, w):
        raise ValueError(f"fuse: mask logits {mask_logits.shape} != {(n, 3, h, w)}")
    masks = T.softmax(mask_logits, axis=1)
    m_p, m_fw, m_bw = T.split_channels(masks, [1, 1, 1])
    fused = T.add(T.add(T.mul(m_p, x_p), T.mul(m_fw, x_fw)), T.mul(m_bw, x_bw))
    return fused, masks


def _check_finite(t, layer):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite activations produced by layer {layer!r}")
    return t


def model_specs(c):
    """Layer schedules of every stack in the model, keyed by parameter scope."""
    base, lv, k, r = c.base, c.levels, c.kernel_size, c.se_reduction
    return {
        "enc.pixel": encoder_spec(c.channels, base, lv, k, r),
        "enc.fw": encoder_spec(2 * c.channels, base, lv, k, r),
        "enc.bw": encoder_spec(2 * c.channels, base, lv, k, r),
        "dec.pixel": decoder_spec(c.lstm_channels, base, lv, c.channels, "sigmoid", k, r),
        "dec.fw": decoder_spec(c.lstm_channels, base, lv, 2, "none", k, r),
        "dec.bw": decoder_spec(c.lstm_channels, base, lv, 2, "none", k, r),
        "dec.mask": head_spec(3 * c.channels + 1, c.mask_hidden, 3, "none", k, r),
    }


class SVPHW:
    def __init__(self, config, params=None):
        self.config = config
        self.specs = model_specs(config)
        self.params = params if params is not None else self.init_params(config.seed)

    # -- parameters -------------------------------------------------------

    def init_params(self, seed):
        c = self.config
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        gains = {"dec.fw": 0.1, "dec.bw": 0.1, "dec.mask": 0.1}
        for name, spec in self.specs.items():
            init_stack(store.scope(name), spec, rng, final_gain=gains.get(name, 1.0))
        cb = c.bottleneck_channels
        for b in BRANCHES:
            init_conv_lstm(store.scope(f"lstm.{b}"), cb + c.latent_dim, c.lstm_channels, c.lstm_kernel, rng)
        for role in ("prior", "posterior"):
            for b in BRANCHES:
                init_latent_head(store.scope(f"{role}.{b}"), cb, c.head_hidden, c.latent_dim, rng)
        return store

    def stack(self, name):
        return build_stack(self.specs[name], self.params.scope(name))

    def zero_state(self, n):
        c = self.config
        hb, wb = c.bottleneck_size
        lstm = {b: ConvLstmState.zeros(n, c.lstm_channels, hb, wb) for b in BRANCHES}
        prior = {b: head_state(n, c.head_hidden) for b in BRANCHES}
        post = {b: head_state(n, c.head_hidden) for b in BRANCHES}
        return ModelState(lstm, prior, post)

    # -- one step ---------------------------------------------------------

    def encode(self, x_prev2, x_prev):
        """Branch features: pixel encoder on x_prev, motion encoders on the pair."""
        pair = T.concat([x_prev2, x_prev], axis=1)
        out = {}
        for b, enc_in in (("p", x_prev), ("fw", pair), ("bw", pair)):
            feat, skips = self.stack(f"enc.{'pixel' if b == 'p' else b}")(enc_in)
            out[b] = (_check_finite(feat, f"enc.{b}"), skips)
        return out

    def predict_step(self, x_prev2, x_prev, latents, state, features=None):
        if state is None or any(s is None for s in state.lstm.values()):
            raise ValueError("predict_step: recurrent states are not initialized")
        c = self.config
        if features is None:
            features = self.encode(x_prev2, x_prev)
        decoded, lstm = {}, {}
        for b, dec_name in (("p", "dec.pixel"), ("fw", "dec.fw"), ("bw", "dec.bw")):
            feat, skips = features[b]
            n, _, hb, wb = feat.shape
            z = latents[b]
            zmap = T.broadcast_to(T.reshape(z, (n, c.latent_dim, 1, 1)), (n, c.latent_dim, hb, wb))
            st = conv_lstm_step(T.concat([feat, zmap], axis=1), state.lstm[b], self.params[f"lstm.{b}.weight"], self.params[f"lstm.{b}.bias"])
            lstm[b] = st
            decoded[b] = _check_finite(self.stack(dec_name)(st.hidden, skips), dec_name)
        x_p = decoded["p"]
        flow_fw, flow_bw = decoded["fw"], decoded["bw"]
        splat = forward_warp_average(x_prev, flow_fw, c.splat_epsilon)
        x_fw = splat.warped
        x_bw = backward_warp(x_prev, flow_bw)
        logits = self.stack("dec.mask")(T.concat([x_p, x_fw, x_bw, splat.validity], axis=1))
        _check_finite(logits, "dec.mask")
        fused, masks = fuse(x_p, x_fw, x_bw, logits)
        bundle = PredictionBundle(x_p, x_fw, x_bw, flow_fw, flow_bw, masks, fused, splat.validity)
        return bundle, ModelState(lstm, state.prior, state.posterior)

    # -- sequences --------------------------------------------------------

    def rollout(self, conditioning, horizon, mode="infer_prior", seed=0, targets=None, noise_key=0):
        """Warm up on ``conditioning`` [k,N,C,H,W] then predict ``horizon`` frames.

        Warm-up always feeds ground truth. In "infer_prior" mode latents come
        from the prior heads and fused predictions are fed back; in
        "train_posterior" mode latents come from posterior heads that see the
        ground-truth target, and ground truth is fed forward.
        """
        if mode not in ("infer_prior", "train_posterior"):
            raise ValueError(f"unknown rollout mode {mode!r}")
        if horizon < 1:
            raise ValueError("rollout: horizon must be >= 1")
        cond = np.asarray(conditioning.data if isinstance(conditioning, T.Tensor) else conditioning)
        k = cond.shape[0]
        if k < 2:
            raise ValueError("rollout: need at least 2 conditioning frames")
        train = mode == "train_posterior"
        if train:
            if targets is None:
                raise ValueError("rollout: train_posterior mode needs targets")
            targets = np.asarray(targets.data if isinstance(targets, T.Tensor) else targets)
            if targets.shape[0] < horizon:
                raise ValueError(f"rollout: {targets.shape[0]} targets for horizon {horizon}")
            truth = np.concatenate([cond, targets[:horizon]], axis=0)
        else:
            truth = cond
        dtype = T.default_dtype()
        n = cond.shape[1]
        noise = NoiseStream(seed)
        inputs = [T.Tensor(f.astype(dtype)) for f in cond]
        if train:
            inputs += [None] * horizon
        state = self.zero_state(n)
        enc_cache = {}
        res = RolloutResult(None, [], [], [], [], set(), [])
        for t in range(2, k + horizon):
            x2, x1 = inputs[t - 2], inputs[t - 1]
            feats = enc_cache.pop(t - 1, None)
            if feats is None:
                feats = self.encode(x2, x1)
            p_params = {}
            for b in BRANCHES:
                p_params[b], state.prior[b] = latent_head_step(feats[b][0], state.prior[b], self.params.scope(f"prior.{b}"), "prior")
            res.roles.add("prior")
            if train:
                if inputs[t] is None:
                    inputs[t] = T.Tensor(truth[t].astype(dtype))
                target = inputs[t]
                post_feats = self.encode(x1, target)
                enc_cache[t] = post_feats
                q_params = {}
                for b in BRANCHES:
                    q_params[b], state.posterior[b] = latent_head_step(
                        post_feats[b][0], state.posterior[b], self.params.scope(f"posterior.{b}"), "posterior"
                    )
                res.roles.add("posterior")
                source = q_params
            else:
                q_params = None
                source = p_params
            z = {
                b: reparameterize(source[b], noise.normal(source[b].mean.shape, noise_key, t, HEAD_IDS[("posterior" if train else "prior", b)]))
                for b in BRANCHES
            }
            bundle, state = self.predict_step(x2, x1, LatentTriple(z["p"], z["fw"], z["bw"]), state, feats)
            res.bundles.append(bundle)
            res.steps.append(t)
            res.p_params.append(p_params)
            res.q_params.append(q_params)
            if t >= k:
                res.fused.append(bundle.fused)
                if not train:
                    inputs.append(bundle.fused)
        res.frames = np.stack([f.data for f in res.fused])
        return res

    def elbo_loss(self, truth, result, beta=None, warmup=None):
        """Loss over a train_posterior rollout; ``truth`` is the full [T,N,C,H,W] clip."""
        c = self.config
        warmup = c.warmup_loss if warmup is None else warmup
        keep = [i for i, t in enumerate(result.steps) if warmup or t >= c.cond_frames]
        truth = np.asarray(truth)
        return elbo_loss(
            truth[[result.steps[i] for i in keep]],
            [result.bundles[i] for i in keep],
            [result.q_params[i] for i in keep],
            [result.p_params[i] for i in keep],
            c.beta if beta is None else beta,
        )


def elbo_loss(targets, bundles, q_params, p_params, beta):
    """Negative bound: L2 reconstruction of all four frames plus beta * three KLs.

    Reconstruction is summed over pixels and steps and averaged over the batch;
    each KL is summed over steps and averaged over the batch.
    """
    targets = np.asarray(targets.data if isinstance(targets, T.Tensor) else targets)
    steps = len(bundles)
    if not (targets.shape[0] == steps == len(q_params) == len(p_params)):
        raise ValueError(
            f"elbo_loss: {targets.shape[0]} targets, {steps} bundles, {len(q_params)} posteriors, {len(p_params)} priors"
        )
    if beta < 0:
        raise ValueError("beta must be >= 0")
    n = targets.shape[1]
    recon = {}
    for g in ("p", "fw", "bw", "fused"):
        terms = []
        for t in range(steps):
            x = T.Tensor(targets[t].astype(bundles[t].fused.dtype))
            terms.append(T.sum_(T.square(T.sub(x, bundles[t].frame(g)))))
        recon[g] = T.mul(_sum_list(terms), 1.0 / n)
    kl = {}
    for b in BRANCHES:
        terms = [T.mean(kl_diagonal_gaussian(q_params[t][b], p_params[t][b])) for t in range(steps)]
        kl[b] = _sum_list(terms)
    kl_sum = T.add(T.add(kl["p"], kl["fw"]), kl["bw"])
    total = _sum_list([recon["p"], recon["fw"], recon["bw"], recon["fused"], T.mul(kl_sum, float(beta))])
    vals = {f"recon_{g}": float(recon[g].data) for g in recon}
    vals.update({f"kl_{b}": float(kl[b].data) for b in kl})
    total_f = LossBreakdown.combine(
        vals["recon_p"], vals["recon_fw"], vals["recon_bw"], vals["recon_fused"], vals["kl_p"], vals["kl_fw"], vals["kl_bw"], float(beta)
    )
    return LossBreakdown(beta=float(beta), total=total_f, tensor=total, **vals)


def _sum_list(ts):
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out
