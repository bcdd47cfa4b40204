"""Finite-difference verification of every differentiable op, layer and the full loss.

All probes run in float64 at smooth points: activations are kept away from
relu kinks where it matters, and flows away from bilinear cell edges.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .latent import GaussianParams, init_latent_head, kl_diagonal_gaussian, latent_head_step, head_state, reparameterize
from .layers import (
    ConvLstmState,
    MnseLayerSpec,
    conv_lstm_step,
    depthwise_separable_conv,
    init_mnse,
    mnse_layer,
    se_block,
)
from .model import ModelConfig, PredictionBundle, SVPHW, elbo_loss, fuse
from .params import ParameterStore
from .warp import flow_gradcheck_suite

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.error < self.tolerance)


def _probe(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _weighted(y, w):
    return T.sum_(T.mul(y, T.Tensor(w)))


def store_grad_check(store, loss, probes, step=1e-6):
    """Max relative error of d loss()/d store[name].flat[i] over ``probes``.

    ``loss`` takes no arguments and returns a scalar Tensor built from the
    store's own tensors, which are perturbed in place.
    """
    names = sorted({n for n, _ in probes})
    with T.GradientTape() as tape:
        y = loss()
    grads = dict(zip(names, tape.gradient(y, [store[n] for n in names])))
    worst = 0.0
    for n, i in probes:
        flat = store[n].data.reshape(-1)
        orig = flat[i]
        vals = []
        for sgn in (1.0, -1.0):
            flat[i] = orig + sgn * step
            v = float(loss().data)
            if not np.isfinite(v):
                raise FloatingPointError(f"non-finite loss probing {n}[{i}]")
            vals.append(v)
        flat[i] = orig
        numeric = (vals[0] - vals[1]) / (2 * step)
        a = float(grads[n].reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


def _param_check(build, f, rng, step=1e-6):
    """Check ``f(store)`` w.r.t. every scalar of every parameter ``build`` creates."""
    with T.fp64():
        store = ParameterStore()
        build(store, rng)
        store.astype(np.float64)
        probes = [(n, i) for n, t in store.items() for i in range(t.data.size)]
        return store_grad_check(store, lambda: f(store), probes, step)


def op_checks(seed=0):
    """Yield (name, max relative error) for each primitive op and layer."""
    rng = np.random.default_rng(seed)
    gc = T.grad_check
    out = []

    # convolution
    x = _probe(rng, (1, 2, 5, 5))
    k = _probe(rng, (3, 2, 3, 3), -0.5, 0.5)
    b = _probe(rng, (3,))
    wts = _probe(rng, (1, 3, 5, 5))
    kt, bt = T.Tensor(k), T.Tensor(b)
    out.append(("conv2d/input", gc(lambda v: _weighted(T.sigmoid(T.conv2d(v, kt, bt, 1, 1)), wts), x)))
    xt = T.Tensor(x)
    out.append(("conv2d/kernel", gc(lambda v: _weighted(T.sigmoid(T.conv2d(xt, v, bt, 1, 1)), wts), k)))
    out.append(("conv2d/bias", gc(lambda v: _weighted(T.sigmoid(T.conv2d(xt, kt, v, 1, 1)), wts), b)))
    w2 = _probe(rng, (1, 3, 3, 3))
    out.append(("conv2d/stride2", gc(lambda v: _weighted(T.conv2d(v, kt, bt, 2, 1), w2), x)))

    # pointwise ops, reductions and shape ops
    p = _probe(rng, (2, 3, 4))
    wp = _probe(rng, (2, 3, 4))
    away = np.where(np.abs(p) < 0.1, 0.3, p)
    for kind, point in (("sigmoid", p), ("tanh", p), ("relu", away), ("exp", p), ("log", np.abs(p) + 0.5), ("square", p)):
        out.append((f"unary/{kind}", gc(lambda v, kind=kind: _weighted(T.pointwise_unary(v, kind), wp), point)))
    out.append(("reduce/sum", gc(lambda v: T.sum_(T.square(T.sum_(v, axes=(1,)))), p)))
    out.append(("reduce/mean", gc(lambda v: T.sum_(T.square(T.mean(v, axes=(0, 2)))), p)))
    out.append(("clamp", gc(lambda v: _weighted(T.clamp(v, -0.5, 0.5), wp), np.where(np.abs(np.abs(p) - 0.5) < 0.05, 0.2, p))))
    out.append(("softmax", gc(lambda v: _weighted(T.softmax(v, axis=1), wp), p)))
    out.append(("div", gc(lambda v: _weighted(T.div(v, T.add(T.square(v), 1.0)), wp), p)))
    lw = _probe(rng, (5, 4))
    lb = _probe(rng, (5,))
    wl = _probe(rng, (6, 5))
    lx = _probe(rng, (6, 4))
    out.append(("linear/input", gc(lambda v: _weighted(T.linear(v, T.Tensor(lw), T.Tensor(lb)), wl), lx)))
    out.append(("linear/weight", gc(lambda v: _weighted(T.linear(T.Tensor(lx), v, T.Tensor(lb)), wl), lw)))
    u = _probe(rng, (1, 2, 3, 3))
    wu = _probe(rng, (1, 2, 6, 6))
    out.append(("upsample", gc(lambda v: _weighted(T.upsample_nearest2x(v), wu), u)))
    wc = _probe(rng, (1, 4, 3, 3))
    out.append(("concat", gc(lambda v: _weighted(T.concat([v, T.square(v)], axis=1), wc), u)))

    # depthwise and separable convolution
    dk = _probe(rng, (2, 1, 3, 3))
    db = _probe(rng, (2,))
    wd1 = _probe(rng, (1, 2, 5, 5))
    wd2 = _probe(rng, (1, 2, 3, 3))
    out.append(("depthwise/input", gc(lambda v: _weighted(T.depthwise_conv2d(v, T.Tensor(dk), T.Tensor(db), 1, 1), wd1), x)))
    out.append(("depthwise/kernel", gc(lambda v: _weighted(T.depthwise_conv2d(xt, v, T.Tensor(db), 1, 1), wd1), dk)))
    out.append(("depthwise/stride2", gc(lambda v: _weighted(T.depthwise_conv2d(v, T.Tensor(dk), T.Tensor(db), 2, 1), wd2), x)))
    pk = _probe(rng, (3, 2, 1, 1))
    pb = _probe(rng, (3,))
    out.append(
        (
            "dsconv/input",
            gc(lambda v: _weighted(depthwise_separable_conv(v, T.Tensor(dk), T.Tensor(pk), T.Tensor(db), T.Tensor(pb)), wts), x),
        )
    )
    out.append(
        (
            "dsconv/pointwise",
            gc(lambda v: _weighted(depthwise_separable_conv(xt, T.Tensor(dk), v, T.Tensor(db), T.Tensor(pb)), wts), pk),
        )
    )

    # squeeze-and-excitation
    se_x = _probe(rng, (2, 4, 3, 3))
    rw, rb = _probe(rng, (2, 4)), _probe(rng, (2,), 0.2, 0.5)
    ew, eb = _probe(rng, (4, 2)), _probe(rng, (4,))
    wse = _probe(rng, (2, 4, 3, 3))

    def se(v=None, which="x"):
        args = {"x": se_x, "rw": rw, "rb": rb, "ew": ew, "eb": eb}
        ts = {kk: T.Tensor(vv) for kk, vv in args.items()}
        ts[which] = v
        return _weighted(se_block(ts["x"], ts["rw"], ts["rb"], ts["ew"], ts["eb"]), wse)

    for which, point in (("x", se_x), ("rw", rw), ("rb", rb), ("ew", ew), ("eb", eb)):
        out.append((f"se/{which}", gc(lambda v, which=which: se(v, which), point)))

    # full MNSE layer w.r.t. input and every parameter
    spec = MnseLayerSpec(3, 4, 3, 1, 2, "tanh")
    mx = _probe(rng, (1, 3, 6, 6))
    wm = _probe(rng, (1, 4, 6, 6))
    store = ParameterStore()
    init_mnse(store.scope("m"), spec, np.random.default_rng(seed + 1))
    with T.fp64():
        store.astype(np.float64)
        out.append(("mnse/input", gc(lambda v: _weighted(mnse_layer(v, spec, store.scope("m")), wm), mx)))
    out.append(
        (
            "mnse/params",
            _param_check(
                lambda s, r: init_mnse(s.scope("m"), spec, r),
                lambda s: _weighted(mnse_layer(T.Tensor(mx), spec, s.scope("m")), wm),
                np.random.default_rng(seed + 2),
            ),
        )
    )

    # ConvLSTM
    lx4 = _probe(rng, (1, 2, 4, 4))
    hid = _probe(rng, (1, 3, 4, 4))
    cell = _probe(rng, (1, 3, 4, 4))
    gk = _probe(rng, (12, 5, 3, 3), -0.3, 0.3)
    gb = _probe(rng, (12,))
    wh = _probe(rng, (1, 3, 4, 4))

    def lstm(v, which):
        vals = {"x": lx4, "h": hid, "c": cell, "k": gk, "b": gb}
        ts = {kk: T.Tensor(vv) for kk, vv in vals.items()}
        ts[which] = v
        st = conv_lstm_step(ts["x"], ConvLstmState(ts["h"], ts["c"]), ts["k"], ts["b"])
        return T.add(_weighted(st.hidden, wh), _weighted(st.cell, wh))

    for which, point in (("x", lx4), ("h", hid), ("c", cell), ("k", gk), ("b", gb)):
        out.append((f"convlstm/{which}", gc(lambda v, which=which: lstm(v, which), point)))

    # warps
    for name, err in flow_gradcheck_suite(seed).items():
        out.append((f"warp/{name}", err))

    # latent head: features and parameters (posterior and prior share the code path)
    feats = _probe(rng, (2, 3, 2, 2))
    wmean, wls = _probe(rng, (2, 4)), _probe(rng, (2, 4))

    def head_loss(s, f):
        state = head_state(2, 5)
        g1, state = latent_head_step(f, state, s.scope("prior.p"), "prior")
        g2, _ = latent_head_step(T.mul(f, 0.5), state, s.scope("prior.p"), "prior")
        return T.add(T.add(_weighted(g1.mean, wmean), _weighted(g2.mean, wmean)), _weighted(g2.log_std, wls))

    hstore = ParameterStore()
    init_latent_head(hstore.scope("prior.p"), 3, 5, 4, np.random.default_rng(seed + 3))
    with T.fp64():
        hstore.astype(np.float64)
        out.append(("latent_head/features", gc(lambda v: head_loss(hstore, v), feats)))
    out.append(
        (
            "latent_head/params",
            _param_check(
                lambda s, r: init_latent_head(s.scope("prior.p"), 3, 5, 4, r),
                lambda s: head_loss(s, T.Tensor(feats)),
                np.random.default_rng(seed + 4),
            ),
        )
    )

    # reparameterization and KL
    mean, log_std = _probe(rng, (3, 4)), _probe(rng, (3, 4), -1.0, 0.5)
    noise = rng.standard_normal((3, 4))
    wz = _probe(rng, (3, 4))
    out.append(("reparameterize/mean", gc(lambda v: _weighted(reparameterize(GaussianParams(v, T.Tensor(log_std)), noise), wz), mean)))
    out.append(("reparameterize/log_std", gc(lambda v: _weighted(reparameterize(GaussianParams(T.Tensor(mean), v), noise), wz), log_std)))
    pm, pls = _probe(rng, (3, 4)), _probe(rng, (3, 4), -1.0, 0.5)
    wk = _probe(rng, (3,))

    def kl(v, which):
        vals = {"qm": mean, "qs": log_std, "pm": pm, "ps": pls}
        ts = {kk: T.Tensor(vv) for kk, vv in vals.items()}
        ts[which] = v
        return _weighted(kl_diagonal_gaussian(GaussianParams(ts["qm"], ts["qs"]), GaussianParams(ts["pm"], ts["ps"])), wk)

    for which, point in (("qm", mean), ("qs", log_std), ("pm", pm), ("ps", pls)):
        out.append((f"kl/{which}", gc(lambda v, which=which: kl(v, which), point)))

    # fusion
    cands = [_probe(rng, (1, 2, 3, 3), 0.0, 1.0) for _ in range(3)]
    logits = _probe(rng, (1, 3, 3, 3), -2.0, 2.0)
    wf = _probe(rng, (1, 2, 3, 3))
    out.append(("fuse/logits", gc(lambda v: _weighted(fuse(*[T.Tensor(c) for c in cands], v)[0], wf), logits)))
    out.append(("fuse/candidate", gc(lambda v: _weighted(fuse(v, T.Tensor(cands[1]), T.Tensor(cands[2]), T.Tensor(logits))[0], wf), cands[0])))

    # loss bookkeeping
    target = _probe(rng, (2, 1, 1, 3, 3), 0.0, 1.0)
    frames = _probe(rng, (2, 1, 1, 3, 3), 0.0, 1.0)
    q = [{b: GaussianParams(T.Tensor(_probe(rng, (1, 2))), T.Tensor(_probe(rng, (1, 2), -0.5, 0.5))) for b in ("p", "fw", "bw")} for _ in range(2)]
    pp = [{b: GaussianParams(T.Tensor(_probe(rng, (1, 2))), T.Tensor(_probe(rng, (1, 2), -0.5, 0.5))) for b in ("p", "fw", "bw")} for _ in range(2)]

    def loss(v):
        bundles = []
        for t in range(2):
            f = v[t]
            z = T.Tensor(np.zeros((1, 2, 3, 3)))
            bundles.append(PredictionBundle(f, T.mul(f, 0.5), T.square(f), z, z, z, T.mul(f, 0.9), z))
        return elbo_loss(target, bundles, q, pp, 0.3).tensor

    out.append(("elbo_loss/frames", gc(loss, frames)))
    return out


def tiny_config(**overrides):
    """Smallest model exercising every branch: 8x8 frames, two levels."""
    cfg = dict(
        height=8, width=8, cond_frames=2, horizon=2, base_channels=4, levels=2,
        lstm_channels=4, latent_dim=2, head_hidden=4, mask_hidden=4, se_reduction=2, beta=0.5, seed=0,
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def end_to_end_check(seed=0, n_params=200, step=1e-4, config=None):
    """Relative error of d(total loss)/d(params) for a 2-step rollout on 8x8 frames.

    Samples ``n_params`` scalar parameters with at least one from every
    tensor. Returns (max error, number of probed scalars).
    """
    cfg = config or tiny_config(seed=seed)
    rng = np.random.default_rng(seed)
    model = SVPHW(cfg)
    # random biases lift the latent heads off the q == p point, where their
    # gradients sit below finite-difference resolution
    for n in model.params.names():
        if n.endswith("bias"):
            model.params.set(n, rng.uniform(-0.5, 0.5, model.params[n].shape))
    # flows pushed off integer offsets so no probe crosses a bilinear cell edge
    for dec in ("dec.fw", "dec.bw"):
        last = len(model.specs[dec].layers) - 1
        name = f"{dec}.l{last}.pw.bias"
        model.params.set(name, np.full(model.params[name].shape, 0.7))
    k = cfg.cond_frames
    clip = rng.uniform(0.1, 0.9, size=(k + cfg.horizon, 1, cfg.channels, cfg.height, cfg.width))
    with T.fp64():
        model.params.astype(np.float64)

        def total():
            res = model.rollout(clip[:k], cfg.horizon, "train_posterior", seed=seed, targets=clip[k:])
            return model.elbo_loss(clip, res)

        names = model.params.names()
        probes = [(n, int(rng.integers(model.params[n].data.size))) for n in names]
        sizes = np.array([model.params[n].data.size for n in names], dtype=np.float64)
        while len(probes) < n_params:
            n = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
            probes.append((n, int(rng.integers(model.params[n].data.size))))
        worst = store_grad_check(model.params, lambda: total().tensor, probes, step)
    return worst, len(probes)


def run_all(seed=0, end_to_end=True, n_params=200):
    """Every check as a CheckResult; end-to-end last."""
    results = [CheckResult(n, float(e), OP_TOLERANCE) for n, e in op_checks(seed)]
    if end_to_end:
        err, count = end_to_end_check(seed, n_params)
        results.append(CheckResult(f"end_to_end/{count}_params", float(err), END_TO_END_TOLERANCE))
    return results


def report_tsv(results):
    lines = ["check\tmax_rel_error\ttolerance\tpassed"]
    for r in results:
        lines.append(f"{r.name}\t{r.error:.3e}\t{r.tolerance:g}\t{'yes' if r.passed else 'no'}")
    return "\n".join(lines) + "\n"
