"""MNSE layers, ConvLSTM cells and the encoder/decoder stacks built from them.

An MNSE layer is a depthwise separable convolution followed by a
squeeze-and-excitation channel gate and an activation. Encoders are chains of
stride-2 MNSE layers that also hand back their intermediate outputs as skip
tensors; decoders mirror them with nearest-neighbour x2 upsampling and
concatenate the matching skip before each layer.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

ACTIVATIONS = ("relu", "sigmoid", "tanh", "none")


@dataclass(frozen=True)
class MnseLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    se_reduction: int = 4
    activation: str = "relu"

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_channels < 1 or self.out_channels < 1 or self.stride < 1 or self.se_reduction < 1:
            raise ValueError(f"invalid layer spec {self}")

    @property
    def se_channels(self):
        return max(1, self.out_channels // self.se_reduction)


def activate(x, kind):
    if kind == "none":
        return x
    return T.pointwise_unary(x, kind)


def depthwise_separable_conv(x, dw_kernel, pw_kernel, dw_bias=None, pw_bias=None, stride=1, padding=None):
    """Per-channel KxK convolution, then a 1x1 convolution mixing channels."""
    if dw_kernel.shape[0] != x.shape[1]:
        raise ValueError(f"depthwise kernel has {dw_kernel.shape[0]} channels, input has {x.shape[1]}")
    if pw_kernel.shape[1] != dw_kernel.shape[0]:
        raise ValueError(f"pointwise kernel expects {pw_kernel.shape[1]} channels, depthwise gives {dw_kernel.shape[0]}")
    k = dw_kernel.shape[2]
    pad = (k - 1) // 2 if padding is None else padding
    h = T.depthwise_conv2d(x, dw_kernel, dw_bias, stride=stride, padding=pad)
    return T.conv2d(h, pw_kernel, pw_bias)


def se_block(x, reduce_w, reduce_b, expand_w, expand_b):
    """Scale channels by sigmoid(expand(relu(reduce(global_avg_pool(x)))))."""
    c = x.shape[1]
    if reduce_w.shape[1] != c or expand_w.shape[0] != c or expand_w.shape[1] != reduce_w.shape[0]:
        raise ValueError(
            f"se_block: weights {reduce_w.shape}/{expand_w.shape} do not fit {c} channels"
        )
    return T.se_scale(x, reduce_w, reduce_b, expand_w, expand_b)


def mnse_layer(x, spec, params):
    """depthwise separable conv -> SE gate -> activation; ``params`` is a Scope."""
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"mnse_layer: expected {spec.in_channels} input channels, got {x.shape[1]}")
    h = depthwise_separable_conv(
        x, params["dw.weight"], params["pw.weight"], params["dw.bias"], params["pw.bias"], stride=spec.stride
    )
    h = se_block(h, params["se.reduce.weight"], params["se.reduce.bias"], params["se.expand.weight"], params["se.expand.bias"])
    return activate(h, spec.activation)


def init_mnse(scope, spec, rng, out_gain=1.0):
    k, cin, cout, cr = spec.kernel_size, spec.in_channels, spec.out_channels, spec.se_channels
    scope.add("dw.weight", rng.normal(0.0, np.sqrt(1.0 / (k * k)), (cin, 1, k, k)))
    scope.add("dw.bias", np.zeros(cin))
    # x2 for relu, x2 for the SE gate sitting near 0.5 at init
    scope.add("pw.weight", rng.normal(0.0, out_gain * np.sqrt(4.0 / cin), (cout, cin, 1, 1)))
    scope.add("pw.bias", np.zeros(cout))
    scope.add("se.reduce.weight", rng.normal(0.0, np.sqrt(1.0 / cout), (cr, cout)))
    scope.add("se.reduce.bias", np.zeros(cr))
    scope.add("se.expand.weight", rng.normal(0.0, np.sqrt(1.0 / cr), (cout, cr)))
    scope.add("se.expand.bias", np.zeros(cout))


def mnse_param_count(spec):
    k, cin, cout, cr = spec.kernel_size, spec.in_channels, spec.out_channels, spec.se_channels
    return k * k * cin + cin + cin * cout + cout + cr * cout + cr + cout * cr + cout


# ---------------------------------------------------------------------------
# ConvLSTM
# ---------------------------------------------------------------------------


@dataclass
class ConvLstmState:
    hidden: T.Tensor
    cell: T.Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ValueError(f"hidden {self.hidden.shape} and cell {self.cell.shape} shapes differ")

    @classmethod
    def zeros(cls, n, channels, h, w):
        z = np.zeros((n, channels, h, w), dtype=T.default_dtype())
        return cls(T.Tensor(z), T.Tensor(z.copy()))


def conv_lstm_step(x, state, gate_kernel, gate_bias):
    """One ConvLSTM update without peepholes; gate order i, f, g, o."""
    ch = state.hidden.shape[1]
    if gate_kernel.shape[0] != 4 * ch or gate_kernel.shape[1] != x.shape[1] + ch:
        raise ValueError(
            f"conv_lstm_step: gate kernel {gate_kernel.shape} does not fit input {x.shape[1]} + hidden {ch}"
        )
    if x.shape[0] != state.hidden.shape[0] or x.shape[2:] != state.hidden.shape[2:]:
        raise ValueError(f"conv_lstm_step: input {x.shape} and state {state.hidden.shape} disagree")
    k = gate_kernel.shape[2]
    gates = T.conv2d(T.concat([x, state.hidden], axis=1), gate_kernel, gate_bias, padding=(k - 1) // 2)
    hidden, cell = T.split_channels(T.lstm_cell(gates, state.cell), [ch, ch])
    return ConvLstmState(hidden, cell)


def init_conv_lstm(scope, in_channels, hidden_channels, kernel_size, rng, forget_bias=1.0):
    fan_in = (in_channels + hidden_channels) * kernel_size * kernel_size
    scope.add("weight", rng.normal(0.0, np.sqrt(1.0 / fan_in), (4 * hidden_channels, in_channels + hidden_channels, kernel_size, kernel_size)))
    bias = np.zeros(4 * hidden_channels)
    bias[hidden_channels : 2 * hidden_channels] = forget_bias
    scope.add("bias", bias)


# ---------------------------------------------------------------------------
# stacks
# ---------------------------------------------------------------------------


@dataclass
class StackSpec:
    """Ordered MNSE layers plus resampling and skip bookkeeping.

    kind "encoder": stride-2 layers; every output except the last is a skip.
    kind "decoder": ``upsample[i]`` doubles resolution before layer i and
    ``skip_channels[i]`` (0 = none) channels are concatenated after it.
    kind "plain": layers applied in sequence.
    """

    kind: str
    layers: list
    upsample: list = field(default_factory=list)
    skip_channels: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("encoder", "decoder", "plain"):
            raise ValueError(f"unknown stack kind {self.kind!r}")
        if not self.layers:
            raise ValueError("stack needs at least one layer")
        n = len(self.layers)
        if not self.upsample:
            self.upsample = [False] * n
        if not self.skip_channels:
            self.skip_channels = [0] * n
        if len(self.upsample) != n or len(self.skip_channels) != n:
            raise ValueError("upsample/skip lists must have one entry per layer")
        prev = self.layers[0].in_channels - self.skip_channels[0]
        for i, layer in enumerate(self.layers):
            if layer.in_channels != prev + self.skip_channels[i]:
                raise ValueError(
                    f"layer {i} expects {layer.in_channels} channels, gets {prev} + skip {self.skip_channels[i]}"
                )
            prev = layer.out_channels

    @property
    def in_channels(self):
        return self.layers[0].in_channels - self.skip_channels[0]

    @property
    def out_channels(self):
        return self.layers[-1].out_channels

    def skip_outputs(self):
        """Channel counts of the skip tensors an encoder emits."""
        if self.kind != "encoder":
            return []
        return [layer.out_channels for layer in self.layers[:-1]]

    def to_dict(self):
        return {
            "kind": self.kind,
            "layers": [vars(l).copy() for l in self.layers],
            "upsample": list(self.upsample),
            "skip_channels": list(self.skip_channels),
        }

    def to_flat(self, prefix):
        """``key = value`` lines; one ``layerN`` line per layer (in,out,k,stride,r,act,upsample,skip)."""
        lines = [f"{prefix}.kind = {self.kind}", f"{prefix}.layers = {len(self.layers)}"]
        for i, l in enumerate(self.layers):
            vals = (l.in_channels, l.out_channels, l.kernel_size, l.stride, l.se_reduction, l.activation)
            vals += (int(self.upsample[i]), self.skip_channels[i])
            lines.append(f"{prefix}.layer{i} = " + ",".join(str(v) for v in vals))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_flat(cls, text, prefix):
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        try:
            n = int(kv[f"{prefix}.layers"])
            layers, up, skips = [], [], []
            for i in range(n):
                p = kv[f"{prefix}.layer{i}"].split(",")
                cin, cout, k, stride, r = (int(v) for v in p[:5])
                layers.append(MnseLayerSpec(cin, cout, k, stride, r, p[5]))
                up.append(bool(int(p[6])))
                skips.append(int(p[7]))
            return cls(kv[f"{prefix}.kind"], layers, up, skips)
        except (KeyError, IndexError) as e:
            raise ValueError(f"incomplete stack description for {prefix!r}: {e}") from None


def level_widths(base_channels, levels):
    return [base_channels * min(2 ** i, 2) for i in range(levels)]


def encoder_spec(in_channels, base_channels, levels, kernel_size=3, se_reduction=4):
    if levels == 0:
        return StackSpec("encoder", [MnseLayerSpec(in_channels, base_channels, kernel_size, 1, se_reduction)])
    layers, prev = [], in_channels
    for w in level_widths(base_channels, levels):
        layers.append(MnseLayerSpec(prev, w, kernel_size, 2, se_reduction))
        prev = w
    return StackSpec("encoder", layers)


def decoder_spec(in_channels, base_channels, levels, out_channels, final_activation, kernel_size=3, se_reduction=4):
    """Mirror of :func:`encoder_spec` consuming its skips from deepest to shallowest."""
    if levels == 0:
        return StackSpec("decoder", [MnseLayerSpec(in_channels, out_channels, kernel_size, 1, se_reduction, final_activation)])
    widths = level_widths(base_channels, levels)
    layers, ups, skips, prev = [], [], [], in_channels
    for j in range(levels):
        skip_idx = levels - 2 - j
        skip = widths[skip_idx] if skip_idx >= 0 else 0
        last = j == levels - 1
        out = out_channels if last else widths[levels - 2 - j]
        layers.append(MnseLayerSpec(prev + skip, out, kernel_size, 1, se_reduction, final_activation if last else "relu"))
        ups.append(True)
        skips.append(skip)
        prev = out
    return StackSpec("decoder", layers, ups, skips)


def head_spec(in_channels, hidden_channels, out_channels, final_activation="none", kernel_size=3, se_reduction=4):
    return StackSpec(
        "plain",
        [
            MnseLayerSpec(in_channels, hidden_channels, kernel_size, 1, se_reduction, "relu"),
            MnseLayerSpec(hidden_channels, out_channels, kernel_size, 1, se_reduction, final_activation),
        ],
    )


def init_stack(scope, spec, rng, final_gain=1.0):
    for i, layer in enumerate(spec.layers):
        last = i == len(spec.layers) - 1
        init_mnse(scope.scope(f"l{i}"), layer, rng, out_gain=final_gain if last else 1.0)


class Stack:
    """Callable encoder/decoder bound to parameters.

    Encoders return ``(bottleneck, skips)`` with skips ordered shallow to deep;
    decoders take ``(x, skips)`` in that same order.
    """

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params

    def __call__(self, x, skips=None):
        spec = self.spec
        if spec.kind == "encoder":
            outs = []
            for i, layer in enumerate(spec.layers):
                x = mnse_layer(x, layer, self.params.scope(f"l{i}"))
                outs.append(x)
            return x, outs[:-1]
        skips = list(skips or [])
        wanted = [c for c in spec.skip_channels if c]
        if len(skips) != len(wanted):
            raise ValueError(f"decoder expects {len(wanted)} skip tensors, got {len(skips)}")
        pending = list(reversed(skips))  # deepest first
        for i, layer in enumerate(spec.layers):
            if spec.upsample[i]:
                x = T.upsample_nearest2x(x)
            if spec.skip_channels[i]:
                s = pending.pop(0)
                if s.shape[1] != spec.skip_channels[i] or s.shape[2:] != x.shape[2:]:
                    raise ValueError(
                        f"decoder layer {i}: skip {s.shape} does not match expected {spec.skip_channels[i]} channels at {x.shape[2:]}"
                    )
                x = T.concat([x, s], axis=1)
            x = mnse_layer(x, layer, self.params.scope(f"l{i}"))
        return x


def build_stack(spec, params):
    return Stack(spec, params)
