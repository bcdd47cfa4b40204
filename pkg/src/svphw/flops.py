"""Multiply-accumulate and parameter accounting for stacks and the full model.

One MAC is one multiply-accumulate. For each MNSE layer the depthwise
separable convolution is compared against a standard convolution with the
same Cin, Cout, K and output size; the SE gate is reported on its own line so
the convolution ratio stays exact.

Fixed per-pixel costs for the non-convolutional kernels (per channel unless
noted):

* backward warp: 4 MACs (bilinear blend of four neighbours)
* forward splat: 4 MACs to scatter the value, plus 4 per pixel for the weights
  and 1 per channel for the normalizing division
* fusion: 3 MACs (three mask-weighted candidates)
* ConvLSTM elementwise update: 3 MACs per hidden unit (f*c, i*g, o*tanh(c))
"""

from dataclasses import dataclass, field
from fractions import Fraction

from .layers import StackSpec
from .model import ModelConfig, model_specs

BACKWARD_WARP_MACS = 4
SPLAT_VALUE_MACS = 4
SPLAT_WEIGHT_MACS = 4
SPLAT_NORMALIZE_MACS = 1
FUSE_MACS = 3
LSTM_ELEMENTWISE_MACS = 3


@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int
    params: int
    output_shape: tuple = ()
    standard_macs: int = 0  # equivalent standard convolution, MNSE conv lines only
    kernel_size: int = 0

    @property
    def ratio(self):
        """Exact MAC ratio vs the standard convolution (None for other kinds)."""
        return Fraction(self.macs, self.standard_macs) if self.standard_macs else None


@dataclass
class FlopsReport:
    entries: list = field(default_factory=list)

    def add(self, entry):
        self.entries.append(entry)
        return entry

    @property
    def total_macs(self):
        return sum(e.macs for e in self.entries)

    @property
    def total_params(self):
        return sum(e.params for e in self.entries)

    def flops(self, multiply_add_separately=False):
        return self.total_macs * (2 if multiply_add_separately else 1)

    def mnse_ratios(self):
        return {e.name: e.ratio for e in self.entries if e.kind == "dsconv"}

    def to_tsv(self):
        lines = ["name\tkind\tmacs\tparams\toutput\tstandard_macs\tratio"]
        for e in self.entries:
            ratio = "" if e.ratio is None else f"{e.ratio.numerator}/{e.ratio.denominator}"
            shape = "x".join(str(d) for d in e.output_shape)
            std = str(e.standard_macs) if e.standard_macs else ""
            lines.append(f"{e.name}\t{e.kind}\t{e.macs}\t{e.params}\t{shape}\t{std}\t{ratio}")
        return "\n".join(lines) + "\n"

    def summary(self):
        dsc = [e for e in self.entries if e.kind == "dsconv"]
        se = [e for e in self.entries if e.kind == "se"]
        std = sum(e.standard_macs for e in dsc)
        items = {
            "total_macs": self.total_macs,
            "total_flops_x2": self.flops(True),
            "total_params": self.total_params,
            "mnse_layers": len(dsc),
            "mnse_conv_macs": sum(e.macs for e in dsc),
            "mnse_standard_conv_macs": std,
            "se_macs": sum(e.macs for e in se),
            "gmacs": self.total_macs / 1e9,
        }
        return "".join(f"{k} = {v}\n" for k, v in items.items())


def expected_ratio(cout, k):
    """Closed-form depthwise-separable / standard MAC ratio."""
    return Fraction(cout + k * k, cout * k * k)


def ratio_mismatches(report):
    """Names of MNSE conv lines (K >= 2) whose measured ratio is off the closed form."""
    bad = []
    for e in report.entries:
        if e.kind == "dsconv" and e.kernel_size >= 2:
            if e.ratio != expected_ratio(e.output_shape[0], e.kernel_size):
                bad.append(e.name)
    return bad


def _out(size, k, stride):
    pad = (k - 1) // 2
    return (size + 2 * pad - k) // stride + 1


def dsconv_macs(cin, cout, k, ho, wo):
    return k * k * cin * ho * wo + cin * cout * ho * wo


def standard_conv_macs(cin, cout, k, ho, wo):
    return k * k * cin * cout * ho * wo


def se_macs(c, h, w, reduction):
    cr = max(1, c // reduction)
    return c * h * w + 2 * c * cr + c * h * w


def mnse_costs(spec, h, w, name):
    """(conv line, SE line, output (C, H, W)) for one MNSE layer on an h x w input."""
    k, cin, cout, cr = spec.kernel_size, spec.in_channels, spec.out_channels, spec.se_channels
    ho, wo = _out(h, k, spec.stride), _out(w, k, spec.stride)
    conv = LayerCost(
        f"{name}.dsconv",
        "dsconv",
        dsconv_macs(cin, cout, k, ho, wo),
        k * k * cin + cin + cin * cout + cout,
        (cout, ho, wo),
        standard_conv_macs(cin, cout, k, ho, wo),
        k,
    )
    se = LayerCost(f"{name}.se", "se", se_macs(cout, ho, wo, spec.se_reduction), 2 * cr * cout + cr + cout, (cout, ho, wo))
    return conv, se, (cout, ho, wo)


def count_stack(report, spec, input_shape, name):
    """Append every layer of ``spec`` run on ``input_shape`` (C, H, W); returns output shape."""
    if not isinstance(spec, StackSpec):
        raise TypeError(f"expected a StackSpec, got {type(spec).__name__}")
    if input_shape is None or len(input_shape) != 3:
        raise ValueError(f"{name}: input shape must be (C, H, W), got {input_shape}")
    c, h, w = input_shape
    if c != spec.in_channels:
        raise ValueError(f"{name}: stack expects {spec.in_channels} channels, input has {c}")
    for i, layer in enumerate(spec.layers):
        if spec.upsample[i]:
            h, w = 2 * h, 2 * w
        conv, se, (c, h, w) = mnse_costs(layer, h, w, f"{name}.l{i}")
        report.add(conv)
        report.add(se)
    return c, h, w


def conv_lstm_cost(name, in_channels, hidden, k, h, w):
    conv = k * k * (in_channels + hidden) * 4 * hidden * h * w
    params = 4 * hidden * (in_channels + hidden) * k * k + 4 * hidden
    return LayerCost(name, "convlstm", conv + LSTM_ELEMENTWISE_MACS * hidden * h * w, params, (hidden, h, w))


def latent_head_cost(name, features, hidden, latent, h, w):
    lstm = conv_lstm_cost(f"{name}.lstm", features, hidden, 1, 1, 1)
    pool = features * h * w
    heads = 2 * hidden * latent
    return LayerCost(name, "latent", pool + lstm.macs + heads, lstm.params + 2 * (hidden * latent + latent), (latent,))


def count_flops(target, input_shape=None):
    """Cost report for a StackSpec (needs ``input_shape``) or one model predict step.

    ``target`` may be a ``StackSpec``, a model (anything with ``config`` and
    ``specs``) or a ``ModelConfig``. The model report covers one training step
    of the recurrence: encoders, ConvLSTMs, decoders, warps, mask head, fusion
    and the six latent heads.
    """
    report = FlopsReport()
    if isinstance(target, StackSpec):
        count_stack(report, target, input_shape, "stack")
        return report
    if hasattr(target, "specs"):
        cfg, specs = target.config, target.specs
    elif isinstance(target, ModelConfig):
        cfg, specs = target, model_specs(target)
    else:
        raise TypeError(f"count_flops: cannot cost a {type(target).__name__}")
    c, h, w = cfg.channels, cfg.height, cfg.width
    feat = {}
    for b, name, cin in (("p", "enc.pixel", c), ("fw", "enc.fw", 2 * c), ("bw", "enc.bw", 2 * c)):
        feat[b] = count_stack(report, specs[name], (cin, h, w), name)
    for b, dec in (("p", "dec.pixel"), ("fw", "dec.fw"), ("bw", "dec.bw")):
        fc, fh, fw_ = feat[b]
        report.add(conv_lstm_cost(f"lstm.{b}", fc + cfg.latent_dim, cfg.lstm_channels, cfg.lstm_kernel, fh, fw_))
        count_stack(report, specs[dec], (cfg.lstm_channels, fh, fw_), dec)
    report.add(
        LayerCost(
            "warp.forward",
            "warp",
            (SPLAT_VALUE_MACS + SPLAT_NORMALIZE_MACS) * c * h * w + SPLAT_WEIGHT_MACS * h * w,
            0,
            (c, h, w),
        )
    )
    report.add(LayerCost("warp.backward", "warp", BACKWARD_WARP_MACS * c * h * w, 0, (c, h, w)))
    count_stack(report, specs["dec.mask"], (3 * c + 1, h, w), "dec.mask")
    report.add(LayerCost("fuse", "fuse", FUSE_MACS * c * h * w, 0, (c, h, w)))
    for role in ("prior", "posterior"):
        for b in ("p", "fw", "bw"):
            fc, fh, fw_ = feat[b]
            report.add(latent_head_cost(f"{role}.{b}", fc, cfg.head_hidden, cfg.latent_dim, fh, fw_))
    return report


def count_params(store):
    """Total scalar count of a ParameterStore."""
    return sum(int(t.data.size) for _, t in store.items())


def param_breakdown(store):
    return {name: int(t.data.size) for name, t in store.items()}
