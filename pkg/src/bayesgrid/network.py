"""Desk-scale multi-scale grid detector with dropout before batch norm.

The backbone is a plain stack of strided 3x3 convolutions with no dropout.
Each output scale gets a head of ``head_depth`` conv layers; the last
``dropout_layers_per_head`` of them apply dropout right after the
convolution and before batch norm. Finer heads receive the previous head's
features through a 1x1 conv, nearest upsampling and channel concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from bayesgrid import autodiff as ad
from bayesgrid.errors import ShapeError
from bayesgrid.geometry import GridGeometry, PRIORS_PER_SCALE, make_priors
from bayesgrid.loss import RawLayout


@dataclass
class DetectorConfig:
    input_size: tuple = (64, 64)
    in_channels: int = 1
    num_classes: int = 2
    strides: tuple = (8, 4)
    # (out_channels, stride) per backbone conv
    backbone: tuple = ((8, 1), (16, 2), (16, 1), (32, 2), (32, 2), (32, 1))
    head_channels: int = 32
    route_channels: int = 16
    head_depth: int = 3
    dropout_rate: float = 0.1
    dropout_layers_per_head: int = 3
    aleatoric: bool = False
    prior_sizes: tuple = ((6.0, 14.0), (9.0, 21.0), (12.0, 27.0), (15.0, 34.0), (19.0, 40.0), (24.0, 48.0))

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.strides = tuple(int(s) for s in self.strides)
        self.backbone = tuple((int(c), int(s)) for c, s in self.backbone)
        self.prior_sizes = tuple((float(w), float(h)) for w, h in self.prior_sizes)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0 <= self.dropout_layers_per_head <= self.head_depth:
            raise ValueError("dropout_layers_per_head must be between 0 and head_depth")

    @property
    def layout(self):
        return RawLayout(self.num_classes, self.aleatoric)

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["strides"] = list(self.strides)
        d["backbone"] = [list(b) for b in self.backbone]
        d["prior_sizes"] = [list(p) for p in self.prior_sizes]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ConvLayer:
    name: str
    stride: int
    dropout: bool = False
    bn: bool = True
    activation: bool = True


@dataclass
class Network:
    config: DetectorConfig
    params: dict = field(default_factory=dict)
    bn_stats: dict = field(default_factory=dict)
    layer_ids: dict = field(default_factory=dict)

    @property
    def geometry(self):
        return GridGeometry(self.config.input_size, self.config.strides)

    @property
    def priors(self):
        return make_priors(self.config.prior_sizes, self.config.strides)

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def backbone_taps(self):
        """Index of the last backbone layer at each cumulative stride."""
        taps, total = {}, 1
        for i, (_, s) in enumerate(self.config.backbone):
            total *= s
            taps[total] = i
        return taps

    def head_order(self):
        """Scale indices from coarsest to finest stride."""
        return sorted(range(len(self.config.strides)), key=lambda i: -self.config.strides[i])


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------


def _he(rng, shape):
    fan_in = shape[1] * shape[2] * shape[3]
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _add_conv(net, rng, name, cin, cout, k, bn=True, bias=False, zero=False):
    shape = (cout, cin, k, k)
    kernel = np.zeros(shape) if zero else _he(rng, shape)
    net.params[f"{name}.kernel"] = ad.Parameter(f"{name}.kernel", kernel)
    if bias:
        net.params[f"{name}.bias"] = ad.Parameter(f"{name}.bias", np.zeros(cout), decay=False)
    if bn:
        net.params[f"{name}.gamma"] = ad.Parameter(f"{name}.gamma", np.ones(cout), decay=False)
        net.params[f"{name}.beta"] = ad.Parameter(f"{name}.beta", np.zeros(cout), decay=False)
        net.bn_stats[name] = ad.RunningStats(cout)
    net.layer_ids[name] = len(net.layer_ids)


def build(config: DetectorConfig, seed=0) -> Network:
    """Create a network with deterministic He-initialised weights."""
    geom = GridGeometry(config.input_size, config.strides)  # validates strides
    net = Network(config)
    taps = net.backbone_taps()
    for s in config.strides:
        if s not in taps:
            raise ShapeError(f"backbone never reaches stride {s}; cumulative strides are {sorted(taps)}")
    if len(config.prior_sizes) != PRIORS_PER_SCALE * geom.num_scales:
        raise ValueError(f"need {PRIORS_PER_SCALE * geom.num_scales} prior sizes")
    rng = np.random.default_rng(seed)
    cin = config.in_channels
    for i, (cout, _) in enumerate(config.backbone):
        _add_conv(net, rng, f"backbone.{i}", cin, cout, 3)
        cin = cout
    channels = {stride: config.backbone[idx][0] for stride, idx in taps.items()}
    prev = None
    outc = PRIORS_PER_SCALE * (4 + 1 + config.num_classes)
    for order, si in enumerate(net.head_order()):
        stride = config.strides[si]
        cin = channels[stride]
        if prev is not None:
            _add_conv(net, rng, f"route{si}", config.head_channels, config.route_channels, 1)
            cin += config.route_channels
        for j in range(config.head_depth):
            k = 3 if j % 2 == 0 else 1
            _add_conv(net, rng, f"head{si}.{j}", cin, config.head_channels, k)
            cin = config.head_channels
        _add_conv(net, rng, f"head{si}.out", cin, outc, 1, bn=False, bias=True)
        if config.aleatoric:
            _add_conv(net, rng, f"head{si}.logvar", cin, PRIORS_PER_SCALE * 4, 1, bn=False, bias=True, zero=True)
        prev = si
    return net


def branch(net: Network, config: DetectorConfig) -> Network:
    """Copy ``net`` into a network built from ``config``.

    Shared parameters and batch-norm statistics are copied exactly; new
    parameters (the log-variance heads) start at zero so every predicted
    log-variance is 0.
    """
    new = build(config, seed=0)
    for name, p in new.params.items():
        if name in net.params:
            if net.params[name].shape != p.shape:
                raise ShapeError(f"cannot branch: {name} changed shape")
            new.params[name] = ad.Parameter(name, net.params[name].data.copy(), p.trainable, p.decay)
        elif not name.endswith((".logvar.kernel", ".logvar.bias")):
            raise ShapeError(f"cannot branch: new parameter {name} has no source")
    for name, st in new.bn_stats.items():
        st.mean = net.bn_stats[name].mean.copy()
        st.var = net.bn_stats[name].var.copy()
    return new


def layer_parameter_count(config: DetectorConfig) -> int:
    """Parameter count derived from the layer description without building."""
    total, cin = 0, config.in_channels
    for cout, _ in config.backbone:
        total += cout * cin * 9 + 2 * cout
        cin = cout
    taps = {}
    acc = 1
    for i, (_, s) in enumerate(config.backbone):
        acc *= s
        taps[acc] = config.backbone[i][0]
    outc = PRIORS_PER_SCALE * (4 + 1 + config.num_classes)
    first = True
    for s in sorted(config.strides, reverse=True):
        cin = taps[s]
        if not first:
            total += config.route_channels * config.head_channels + 2 * config.route_channels
            cin += config.route_channels
        for j in range(config.head_depth):
            k = 3 if j % 2 == 0 else 1
            total += config.head_channels * cin * k * k + 2 * config.head_channels
            cin = config.head_channels
        total += outc * cin + outc
        if config.aleatoric:
            total += PRIORS_PER_SCALE * 4 * cin + PRIORS_PER_SCALE * 4
        first = False
    return total


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _layer_seeds(seeds, layer_id):
    if seeds is None:
        return None
    return [ad.mix_seed(s, layer_id) for s in seeds]


def _conv_block(net, x, name, stride, bn_mode, seeds=None, dropout=False, bn=True, act=True):
    p = net.params
    y = ad.conv2d(x, p[f"{name}.kernel"], p.get(f"{name}.bias"), stride=stride)
    if dropout and seeds is not None and net.config.dropout_rate > 0:
        y = ad.dropout(y, net.config.dropout_rate, _layer_seeds(seeds, net.layer_ids[name]))
    if bn:
        y = ad.batch_norm(y, p[f"{name}.gamma"], p[f"{name}.beta"], net.bn_stats[name], mode=bn_mode)
    if act:
        y = ad.leaky_relu(y)
    return y


def run_backbone(net: Network, x, bn_mode="eval"):
    """Backbone features keyed by cumulative stride."""
    taps = {idx: stride for stride, idx in net.backbone_taps().items()}
    feats = {}
    for i, (_, s) in enumerate(net.config.backbone):
        x = _conv_block(net, x, f"backbone.{i}", s, bn_mode)
        if i in taps:
            feats[taps[i]] = x
    return feats


def run_heads(net: Network, feats, seeds=None, bn_mode="eval"):
    """Raw grids ``(N, h, w, P, D)`` in config scale order.

    ``seeds`` is one dropout seed per batch entry or ``None`` for a
    deterministic pass.
    """
    cfg = net.config
    depth = cfg.layout.depth
    outs = [None] * len(cfg.strides)
    prev = None
    first_dropout = cfg.head_depth - cfg.dropout_layers_per_head
    for si in net.head_order():
        stride = cfg.strides[si]
        x = feats[stride]
        if prev is not None:
            r = _conv_block(net, prev, f"route{si}", 1, bn_mode)
            r = ad.nearest_upsample(r, x.shape[-1] // r.shape[-1])
            x = ad.concat([x, r], axis=1)
        for j in range(cfg.head_depth):
            x = _conv_block(net, x, f"head{si}.{j}", 1, bn_mode, seeds, dropout=j >= first_dropout)
        prev = x
        out = _conv_block(net, x, f"head{si}.out", 1, bn_mode, bn=False, act=False)
        n, _, h, w = out.shape
        # (N, P*(4+1+c), h, w) -> (N, h, w, P, 4+1+c)
        out = ad.transpose(ad.reshape(out, (n, PRIORS_PER_SCALE, -1, h, w)), (0, 3, 4, 1, 2))
        if cfg.aleatoric:
            lv = _conv_block(net, x, f"head{si}.logvar", 1, bn_mode, bn=False, act=False)
            lv = ad.transpose(ad.reshape(lv, (n, PRIORS_PER_SCALE, 4, h, w)), (0, 3, 4, 1, 2))
            out = ad.concat([out[..., :4], lv, out[..., 4:]], axis=-1)
        assert out.shape[-1] == depth
        outs[si] = out
    return outs


def apply(net: Network, images, seeds=None, bn_mode="eval"):
    """Differentiable forward pass on a batch ``(N, C, H, W)``."""
    x = ad.as_tensor(images)
    if x.ndim != 4 or x.shape[1:] != (net.config.in_channels, *net.config.input_size):
        raise ShapeError(
            f"expected images of shape (N, {net.config.in_channels}, {net.config.input_size[0]}, "
            f"{net.config.input_size[1]}), got {x.shape}"
        )
    return run_heads(net, run_backbone(net, x, bn_mode), seeds, bn_mode)


def forward(net: Network, image, mode="deterministic", pass_seed=0):
    """Inference pass on one ``(C, H, W)`` image or a batch.

    Batch norm runs in eval mode. ``mode="stochastic"`` samples dropout masks
    from ``pass_seed``; ``mode="deterministic"`` disables dropout. Returns
    one numpy grid ``(h, w, P, D)`` per scale (with a leading batch axis when
    given a batch).
    """
    arr = np.asarray(image, dtype=np.float64)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    if mode == "deterministic":
        seeds = None
    elif mode == "stochastic":
        seeds = [pass_seed] * len(batch) if np.ndim(pass_seed) == 0 else list(pass_seed)
    else:
        raise ValueError(f"unknown forward mode {mode!r}")
    outs = apply(net, batch, seeds)
    return [o.data[0] if single else o.data for o in outs]


def forward_shared_backbone(net: Network, images, T, base_seed=0):
    """``T`` stochastic passes that share a single backbone evaluation.

    ``images`` is ``(C, H, W)`` or ``(B, C, H, W)``. Pass ``t`` uses seed
    ``base_seed + t``. Returns one array per scale shaped ``(T, h, w, P, D)``
    (or ``(B, T, h, w, P, D)`` for a batch).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    b = len(batch)
    feats = run_backbone(net, ad.Tensor(batch), "eval")
    tiled = {s: ad.Tensor(np.repeat(f.data, T, axis=0)) for s, f in feats.items()}
    seeds = [base_seed + t for _ in range(b) for t in range(T)]
    outs = run_heads(net, tiled, seeds)
    res = [o.data.reshape(b, T, *o.shape[1:]) for o in outs]
    return [r[0] for r in res] if single else res
