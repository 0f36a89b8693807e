"""Dense counting network: truncated lightweight encoder, multi-scale
feature fusion, and two decoding heads sharing features.

The encoder is a strided stem plus four inverted-residual stages. The
four stage outputs are brought to 1/2 resolution and concatenated; a
localization head (1x1 convs, sigmoid map) and a counting head (dilated
3x3 convs, linear density map) read the fused features, with the
localization head's penultimate features concatenated into the counting
head. All channel counts scale with a width multiplier so the same
topology trains at desk scale.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .grad import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    conv_transpose2d,
    depthwise_conv2d,
    relu,
    sigmoid,
    upsample_bilinear,
    upsample_nearest,
)

WEIGHTS_MAGIC = b"WHNW"
WEIGHTS_VERSION = 1

# Activations entering every hidden layer are non-negative with a
# sizeable mean, so a relu channel whose random weights sum negative
# never fires, and with no normalization layers it can never recover.
# A small positive bias keeps every channel responsive at init, which
# matters most at narrow widths where a stage has only a few channels.
HIDDEN_BIAS_INIT = 0.1
# Starting foreground rate of the localization map, so the focal term
# begins near the scale of the density term instead of dwarfing it.
LOC_OUTPUT_PRIOR = 0.01
# Input size and value of the flat probe used to calibrate the output
# biases at init (see init_params).
_PROBE_SIZE = 64
_PROBE_VALUE = 0.5


@dataclass
class ModelConfig:
    width_multiplier: float = 1.0
    dilation_rate: int = 2
    backbone_channels: tuple = (32, 48, 64, 160, 256)
    bottleneck_expansions: tuple = (1, 6, 6, 6)
    bottleneck_repeats: tuple = (1, 2, 3, 4)
    bottleneck_strides: tuple = (1, 2, 2, 2)
    merge_channels: tuple = (64, 80, 64)
    deconv_kernel: int = 2
    count_dilated_channels: tuple = (128, 128, 64)
    count_head_channels: tuple = (128, 64)
    loc_channels: tuple = (128, 64, 32)
    seed: int = 0

    def __post_init__(self):
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be > 0")
        n_stages = len(self.backbone_channels) - 1
        for name in ("bottleneck_expansions", "bottleneck_repeats",
                     "bottleneck_strides"):
            if len(getattr(self, name)) != n_stages:
                raise ValueError(
                    f"{name} needs {n_stages} entries to match "
                    f"backbone_channels"
                )

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for key, value in d.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown model config key {key!r}")
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs)


@dataclass
class BackboneFeatures:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor


def _round_ch(c: float, wm: float) -> int:
    return max(1, int(round(c * wm)))


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape map for every learnable tensor.

    Every name ends in .w or .b; there are no normalization parameters
    anywhere in the network.
    """
    wm = cfg.width_multiplier
    shapes: dict = {}
    stem = _round_ch(cfg.backbone_channels[0], wm)
    shapes["stem.w"] = (stem, 3, 3, 3)
    shapes["stem.b"] = (stem,)

    cin = stem
    stage_out = []
    stages = zip(
        cfg.bottleneck_expansions,
        cfg.backbone_channels[1:],
        cfg.bottleneck_repeats,
        cfg.bottleneck_strides,
    )
    for si, (t, c, n, _s) in enumerate(stages, start=1):
        cout = _round_ch(c, wm)
        for ri in range(n):
            mid = t * cin
            p = f"b{si}.{ri}"
            shapes[p + ".expand.w"] = (mid, cin, 1, 1)
            shapes[p + ".expand.b"] = (mid,)
            shapes[p + ".dw.w"] = (mid, 1, 3, 3)
            shapes[p + ".dw.b"] = (mid,)
            shapes[p + ".project.w"] = (cout, mid, 1, 1)
            shapes[p + ".project.b"] = (cout,)
            cin = cout
        stage_out.append(cout)

    f1c, f2c, f3c, f4c = stage_out
    k = cfg.deconv_kernel
    m2, m3, m4 = (_round_ch(c, wm) for c in cfg.merge_channels)
    # transpose-conv weights are (C_in_of_transpose, C_out, k, k)
    shapes["merge.f2.w"] = (f2c, m2, k, k)
    shapes["merge.f3.w"] = (f3c, m3, k, k)
    shapes["merge.f4.w"] = (f4c, m4, k, k)
    fused = f1c + m2 + m3 + m4

    d0, d1, d2 = (_round_ch(c, wm) for c in cfg.count_dilated_channels)
    shapes["count.dil0.w"] = (d0, fused, 3, 3)
    shapes["count.dil0.b"] = (d0,)
    shapes["count.dil1.w"] = (d1, d0, 3, 3)
    shapes["count.dil1.b"] = (d1,)
    shapes["count.dil2.w"] = (d2, d1, 3, 3)
    shapes["count.dil2.b"] = (d2,)

    l0, l1, l2 = (_round_ch(c, wm) for c in cfg.loc_channels)
    shapes["loc.conv0.w"] = (l0, fused, 1, 1)
    shapes["loc.conv0.b"] = (l0,)
    shapes["loc.conv1.w"] = (l1, l0, 1, 1)
    shapes["loc.conv1.b"] = (l1,)
    shapes["loc.conv2.w"] = (l2, l1, 1, 1)
    shapes["loc.conv2.b"] = (l2,)
    shapes["loc.conv3.w"] = (1, l2, 1, 1)
    shapes["loc.conv3.b"] = (1,)

    h0, h1 = (_round_ch(c, wm) for c in cfg.count_head_channels)
    shapes["count.head0.w"] = (h0, d2 + l2, 3, 3)
    shapes["count.head0.b"] = (h0,)
    shapes["count.head1.w"] = (h1, h0, 3, 3)
    shapes["count.head1.b"] = (h1,)
    shapes["count.head2.w"] = (1, h1, 1, 1)
    shapes["count.head2.b"] = (1,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(
        sum(int(np.prod(s)) for s in param_shapes(cfg).values())
    )


def init_params(cfg: ModelConfig, rng=None) -> dict:
    """Xavier-uniform weights, calibrated heads, in param_shapes order.

    Hidden biases start at HIDDEN_BIAS_INIT. The two final 1x1 convs
    start at zero weight so the density map begins exactly flat and the
    localization map begins exactly at its prior: the first gradient
    steps then go into correlating the maps with their targets instead
    of burning off a large random offset in the map integrals. The
    output biases are calibrated by running a flat mid-gray probe image
    through the network: the density output is shifted to a zero-mean
    map and the localization output to the logit of LOC_OUTPUT_PRIOR.
    """
    from .train import xavier_init

    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            fill = 0.0 if name in ("loc.conv3.b", "count.head2.b") \
                else HIDDEN_BIAS_INIT
            params[name] = Tensor(np.full(shape, fill), requires_grad=True)
        elif name in ("loc.conv3.w", "count.head2.w"):
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            params[name] = xavier_init(shape, rng)

    # Untracked stand-ins keep the probe off any open tape.
    frozen = {name: Tensor(t.data) for name, t in params.items()}
    probe = Tensor(np.full((1, 3, _PROBE_SIZE, _PROBE_SIZE), _PROBE_VALUE))
    feats = backbone_forward(probe, frozen, cfg)
    fused = merge_multiscale(feats, frozen)
    loc_feat, logits = localization_branch(fused, frozen)
    density = counting_branch(fused, loc_feat, frozen, cfg.dilation_rate)
    prior_logit = math.log(LOC_OUTPUT_PRIOR / (1.0 - LOC_OUTPUT_PRIOR))
    params["count.head2.b"].data -= density.data.mean()
    params["loc.conv3.b"].data += prior_logit - logits.data.mean()
    return params


def bottleneck(x: Tensor, params: dict, prefix: str, stride: int) -> Tensor:
    """Expand 1x1 + ReLU -> depthwise 3x3 + ReLU -> linear 1x1 project.

    A residual skip applies when stride is 1 and the projection keeps
    the channel count.
    """
    h = relu(conv2d(x, params[prefix + ".expand.w"],
                    params[prefix + ".expand.b"]))
    h = relu(depthwise_conv2d(h, params[prefix + ".dw.w"],
                              params[prefix + ".dw.b"], stride=stride))
    h = conv2d(h, params[prefix + ".project.w"],
               params[prefix + ".project.b"])
    if stride == 1 and h.shape[1] == x.shape[1]:
        h = add(h, x)
    return h


def backbone_forward(x: Tensor, params: dict,
                     cfg: ModelConfig) -> BackboneFeatures:
    """Stem conv (stride 2) plus the four bottleneck stages.

    Input must be (N, 3, H, W) with H and W divisible by 16; the caller
    pads first (see infer.pad_to_multiple).
    """
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError("backbone_forward", "input channels", 3,
                         x.shape[1] if x.data.ndim == 4 else x.data.ndim)
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ShapeError("backbone_forward", "spatial dims divisible by 16",
                         "H, W % 16 == 0", (x.shape[2], x.shape[3]))
    h = relu(conv2d(x, params["stem.w"], params["stem.b"], stride=2))
    feats = []
    for si, (n, s) in enumerate(
        zip(cfg.bottleneck_repeats, cfg.bottleneck_strides), start=1
    ):
        for ri in range(n):
            h = bottleneck(h, params, f"b{si}.{ri}", s if ri == 0 else 1)
        feats.append(h)
    return BackboneFeatures(*feats)


def merge_multiscale(feats: BackboneFeatures, params: dict) -> Tensor:
    """Bring every stage to 1/2 resolution and concatenate.

    f2 takes a learned x2 transpose conv; f3 and f4 are first nearest-
    upsampled (x2, x4) and then pass the same learned x2 stage, so each
    path ends with ReLU(transpose conv).
    """
    m2 = relu(conv_transpose2d(feats.f2, params["merge.f2.w"], stride=2))
    m3 = relu(conv_transpose2d(upsample_nearest(feats.f3, 2),
                               params["merge.f3.w"], stride=2))
    m4 = relu(conv_transpose2d(upsample_nearest(feats.f4, 4),
                               params["merge.f4.w"], stride=2))
    return concat_channels([feats.f1, m2, m3, m4])


def localization_branch(fused: Tensor, params: dict):
    """Four 1x1 convs; returns (shared penultimate features, logits)."""
    h = relu(conv2d(fused, params["loc.conv0.w"], params["loc.conv0.b"]))
    h = relu(conv2d(h, params["loc.conv1.w"], params["loc.conv1.b"]))
    feat = relu(conv2d(h, params["loc.conv2.w"], params["loc.conv2.b"]))
    logits = conv2d(feat, params["loc.conv3.w"], params["loc.conv3.b"])
    return feat, logits


def counting_branch(fused: Tensor, loc_features: Tensor, params: dict,
                    dilation: int = 2) -> Tensor:
    """Three dilated 3x3 convs, concat shared features, three more convs."""
    if loc_features.shape[2:] != fused.shape[2:]:
        raise ShapeError("counting_branch", "loc feature dims",
                         fused.shape[2:], loc_features.shape[2:])
    h = relu(conv2d(fused, params["count.dil0.w"], params["count.dil0.b"],
                    dilation=dilation))
    h = relu(conv2d(h, params["count.dil1.w"], params["count.dil1.b"],
                    dilation=dilation))
    h = relu(conv2d(h, params["count.dil2.w"], params["count.dil2.b"],
                    dilation=dilation))
    h = concat_channels([h, loc_features])
    h = relu(conv2d(h, params["count.head0.w"], params["count.head0.b"]))
    h = relu(conv2d(h, params["count.head1.w"], params["count.head1.b"]))
    return conv2d(h, params["count.head2.w"], params["count.head2.b"])


def forward(image: Tensor, params: dict, cfg: ModelConfig):
    """Full network: (density map, localization map), both input-sized.

    The density map is linear (can go negative); the localization map is
    a sigmoid applied after bilinear upsampling, so values are in (0,1).
    """
    feats = backbone_forward(image, params, cfg)
    fused = merge_multiscale(feats, params)
    loc_feat, loc_logits = localization_branch(fused, params)
    den_half = counting_branch(fused, loc_feat, params, cfg.dilation_rate)
    h, w = image.shape[2], image.shape[3]
    density = upsample_bilinear(den_half, h, w)
    locmap = sigmoid(upsample_bilinear(loc_logits, h, w))
    return density, locmap


def pad_to_multiple(images: np.ndarray, multiple: int = 16):
    """Reflect-pad an (N, C, H, W) batch so H and W divide `multiple`.

    Returns (padded, (top, left)); cropping outputs back is the caller's
    job via the original dims plus those offsets.
    """
    h, w = images.shape[2], images.shape[3]
    th = (-h) % multiple
    tw = (-w) % multiple
    top, left = th // 2, tw // 2
    if th == 0 and tw == 0:
        return images, (0, 0)
    padded = np.pad(
        images,
        ((0, 0), (0, 0), (top, th - top), (left, tw - left)),
        mode="reflect",
    )
    return padded, (top, left)


def save_weights(path, params: dict, cfg: ModelConfig) -> None:
    """Binary weights: magic, u16 version, u32 record count, records of
    (u32 name length, name, u32 rank, u32 dims, f32 payload), then the
    model config as a trailing JSON blob."""
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<H", WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params[name].data if isinstance(params[name], Tensor) \
                else np.asarray(params[name])
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
        fh.write(blob)


def load_weights(path, requires_grad: bool = False):
    """Read a weights file back into ({name: Tensor}, ModelConfig).

    Shapes are validated against param_shapes of the stored config;
    missing, extra, or mis-shaped records are an error.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    (n_records,) = struct.unpack("<I", blob[6:10])
    off = 10
    params = {}
    for _ in range(n_records):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        params[name] = Tensor(
            arr.astype(np.float64).reshape(shape),
            requires_grad=requires_grad,
        )
    cfg = ModelConfig.from_dict(json.loads(blob[off:].decode("utf-8")))
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(
            f"{path}: weight names do not match config "
            f"(missing {missing}, extra {extra})"
        )
    for name, shape in expected.items():
        got = params[name].data.shape
        if tuple(got) != tuple(shape):
            raise ValueError(
                f"{path}: {name} has shape {got}, config expects {shape}"
            )
    return params, cfg
