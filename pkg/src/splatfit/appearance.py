"""Dynamic appearance network: pose encoder over the UV positional map, an
optimizable feature tensor, feature combination/upsampling, and the Gaussian
parameter decoder. All forward passes can record onto a GradientTape.

Network architecture (desk-scale defaults; the full-size preset mirrors the
larger configuration behind ``paper_preset``):

  * encoder: U-Net with 3 down blocks [conv s2, GroupNorm, LeakyReLU] and
    3 up blocks [convT s2, GroupNorm, ReLU] with skip connections; the final
    block has no norm/activation and is zero-initialized so a fresh encoder
    contributes exactly nothing.
  * decoder: fully connected trunk with one skip connection from the input,
    then three 2-layer prediction heads (offset 3, color 3, scale 1); head
    output layers are zero-initialized, which makes a fresh model render the
    freshly initialized cloud (cold-start frame).
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, TapeError, Var, value_of
from .template import UvPositionalMap, uv_to_pixel

NETWORK_FORMAT_VERSION = 1


@dataclass
class NetConfig:
    feature_channels: int = 16        # C of the feature tensor / pose feature
    encoder_widths: tuple = (16, 32, 64)  # one entry per down block
    encoder_groups: int = 8
    encoder_norm: str = "group"       # 'group', or 'batch' (per-frame stats)
    trunk_dims: tuple = (32, 32, 32, 64, 32, 32, 32, 24)
    skip_at: int = 3                  # trunk layer whose input gains the skip
    head_hidden: int = 32
    upsample: int = 4                 # feature upsampling factor (1, 2 or 4)
    combine: str = "sum"              # 'sum' or 'concat' feature integration
    trunk_init: str = "trunc002"      # 'trunc002' or 'he'
    feature_init_std: float = 0.01    # tiny noise: a feature dictionary the
                                      # decoder can address from step one

    @staticmethod
    def paper_preset():
        """Full-size fidelity configuration: 64 feature channels, a 5-down /
        5-up encoder with batch-style normalization, the 8-layer trunk with
        (128,128,128,256,128,128,128,64) widths and the skip into the 4th
        layer. Batch statistics over a single frame reduce to per-channel
        spatial statistics; the desk-scale default uses group norm instead."""
        return NetConfig(feature_channels=64,
                         encoder_widths=(64, 128, 256, 512, 512),
                         encoder_norm="batch",
                         trunk_dims=(128, 128, 128, 256, 128, 128, 128, 64),
                         skip_at=3,
                         head_hidden=64)

    def decoder_in_dim(self):
        c = self.feature_channels
        return 2 * c if self.combine == "concat" else c


@dataclass
class EncoderParams:
    weights: dict                      # name -> ndarray
    widths: tuple                      # one entry per down block
    out_channels: int
    groups: int
    norm: str = "group"                # 'group' | 'batch' (per-frame stats)

    @property
    def depth(self):
        return len(self.widths)

    def names(self):
        return sorted(self.weights)


@dataclass
class DecoderParams:
    weights: dict                      # name -> ndarray
    in_dim: int
    trunk_dims: tuple
    skip_at: int
    head_hidden: int

    def __post_init__(self):
        if not (0 < self.skip_at < len(self.trunk_dims)):
            raise ValueError(f"skip_at {self.skip_at} outside trunk of "
                             f"{len(self.trunk_dims)} layers")

    def names(self):
        return sorted(self.weights)


def _trunc_normal(rng, shape, std):
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


def _linear_init(rng, fan_in, fan_out, mode):
    if mode == "trunc002":
        return _trunc_normal(rng, (fan_in, fan_out), 0.02)
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def init_feature_tensor(resolution, channels, seed, std=0.01):
    """Optimizable feature tensor F, [H, W, C]; auto-decoded per-pixel latents
    initialized with small noise so decoder activations see spatial variation
    from the first step."""
    H, W = resolution
    if std == 0.0:
        return np.zeros((H, W, channels))
    rng = np.random.default_rng(seed)
    return rng.standard_normal((H, W, channels)) * std


def init_encoder(cfg: NetConfig, seed) -> EncoderParams:
    """U-Net pose encoder: D down blocks [conv s2, norm, LeakyReLU], D up
    blocks [convT s2, norm, ReLU] with skip connections; the final block has
    no norm and is zero-initialized so a fresh encoder emits exactly zero."""
    rng = np.random.default_rng(seed)
    widths = tuple(cfg.encoder_widths)
    depth = len(widths)
    c = cfg.feature_channels
    k = 4
    p = {}

    def conv_w(cout, cin):
        return rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))

    def norm_params(name, ch):
        p[f"{name}.g"] = np.ones(ch)
        p[f"{name}.beta"] = np.zeros(ch)

    prev = 3
    for i, w in enumerate(widths, start=1):
        p[f"d{i}.w"] = conv_w(w, prev)
        p[f"d{i}.b"] = np.zeros(w)
        norm_params(f"d{i}", w)
        prev = w
    for j in range(1, depth + 1):
        cin = widths[depth - j] * (1 if j == 1 else 2)  # skip concat from level D-j+1
        cout = c if j == depth else widths[depth - j - 1]
        if j == depth:
            p[f"u{j}.w"] = np.zeros((cin, cout, k, k))
        else:
            p[f"u{j}.w"] = rng.standard_normal((cin, cout, k, k)) \
                * np.sqrt(2.0 / (cin * k * k))
        p[f"u{j}.b"] = np.zeros(cout)
        if j != depth:
            norm_params(f"u{j}", cout)
    return EncoderParams(p, widths, c, cfg.encoder_groups, cfg.encoder_norm)


def init_decoder(cfg: NetConfig, seed) -> DecoderParams:
    rng = np.random.default_rng(seed)
    in_dim = cfg.decoder_in_dim()
    p = {}
    prev = in_dim
    # small positive biases keep ReLU units (and their gradients) alive when
    # the feature tensor starts at exact zero
    for i, d in enumerate(cfg.trunk_dims):
        fan_in = prev + (in_dim if i == cfg.skip_at else 0)
        p[f"trunk{i}.w"] = _linear_init(rng, fan_in, d, cfg.trunk_init)
        p[f"trunk{i}.b"] = np.full(d, 0.01)
        prev = d
    for head, out in (("offset", 3), ("color", 3), ("scale", 1)):
        p[f"{head}.w0"] = _linear_init(rng, prev, cfg.head_hidden, cfg.trunk_init)
        p[f"{head}.b0"] = np.full(cfg.head_hidden, 0.01)
        p[f"{head}.w1"] = np.zeros((cfg.head_hidden, out))  # cold-start heads
        p[f"{head}.b1"] = np.zeros(out)
    return DecoderParams(p, in_dim, cfg.trunk_dims, cfg.skip_at, cfg.head_hidden)


def _as_vars(tape, weights, prefix):
    """Register a weight dict on the tape as named leaves (or pass through)."""
    if tape is None:
        return dict(weights)
    return {k: tape.leaf(v, name=f"{prefix}{k}") for k, v in sorted(weights.items())}


def encode_pose(uvmap, params: EncoderParams, tape: Tape | None,
                weight_vars=None):
    """Pose encoder: UV positional map [H, W, 3] -> pose feature [H, W, C].

    ``uvmap`` may be a UvPositionalMap, a plain array, or a Var already on the
    tape (when gradients with respect to the map are needed). Invalid pixels
    must already hold the zero sentinel. With 'batch' normalization the
    statistics are per channel over the (single) frame, which is what batch
    statistics reduce to at batch size 1.
    """
    if isinstance(uvmap, UvPositionalMap):
        x = uvmap.positions
    else:
        x = uvmap
    H, W = value_of(x).shape[:2]
    depth = params.depth
    if H % (1 << depth) or W % (1 << depth):
        raise ValueError(f"encoder input {H}x{W} must be divisible by "
                         f"{1 << depth}")
    p = weight_vars if weight_vars is not None else _as_vars(tape, params.weights, "enc.")

    def norm(name, h, channels):
        g = channels if params.norm == "batch" else params.groups
        return ad.group_norm(tape, h, p[f"{name}.g"], p[f"{name}.beta"], g)

    x = ad.transpose(tape, x, (2, 0, 1))
    down = []
    h = x
    for i, w in enumerate(params.widths, start=1):
        h = ad.leaky_relu(tape, norm(f"d{i}", ad.conv2d(
            tape, h, p[f"d{i}.w"], p[f"d{i}.b"]), w))
        down.append(h)
    for j in range(1, depth + 1):
        if j > 1:
            h = ad.concat(tape, [h, down[depth - j]], axis=0)
        h = ad.conv_transpose2d(tape, h, p[f"u{j}.w"], p[f"u{j}.b"])
        if j != depth:
            h = ad.relu(tape, norm(f"u{j}", h, params.widths[depth - j - 1]))
    return ad.transpose(tape, h, (1, 2, 0))


def combine_features(pose_feature, feature_tensor, sample_uv, upsample,
                     tape: Tape | None, mode="sum"):
    """Integrate pose features with the feature tensor and gather per point.

    The combined [H, W, C] grid is bilinearly upsampled by ``upsample`` and
    read at each sample's pixel of the upsampled grid (its quantized uv at
    the finer resolution). ``pose_feature=None`` is the stage-1 path: the
    output depends only on the feature tensor.
    """
    if upsample not in (1, 2, 4):
        raise ValueError(f"upsample must be 1, 2 or 4, got {upsample}")
    F_val = value_of(feature_tensor)
    H, W, C = F_val.shape
    if pose_feature is None:
        combined = feature_tensor
    else:
        O_val = value_of(pose_feature)
        if O_val.shape != F_val.shape:
            raise ValueError(f"pose feature {O_val.shape} does not match "
                             f"feature tensor {F_val.shape}")
        if mode == "sum":
            combined = ad.add(tape, pose_feature, feature_tensor)
        elif mode == "concat":
            combined = ad.concat(tape, [pose_feature, feature_tensor], axis=2)
        else:
            raise ValueError(f"unknown combine mode '{mode}'")
    fine = uv_to_pixel(sample_uv, (H * upsample, W * upsample))
    # center of the fine pixel, mapped back into base-grid coordinates
    rows = (fine[:, 0] + 0.5) / upsample - 0.5
    cols = (fine[:, 1] + 0.5) / upsample - 0.5
    return ad.gather_bilinear(tape, combined, rows, cols)


def decode(features, params: DecoderParams, tape: Tape | None,
           weight_vars=None):
    """Gaussian parameter decoder: per-point features -> (offset, color, scale).

    Shared trunk with one skip connection from the input, then three 2-layer
    heads; raw outputs (activations are applied by the cloud update).
    """
    n, d = value_of(features).shape
    if d != params.in_dim:
        raise ValueError(f"feature width {d} != decoder input {params.in_dim}")
    p = weight_vars if weight_vars is not None else _as_vars(tape, params.weights, "dec.")
    h = features
    for i in range(len(params.trunk_dims)):
        if i == params.skip_at:
            h = ad.concat(tape, [h, features], axis=1)
        h = ad.relu(tape, ad.add(tape, ad.matmul(tape, h, p[f"trunk{i}.w"]),
                                 p[f"trunk{i}.b"]))
    outs = []
    for head in ("offset", "color", "scale"):
        hh = ad.relu(tape, ad.add(tape, ad.matmul(tape, h, p[f"{head}.w0"]),
                                  p[f"{head}.b0"]))
        outs.append(ad.add(tape, ad.matmul(tape, hh, p[f"{head}.w1"]),
                           p[f"{head}.b1"]))
    offset, color, scale = outs
    scale = ad.reshape(tape, scale, (n,))
    return offset, color, scale


def tape_backward(tape: Tape, loss, seed=1.0):
    """Reverse-mode sweep; returns gradients for every registered parameter.

    Composes across custom nodes (rasterizer backward, skinning Jacobians) so
    one call yields gradients for encoder weights, the feature tensor, decoder
    weights, and pose/translation deltas in a single pass.
    """
    return tape.backward(loss, seed)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_network(path, feature_tensor, decoder: DecoderParams,
                 encoder: EncoderParams | None = None):
    """Versioned binary checkpoint with a shape manifest (the array headers)."""
    arrays = {"format_version": np.int64(NETWORK_FORMAT_VERSION),
              "feature_tensor": feature_tensor,
              "decoder.in_dim": np.int64(decoder.in_dim),
              "decoder.skip_at": np.int64(decoder.skip_at),
              "decoder.head_hidden": np.int64(decoder.head_hidden),
              "decoder.trunk_dims": np.asarray(decoder.trunk_dims, dtype=np.int64)}
    for k, v in decoder.weights.items():
        arrays[f"decoder.{k}"] = v
    if encoder is not None:
        arrays["encoder.widths"] = np.asarray(encoder.widths, dtype=np.int64)
        arrays["encoder.out_channels"] = np.int64(encoder.out_channels)
        arrays["encoder.groups"] = np.int64(encoder.groups)
        arrays["encoder.norm"] = np.bytes_(encoder.norm.encode())
        for k, v in encoder.weights.items():
            arrays[f"encoder.{k}"] = v
    np.savez(path, **arrays)


def load_network(path, expect_cfg: NetConfig | None = None):
    """Load (feature_tensor, decoder, encoder-or-None); validates shapes
    against ``expect_cfg`` when given."""
    with np.load(path) as z:
        if int(z["format_version"]) != NETWORK_FORMAT_VERSION:
            raise ValueError(f"unsupported network format version "
                             f"{int(z['format_version'])}")
        F = z["feature_tensor"]
        dec_w = {k[len("decoder."):]: z[k] for k in z.files
                 if k.startswith("decoder.") and z[k].dtype.kind == "f"}
        decoder = DecoderParams(dec_w,
                                in_dim=int(z["decoder.in_dim"]),
                                trunk_dims=tuple(int(x) for x in z["decoder.trunk_dims"]),
                                skip_at=int(z["decoder.skip_at"]),
                                head_hidden=int(z["decoder.head_hidden"]))
        encoder = None
        if "encoder.out_channels" in z.files:
            enc_w = {k[len("encoder."):]: z[k] for k in z.files
                     if k.startswith("encoder.") and z[k].dtype.kind == "f"}
            norm = "group"
            if "encoder.norm" in z.files:
                norm = bytes(z["encoder.norm"].item()).decode()
            encoder = EncoderParams(enc_w,
                                    widths=tuple(int(x) for x in z["encoder.widths"]),
                                    out_channels=int(z["encoder.out_channels"]),
                                    groups=int(z["encoder.groups"]),
                                    norm=norm)
    if expect_cfg is not None:
        H, W, C = F.shape
        if C != expect_cfg.feature_channels:
            raise ValueError(f"checkpoint feature channels {C} != config "
                             f"{expect_cfg.feature_channels}")
        if decoder.trunk_dims != tuple(expect_cfg.trunk_dims):
            raise ValueError("checkpoint trunk dims do not match config")
    return F, decoder, encoder
