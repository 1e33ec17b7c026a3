"""GIRNet: feature extraction, feature-level temporal interpolation, temporal
feature enhancement, the global-information residual ConvLSTM and the
PixelShuffle reconstruction head.

Weights live in a flat ``{path: Tensor}`` mapping so that checkpoints and
optimizers can treat them uniformly; :func:`weight_shapes` is the single
source of truth for the layout.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_channels,
    leaky_relu,
    mul,
    sigmoid,
    split_channels,
    tanh,
)
from .kernels import (
    ATTENTION_KINDS,
    AttentionParams,
    ConvParams,
    conv2d,
    deformable_conv2d,
    kaiming_uniform,
    pixel_shuffle,
    resblock,
)

Weights = Mapping[str, Tensor]

OFFSET_KERNEL = 3
DCONV_KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    n_res_extract: int = 9
    n_res_recon: int = 7
    attention_kind: str = "attention-2"
    scale: int = 4
    use_deformable: bool = True
    use_global_residual: bool = True
    gstir_use_global_info: bool = True
    gstir_use_residual: bool = True
    reduction: int = 4

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.scale not in (2, 4, 8):
            raise ValueError(f"scale must be 2, 4 or 8, got {self.scale}")
        if self.n_res_extract < 1 or self.n_res_recon < 1:
            raise ValueError("need at least one ResBlock in extraction and reconstruction")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.attention_kind != "none" and (self.reduction < 1 or self.channels % self.reduction):
            raise ValueError(f"reduction {self.reduction} must divide channels {self.channels}")

    @property
    def upsample_stages(self) -> int:
        return int(round(math.log2(self.scale)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class CellParams:
    """ConvLSTM gate convolutions; gates are stacked in (i, f, g, o) order."""

    input_conv: ConvParams
    hidden_conv: ConvParams

    def __post_init__(self):
        ch_in = self.input_conv.out_channels
        if ch_in % 4 or ch_in != self.hidden_conv.out_channels:
            raise ValueError("input and hidden convs must both produce 4*C_h channels")
        if self.hidden_conv.in_channels * 4 != ch_in:
            raise ValueError("hidden conv input width must equal C_h")

    @property
    def hidden_channels(self) -> int:
        return self.hidden_conv.in_channels


# ---------------------------------------------------------------------------
# weight layout


def _conv_shapes(prefix: str, c_out: int, c_in: int, k: int, bias: bool = True) -> dict:
    shapes = {f"{prefix}.weight": (c_out, c_in, k, k)}
    if bias:
        shapes[f"{prefix}.bias"] = (c_out,)
    return shapes


def _resblock_shapes(prefix: str, cfg: ModelConfig) -> dict:
    c = cfg.channels
    shapes = {}
    shapes.update(_conv_shapes(f"{prefix}.conv1", c, c, 3))
    shapes.update(_conv_shapes(f"{prefix}.conv2", c, c, 3))
    if cfg.attention_kind != "none":
        hidden = c // cfg.reduction
        shapes.update(_conv_shapes(f"{prefix}.att.mlp_in", hidden, c, 1))
        shapes.update(_conv_shapes(f"{prefix}.att.mlp_out", c, hidden, 1))
        if cfg.attention_kind == "attention-1":
            shapes.update(_conv_shapes(f"{prefix}.att.spatial", 1, 2, 7))
    return shapes


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter layout for ``cfg``."""
    c = cfg.channels
    n_off = 2 * OFFSET_KERNEL * OFFSET_KERNEL
    shapes: dict[str, tuple[int, ...]] = {}
    shapes.update(_conv_shapes("extract.head", c, 3, 3))
    for i in range(cfg.n_res_extract):
        shapes.update(_resblock_shapes(f"extract.res{i}", cfg))
    for side in ("1", "3"):
        shapes.update(_conv_shapes(f"flti.g{side}", n_off, 2 * c, OFFSET_KERNEL))
        shapes.update(_conv_shapes(f"flti.dconv{side}", c, c, DCONV_KERNEL))
    shapes.update(_conv_shapes("flti.alpha", c, c, 1))
    shapes.update(_conv_shapes("flti.beta", c, c, 1))
    shapes.update(_conv_shapes("tfe.motion_f", c, 2 * c, 3))
    shapes.update(_conv_shapes("tfe.motion_b", c, 2 * c, 3))
    for i, (co, ci) in enumerate([(2 * c, 5 * c), (c, 2 * c), (c, c), (c, c)], start=1):
        shapes.update(_conv_shapes(f"tfe.fuse{i}", co, ci, 1))
    for cell in ("global", "local"):
        shapes.update(_conv_shapes(f"gstir.{cell}.input", 4 * c, c, 3))
        shapes.update(_conv_shapes(f"gstir.{cell}.hidden", 4 * c, c, 3, bias=False))
    shapes.update(_conv_shapes("gstir.conv_in", c, c, 3))
    shapes.update(_conv_shapes("gstir.conv_res", c, c, 3))
    for i in range(cfg.n_res_recon):
        shapes.update(_resblock_shapes(f"recon.res{i}", cfg))
    for s in range(cfg.upsample_stages):
        shapes.update(_conv_shapes(f"recon.up{s}", 4 * c, c, 3))
    shapes.update(_conv_shapes("recon.out", 3, c, 3))
    return shapes


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Kaiming-uniform conv weights, zero biases, zero offset convs."""
    rng = np.random.default_rng(seed)
    weights = {}
    for path, shape in weight_shapes(cfg).items():
        zero = path.endswith(".bias") or path.startswith(("flti.g1.", "flti.g3."))
        data = np.zeros(shape, dtype=dtype) if zero else kaiming_uniform(rng, shape, dtype=dtype)
        weights[path] = Tensor(data, requires_grad=True)
    return weights


def check_weights(w: Weights, cfg: ModelConfig) -> None:
    expected = weight_shapes(cfg)
    missing = [k for k in expected if k not in w]
    extra = [k for k in w if k not in expected]
    if missing or extra:
        raise ValueError(f"weights do not match config: missing={missing[:5]} extra={extra[:5]}")
    for k, shape in expected.items():
        if tuple(w[k].shape) != shape:
            raise ValueError(f"{k}: shape {w[k].shape}, config expects {shape}")


def conv_params(w: Weights, prefix: str) -> ConvParams:
    return ConvParams(w[f"{prefix}.weight"], w.get(f"{prefix}.bias"))


def attention_params(w: Weights, prefix: str, kind: str) -> AttentionParams:
    if kind == "none":
        return AttentionParams("none")
    spatial = conv_params(w, f"{prefix}.spatial") if kind == "attention-1" else None
    return AttentionParams(kind, conv_params(w, f"{prefix}.mlp_in"), conv_params(w, f"{prefix}.mlp_out"), spatial)


def cell_params(w: Weights, prefix: str) -> CellParams:
    return CellParams(conv_params(w, f"{prefix}.input"), conv_params(w, f"{prefix}.hidden"))


def _resblocks(x: Tensor, w: Weights, prefix: str, count: int, cfg: ModelConfig) -> Tensor:
    for i in range(count):
        p = f"{prefix}.res{i}"
        x = resblock(x, conv_params(w, f"{p}.conv1"), conv_params(w, f"{p}.conv2"),
                     attention_params(w, f"{p}.att", cfg.attention_kind))
    return x


def _same_shapes(*xs: Tensor, what: str) -> None:
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape != ref:
            raise ValueError(f"{what}: shape mismatch {ref} vs {x.shape}")


# ---------------------------------------------------------------------------
# stages


def extract_features(frames: Sequence[Tensor], w: Weights, cfg: ModelConfig) -> list[Tensor]:
    """Head conv then ``n_res_extract`` ResBlocks, weights shared across frames."""
    if not frames:
        raise ValueError("extract_features: empty frame list")
    _same_shapes(*frames, what="extract_features")
    if frames[0].ndim != 4 or frames[0].shape[1] != 3:
        raise ValueError(f"frames must be (N, 3, H, W), got {frames[0].shape}")
    head = conv_params(w, "extract.head")
    return [_resblocks(conv2d(f, head), w, "extract", cfg.n_res_extract, cfg) for f in frames]


def flti_interpolate(f_prev: Tensor, f_next: Tensor, w: Weights, cfg: ModelConfig) -> Tensor:
    """Synthesise the intermediate feature map from its two neighbours.

    The forward offsets see ``[prev, next]`` and the backward offsets see
    ``[next, prev]``; each warps its own neighbour and two 1x1 convs blend.
    """
    _same_shapes(f_prev, f_next, what="flti_interpolate")
    dconv1 = conv_params(w, "flti.dconv1")
    dconv3 = conv_params(w, "flti.dconv3")
    if cfg.use_deformable:
        off1 = conv2d(concat_channels([f_prev, f_next]), conv_params(w, "flti.g1"))
        off3 = conv2d(concat_channels([f_next, f_prev]), conv_params(w, "flti.g3"))
        t_prev = deformable_conv2d(f_prev, off1, dconv1)
        t_next = deformable_conv2d(f_next, off3, dconv3)
    else:
        t_prev = conv2d(f_prev, dconv1)
        t_next = conv2d(f_next, dconv3)
    return add(conv2d(t_prev, conv_params(w, "flti.alpha")), conv2d(t_next, conv_params(w, "flti.beta")))


def tfe_enhance(f_mid: Tensor, f_prev: Tensor, f_next: Tensor, w: Weights) -> Tensor:
    """Residual refinement of the interpolated feature using motion cues."""
    _same_shapes(f_mid, f_prev, f_next, what="tfe_enhance")
    m_f = conv2d(concat_channels([f_mid, f_prev]), conv_params(w, "tfe.motion_f"))
    m_b = conv2d(concat_channels([f_mid, f_next]), conv_params(w, "tfe.motion_b"))
    r = concat_channels([f_prev, f_next, f_mid, m_f, m_b])
    for i in range(1, 5):
        r = conv2d(r, conv_params(w, f"tfe.fuse{i}"))
        if i < 4:
            r = leaky_relu(r)
    return add(f_mid, r)


def convlstm_cell(x: Tensor, h: Tensor, c: Tensor, p: CellParams) -> tuple[Tensor, Tensor]:
    if h.shape != c.shape or x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
        raise ValueError(f"convlstm_cell: incompatible shapes x={x.shape} h={h.shape} c={c.shape}")
    if h.shape[1] != p.hidden_channels:
        raise ValueError(f"hidden state has {h.shape[1]} channels, cell expects {p.hidden_channels}")
    gates = add(conv2d(x, p.input_conv), conv2d(h, p.hidden_conv))
    i, f, g, o = split_channels(gates, [p.hidden_channels] * 4)
    c_new = add(mul(sigmoid(f), c), mul(sigmoid(i), tanh(g)))
    h_new = mul(sigmoid(o), tanh(c_new))
    return h_new, c_new


def _zero_state(ref: Tensor, channels: int) -> Tensor:
    n, _, hh, ww = ref.shape
    return Tensor(np.zeros((n, channels, hh, ww), dtype=ref.dtype))


def gstir_global(features: Sequence[Tensor], w: Weights) -> Tensor:
    """Many-to-one ConvLSTM over the sequence; returns the final cell state G."""
    if not features:
        raise ValueError("gstir_global: empty sequence")
    p = cell_params(w, "gstir.global")
    h = _zero_state(features[0], p.hidden_channels)
    c = h
    for x in features:
        h, c = convlstm_cell(x, h, c, p)
    return c


def gstir_refine(features: Sequence[Tensor], g: Tensor, w: Weights, cfg: ModelConfig) -> list[Tensor]:
    """Many-to-many ConvLSTM seeded with cell state G, plus a conv residual path."""
    if not features:
        raise ValueError("gstir_refine: empty sequence")
    p = cell_params(w, "gstir.local")
    h = _zero_state(features[0], p.hidden_channels)
    if g.shape != h.shape:
        raise ValueError(f"global state shape {g.shape} does not match hidden state {h.shape}")
    c = g if cfg.gstir_use_global_info else h
    conv_in = conv_params(w, "gstir.conv_in")
    conv_res = conv_params(w, "gstir.conv_res")
    outs = []
    for f in features:
        x = conv2d(f, conv_in)
        h, c = convlstm_cell(x, h, c, p)
        outs.append(add(h, conv2d(x, conv_res)) if cfg.gstir_use_residual else h)
    return outs


def reconstruct(h_t: Tensor, skip: Tensor, w: Weights, cfg: ModelConfig) -> Tensor:
    """ResBlocks, optional global residual at LR, then r=2 PixelShuffle stages."""
    if skip.shape != h_t.shape:
        raise ValueError(f"skip shape {skip.shape} does not match features {h_t.shape}")
    r = _resblocks(h_t, w, "recon", cfg.n_res_recon, cfg)
    if cfg.use_global_residual:
        r = add(r, skip)
    for s in range(cfg.upsample_stages):
        r = leaky_relu(pixel_shuffle(conv2d(r, conv_params(w, f"recon.up{s}")), 2))
    return conv2d(r, conv_params(w, "recon.out"))


def interleave(inputs: Sequence[Tensor], mids: Sequence[Tensor]) -> list[Tensor]:
    seq = []
    for i, f in enumerate(inputs):
        seq.append(f)
        if i < len(mids):
            seq.append(mids[i])
    return seq


def girnet_forward(clip: Sequence[Tensor], w: Weights, cfg: ModelConfig) -> list[Tensor]:
    """Map ``n`` LR frames (N, 3, H, W) to ``2n - 1`` HR frames (N, 3, sH, sW)."""
    if len(clip) < 2:
        raise ValueError(f"need >= 2 frames, got {len(clip)}")
    feats = extract_features(clip, w, cfg)
    mids = []
    for f_prev, f_next in zip(feats[:-1], feats[1:]):
        rough = flti_interpolate(f_prev, f_next, w, cfg)
        mids.append(tfe_enhance(rough, f_prev, f_next, w))
    seq = interleave(feats, mids)
    g = gstir_global(seq, w)
    refined = gstir_refine(seq, g, w, cfg)
    return [reconstruct(h, skip, w, cfg) for h, skip in zip(refined, seq)]
