"""Segmentation network: compact 4-stage encoder + hybrid attention/strip decoder.

The encoder is a small convolutional stand-in for a hierarchical
transformer backbone, producing features at strides 4/8/16/32. The
decoder aggregates the last three stages at stride 8 and runs five
parallel branches over the aggregated feature: an identity shortcut,
three windowed-attention branches with context/query ratios, and a
strip-pooling gate. Branch outputs are concatenated, reduced, upsampled
to stride 4, fused with the projected stage-1 feature and classified.

All normalization layers are batch norm; their running statistics can
be replaced wholesale with exact moments over a calibration set
(``recalibrate_norm``) so evaluation can use target-domain statistics.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

STAGE_STRIDES = (4, 8, 16, 32)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclasses.dataclass
class EncoderConfig:
    channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ShapeError(f"encoder needs 4 stages, got {len(self.channels)}")


@dataclasses.dataclass
class DecoderConfig:
    patch: int = 8
    ratios: tuple = (2, 4, 8)
    embed: int = 64
    heads: int = 2
    num_classes: int = 19

    def __post_init__(self):
        self.ratios = tuple(self.ratios)
        if self.attn_dim % self.heads:
            raise ShapeError(f"attention dim {self.attn_dim} not divisible by "
                             f"{self.heads} heads")

    @property
    def attn_dim(self) -> int:
        return max(self.embed // 4, 8)

    @property
    def context_sizes(self) -> tuple:
        """Context window side length per ratio branch (ratio * patch)."""
        return tuple(r * self.patch for r in self.ratios)


# ---------------------------------------------------------------------------
# layers (thin wrappers that allocate named parameters on the model)
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, model, name, cin, cout, kernel=(3, 3), stride=1,
                 padding=None):
        kh, kw = kernel
        if padding is None:
            padding = (kh // 2, kw // 2)
        self.stride, self.padding = stride, padding
        self.w = model._add_param(f"{name}.w", (cout, cin, kh, kw),
                                  fan_in=cin * kh * kw)
        self.b = model._add_param(f"{name}.b", (cout,), zeros=True)

    def __call__(self, view, x):
        return T.conv2d(x, view[self.w], view[self.b],
                        stride=self.stride, padding=self.padding)


class _Linear:
    """Token-wise linear layer for (..., tokens, features) tensors."""

    def __init__(self, model, name, cin, cout):
        self.w = model._add_param(f"{name}.w", (cin, cout), fan_in=cin)
        self.b = model._add_param(f"{name}.b", (cout,), zeros=True)

    def __call__(self, view, x):
        return T.add(T.matmul(x, view[self.w]), view[self.b])


class _BatchNorm:
    def __init__(self, model, name, channels):
        self.model = model
        self.name = name
        self.gamma = model._add_param(f"{name}.gamma", (channels,), ones=True)
        self.beta = model._add_param(f"{name}.beta", (channels,), zeros=True)
        model.bn_stats[name] = {
            "mean": np.zeros(channels, dtype=np.float64),
            "var": np.ones(channels, dtype=np.float64),
            "count": 0,
        }

    def __call__(self, view, x, mode):
        stats = self.model.bn_stats[self.name]
        if mode == "eval":
            out, mu, var = T.batch_norm(
                x, view[self.gamma], view[self.beta], eps=BN_EPS,
                stats=(stats["mean"].astype(x.data.dtype),
                       stats["var"].astype(x.data.dtype)))
        else:
            out, mu, var = T.batch_norm(x, view[self.gamma], view[self.beta],
                                        eps=BN_EPS)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            if mode == "train":
                stats["mean"] = (1 - BN_MOMENTUM) * stats["mean"] + BN_MOMENTUM * mu
                stats["var"] = (1 - BN_MOMENTUM) * stats["var"] + BN_MOMENTUM * var
                stats["count"] += n
            elif mode == "calibrate":
                stats["mean"] = mu.astype(np.float64)
                stats["var"] = np.maximum(var.astype(np.float64), BN_EPS)
                stats["count"] = n
        capture = self.model._bn_capture
        if capture is not None:
            m, v = stats["mean"], stats["var"]
            capture[self.name] = ((x.data - m[None, :, None, None])
                                  / np.sqrt(v + BN_EPS)[None, :, None, None])
        return out


# ---------------------------------------------------------------------------
# window helpers
# ---------------------------------------------------------------------------

def window_tokens(x: Tensor, patch: int) -> Tensor:
    """(N, C, H, W) -> (N*nh*nw, patch*patch, C) over non-overlapping windows."""
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"{patch}x{patch} windows do not tile feature {x.shape}")
    nh, nw = h // patch, w // patch
    t = T.reshape(x, (n, c, nh, patch, nw, patch))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (n * nh * nw, patch * patch, c))


def unwindow_tokens(tokens: Tensor, n: int, c: int, h: int, w: int,
                    patch: int) -> Tensor:
    nh, nw = h // patch, w // patch
    t = T.reshape(tokens, (n, nh, nw, patch, patch, c))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))
    return T.reshape(t, (n, c, h, w))


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class SegModel:
    """Encoder + decoder with named parameters and replaceable norm stats."""

    def __init__(self, encoder: EncoderConfig, decoder: DecoderConfig, seed=0):
        self.encoder_config = encoder
        self.decoder_config = decoder
        self.params: dict[str, T.Parameter] = {}
        self.bn_stats: dict[str, dict] = {}
        self._bn_capture = None
        self._rng = np.random.default_rng([seed, 0x5E6])

        c1, c2, c3, c4 = encoder.channels
        e = decoder.embed
        b = encoder.blocks_per_stage

        # encoder: stage 1 reaches stride 4 with two stride-2 convs
        self.enc = []
        cin = 3
        for i, cout in enumerate(encoder.channels):
            stage = []
            if i == 0:
                stage.append(self._conv_bn(f"enc.s1.down0", 3, cout, stride=2))
                stage.append(self._conv_bn(f"enc.s1.down1", cout, cout, stride=2))
            else:
                stage.append(self._conv_bn(f"enc.s{i + 1}.down", cin, cout, stride=2))
            for j in range(b):
                stage.append(self._conv_bn(f"enc.s{i + 1}.block{j}", cout, cout))
            self.enc.append(stage)
            cin = cout

        # decoder
        self.agg = self._conv_bn("dec.agg", c2 + c3 + c4, e, kernel=(1, 1))
        d = decoder.attn_dim
        self.lawin = {}
        for r in decoder.ratios:
            self.lawin[r] = {
                "q": _Linear(self, f"dec.lawin{r}.q", e, d),
                "k": _Linear(self, f"dec.lawin{r}.k", e, d),
                "v": _Linear(self, f"dec.lawin{r}.v", e, d),
                "out": _Linear(self, f"dec.lawin{r}.out", d, e),
            }
        self.strip_h = _Conv(self, "dec.strip.h", e, e, kernel=(3, 1))
        self.strip_w = _Conv(self, "dec.strip.w", e, e, kernel=(1, 3))
        self.strip_gate = _Conv(self, "dec.strip.gate", e, e, kernel=(1, 1))
        n_branches = 2 + len(decoder.ratios)
        self.fuse = self._conv_bn("dec.fuse", n_branches * e, e, kernel=(1, 1))
        low = max(e // 8, 8)
        fused = max(e // 2, 16)
        self.low_proj = _Conv(self, "dec.low", c1, low, kernel=(1, 1))
        self.low_fuse = _Conv(self, "dec.lowfuse", e + low, fused, kernel=(1, 1))
        self.classifier = _Conv(self, "dec.cls", fused, decoder.num_classes,
                                kernel=(1, 1))

    # -- parameter plumbing ---------------------------------------------------
    def _add_param(self, name, shape, fan_in=None, zeros=False, ones=False):
        if name in self.params:
            raise ShapeError(f"duplicate parameter name {name}")
        if zeros:
            data = np.zeros(shape)
        elif ones:
            data = np.ones(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        self.params[name] = T.Parameter(data.astype(T.get_default_dtype()), name)
        return name

    def _conv_bn(self, name, cin, cout, kernel=(3, 3), stride=1):
        conv = _Conv(self, name, cin, cout, kernel=kernel, stride=stride)
        bn = _BatchNorm(self, f"{name}.bn", cout)
        return (conv, bn)

    def param_view(self) -> dict:
        return {name: p.value for name, p in self.params.items()}

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def checksum(self) -> float:
        return float(sum(np.abs(p.value.data).sum() for p in self.params.values()))

    @property
    def num_classes(self) -> int:
        return self.decoder_config.num_classes

    @property
    def pad_multiple(self) -> int:
        return int(np.lcm(STAGE_STRIDES[-1], 8 * self.decoder_config.patch))

    # -- forward passes ---------------------------------------------------

    def _stage(self, view, x, stage, mode):
        for conv, bn in stage:
            x = T.gelu(bn(view, conv(view, x), mode))
        return x

    def encoder_forward(self, x: Tensor, mode="train", view=None):
        """Four feature maps at strides 4/8/16/32 from an NCHW image tensor."""
        view = view or self.param_view()
        n, c, h, w = x.shape
        if h < 32 or w < 32:
            raise ShapeError(f"encoder input must be at least 32x32, got {h}x{w}")
        feats = []
        for stage in self.enc:
            x = self._stage(view, x, stage, mode)
            feats.append(x)
        return feats

    def lawin_attention(self, feature: Tensor, ratio: int, view=None) -> Tensor:
        """Windowed multi-head attention over pooled context windows."""
        view = view or self.param_view()
        cfg = self.decoder_config
        p = cfg.patch
        n, c, h, w = feature.shape
        if ratio * p > min(h, w):
            raise ShapeError(f"context window {ratio * p} exceeds feature "
                             f"extent {(h, w)}")
        ws = self.lawin[ratio]
        q_tokens = window_tokens(feature, p)              # (B, p*p, C)
        ctx = T.context_pool(feature, p, ratio)           # (B, p*p, C)
        q = ws["q"](view, q_tokens)
        k = ws["k"](view, ctx)
        v = ws["v"](view, ctx)
        heads = cfg.heads
        dh = cfg.attn_dim // heads
        bsz, tok, _ = q.shape

        def split(t):
            t = T.reshape(t, (bsz, tok, heads, dh))
            t = T.transpose(t, (0, 2, 1, 3))
            return T.reshape(t, (bsz * heads, tok, dh))

        qh, kh, vh = split(q), split(k), split(v)
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 2, 1))),
                       1.0 / math.sqrt(dh))
        att = T.softmax(scores, axis=-1)
        out = T.matmul(att, vh)
        out = T.reshape(out, (bsz, heads, tok, dh))
        out = T.transpose(out, (0, 2, 1, 3))
        out = T.reshape(out, (bsz, tok, heads * dh))
        out = ws["out"](view, out)
        return unwindow_tokens(out, n, c, h, w, p)

    def strip_pool(self, feature: Tensor, view=None) -> Tensor:
        """Horizontal/vertical strip context, broadcast and sigmoid-gated."""
        view = view or self.param_view()
        n, c, h, w = feature.shape
        hs = self.strip_h(view, T.avg_pool2d(feature, (1, w)))   # (N,C,h,1)
        vs = self.strip_w(view, T.avg_pool2d(feature, (h, 1)))   # (N,C,1,w)
        ctx = T.add(hs, vs)                                      # broadcast to h x w
        gate = T.sigmoid(self.strip_gate(view, ctx))
        return T.mul(feature, gate)

    def hybrid_aspp_forward(self, feats, mode="train", view=None) -> Tensor:
        """Decoder: aggregated stride-8 feature through 5 branches to stride-4 logits."""
        view = view or self.param_view()
        f1, f2, f3, f4 = feats
        h8, w8 = f2.shape[2], f2.shape[3]
        up3 = T.bilinear_upsample(f3, (h8, w8))
        up4 = T.bilinear_upsample(f4, (h8, w8))
        cat = T.concat([f2, up3, up4], axis=1)
        conv, bn = self.agg
        agg = T.gelu(bn(view, conv(view, cat), mode))

        branches = [agg]
        for r in self.decoder_config.ratios:
            branches.append(self.lawin_attention(agg, r, view=view))
        branches.append(self.strip_pool(agg, view=view))

        conv, bn = self.fuse
        fused = T.gelu(bn(view, conv(view, T.concat(branches, axis=1)), mode))
        h4, w4 = f1.shape[2], f1.shape[3]
        fused = T.bilinear_upsample(fused, (h4, w4))
        low = self.low_proj(view, f1)
        merged = T.gelu(self.low_fuse(view, T.concat([fused, low], axis=1)))
        return self.classifier(view, merged)

    def forward(self, images: np.ndarray, mode="train", view=None) -> Tensor:
        """Full model: (N, H, W, 3) images in [0,1] -> (N, C, H, W) logits.

        Inputs are reflect-padded so every stage divides its stride and
        the stride-8 feature tiles the attention patch; logits are
        upsampled to the padded size and cropped back.
        """
        if mode not in ("train", "batch", "eval", "calibrate"):
            raise ShapeError(f"unknown forward mode {mode!r}")
        view = view or self.param_view()
        images = np.asarray(images, dtype=T.get_default_dtype())
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ShapeError(f"expected (N, H, W, 3) images, got {images.shape}")
        n, h, w, _ = images.shape
        m = self.pad_multiple
        ph = (m - h % m) % m
        pw = (m - w % m) % m
        if ph or pw:
            images = np.pad(images, ((0, 0), (0, ph), (0, pw), (0, 0)),
                            mode="reflect")
        x = Tensor(images.transpose(0, 3, 1, 2))
        feats = self.encoder_forward(x, mode=mode, view=view)
        logits4 = self.hybrid_aspp_forward(feats, mode=mode, view=view)
        logits = T.bilinear_upsample(logits4, (h + ph, w + pw))
        if ph or pw:
            logits = T.slice_(logits, (slice(None), slice(None),
                                       slice(0, h), slice(0, w)))
        return logits

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Argmax label map for a single (H, W, 3) image, eval mode, no grad."""
        with T.no_grad():
            logits = self.forward(image[None], mode="eval")
        return logits.data[0].argmax(axis=0).astype(np.uint8)


def model_forward(model: SegModel, image: np.ndarray, mode="train",
                  view=None) -> Tensor:
    """Per-pixel logits (H, W, C) for one (H, W, 3) image."""
    logits = model.forward(image[None], mode=mode, view=view)
    return T.transpose(T.reshape(logits, logits.shape[1:]), (1, 2, 0))


def recalibrate_norm(model: SegModel, calibration_images) -> dict:
    """Replace every norm layer's stats with exact moments over the set.

    All calibration images are processed as one batch; each layer
    normalizes with (and stores) the empirical per-channel moments of
    its own input, so a subsequent eval-mode pass over the same set sees
    zero-mean unit-variance pre-affine activations. Returns the stats.
    """
    images = np.asarray(calibration_images)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ShapeError("recalibrate_norm needs a non-empty stack of images")
    with T.no_grad():
        model.forward(images, mode="calibrate")
    return {k: dict(v) for k, v in model.bn_stats.items()}
