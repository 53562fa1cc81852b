"""Analytic multiply-accumulate counts for decoder cost comparison.

Counts follow fixed conventions: conv = k^2 * Cin * Cout * Hout * Wout
MACs, token linear = Cin * Cout * tokens MACs, attention = Q/K/V/output
projections plus score and weighted-sum terms per window, bilinear
resize = 4 MACs per output element, pooling = pure adds. Reported FLOPs
are 2 * MACs + adds.

Three decoder variants are defined over one shared encoder:

* ``vanilla-mlp``   - per-stage linear to the embed dim, upsample all to
  stride 4, concatenate, fuse, classify.
* ``lawin-aspp``    - stride-8 aggregation, shortcut, three windowed-
  attention branches, a global-image-pool gating branch.
* ``hybrid-aspp``   - lawin-aspp with the image-pool branch replaced by
  strip pooling, whose context transform runs at strip resolution
  instead of full resolution.

Block internals of the published variants are under-specified, so the
absolute totals here are conventions; the cost *ordering* of the three
variants is the meaningful output.
"""

from __future__ import annotations

import dataclasses

DECODERS = ("vanilla-mlp", "lawin-aspp", "hybrid-aspp")


class FlopsError(ValueError):
    pass


@dataclasses.dataclass
class FlopsReport:
    decoder: str
    input_size: tuple
    components: dict                    # name -> (macs, adds)

    @property
    def total_macs(self) -> int:
        return sum(m for m, _ in self.components.values())

    @property
    def total_adds(self) -> int:
        return sum(a for _, a in self.components.values())

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs + self.total_adds

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def as_text(self) -> str:
        width = max(len(k) for k in self.components) + 2
        lines = [f"decoder: {self.decoder}  input: "
                 f"{self.input_size[0]}x{self.input_size[1]}",
                 f"{'component':<{width}}{'GFLOPs':>10}"]
        for name, (macs, adds) in self.components.items():
            lines.append(f"{name:<{width}}{(2 * macs + adds) / 1e9:>10.3f}")
        lines.append(f"{'total':<{width}}{self.gflops:>10.3f}")
        return "\n".join(lines)

    def as_csv(self) -> str:
        rows = ["component,macs,adds,gflops"]
        for name, (macs, adds) in self.components.items():
            rows.append(f"{name},{macs},{adds},{(2 * macs + adds) / 1e9:.6f}")
        rows.append(f"total,{self.total_macs},{self.total_adds},{self.gflops:.6f}")
        return "\n".join(rows)


def conv_macs(k, cin, cout, hout, wout, kw=None):
    return k * (kw if kw is not None else k) * cin * cout * hout * wout


def linear_macs(cin, cout, tokens):
    return cin * cout * tokens


def upsample_macs(c, hout, wout):
    return 4 * c * hout * wout


def pool_adds(c, h, w):
    return c * h * w


# full-scale reference configuration (stand-in encoder at production widths)
FULL_SCALE = dict(encoder_channels=(64, 128, 320, 512), embed=512,
                  num_classes=19, patch=8, ratios=(2, 4, 8),
                  blocks_per_stage=1)


def _encoder_components(h, w, channels, blocks_per_stage):
    comps = {}
    cin = 3
    for i, c in enumerate(channels):
        hs, ws = h // (4 * 2 ** i), w // (4 * 2 ** i)
        macs = 0
        if i == 0:
            macs += conv_macs(3, cin, c, h // 2, w // 2)
            macs += conv_macs(3, c, c, hs, ws)
        else:
            macs += conv_macs(3, cin, c, hs, ws)
        macs += blocks_per_stage * conv_macs(3, c, c, hs, ws)
        comps[f"encoder.stage{i + 1}"] = (macs, 0)
        cin = c
    return comps


def _lawin_branch(tokens, windows, embed, patch, ratio):
    d = max(embed // 4, 8)
    macs = 3 * linear_macs(embed, d, tokens)          # Q, K, V projections
    macs += 2 * windows * patch ** 4 * d              # scores + weighted sum
    macs += linear_macs(d, embed, tokens)             # output projection
    adds = tokens * ratio * ratio                     # context average pooling
    return macs, adds


def count_flops(decoder: str, height: int, width: int,
                encoder_channels=(64, 128, 320, 512), embed=512,
                num_classes=19, patch=8, ratios=(2, 4, 8),
                blocks_per_stage=1) -> FlopsReport:
    if decoder not in DECODERS:
        raise FlopsError(f"unknown decoder '{decoder}'; choose from {DECODERS}")
    c1, c2, c3, c4 = encoder_channels
    h4, w4 = height // 4, width // 4
    h8, w8 = height // 8, width // 8
    comps = dict(_encoder_components(height, width, encoder_channels,
                                     blocks_per_stage))

    if decoder == "vanilla-mlp":
        t4 = h4 * w4
        macs = 0
        for i, c in enumerate(encoder_channels):
            hs, ws = height // (4 * 2 ** i), width // (4 * 2 ** i)
            macs += linear_macs(c, embed, hs * ws)
        comps["decoder.stage_proj"] = (macs, 0)
        comps["decoder.upsample"] = (3 * upsample_macs(embed, h4, w4), 0)
        comps["decoder.fuse"] = (linear_macs(4 * embed, embed, t4), 0)
        comps["decoder.classifier"] = (linear_macs(embed, num_classes, t4), 0)
    else:
        t8 = h8 * w8
        t4 = h4 * w4
        comps["decoder.aggregate"] = (
            upsample_macs(c3, h8, w8) + upsample_macs(c4, h8, w8)
            + linear_macs(c2 + c3 + c4, embed, t8), 0)
        comps["decoder.shortcut"] = (0, 0)  # identity branch
        windows = t8 // (patch * patch)
        for r in ratios:
            comps[f"decoder.lawin_r{r}"] = _lawin_branch(t8, windows, embed,
                                                         patch, r)
        if decoder == "lawin-aspp":
            # global pool -> 1x1 conv -> broadcast, then the context map is
            # transformed at full stride-8 resolution before the gate
            macs = linear_macs(embed, embed, 1)
            macs += upsample_macs(embed, h8, w8)
            macs += linear_macs(embed, embed, t8)      # full-res transform
            macs += linear_macs(embed, embed, t8)      # gate conv
            comps["decoder.image_pool"] = (macs, pool_adds(embed, h8, w8))
        else:
            # strips are transformed at strip resolution (1-D convs, k=3),
            # broadcast-added, then gated; this is the cost saving over the
            # image-pool branch
            macs = conv_macs(3, embed, embed, h8, 1, kw=1)
            macs += conv_macs(1, embed, embed, 1, w8, kw=3)
            macs += linear_macs(embed, embed, t8)      # gate conv
            comps["decoder.strip_pool"] = (macs, 2 * pool_adds(embed, h8, w8))
        comps["decoder.fuse"] = (linear_macs(5 * embed, embed, t8)
                                 + upsample_macs(embed, h4, w4), 0)
        low = max(embed // 8, 8)
        fused = max(embed // 2, 16)
        comps["decoder.low_level"] = (
            linear_macs(c1, low, t4)
            + linear_macs(embed + low, fused, t4), 0)
        comps["decoder.classifier"] = (linear_macs(fused, num_classes, t4), 0)

    comps["decoder.final_upsample"] = (
        upsample_macs(num_classes, height, width), 0)
    return FlopsReport(decoder=decoder, input_size=(height, width),
                       components=comps)
