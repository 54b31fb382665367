"""YOLOv7-style block library plus the CST-YOLO fusion blocks.

Channel arguments follow the yolo convention: c1 in, c2 out, c_ hidden.
All blocks are spatial-preserving unless they carry an explicit stride-2
branch (MPConv / CBSConcat / CatConv halve H and W).
"""

import numpy as np

from . import functional as F
from .errors import ContractError, ShapeError
from .nn import BatchNorm2d, Conv2d, Module, param
from .tensor import Tensor


class CBS(Module):
    """Conv -> BatchNorm -> SiLU."""

    def __init__(self, c1, c2, k=1, s=1, rng=None, act="silu"):
        super().__init__()
        self.conv = Conv2d(c1, c2, k, s, rng=rng)
        self.bn = BatchNorm2d(c2)
        self.act = act
        self.c2 = c2

    def forward(self, x):
        y = self.bn(self.conv(x))
        return F.activation(y, self.act) if self.act else y


class ELAN(Module):
    """Layer aggregation: two parallel 1x1s, a four-deep 3x3 chain, four taps.

    Taps are concatenated as [chain+4, chain+2, chain root 1x1, bypass 1x1]
    and merged by a final 1x1. Backbone sites use c_mid2 == c_mid1; neck
    sites halve the chain width.
    """

    def __init__(self, c1, c_mid1, c_mid2, c2, rng=None):
        super().__init__()
        self.cv1 = CBS(c1, c_mid1, 1, rng=rng)
        self.cv2 = CBS(c1, c_mid1, 1, rng=rng)
        self.m = [
            CBS(c_mid1, c_mid2, 3, rng=rng),
            CBS(c_mid2, c_mid2, 3, rng=rng),
            CBS(c_mid2, c_mid2, 3, rng=rng),
            CBS(c_mid2, c_mid2, 3, rng=rng),
        ]
        self.cv_out = CBS(2 * c_mid1 + 2 * c_mid2, c2, 1, rng=rng)
        self.c2 = c2

    def taps(self, x):
        a = self.cv1(x)
        b = self.cv2(x)
        d2 = self.m[1](self.m[0](b))
        d4 = self.m[3](self.m[2](d2))
        return [d4, d2, b, a]

    def forward(self, x):
        return self.cv_out(F.concat(self.taps(x), axis=1))


def welan_normalize(raw, xi=1e-4):
    """Fusion-weight normalization: w_i = relu(r_i) / (sum relu(r) + xi)."""
    if xi <= 0:
        raise ContractError(f"xi must be positive, got {xi}")
    r = raw.relu()
    return r / (r.sum() + xi)


class WELANWeights(Module):
    """Learnable per-tap fusion weights with guarded normalization."""

    def __init__(self, n, xi=1e-4):
        super().__init__()
        self.raw = param(np.ones(n))
        self.xi = xi

    def normalized(self):
        return welan_normalize(self.raw, self.xi)


class WELAN(ELAN):
    """ELAN whose taps are scaled by normalized learnable weights.

    Variant 1 weights all four taps; variant 2 weights only the two
    chain taps and passes both 1x1 taps through unscaled.
    """

    def __init__(self, c1, c_mid1, c_mid2, c2, variant=1, rng=None):
        super().__init__(c1, c_mid1, c_mid2, c2, rng=rng)
        if variant not in (1, 2):
            raise ContractError(f"variant must be 1 or 2, got {variant}")
        self.variant = variant
        self.weights = WELANWeights(4 if variant == 1 else 2)

    def forward(self, x):
        taps = self.taps(x)
        w = self.weights.normalized()
        n_weighted = 4 if self.variant == 1 else 2
        scaled = [t * w[i].reshape(1, 1, 1, 1) for i, t in enumerate(taps[:n_weighted])]
        return self.cv_out(F.concat(scaled + taps[n_weighted:], axis=1))


class MPConv(Module):
    """YOLOv7 downsample: (maxpool 2x2 + 1x1) || (1x1 + 3x3 s2), concatenated."""

    def __init__(self, c1, c2, rng=None):
        super().__init__()
        c_ = c2 // 2
        self.cv1 = CBS(c1, c_, 1, rng=rng)
        self.cv2 = CBS(c1, c_, 1, rng=rng)
        self.cv3 = CBS(c_, c_, 3, 2, rng=rng)
        self.c2 = c2

    def forward(self, x):
        a = self.cv1(F.max_pool2d(x, 2, 2))
        b = self.cv3(self.cv2(x))
        return F.concat([a, b], axis=1)


class CBSConcat(Module):
    """MPConv with the max-pool branch replaced by a stride-2 CBS."""

    def __init__(self, c1, c2, rng=None):
        super().__init__()
        c_ = c2 // 2
        self.cv1 = CBS(c1, c_, 3, 2, rng=rng)
        self.cv2 = CBS(c1, c_, 1, rng=rng)
        self.cv3 = CBS(c_, c_, 3, 2, rng=rng)
        self.c2 = c2

    def forward(self, x):
        return F.concat([self.cv1(x), self.cv3(self.cv2(x))], axis=1)


class CatConv(Module):
    """Neck downsample with a widened strided branch.

    Branch a: 1x1 then 3x3 stride 2 at the baseline width. Branch b: 3x3
    stride 2 at twice the baseline width, so the block emits 3x the
    baseline branch width instead of MPConv's 2x.
    """

    def __init__(self, c1, c_a, c_b, rng=None):
        super().__init__()
        self.cv1 = CBS(c1, c_a, 1, rng=rng)
        self.cv2 = CBS(c_a, c_a, 3, 2, rng=rng)
        self.cv3 = CBS(c1, c_b, 3, 2, rng=rng)
        self.c2 = c_a + c_b

    def forward(self, x):
        return F.concat([self.cv2(self.cv1(x)), self.cv3(x)], axis=1)


class SPPCSPC(Module):
    """Spatial pyramid pooling inside a cross-stage-partial split."""

    def __init__(self, c1, c2, k=(5, 9, 13), rng=None):
        super().__init__()
        if any(x % 2 == 0 for x in k):
            raise ContractError(f"pool kernels must be odd for same-padding, got {k}")
        c_ = c2  # reference plan: hidden width equals the output width
        self.k = tuple(k)
        self.cv1 = CBS(c1, c_, 1, rng=rng)
        self.cv2 = CBS(c1, c_, 1, rng=rng)
        self.cv3 = CBS(c_, c_, 3, rng=rng)
        self.cv4 = CBS(c_, c_, 1, rng=rng)
        self.cv5 = CBS(4 * c_, c_, 1, rng=rng)
        self.cv6 = CBS(c_, c_, 3, rng=rng)
        self.cv7 = CBS(2 * c_, c2, 1, rng=rng)
        self.c2 = c2

    def forward(self, x):
        x1 = self.cv4(self.cv3(self.cv1(x)))
        pools = [F.max_pool2d(x1, k, 1, k // 2) for k in self.k]
        y1 = self.cv6(self.cv5(F.concat([x1] + pools, axis=1)))
        y2 = self.cv2(x)
        return self.cv7(F.concat([y1, y2], axis=1))


class RepConv(Module):
    """Reparameterizable conv: 3x3+BN and 1x1+BN branches, SiLU after the sum.

    ``fuse()`` folds each BN into its conv (eval-mode statistics), pads the
    1x1 kernel to the center of a 3x3, and sums the branches into a single
    biased conv whose eval-mode output matches the two-branch form.
    """

    def __init__(self, c1, c2, s=1, identity=False, rng=None):
        super().__init__()
        if identity and (c1 != c2 or s != 1):
            raise ContractError("identity branch requires c1 == c2 and stride 1")
        self.conv3 = Conv2d(c1, c2, 3, s, rng=rng)
        self.bn3 = BatchNorm2d(c2)
        self.conv1 = Conv2d(c1, c2, 1, s, rng=rng)
        self.bn1 = BatchNorm2d(c2)
        self.bn_id = BatchNorm2d(c2) if identity else None
        self.fused = None
        self.c1 = c1
        self.c2 = c2
        self.s = s

    def forward(self, x):
        if self.fused is not None:
            return F.silu(self.fused(x))
        y = self.bn3(self.conv3(x)) + self.bn1(self.conv1(x))
        if self.bn_id is not None:
            y = y + self.bn_id(x)
        return F.silu(y)

    @staticmethod
    def _fold(conv, bn):
        scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
        w = conv.w.data * scale.reshape(-1, 1, 1, 1)
        b = bn.beta.data - bn.running_mean * scale
        return w, b

    def fuse(self):
        if self.bn_id is not None:
            raise ContractError("cannot fuse a RepConv carrying an identity branch")
        if self.fused is not None:
            return self
        w3, b3 = self._fold(self.conv3, self.bn3)
        w1, b1 = self._fold(self.conv1, self.bn1)
        w1 = np.pad(w1, ((0, 0), (0, 0), (1, 1), (1, 1)))
        fused = Conv2d(self.c1, self.c2, 3, self.s, bias=True)
        fused.w = param(w3 + w1)
        fused.b = param(b3 + b1)
        self.fused = fused
        self.conv3 = self.bn3 = self.conv1 = self.bn1 = None
        return self


class MCS(Module):
    """Multiscale pooling with sigmoid channel gating and 4-way split-sum.

    Pipeline: adaptive-average to four pyramid sizes, 1x1-project each to a
    fixed 256 channels, upsample back and concatenate (1024 channels), gate
    channels by sigmoid(1x1(global average)), split the gated map in four
    and sum, 1x1 back to the input width, add the input residually.
    """

    def __init__(self, c, pool_sizes=(1, 2, 3, 6), mid=256, rng=None):
        super().__init__()
        self.pool_sizes = tuple(pool_sizes)
        self.mid = mid
        self.levels = [Conv2d(c, mid, 1, bias=True, rng=rng) for _ in self.pool_sizes]
        wide = mid * len(self.pool_sizes)
        self.gate = Conv2d(wide, wide, 1, bias=True, rng=rng)
        self.cv_out = Conv2d(mid, c, 1, bias=True, rng=rng)
        self.c2 = c

    def forward(self, x):
        b, c, h, w = x.shape
        if h < max(self.pool_sizes) or w < max(self.pool_sizes):
            raise ShapeError(f"input {h}x{w} smaller than pyramid size {max(self.pool_sizes)}")
        maps = []
        for size, conv in zip(self.pool_sizes, self.levels):
            level = conv(F.adaptive_avg_pool2d(x, size, size))
            maps.append(F.upsample_nearest(level, h, w))
        wide = F.concat(maps, axis=1)
        gate = F.sigmoid(self.gate(F.adaptive_avg_pool2d(wide, 1, 1)))
        gated = wide * gate
        parts = F.split(gated, len(self.pool_sizes), axis=1)
        merged = parts[0]
        for p in parts[1:]:
            merged = merged + p
        return x + self.cv_out(merged)
