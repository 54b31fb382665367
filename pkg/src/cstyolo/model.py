"""Network assembly from a config dict, detection head, decode and NMS."""

import math

import numpy as np

from . import functional as F
from .blocks import CBS, ELAN, MCS, SPPCSPC, WELAN, CatConv, CBSConcat, MPConv, RepConv
from .configs import make_divisible
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Module, param
from .swin import CST
from .tensor import Tensor


class IDetect(Module):
    """Per-scale head: implicit add, 1x1 prediction conv, implicit multiply.

    Emits (B, anchors, grid_h, grid_w, 5 + nc) raw logits per scale.
    """

    def __init__(self, chs, nc, strides, input_size, rng=None):
        super().__init__()
        self.nc = nc
        self.no = nc + 5
        self.na = 3
        self.strides = tuple(strides)
        self.ia = [param(np.zeros((1, c, 1, 1))) for c in chs]
        self.m = [Conv2d(c, self.na * self.no, 1, bias=True, rng=rng) for c in chs]
        self.im = [param(np.ones((1, self.na * self.no, 1, 1))) for _ in chs]
        for conv, s in zip(self.m, strides):
            b = conv.b.data.reshape(self.na, self.no)
            b[:, 4] += math.log(8.0 / (input_size / s) ** 2)
            if nc > 1:
                b[:, 5:] += math.log(0.6 / (nc - 0.99))

    def forward(self, feats):
        outs = []
        for i, f in enumerate(feats):
            y = self.m[i](f + self.ia[i]) * self.im[i]
            b, _, gh, gw = y.shape
            outs.append(y.reshape(b, self.na, self.no, gh, gw).transpose(0, 1, 3, 4, 2))
        return outs


_SPATIAL = {"cbs_concat": 2, "mpconv": 2, "catconv": 2}


class DetectionModel(Module):
    """Executes a config's layer DAG; output is the 3-scale raw head."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        self.nc = cfg["nc"]
        self.input_size = cfg["input_size"]
        self.strides = tuple(cfg["strides"])
        self.anchors = np.asarray(cfg["anchors"], dtype=np.float32)  # (3, 3, 2) pixels
        if self.anchors.shape != (3, 3, 2):
            raise ConfigError(f"anchor table must be 3 scales x 3 anchors x 2, got {self.anchors.shape}")
        rng = np.random.default_rng(seed)
        wm = cfg.get("width_multiple", 1.0)

        def scale(c):
            return c if wm == 1.0 else make_divisible(c * wm)

        layers = cfg["layers"]
        self.blocks = []
        self._froms = []
        ch = []
        stride = []
        for i, spec in enumerate(layers):
            frm = spec.get("from", -1)
            if i == 0:
                if frm != -1:
                    raise ConfigError("layer 0 must read the network input (from = -1)")
                self._froms.append(-1)
                refs = []
                c1, s1 = 3, 1
            else:
                refs = frm if isinstance(frm, list) else [frm]
                refs = [r if r >= 0 else i + r for r in refs]
                if any(r < 0 or r >= i for r in refs):
                    raise ConfigError(f"layer {i} ({spec['type']}) references {frm}, which does not precede it")
                self._froms.append(refs if isinstance(frm, list) else refs[0])
                c1 = ch[refs[0]]
                s1 = stride[refs[0]]
            kind = spec["type"]
            if kind == "cbs":
                block = CBS(c1, scale(spec["c2"]), spec.get("k", 1), spec.get("s", 1), rng=rng)
                s1 *= spec.get("s", 1)
            elif kind == "elan":
                block = ELAN(c1, scale(spec["c_mid1"]), scale(spec["c_mid2"]), scale(spec["c2"]), rng=rng)
            elif kind == "welan":
                block = WELAN(
                    c1, scale(spec["c_mid1"]), scale(spec["c_mid2"]), scale(spec["c2"]),
                    variant=spec.get("variant", 1), rng=rng,
                )
            elif kind == "mpconv":
                block = MPConv(c1, scale(spec["c2"]), rng=rng)
                s1 *= 2
            elif kind == "cbs_concat":
                block = CBSConcat(c1, scale(spec["c2"]), rng=rng)
                s1 *= 2
            elif kind == "catconv":
                block = CatConv(c1, scale(spec["c_a"]), scale(spec["c_b"]), rng=rng)
                s1 *= 2
            elif kind == "sppcspc":
                block = SPPCSPC(c1, scale(spec["c2"]), rng=rng)
            elif kind == "cst":
                block = CST(c1, scale(spec["c2"]), m=spec.get("window", 4), heads=spec.get("heads", 4), rng=rng)
            elif kind == "mcs":
                block = MCS(c1, rng=rng)
            elif kind == "upsample":
                factor = spec.get("factor", 2)
                block = ("upsample", factor)
                s1 = s1 // factor
            elif kind == "concat":
                strides_in = {stride[r] for r in refs}
                if len(strides_in) != 1:
                    raise ConfigError(f"layer {i} concatenates mismatched strides {sorted(strides_in)}")
                block = ("concat",)
                c1 = sum(ch[r] for r in refs)
            elif kind == "repconv":
                block = RepConv(c1, scale(spec["c2"]), rng=rng)
            elif kind == "idetect":
                if len(refs) != 3:
                    raise ConfigError("idetect needs exactly three scale inputs")
                got = tuple(stride[r] for r in refs)
                if got != self.strides:
                    raise ConfigError(f"head strides {got} do not match configured {self.strides}")
                block = IDetect([ch[r] for r in refs], self.nc, self.strides, self.input_size, rng=rng)
            else:
                raise ConfigError(f"unknown layer type {kind!r}")
            self.blocks.append(block)
            ch.append(getattr(block, "c2", c1))
            stride.append(s1)
        if not isinstance(self.blocks[-1], IDetect):
            raise ConfigError("last layer must be the detection head")
        self.out_channels = ch
        # indices whose outputs are consumed by a later layer other than the next
        needed = set()
        for i, frm in enumerate(self._froms):
            for r in frm if isinstance(frm, list) else [frm]:
                if r != i - 1:
                    needed.add(r)
        self._keep = needed

    def forward(self, x):
        saved = {}
        prev = x
        for i, (block, frm) in enumerate(zip(self.blocks, self._froms)):
            if isinstance(frm, list):
                inputs = [saved[r] if r != i - 1 else prev for r in frm]
            else:
                inputs = saved[frm] if frm != i - 1 else prev
            if isinstance(block, IDetect):
                out = block(inputs)
            elif isinstance(block, tuple):
                if block[0] == "upsample":
                    _, _, h, w = inputs.shape
                    out = F.upsample_nearest(inputs, h * block[1], w * block[1])
                else:
                    out = F.concat(inputs, axis=1)
            else:
                out = block(inputs)
            if i in self._keep:
                saved[i] = out
            prev = out
        return prev

    def fuse(self):
        """Fold every RepConv into its single-conv inference form."""
        for m in self.modules():
            if isinstance(m, RepConv):
                m.fuse()
        return self

    def decay_parameters(self):
        """Conv kernels (weight-decay group) vs everything else."""
        decay, rest = [], []
        for mod in self.modules():
            if isinstance(mod, Conv2d):
                decay.append(mod.w)
                if mod.b is not None:
                    rest.append(mod.b)
        ids = {id(p) for p in decay} | {id(p) for p in rest}
        for _, p in self.named_parameters():
            if id(p) not in ids:
                rest.append(p)
        return decay, rest


def build_network(cfg, seed=0):
    return DetectionModel(cfg, seed=seed)


# -- decoding and suppression ------------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_boxes(raws, anchors, strides, input_size, conf_thresh=0.001, topk=1000):
    """Raw head logits -> per-image (n, 6) arrays [x1 y1 x2 y2 conf cls].

    Centers are (2*sig - 0.5 + cell) * stride, sizes (2*sig)^2 * anchor, and
    confidence sig(obj) * sig(best class); boxes are clipped to the image.
    """
    batch = raws[0].shape[0] if hasattr(raws[0], "shape") else raws[0].data.shape[0]
    per_image = [[] for _ in range(batch)]
    for raw, anc, stride in zip(raws, np.asarray(anchors, dtype=np.float32), strides):
        data = raw.data if isinstance(raw, Tensor) else raw
        b, na, gh, gw, no = data.shape
        sig = _sigmoid(data.astype(np.float32))
        gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        cx = (sig[..., 0] * 2.0 - 0.5 + gx) * stride
        cy = (sig[..., 1] * 2.0 - 0.5 + gy) * stride
        pw = (sig[..., 2] * 2.0) ** 2 * anc[:, 0].reshape(1, na, 1, 1)
        ph = (sig[..., 3] * 2.0) ** 2 * anc[:, 1].reshape(1, na, 1, 1)
        cls_conf = sig[..., 5:]
        best_cls = cls_conf.argmax(-1)
        conf = sig[..., 4] * np.take_along_axis(cls_conf, best_cls[..., None], -1)[..., 0]
        for img in range(b):
            keep = conf[img] > conf_thresh
            if not keep.any():
                continue
            boxes = np.stack(
                [
                    cx[img][keep] - pw[img][keep] / 2,
                    cy[img][keep] - ph[img][keep] / 2,
                    cx[img][keep] + pw[img][keep] / 2,
                    cy[img][keep] + ph[img][keep] / 2,
                ],
                axis=1,
            )
            np.clip(boxes, 0, input_size, out=boxes)
            rows = np.concatenate(
                [boxes, conf[img][keep][:, None], best_cls[img][keep][:, None].astype(np.float32)], axis=1
            )
            per_image[img].append(rows)
    out = []
    for rows in per_image:
        if rows:
            arr = np.concatenate(rows, axis=0)
            arr = arr[(arr[:, 2] > arr[:, 0]) & (arr[:, 3] > arr[:, 1])]
            if len(arr) > topk:
                arr = arr[np.argsort(-arr[:, 4], kind="stable")[:topk]]
        else:
            arr = np.zeros((0, 6), dtype=np.float32)
        out.append(arr)
    return out


def _iou_against(box, boxes):
    x1 = np.maximum(box[0], boxes[:, 0])
    y1 = np.maximum(box[1], boxes[:, 1])
    x2 = np.minimum(box[2], boxes[:, 2])
    y2 = np.minimum(box[3], boxes[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (area + areas - inter)


def nms_arrays(dets, iou_thresh=0.45, conf_thresh=0.001):
    """Greedy per-class suppression on an (n, 6) array; returns kept rows.

    Detections below ``conf_thresh`` are dropped first; survivors are
    processed in descending confidence (ties keep the earlier row).
    """
    dets = dets[dets[:, 4] >= conf_thresh]
    if len(dets) == 0:
        return dets
    order = np.argsort(-dets[:, 4], kind="stable")
    dets = dets[order]
    keep = []
    alive = np.ones(len(dets), dtype=bool)
    for i in range(len(dets)):
        if not alive[i]:
            continue
        keep.append(i)
        rest = alive.copy()
        rest[: i + 1] = False
        same = rest & (dets[:, 5] == dets[i, 5])
        if same.any():
            ious = _iou_against(dets[i, :4], dets[same, :4])
            idx = np.flatnonzero(same)
            alive[idx[ious >= iou_thresh]] = False
    return dets[keep]
