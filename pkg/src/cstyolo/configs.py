"""Architecture factories: CST-YOLO, the YOLOv7 baseline, and the ablations.

A config is a plain JSON-serializable dict; layer entries carry base
channel widths which the builder scales by ``width_multiple``. Layer
``from`` references are absolute indices (-1 = previous), computed here so
every variant stays internally consistent.
"""

import math

from .errors import ConfigError

# (w, h) anchor pixels per scale at a 640 reference input.
V7_ANCHORS_640 = (
    ((12, 16), (19, 36), (40, 28)),
    ((36, 75), (76, 55), (72, 146)),
    ((142, 110), (192, 243), (459, 401)),
)

STRIDES = (8, 16, 32)

ARCH_NAMES = (
    "cst-yolo",
    "yolov7-baseline",
    "w/o-cst",
    "w/o-welan",
    "w/o-mcs",
    "w/-maxpool",
)


def make_divisible(v, divisor=8):
    return max(divisor, int(math.ceil(v / divisor)) * divisor)


def scaled_anchors(input_size):
    s = input_size / 640.0
    return [[(round(w * s, 2), round(h * s, 2)) for (w, h) in level] for level in V7_ANCHORS_640]


def _layers(cst, welan, mcs, strided_down, window, heads):
    layers = []

    def add(entry, frm=-1):
        entry.setdefault("from", frm)
        layers.append(entry)
        return len(layers) - 1

    def cbs(c2, k, s, frm=-1):
        return add({"type": "cbs", "c2": c2, "k": k, "s": s}, frm)

    def elan(c_mid1, c_mid2, c2, variant, frm=-1):
        if welan:
            return add({"type": "welan", "c_mid1": c_mid1, "c_mid2": c_mid2, "c2": c2, "variant": variant}, frm)
        return add({"type": "elan", "c_mid1": c_mid1, "c_mid2": c_mid2, "c2": c2}, frm)

    def down_backbone(c2, frm=-1):
        kind = "cbs_concat" if strided_down else "mpconv"
        return add({"type": kind, "c2": c2}, frm)

    def down_neck(c_base, frm=-1):
        if strided_down:
            return add({"type": "catconv", "c_a": c_base, "c_b": 2 * c_base}, frm)
        return add({"type": "mpconv", "c2": 2 * c_base}, frm)

    # backbone
    cbs(32, 3, 1)
    cbs(64, 3, 2)
    cbs(64, 3, 1)
    cbs(128, 3, 2)
    elan(64, 64, 256, variant=1)
    down_backbone(256)
    b3 = elan(128, 128, 512, variant=1)
    down_backbone(512)
    b4 = elan(256, 256, 1024, variant=1)
    down_backbone(1024)
    b5 = elan(256, 256, 1024, variant=1)
    if cst:
        b5 = add({"type": "cst", "c2": 1024, "window": window, "heads": heads})

    # neck, top-down
    n3 = add({"type": "sppcspc", "c2": 512})
    cbs(256, 1, 1)
    add({"type": "upsample", "factor": 2})
    r4 = cbs(256, 1, 1, frm=b4)
    add({"type": "concat", "from": [r4, r4 - 1]})
    n2 = elan(256, 128, 256, variant=2)
    cbs(128, 1, 1)
    add({"type": "upsample", "factor": 2})
    r3 = cbs(128, 1, 1, frm=b3)
    add({"type": "concat", "from": [r3, r3 - 1]})
    p3 = elan(128, 64, 128, variant=2)

    # neck, bottom-up
    d4 = down_neck(128, frm=p3)
    add({"type": "concat", "from": [d4, n2]})
    p4 = elan(256, 128, 256, variant=2)
    d5 = down_neck(256, frm=p4)
    add({"type": "concat", "from": [d5, n3]})
    p5 = elan(512, 256, 512, variant=2)

    head3 = p3
    if mcs:
        head3 = add({"type": "mcs"}, frm=p3)
    r1 = add({"type": "repconv", "c2": 256}, frm=head3)
    r2 = add({"type": "repconv", "c2": 512}, frm=p4)
    r3h = add({"type": "repconv", "c2": 1024}, frm=p5)
    add({"type": "idetect", "from": [r1, r2, r3h]})
    return layers


def arch_flags(arch):
    if arch.startswith("ablation:"):
        arch = arch[len("ablation:") :]
    if arch not in ARCH_NAMES:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCH_NAMES}")
    flags = {"cst": True, "welan": True, "mcs": True, "strided_down": True}
    if arch == "yolov7-baseline":
        flags = {"cst": False, "welan": False, "mcs": False, "strided_down": False}
    elif arch == "w/o-cst":
        flags["cst"] = False
    elif arch == "w/o-welan":
        flags["welan"] = False
    elif arch == "w/o-mcs":
        flags["mcs"] = False
    elif arch == "w/-maxpool":
        flags["strided_down"] = False
    return arch, flags


def build_config(
    arch="cst-yolo",
    nc=3,
    input_size=640,
    width_multiple=1.0,
    class_names=None,
    anchors=None,
    window=4,
    heads=4,
):
    """Assemble a NetworkConfig dict for one architecture variant."""
    if input_size % 32:
        raise ConfigError(f"input size must be a multiple of 32, got {input_size}")
    arch, flags = arch_flags(arch)
    if class_names is None:
        class_names = ["WBC", "RBC", "Platelets"][:nc] if nc <= 3 else [f"class{i}" for i in range(nc)]
    if len(class_names) != nc:
        raise ConfigError(f"{nc} classes but {len(class_names)} class names")
    return {
        "name": arch,
        "nc": nc,
        "class_names": list(class_names),
        "input_size": input_size,
        "width_multiple": width_multiple,
        "strides": list(STRIDES),
        "anchors": anchors if anchors is not None else scaled_anchors(input_size),
        "layers": _layers(window=window, heads=heads, **flags),
    }
