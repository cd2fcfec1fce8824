"""
The full detector: head(CB(MIRB(DCB(image)))), plus decoding of the raw head map.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from brain.blocks import conv
from brain.config import ModelConfig
from brain.dcl import DcbParams, build_dcb, dcb_forward
from brain.mab import MirbParams, build_mirb, mirb_forward
from brain.params import ConvParams, ParamGroup, count_parameters, init_conv
from brain.tvconv import CbParams, build_cb, cb_forward
from data.models import Detection
from errors import ConfigError, ShapeError
from evaluation.metrics import iou
from tensor import Mode, Tensor

logger = logging.getLogger(__name__)

OBJECTNESS_BIAS = -4.0


@dataclass
class DtNetModel(ParamGroup):
    dcb: DcbParams
    mirb: MirbParams
    cb: CbParams
    head: ConvParams
    config: Optional[ModelConfig] = None


def build_model(cfg: ModelConfig, seed: int = 0) -> DtNetModel:
    """
    Construct every parameter deterministically from the seed.

    Args:
        cfg: Topology and ablation variant
        seed: Seed for the initializer RNG

    Returns:
        DtNetModel with float32 parameters
    """
    rng = np.random.default_rng(seed)
    w0, w1, w2 = cfg.widths
    norm_opts = dict(eps=cfg.eps, momentum=cfg.bn_momentum)
    variant = cfg.variant

    dcb = build_dcb(rng, w0, use_dcl=variant.uses_dcl, gate=cfg.dcl_gate, **norm_opts)
    mirb = build_mirb(
        rng, w0, w1,
        depth=cfg.mab_depth if variant.uses_mab else 0,
        heads=cfg.mab_heads,
        window=cfg.mab_window,
        alpha=cfg.mab_alpha,
        mlp_ratio=cfg.mab_mlp_ratio,
        reduction=cfg.mab_reduction,
        rel_pos_bias=cfg.mab_rel_pos_bias,
        **norm_opts,
    )
    grid = cfg.grid_size
    cb = build_cb(
        rng, w1, w2, (grid, grid),
        use_tvconv=variant.uses_tvconv,
        affine_channels=cfg.tv_affine_channels,
        hidden=cfg.tv_hidden,
        kernel=cfg.tv_kernel,
        **norm_opts,
    )
    head = init_conv(rng, w2, cfg.head_channels, (1, 1))
    head.bias.data.reshape(cfg.num_anchors, 5 + cfg.num_classes)[:, 4] = OBJECTNESS_BIAS

    model = DtNetModel(dcb=dcb, mirb=mirb, cb=cb, head=head, config=cfg)
    logger.info("built %s model: %d parameters", variant.value, count_parameters(model))
    return model


def dtnet_forward(i: Tensor, m: DtNetModel, mode: Mode = Mode.TRAIN) -> Tensor:
    """
    Raw head map (N, A*(5+classes), H/32, W/32).
    Per anchor and cell the channels are (tx, ty, tw, th, obj_logit, class_logits...).
    """
    if i.data.ndim != 4 or i.dims[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) images, got {i.dims}")
    stride = m.config.head_stride
    if i.dims[2] % stride or i.dims[3] % stride:
        raise ShapeError(f"image extent {i.dims[2:]} not divisible by {stride}")
    o_dcb = dcb_forward(i, m.dcb, mode)
    o_mirb = mirb_forward(o_dcb, m.mirb, mode)
    o_cb = cb_forward(o_mirb, m.cb, mode)
    return conv(o_cb, m.head)


# ==================== DECODING ====================

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def split_head(raw: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(N, A*(5+K), Gh, Gw) -> (N, A, 5+K, Gh, Gw)"""
    n, c, gh, gw = raw.shape
    if c != cfg.head_channels:
        raise ShapeError(f"head map has {c} channels, config expects {cfg.head_channels}")
    return raw.reshape(n, cfg.num_anchors, 5 + cfg.num_classes, gh, gw)


def encode_box(box: Sequence[float], anchor: Tuple[float, float], stride: int) -> Tuple[int, int, np.ndarray]:
    """
    Invert the decode rule for one box.

    Returns:
        (cell_x, cell_y, [tx, ty, tw, th]) such that decoding reproduces the box
    """
    cx, cy, w, h = box
    gx, gy = int(cx // stride), int(cy // stride)
    ox = (cx / stride - gx + 0.5) / 2.0
    oy = (cy / stride - gy + 0.5) / 2.0
    sw = np.sqrt(w / anchor[0]) / 2.0
    sh = np.sqrt(h / anchor[1]) / 2.0
    if not all(0.0 < v < 1.0 for v in (ox, oy, sw, sh)):
        raise ConfigError(f"box {tuple(box)} is not representable with anchor {anchor}")
    return gx, gy, np.array([_logit(ox), _logit(oy), _logit(sw), _logit(sh)])


def nms(dets: List[Detection], iou_thresh: float) -> List[Detection]:
    """Greedy per-class suppression of boxes overlapping a higher-scored one by more than iou_thresh."""
    kept: List[Detection] = []
    for det in sorted(dets, key=lambda d: -d.score):
        if all(k.class_id != det.class_id or iou(k.box, det.box) <= iou_thresh for k in kept):
            kept.append(det)
    return kept


def decode_detections(raw: Tensor, conf_thresh: float, nms_iou: float, cfg: ModelConfig,
                      image: int = 0) -> List[Detection]:
    """
    Decode one image of a raw head map into scored, suppressed detections.

    Args:
        raw: Head map (N, A*(5+K), Gh, Gw)
        conf_thresh: Minimum score = sigmoid(obj) * max_k sigmoid(cls_k)
        nms_iou: Per-class NMS overlap threshold
        cfg: Model configuration (anchors, stride, classes)
        image: Batch index to decode

    Returns:
        Detections sorted by descending score

    Raises:
        ConfigError: If a threshold is outside [0, 1]
    """
    if not (0.0 <= conf_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ConfigError(f"thresholds must lie in [0, 1], got conf={conf_thresh} nms={nms_iou}")
    head = split_head(np.asarray(raw.data, dtype=np.float64), cfg)[image]
    stride = cfg.head_stride
    anchors = np.asarray(cfg.anchors, dtype=np.float64)
    _, gh, gw = head.shape[0], head.shape[2], head.shape[3]

    p = _sigmoid(head)
    cls_prob = p[:, 5:]
    class_id = cls_prob.argmax(axis=1)
    score = p[:, 4] * cls_prob.max(axis=1)

    gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    cx = (p[:, 0] * 2.0 - 0.5 + gx) * stride
    cy = (p[:, 1] * 2.0 - 0.5 + gy) * stride
    w = anchors[:, 0, None, None] * (p[:, 2] * 2.0) ** 2
    h = anchors[:, 1, None, None] * (p[:, 3] * 2.0) ** 2

    keep = np.argwhere((score >= conf_thresh) & (w > 0) & (h > 0))
    candidates = [
        Detection(cx=float(cx[a, y, x]), cy=float(cy[a, y, x]), w=float(w[a, y, x]), h=float(h[a, y, x]),
                  class_id=int(class_id[a, y, x]), score=float(score[a, y, x]))
        for a, y, x in keep
    ]
    return nms(candidates, nms_iou)


def decode_batch(raw: Tensor, conf_thresh: float, nms_iou: float, cfg: ModelConfig) -> List[List[Detection]]:
    return [decode_detections(raw, conf_thresh, nms_iou, cfg, image=b) for b in range(raw.dims[0])]
