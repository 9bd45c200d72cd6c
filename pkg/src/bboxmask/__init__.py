"""Box-supervised instance embedding losses for multi-person pose estimation.

Verified analytic gradients, heatmap codecs, OKS evaluation and a synthetic
optimization harness.
"""

from .aux_losses import FocalParams, ciou_loss, heatmap_focal_loss, masked_bbox_loss, total_loss
from .core import BBox, BBoxMaskError, Grid, Instance, KeypointSet, Scene, box_coords, box_iou, grid_new
from .disentangle import ConstantInit, OptConfig, RandomInit, TrajectoryLog, optimize_embedding, similarity_snapshot
from .embedding import (
    EmbeddingBatch,
    EmbParams,
    LossForm,
    LossResult,
    Metric,
    bbox_mask_loss,
    contrastive_variant,
    distance,
    embedding_loss,
    normalize_embeddings,
    pull_in,
    push_inst,
    push_out,
    sample_instance_embeddings,
    similarity_map,
)
from .evaluate import EvalReport, OksParams, Prediction, evaluate, match_and_score, oks
from .gradcheck import FDConfig, FDReport, check_gradient, gradient_suite
from .heatmap import (
    DecodeParams,
    EncodeParams,
    decode_centers,
    decode_keypoints,
    encode_bbox_targets,
    encode_center_map,
    encode_keypoint_maps,
    write_pgm,
)
from .synth import SynthConfig, generate

__version__ = "0.1.0"
