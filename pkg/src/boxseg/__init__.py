"""boxseg: weakly supervised volumetric segmentation from bounding boxes.

Pipeline: synthesize boxes from dense labels (or bring your own), distill
them into trinary pseudo masks by per-slice intensity clustering plus
morphological cleanup, then iteratively train a 3D attention U-Net whose
training labels are blended with its own predictions by an exponential
moving average each epoch.
"""

__version__ = "0.1.0"

from .volume import (
    SliceBox,
    SliceBoxSet,
    SoftLabelVolume,
    Volume,
    VolumeShape,
    binarize,
    connected_components,
    load_box_set,
    load_volume,
    save_box_set,
    save_volume,
)
from .preprocess import (
    ORGAN_PROFILES,
    OrganProfile,
    WindowNormalizer,
    embed_slab,
    extract_organ_slab,
    make_bounding_boxes,
    resize_volume,
    window_normalize,
)
from .pseudomask import (
    KMeansResult,
    PseudoMaskGenerator,
    PseudoMaskParams,
    fill_holes,
    fuse_masks,
    generate_pseudo_mask,
    kmeans_slice,
    mask_outside_boxes,
    morphological_closing,
    remove_small_components,
    select_foreground,
)
from .network import ArchConfig, BaUnet
from .training import (
    Adam,
    BaUnetSegmenter,
    Sgd,
    TrainConfig,
    TrainResult,
    dice_loss,
    ema_update,
    infer,
    load_checkpoint,
    lr_schedule,
    make_folds,
    save_checkpoint,
    train,
)
from .metrics import CaseScore, aggregate_fold, confusion_counts, score_case, write_score_csv
from .phantom import PhantomSpec, generate_corpus, generate_phantom

__all__ = [
    "__version__",
    "SliceBox", "SliceBoxSet", "SoftLabelVolume", "Volume", "VolumeShape",
    "binarize", "connected_components", "load_box_set", "load_volume",
    "save_box_set", "save_volume",
    "ORGAN_PROFILES", "OrganProfile", "WindowNormalizer", "embed_slab",
    "extract_organ_slab", "make_bounding_boxes", "resize_volume", "window_normalize",
    "KMeansResult", "PseudoMaskGenerator", "PseudoMaskParams", "fill_holes",
    "fuse_masks", "generate_pseudo_mask", "kmeans_slice", "mask_outside_boxes",
    "morphological_closing", "remove_small_components", "select_foreground",
    "ArchConfig", "BaUnet",
    "Adam", "BaUnetSegmenter", "Sgd", "TrainConfig", "TrainResult", "dice_loss",
    "ema_update", "infer", "load_checkpoint", "lr_schedule", "make_folds",
    "save_checkpoint", "train",
    "CaseScore", "aggregate_fold", "confusion_counts", "score_case", "write_score_csv",
    "PhantomSpec", "generate_corpus", "generate_phantom",
]
