"""Model sub-package: numerics, RBM family, correlation and multi-task networks."""

from .corrnet import CorrNet, CorrObjective, build_corrnet, corrnet_loss, corrnet_train
from .dbn import DbnModel, dbn_forward, train_dbn
from .fusion import JointFusionRbm, PatchGroup, average_fuse, fuse, train_fusion
from .modality import Modality
from .multitask import StageTwoModel, build_stage_two, contrastive_loss, multitask_train
from .numeric import SeededRng, finite_diff_grad
from .rbm import RbmParams, VisibleKind, cd_k_update, train_rbm

__all__ = [
    "CorrNet",
    "CorrObjective",
    "DbnModel",
    "JointFusionRbm",
    "Modality",
    "PatchGroup",
    "RbmParams",
    "SeededRng",
    "StageTwoModel",
    "VisibleKind",
    "average_fuse",
    "build_corrnet",
    "build_stage_two",
    "cd_k_update",
    "contrastive_loss",
    "corrnet_loss",
    "corrnet_train",
    "dbn_forward",
    "finite_diff_grad",
    "fuse",
    "multitask_train",
    "train_dbn",
    "train_fusion",
    "train_rbm",
]
