# Copyright (c) 2024, The FSDet Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from dataclasses import dataclass

try:
    from .template import FSDetArgsTemplate
except ImportError:
    from template import FSDetArgsTemplate

try:
    from typing import Literal
except ImportError:
    from typing_extensions import Literal


AGGREGATION_MODE_CHOICES = ["csa", "caa", "vfa"]

VFA_FEATURE_CHOICES = ["z", "z_sampled", "mu", "sigma", "support", "reconstructed"]


@dataclass
class FSDetArgsData(FSDetArgsTemplate):
    """
    Dataset and split Arguments
    """

    dataset: Literal["shapes", "voc"] = "shapes"
    """
    Source of training / test images. "shapes" generates the synthetic shapes benchmark,
    "voc" reads a VOC-style directory given by `voc_root`.
    """

    image_size: int = 128
    """
    Side length of the square input images in pixels.
    """

    n_shape_classes: int = 12
    """
    Number of synthetic shape classes (geometry x fill pattern). Between 6 and 12.
    """

    n_train_images: int = 2000
    """
    Number of generated training images.
    """

    n_test_images: int = 400
    """
    Number of generated test images.
    """

    objects_per_image: list = None
    """
    [min, max] number of objects drawn into each synthetic image. Defaults to [1, 3].
    """

    min_object_size: int = 16
    """
    Smallest object extent in pixels before rotation.
    """

    max_object_size: int = 48
    """
    Largest object extent in pixels before rotation.
    """

    noise_level: float = 0.1
    """
    Appearance noise of the generator in [0, 1]: scales hue jitter and additive pixel noise.
    """

    data_seed: int = 1234
    """
    Seed of the dataset generator. The test set uses data_seed + 1.
    """

    class_names: list = None
    """
    Ordered class names. Derived from the shape generator when dataset == "shapes", required for "voc".
    """

    novel_class_ids: list = None
    """
    Class indices held out as novel classes. All other classes are base classes.
    Defaults to one class per geometry for the shapes benchmark.
    """

    voc_root: str = None
    """
    Root of a VOC-style dataset (JPEGImages/, Annotations/, ImageSets/Main/).
    """

    voc_train_split: str = "trainval"
    """
    Image set used for training when dataset == "voc".
    """

    voc_test_split: str = "test"
    """
    Image set used for evaluation when dataset == "voc".
    """


@dataclass
class FSDetArgsModel(FSDetArgsTemplate):
    """
    Detector Arguments
    """

    backbone_channels: list = None
    """
    Output channels of the four backbone stages. Defaults to [32, 64, 128, 256].
    """

    norm: Literal["groupnorm", "batchnorm", "none"] = "groupnorm"
    """
    Normalization used in the backbone. Choose from "groupnorm", "batchnorm", "none".
    """

    feature_dim: int = 2048
    """
    Dimension D of RoI and support features.
    """

    roi_output_size: int = 7
    """
    Side of the RoI pooling grid.
    """

    anchor_size: float = 32.0
    """
    Side length (in pixels) of the single anchor scale.
    """

    anchor_ratios: list = None
    """
    Anchor aspect ratios (height / width). Defaults to [0.5, 1.0, 2.0].
    """

    rpn_batch_size: int = 256
    """
    Number of anchors sampled per image for the RPN loss.
    """

    rpn_nms_iou: float = 0.7
    """
    IoU threshold of the non maximum suppression applied to proposals.
    """

    rpn_train_top_k: int = 300
    """
    Number of proposals kept after NMS in training mode.
    """

    rpn_test_top_k: int = 100
    """
    Number of proposals kept after NMS in evaluation mode.
    """

    roi_batch_size: int = 64
    """
    Number of proposals sampled per image for the detection head.
    """

    roi_positive_fraction: float = 0.25
    """
    Maximum fraction of foreground proposals in the sampled batch.
    """

    fg_iou_thresh: float = 0.5
    """
    Proposals with IoU >= this value are foreground.
    """

    bg_iou_thresh: float = 0.3
    """
    Proposals with IoU < this value are background. Proposals in between are discarded.
    """

    classifier_kind: Literal["linear", "cosine"] = "cosine"
    """
    Classifier of the detection head. Choose from "linear", "cosine".
    """

    cosine_scale: float = 20.0
    """
    Scale multiplied onto cosine similarities when classifier_kind == "cosine".
    """

    decouple: bool = True
    """
    Classification-regression decoupling: aggregated features feed only the classification
    branch, original RoI features feed the regression branch.
    """

    init_method_std: float = 0.01
    """
    Standard deviation of the normal init of classifier weights.
    """

    score_thresh: float = 0.05
    """
    Minimum score of an emitted detection.
    """

    nms_iou: float = 0.5
    """
    IoU threshold of the per-class NMS of detections.
    """

    detections_per_image: int = 100
    """
    Maximum number of detections kept per image.
    """


@dataclass
class FSDetArgsAggregation(FSDetArgsTemplate):
    """
    Feature aggregation Arguments
    """

    aggregation_mode: Literal["csa", "caa", "vfa"] = "vfa"
    """
    How query RoI features are combined with support signals. Choose from
    "csa" (same-class support), "caa" (random-class support), "vfa" (random-class variational feature).
    """

    vae_latent_dim: int = None
    """
    Latent dimension of the support autoencoder. Must equal feature_dim. Defaults to feature_dim.
    """

    vae_hidden_dim: int = None
    """
    Width of the hidden layers of the support encoder / decoder. Defaults to feature_dim.
    """

    vae_hidden_layers: int = 1
    """
    Number of hidden layers of the support encoder / decoder.
    """

    alpha: float = 2.5e-4
    """
    Weight of the KL term in the total loss.
    """

    consistency_loss: Literal["none", "support", "reconstructed"] = "reconstructed"
    """
    Where the consistency classifier is applied: "none", on the "support" feature S or on
    the "reconstructed" feature S'.
    """

    vfa_feature: Literal[
        "z", "z_sampled", "mu", "sigma", "support", "reconstructed"
    ] = "z"
    """
    Signal aggregated with RoI features in vfa mode. "z" samples in training and uses mu + sigma
    at test time, "z_sampled" samples at test time too.
    """

    log_var_clamp: float = 10.0
    """
    log sigma^2 is clamped to [-log_var_clamp, log_var_clamp].
    """


@dataclass
class FSDetArgsTraining(FSDetArgsTemplate):
    """
    Training Arguments
    """

    seed: int = 1234
    """
    Seed of stage-I training.
    """

    seeds: list = None
    """
    Seeds of the stage-II cells (one few-shot split and fine-tuning run per seed). Defaults to [seed].
    """

    device: str = "cpu"
    """
    Torch device used for training and evaluation.
    """

    stage1_iters: int = 3000
    """
    Number of optimizer updates of base training.
    """

    stage1_lr: float = 0.02
    """
    Learning rate of base training.
    """

    stage2_k: list = None
    """
    Shot counts fine-tuned in stage II. Defaults to [1, 3, 5].
    """

    stage2_iters: dict = None
    """
    Map shot count -> number of fine-tuning updates. Defaults to {1: 200, 3: 400, 5: 600, 10: 1000}.
    """

    stage2_lr: float = 0.001
    """
    Learning rate of fine-tuning.
    """

    momentum: float = 0.9
    """
    SGD momentum.
    """

    weight_decay: float = 1e-4
    """
    SGD weight decay. Biases and normalization weights are excluded.
    """

    gradient_accumulation_steps: int = 8
    """
    Episodes accumulated into one optimizer update.
    """

    lr_decay_style: Literal["constant", "linear", "cosine", "exponential", "step"] = "constant"
    """
    Learning rate decay function. Choose from 'constant', 'linear', 'cosine', 'exponential', 'step'.
    """

    lr_step_iters: list = None
    """
    Iterations at which the learning rate is multiplied by lr_step_gamma (decay style "step").
    """

    lr_step_gamma: float = 0.1
    """
    Multiplier of the "step" decay style.
    """

    min_lr: float = 0.0
    """
    Minimum value for learning rate. The scheduler clips values below this threshold.
    """

    classifier_init: Literal["copy_base", "random"] = "copy_base"
    """
    Initialization of the extended classifier in stage II. "copy_base" copies base-class rows
    from the stage-I classifier, "random" re-initializes every row.
    """

    stage2_freeze_backbone: bool = True
    """
    Freeze the backbone and the support projection in stage II.
    """

    stage2_freeze_rpn: bool = True
    """
    Freeze the region proposal network in stage II.
    """

    stage2_freeze_head_extractors: bool = True
    """
    Freeze the RoI feature extractor and the shared head layers in stage II.
    """

    stage2_train_vae: bool = True
    """
    Train the support autoencoder in stage II.
    """

    stage2_train_last_layers: bool = True
    """
    Train the last classification / regression layers in stage II.
    """

    keep_last_n_checkpoints: int = None
    """
    Number of intermediate checkpoints kept per stage. Keeps all if None.
    """

    save_interval: int = None
    """
    Save an intermediate checkpoint every save_interval updates.
    """

    checkpoint_validation_with_forward_pass: bool = False
    """
    Store the output of a fixed forward pass with each checkpoint and compare it on load.
    """


@dataclass
class FSDetArgsEvaluation(FSDetArgsTemplate):
    """
    Evaluation and analysis Arguments
    """

    eval_iou_thresh: float = 0.5
    """
    IoU a detection needs to match a ground truth box.
    """

    recall_score_thresh: float = 0.05
    """
    Score threshold at which per-class recall is reported.
    """

    eval_stage1: bool = True
    """
    Evaluate base-class AP after base training.
    """

    analysis_k_values: list = None
    """
    Shot counts of the prototype distance curve. Defaults to [1, 2, 3, 5, 10].
    """

    proto_reference_k: int = 10
    """
    Shot count whose distance normalizes the prototype distance curve.
    """

    proto_resamples: int = 20
    """
    Number of resampled K-shot subsets per point of the prototype distance curve.
    """


@dataclass
class FSDetArgsLogging(FSDetArgsTemplate):
    """
    Logging Arguments
    """

    out: str = "runs"
    """
    Output root. Each run writes to <out>/<config hash>/.
    """

    log_dir: str = None
    """
    Directory to save stdout / stderr copies to.
    """

    tensorboard_dir: str = None
    """
    Write TensorBoard logs to this directory.
    """

    tensorboard_writer = None
    """
    initialized tensorboard writer
    """

    log_interval: int = 10
    """
    Interval between logging.
    """

    config_files: dict = None
    """
    Original config file contents, saved next to checkpoints.
    """
