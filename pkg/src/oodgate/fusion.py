"""Stage-2 fusion network: gate verdict + stage-1 probabilities + raw features.

The fusion input concatenates, in fixed order: the stage-1 softmax vector
(K), the clamped z-score vector (K), a one-hot gate verdict over K+1 slots
(slot K = out-of-distribution), and the raw feature vector (d_in). The
fusion model is a plain MLP with K+1 outputs; index K is the explicit OOD
class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oodgate import nncore
from oodgate.boundary import BoundarySet, classify_sample
from oodgate.errors import UserError
from oodgate.nncore import MlpModel, TrainConfig, softmax

Z_CLAMP = 10.0
OOD_CLASS_NAME = "OOD"


@dataclass
class FusionInput:
    stage1_probs: np.ndarray
    zscore_vector: np.ndarray
    verdict_onehot: np.ndarray
    raw_features: np.ndarray

    def __post_init__(self):
        if abs(self.stage1_probs.sum() - 1.0) > 1e-6:
            raise UserError("stage-1 probabilities must sum to 1")
        if int((self.verdict_onehot == 1.0).sum()) != 1:
            raise UserError("verdict one-hot must have exactly one 1")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.stage1_probs, self.zscore_vector,
                               self.verdict_onehot, self.raw_features])


@dataclass
class FinalPrediction:
    class_probs: np.ndarray  # length K+1, index K = OOD
    predicted: int
    ood_score: float


def fusion_input_dim(n_classes: int, d_in: int) -> int:
    return 2 * n_classes + (n_classes + 1) + d_in


def assemble_fusion_input(feature: np.ndarray, stage1: MlpModel,
                          boundaries: BoundarySet, band: float = 1.0,
                          one_sided: bool = False) -> tuple[FusionInput, "OodVerdict"]:
    """Pure assembly of one fusion input; also returns the gate verdict."""
    feature = np.asarray(feature, dtype=np.float64)
    K = boundaries.n_classes
    if stage1.config.layer_dims[-1] != K:
        raise UserError(f"stage-1 outputs {stage1.config.layer_dims[-1]} classes, "
                        f"boundary set has {K}")
    if feature.shape != (stage1.config.layer_dims[0],):
        raise UserError(f"stage-1 input: feature dim {feature.shape} != "
                        f"{stage1.config.layer_dims[0]}")
    logits, _ = nncore.forward(stage1, feature, mode="eval")
    probs = softmax(logits[0])
    embedding = nncore.embed(stage1, feature)
    if embedding.shape != (boundaries.embedding_dim,):
        raise UserError(f"boundary set: embedding dim {embedding.shape} != "
                        f"{boundaries.embedding_dim}")
    verdict = classify_sample(embedding, boundaries, band=band, one_sided=one_sided)
    onehot = np.zeros(K + 1)
    if verdict.decision == "out_of_distribution":
        onehot[K] = 1.0
    else:
        onehot[verdict.nearest_class] = 1.0
    fi = FusionInput(stage1_probs=probs,
                     zscore_vector=np.clip(verdict.z_scores, -Z_CLAMP, Z_CLAMP),
                     verdict_onehot=onehot, raw_features=feature)
    return fi, verdict


def assemble_fusion_matrix(features: np.ndarray, stage1: MlpModel,
                           boundaries: BoundarySet, band: float = 1.0,
                           one_sided: bool = False) -> np.ndarray:
    rows = [assemble_fusion_input(f, stage1, boundaries, band, one_sided)[0].vector
            for f in features]
    return np.vstack(rows)


def default_fusion_config(n_classes: int, d_in: int,
                          hidden: int = 64) -> nncore.MlpConfig:
    return nncore.MlpConfig(
        layer_dims=[fusion_input_dim(n_classes, d_in), hidden, n_classes + 1])


def init_fusion_model(n_classes: int, d_in: int, seed: int,
                      hidden: int = 64) -> MlpModel:
    model = nncore.init_model(default_fusion_config(n_classes, d_in, hidden), seed)
    model.meta = {"kind": "fusion", "n_classes": str(n_classes), "d_in": str(d_in),
                  "field_order": "stage1_probs,zscore_vector,verdict_onehot,raw_features"}
    return model


def train_fusion(model: MlpModel, X_train: np.ndarray, y_train: np.ndarray,
                 X_val: np.ndarray, y_val: np.ndarray, config: TrainConfig):
    """Train the fusion MLP over assembled inputs with (K+1)-way labels.

    OOD-labeled rows (label K) must come from proxy outlier data held apart
    from the test OOD families; callers own that separation.
    """
    n_out = model.config.layer_dims[-1]
    if np.max(y_train) >= n_out or np.min(y_train) < 0:
        raise UserError("fusion label out of range")
    if len(set(np.asarray(y_train).tolist())) < 2:
        raise UserError("fusion training needs >= 2 distinct classes")
    return nncore.train(model, X_train, y_train, X_val, y_val, config)


def predict_final(fusion_input: FusionInput | np.ndarray,
                  fusion_model: MlpModel) -> FinalPrediction:
    vec = fusion_input.vector if isinstance(fusion_input, FusionInput) else np.asarray(fusion_input)
    if vec.shape != (fusion_model.config.layer_dims[0],):
        raise UserError(f"fusion input dim {vec.shape} != "
                        f"{fusion_model.config.layer_dims[0]}")
    logits, _ = nncore.forward(fusion_model, vec, mode="eval")
    probs = softmax(logits[0])
    predicted = int(probs.argmax())  # argmax takes the lowest index on ties
    return FinalPrediction(class_probs=probs, predicted=predicted,
                           ood_score=float(probs[-1]))
