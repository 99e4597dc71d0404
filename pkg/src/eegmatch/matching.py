"""EEG-text matching: similarity logits, predictions, and the training loss.

Similarities between unit-norm EEG embeddings and the frozen text bank are
scaled by 1/τ into logits; prediction picks the most similar class text, and
training minimizes the mean cross-entropy of each sample against its class
logit — simultaneously a one-directional contrastive objective over
EEG-text pairs and literal cross-entropy.  The bank side never enters the
autodiff graph with gradients enabled.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from eegmatch import autodiff as ad
from eegmatch.autodiff import Tensor
from eegmatch.errors import ValidationError
from eegmatch.text_bank import TextBank

__all__ = ["similarity_logits", "predict", "matching_loss", "model_logits"]


def similarity_logits(eeg: np.ndarray, bank: TextBank, tau: float) -> np.ndarray:
    """logits[i][k] = (eeg_i · class_k) / τ for unit-norm inputs."""
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    eeg = np.asarray(eeg, dtype=np.float64)
    if eeg.ndim != 2 or eeg.shape[1] != bank.dim:
        raise ValidationError(
            f"embedding shape {eeg.shape} incompatible with bank dim {bank.dim}")
    return (eeg @ bank.matrix().T) / tau


def predict(logits: np.ndarray, labels: Sequence[str]) -> List[str]:
    """Row-wise argmax; exact ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    labels = list(labels)
    if len(labels) < 2:
        raise ValidationError("prediction needs at least two classes")
    if logits.ndim != 2 or logits.shape[1] != len(labels):
        raise ValidationError(
            f"logit shape {logits.shape} does not match {len(labels)} labels")
    return [labels[i] for i in np.argmax(logits, axis=1)]


def model_logits(embeddings: Tensor, bank: TextBank, log_tau: Tensor) -> Tensor:
    """Differentiable logits: (emb @ bankᵀ) · exp(log_tau); bank stays frozen."""
    if embeddings.shape[-1] != bank.dim:
        raise ValidationError(
            f"embedding dim {embeddings.shape[-1]} != bank dim {bank.dim}")
    bank_t = Tensor(bank.matrix().T)  # requires_grad=False: never gets a gradient
    return ad.mul(ad.matmul(embeddings, bank_t), ad.exp(log_tau))


def matching_loss(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over the batch of −log softmax(logits_i)[target_i]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ValidationError(f"loss expects 2-d logits, got shape {logits.shape}")
    batch, k = logits.shape
    if targets.shape != (batch,):
        raise ValidationError(
            f"targets shape {targets.shape} does not match batch {batch}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValidationError(
            f"target index out of range for {k} classes: {targets.tolist()}")
    onehot = np.zeros((batch, k))
    onehot[np.arange(batch), targets] = 1.0
    log_probs = ad.log_softmax(logits)
    picked = ad.tsum(ad.mul(log_probs, Tensor(onehot)))
    return ad.scale(picked, -1.0 / batch)
