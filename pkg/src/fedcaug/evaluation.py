"""Top-1 accuracy, confusion matrices and the background-only probe."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import crl
from .dataset import LabeledBatch, as_batch
from .tensor_nn import ModelParams, predict_logits, softmax


def predict(params: ModelParams, samples) -> np.ndarray:
    """argmax class per sample; ties go to the lowest class index."""
    batch = as_batch(samples)
    return predict_logits(params, batch.x).argmax(axis=1)


def top1_accuracy(params: ModelParams, samples) -> float:
    batch = as_batch(samples)
    return float(np.mean(predict(params, batch) == batch.y))


def confusion_matrix(params: ModelParams, samples) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    batch = as_batch(samples)
    c = params.arch.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (batch.y, predict(params, batch)), 1)
    return cm


@dataclass
class ProbeResult:
    confidences: np.ndarray  # max softmax per background-only input
    predictions: np.ndarray
    mean_confidence: float
    confound_match_rate: float

    def to_dict(self) -> dict:
        return {
            "mean_confidence": self.mean_confidence,
            "confound_match_rate": self.confound_match_rate,
            "n": int(len(self.confidences)),
        }


def probe_inputs(samples, backend: crl.SaliencyBackend = crl.SaliencyBackend()) -> LabeledBatch:
    """Background-only copies: the localized object is painted over with the
    mean colour of the remaining background."""
    imgs, labels, bgs = [], [], []
    for s in samples:
        region = crl.localize(s.image, backend)
        imgs.append(crl.fill_background(s.image, region))
        labels.append(s.label)
        bgs.append(-1 if s.background_id is None else s.background_id)
    x = np.stack(imgs).transpose(0, 3, 1, 2)
    return LabeledBatch(np.ascontiguousarray(x), np.array(labels), np.array(bgs))


def probe_from_inputs(params: ModelParams, inputs: LabeledBatch, num_backgrounds: Optional[int] = None) -> ProbeResult:
    """Score prepared background-only inputs.

    A prediction "matches the confound" when the predicted class's assigned
    background (class mod B) is the background the input actually shows.
    """
    probs = softmax(predict_logits(params, inputs.x))
    pred = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    b = num_backgrounds or params.arch.num_classes
    known = inputs.background_ids >= 0
    match = float(np.mean((pred % b)[known] == inputs.background_ids[known])) if known.any() else float("nan")
    return ProbeResult(conf, pred, float(conf.mean()), match)


def background_probe(params: ModelParams, samples, crl_backend: crl.SaliencyBackend = crl.SaliencyBackend(),
                     num_backgrounds: Optional[int] = None) -> ProbeResult:
    return probe_from_inputs(params, probe_inputs(samples, crl_backend), num_backgrounds)
