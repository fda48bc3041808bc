"""Frozen-feature evaluation: linear probes and k-nearest-neighbor scoring.

Two probe flavours: "switchable" trains one independent linear classifier
per width, "slimmable" trains a single full-width classifier whose
sub-width heads are prefix slices of its weight matrix. The k-NN path
scores cosine-similarity majority votes, with ties broken toward the
smallest class index.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from slimcontrast.contrastive import ContrastiveModel
from slimcontrast.objective import distill_loss
from slimcontrast.slimnet import format_width

PROBE_MODES = ("switchable", "slimmable")


class ProbeHead(nn.Module):
    """Per-width linear classifiers over frozen features."""

    def __init__(self, feature_dims: dict[float, int], classes: int, mode: str = "switchable"):
        super().__init__()
        if mode not in PROBE_MODES:
            raise ValueError(f"probe mode must be one of {PROBE_MODES}, got {mode!r}")
        self.mode = mode
        self.classes = classes
        self.feature_dims = {float(w): int(d) for w, d in feature_dims.items()}
        self.full_width = max(self.feature_dims)
        if mode == "switchable":
            self.heads = nn.ModuleDict({
                format_width(w): nn.Linear(d, classes) for w, d in self.feature_dims.items()
            })
        else:
            self.shared = nn.Linear(self.feature_dims[self.full_width], classes)

    def forward(self, features: torch.Tensor, width: float) -> torch.Tensor:
        width = float(width)
        d = self.feature_dims.get(width)
        if d is None:
            raise ValueError(f"width {width} has no probe head (known: {sorted(self.feature_dims)})")
        if features.shape[-1] != d:
            raise ValueError(f"expected {d} features at width {width}, got {features.shape[-1]}")
        if self.mode == "switchable":
            return self.heads[format_width(width)](features)
        return F.linear(features, self.shared.weight[:, :d], self.shared.bias)


def extract_features(model: ContrastiveModel, inputs: np.ndarray, width: float,
                     batch_size: int = 256, normalize: bool = False) -> np.ndarray:
    """Backbone representations at one width, computed in evaluation mode."""
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            x = torch.as_tensor(inputs[start:start + batch_size], dtype=torch.float32)
            h = model.features(x, width)
            if normalize:
                h = F.normalize(h, dim=-1)
            chunks.append(h.numpy())
    if was_training:
        model.train()
    return np.concatenate(chunks, axis=0)


def linear_probe_train(features: dict[float, np.ndarray], labels: np.ndarray,
                       classes: int, mode: str = "switchable", distill: bool = False,
                       distill_tau: float = 1.0, epochs: int = 30, lr: float = 0.1,
                       momentum: float = 0.9, batch_size: int = 256,
                       seed: int = 0) -> ProbeHead:
    """Cross-entropy training of the probe head(s) over frozen features.

    With distillation on, the full-width head's class distribution guides
    each sub-width head; the teacher side never receives gradients.
    """
    widths = sorted((float(w) for w in features), reverse=True)
    if widths[0] != max(widths):
        raise ValueError("features must include the full width")
    dims = {w: features[w].shape[1] for w in widths}
    head = ProbeHead(dims, classes, mode)
    torch.manual_seed(seed)
    for module in head.modules():
        if isinstance(module, nn.Linear):
            module.reset_parameters()
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=momentum)
    y = torch.as_tensor(labels, dtype=torch.long)
    tensors = {w: torch.as_tensor(features[w], dtype=torch.float32) for w in widths}
    n = len(y)
    rng = np.random.default_rng(seed)
    full = widths[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.as_tensor(order[start:start + batch_size])
            opt.zero_grad()
            logits = {w: head(tensors[w][idx], w) for w in widths}
            total = F.cross_entropy(logits[full], y[idx])
            teacher = torch.softmax(logits[full].detach() / distill_tau, dim=1)
            for w in widths[1:]:
                ce = F.cross_entropy(logits[w], y[idx])
                if distill:
                    student = torch.softmax(logits[w] / distill_tau, dim=1)
                    total = total + (ce + distill_loss(teacher, student, "kd")) / 2
                else:
                    total = total + ce
            total.backward()
            opt.step()
    return head


def probe_accuracy(head: ProbeHead, features: dict[float, np.ndarray],
                   labels: np.ndarray) -> dict[float, dict[str, float]]:
    """Top-1 (and, when the class count allows, top-5) accuracy per width."""
    y = torch.as_tensor(labels, dtype=torch.long)
    out = {}
    with torch.no_grad():
        for w, feats in features.items():
            logits = head(torch.as_tensor(feats, dtype=torch.float32), float(w))
            top1 = (logits.argmax(dim=1) == y).float().mean().item()
            entry = {"top1": top1}
            if head.classes >= 5:
                top5 = logits.topk(5, dim=1).indices.eq(y.unsqueeze(1)).any(dim=1)
                entry["top5"] = top5.float().mean().item()
            out[float(w)] = entry
    return out


def knn_eval(train_features: np.ndarray, train_labels: np.ndarray,
             test_features: np.ndarray, test_labels: np.ndarray,
             k: int = 20, exclude_self: bool = False) -> float:
    """Cosine-similarity k-NN majority vote; ties go to the smallest class index.

    With ``exclude_self`` the query set must be the reference set itself and
    each query's own row is removed from its neighbor candidates.
    """
    train_features = np.asarray(train_features, dtype=np.float64)
    test_features = np.asarray(test_features, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    n_ref = train_features.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    available = n_ref - 1 if exclude_self else n_ref
    if k > available:
        raise ValueError(f"k={k} exceeds the {available} available reference points")
    if exclude_self and test_features.shape[0] != n_ref:
        raise ValueError("exclude_self requires querying the reference set itself")

    def _norm(a):
        return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)

    sims = _norm(test_features) @ _norm(train_features).T
    if exclude_self:
        np.fill_diagonal(sims, -np.inf)
    nn_idx = np.argpartition(-sims, kth=k - 1, axis=1)[:, :k]
    n_classes = int(train_labels.max()) + 1
    correct = 0
    for row, neighbors in enumerate(nn_idx):
        counts = np.bincount(train_labels[neighbors], minlength=n_classes)
        correct += int(np.argmax(counts) == test_labels[row])
    return correct / len(test_labels)
