"""Contrastive objective machinery: similarity loss, momentum branch, key queue.

Two augmented views of each instance flow through the shared-weight network.
The first view produces one prediction per active width; the second view
produces a single full-width target through a momentum copy of the
parameters, with gradients blocked. Negatives come either from a FIFO queue
of past momentum keys (queue mode) or from the other momentum targets in
the batch (in-batch mode).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from slimcontrast.errors import UnknownWidthError
from slimcontrast.slimnet import LayerSpec, SlimmableLinear, SlimmableNet, WidthConfig

UNIT_NORM_TOL = 1e-4

MODE_QUEUE = "mocov2"
MODE_INBATCH = "mocov3"
MODES = (MODE_QUEUE, MODE_INBATCH)


def _check_unit(name: str, v: torch.Tensor, tol: float = UNIT_NORM_TOL):
    with torch.no_grad():
        err = (v.norm(dim=-1) - 1.0).abs().max().item()
    if err > tol:
        raise ValueError(f"{name} must be unit-norm (max |norm-1| = {err:.2e} > {tol:.0e})")


def info_nce(query: torch.Tensor, positive: torch.Tensor,
             negatives: torch.Tensor, tau1: float) -> torch.Tensor:
    """Softmax cross-entropy over one positive and a shared negative set.

    ``query`` carries gradients; ``positive`` and ``negatives`` are treated
    as constants (they come from the momentum branch / queue). Accepts a
    single vector or a batch; returns the batch-mean loss.
    """
    if tau1 <= 0:
        raise ValueError(f"tau1 must be positive, got {tau1}")
    if negatives.numel() == 0:
        raise ValueError("negatives must be nonempty in queue mode")
    squeeze = query.ndim == 1
    q = query.unsqueeze(0) if squeeze else query
    p = positive.unsqueeze(0) if squeeze else positive
    negs = negatives.unsqueeze(0) if negatives.ndim == 1 else negatives
    _check_unit("query", q)
    _check_unit("positive", p)
    _check_unit("negatives", negs)
    l_pos = (q * p.detach()).sum(dim=-1, keepdim=True)
    l_neg = q @ negs.detach().T
    logits = torch.cat([l_pos, l_neg], dim=1) / tau1
    labels = torch.zeros(q.shape[0], dtype=torch.long, device=q.device)
    return F.cross_entropy(logits, labels)


def info_nce_in_batch(queries: torch.Tensor, targets: torch.Tensor, tau1: float) -> torch.Tensor:
    """In-batch variant: each query's negatives are the other rows of ``targets``."""
    if tau1 <= 0:
        raise ValueError(f"tau1 must be positive, got {tau1}")
    if queries.ndim != 2 or queries.shape != targets.shape:
        raise ValueError("queries and targets must be matching 2d batches")
    if queries.shape[0] < 2:
        raise ValueError("in-batch mode needs batch size >= 2 to have negatives")
    _check_unit("queries", queries)
    _check_unit("targets", targets)
    logits = queries @ targets.detach().T / tau1
    labels = torch.arange(queries.shape[0], device=queries.device)
    return F.cross_entropy(logits, labels)


def momentum_update(target_params: Iterable[torch.Tensor],
                    online_params: Iterable[torch.Tensor], m: float) -> None:
    """In-place exponential moving average: target <- m*target + (1-m)*online."""
    if not (0.0 <= m < 1.0):
        raise ValueError(f"momentum coefficient must lie in [0, 1), got {m}")
    targets, onlines = list(target_params), list(online_params)
    if len(targets) != len(onlines):
        raise ValueError("parameter lists differ in length")
    with torch.no_grad():
        for t, o in zip(targets, onlines):
            if t.shape != o.shape:
                raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(o.shape)}")
            t.mul_(m).add_(o, alpha=1.0 - m)


class NegativeQueue:
    """Fixed-capacity FIFO of past momentum keys, warm-filled with random unit rows."""

    def __init__(self, capacity: int, dim: int, rng: np.random.Generator,
                 dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        init = rng.standard_normal((capacity, dim))
        init /= np.linalg.norm(init, axis=1, keepdims=True)
        self.buffer = torch.as_tensor(init, dtype=dtype)
        self.capacity = capacity
        self.cursor = 0

    def enqueue(self, keys: torch.Tensor) -> None:
        keys = keys.detach()
        if keys.ndim != 2 or keys.shape[1] != self.buffer.shape[1]:
            raise ValueError(f"keys must be (B, {self.buffer.shape[1]})")
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} keys exceeds queue capacity {self.capacity}")
        _check_unit("keys", keys)
        end = self.cursor + b
        if end <= self.capacity:
            self.buffer[self.cursor:end] = keys
        else:
            head = self.capacity - self.cursor
            self.buffer[self.cursor:] = keys[:head]
            self.buffer[:end - self.capacity] = keys[head:]
        self.cursor = end % self.capacity

    def negatives(self) -> torch.Tensor:
        return self.buffer

    def snapshot(self) -> torch.Tensor:
        """Rows in logical FIFO order, oldest first."""
        return torch.cat([self.buffer[self.cursor:], self.buffer[:self.cursor]], dim=0)

    def state(self) -> dict:
        return {"buffer": self.buffer.clone(), "cursor": self.cursor}

    def load_state(self, state: dict) -> None:
        self.buffer = state["buffer"].clone()
        self.cursor = int(state["cursor"])


class SlimmableHead(nn.Module):
    """Two-layer MLP head; hidden channels follow the width, output dim is fixed.

    Keeping the output dimension fixed across widths makes every width's
    prediction comparable against the one shared target and negative set.
    """

    def __init__(self, in_features: int, hidden: int, out_features: int,
                 widths: WidthConfig, slim_in: bool = True):
        super().__init__()
        self.fc1 = SlimmableLinear(in_features, hidden, widths, slim_in=slim_in, slim_out=True)
        self.fc2 = SlimmableLinear(hidden, out_features, widths, slim_in=True, slim_out=False)

    def forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x, width)), width)

    @property
    def final_layer(self) -> SlimmableLinear:
        return self.fc2


class ContrastiveModel(nn.Module):
    """Backbone plus projection machinery for one of the two training modes.

    Queue mode ("mocov2"): prediction = g(f(x)) with a single MLP head g.
    In-batch mode ("mocov3"): prediction = predictor(q(f(x))); the momentum
    target uses only the projector q.
    """

    def __init__(self, backbone_specs: Sequence[LayerSpec], widths: WidthConfig,
                 feature_dim: int, mode: str = MODE_QUEUE, head_hidden: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.widths = widths
        self.feature_dim = feature_dim
        self.backbone = SlimmableNet(backbone_specs, widths)
        hidden = head_hidden if head_hidden > 0 else 4 * feature_dim
        rep = self.backbone.rep_channels
        slim_rep = self.backbone.rep_slim
        if mode == MODE_QUEUE:
            self.head = SlimmableHead(rep, hidden, feature_dim, widths, slim_in=slim_rep)
            self.predictor = None
        else:
            self.head = SlimmableHead(rep, hidden, feature_dim, widths, slim_in=slim_rep)
            self.predictor = SlimmableHead(feature_dim, hidden, feature_dim, widths, slim_in=False)

    def features(self, x: torch.Tensor, width: float) -> torch.Tensor:
        return self.backbone(x, width)

    def predict(self, x: torch.Tensor, width: float) -> torch.Tensor:
        z = self.head(self.backbone(x, width), width)
        if self.predictor is not None:
            z = self.predictor(z, width)
        return z

    def target_forward(self, x: torch.Tensor, width: float) -> torch.Tensor:
        return self.head(self.backbone(x, width), width)

    @property
    def last_loss_layer(self) -> tuple[str, SlimmableLinear]:
        """The linear layer nearest the loss (its gradients are traced for PCA)."""
        if self.predictor is not None:
            return "predictor.fc2", self.predictor.final_layer
        return "head.fc2", self.head.final_layer


class MomentumEncoder:
    """Gradient-blocked momentum copy of a ContrastiveModel's parameters."""

    def __init__(self, model: ContrastiveModel):
        self.model = copy.deepcopy(model)
        for p in self.model.parameters():
            p.requires_grad_(False)

    def update(self, model: ContrastiveModel, m: float) -> None:
        momentum_update(self.model.parameters(), model.parameters(), m)

    def sync(self, model: ContrastiveModel) -> None:
        self.model.load_state_dict(model.state_dict())


@dataclass
class ContrastiveBatch:
    """Per-width normalized predictions plus the single full-width momentum target."""

    view1: torch.Tensor
    view2: torch.Tensor
    predictions: dict[float, torch.Tensor]
    target: torch.Tensor

    def validate(self, active_widths: Optional[Sequence[float]] = None, tol: float = 1e-5):
        if self.target.ndim != 2:
            raise ValueError("target must be a 2d batch")
        _check_unit("target", self.target, tol)
        for w, pred in self.predictions.items():
            _check_unit(f"prediction at width {w}", pred, tol)
            if pred.shape != self.target.shape:
                raise ValueError(f"prediction at width {w} has shape {tuple(pred.shape)}, "
                                 f"target has {tuple(self.target.shape)}")
        if active_widths is not None:
            missing = set(float(w) for w in active_widths) - set(self.predictions)
            if missing:
                raise ValueError(f"missing predictions for widths {sorted(missing)}")


def multi_width_forward(model: ContrastiveModel, momentum: MomentumEncoder,
                        view1: torch.Tensor, view2: torch.Tensor,
                        active_widths: Sequence[float]) -> ContrastiveBatch:
    """One prediction per active width plus the stop-gradient full-width target."""
    widths = sorted({float(w) for w in active_widths}, reverse=True)
    if 1.0 not in widths:
        raise ValueError("active widths must contain the full width 1.0")
    for w in widths:
        if w not in model.widths:
            raise UnknownWidthError(f"width {w} is not registered in {model.widths.widths}")
    preds = {w: F.normalize(model.predict(view1, w), dim=-1) for w in widths}
    with torch.no_grad():
        target = F.normalize(momentum.model.target_forward(view2, 1.0), dim=-1)
    return ContrastiveBatch(view1, view2, preds, target)
