"""Trainable 2D-to-3D lifting network with analytic backprop and Adam.

Maps 66 normalized image coordinates (33 cuboid keypoints as camera-ray
coordinates (u-cx)/fx, (v-cy)/fy) to the 96 coordinates of the
translation-free 32-point shape set.  Architecture: a 66->1024 input
stage, two fully-connected residual blocks at width 1024, and a 1024->96
linear head.  Every hidden affine layer is followed by batch
normalization, ReLU and dropout.

Implemented directly on numpy so the backward pass is explicit and
finite-difference checkable.  All randomness is drawn from seeded
generators; per-epoch streams are derived statelessly from (seed, epoch)
so resumed runs reproduce uninterrupted ones bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .crossratio import DEFAULT_GATE, cr_loss_values, edge_quadruples, target_cr
from .geometry import DEFAULT_INTERP, TAU

INPUT_DIM = 66
HIDDEN_DIM = 1024
OUTPUT_DIM = 96

# hidden stages in forward order; each owns w, b, gamma, beta plus running stats
_STAGES = ("in", "res1a", "res1b", "res2a", "res2b")
_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1

_CHECKPOINT_MAGIC = b"CLIFT\x00"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loss-mix settings.

    Loss weights follow the fixed mix (heatmap 1, 2D 0.1, 3D 1,
    cross-ratio 0.005).  The cross-ratio term stays off for
    cr_warmup_epochs epochs once enabled.  With no 2D predictor in scope
    the 2D and cross-ratio terms carry no parameter gradient here; they
    are recorded as monitors and the 3D term drives learning.
    """

    lr: float = 0.001
    lr_decay: float = 0.5
    lr_decay_every: int = 50
    epochs: int = 300
    batch_size: int = 256
    w_hm: float = 1.0
    w_2d: float = 0.1
    w_3d: float = 1.0
    w_cr: float = 0.005
    cr_enabled: bool = False
    cr_warmup_epochs: int = 1
    mixed: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("w_hm", "w_2d", "w_3d", "w_cr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.lr <= 0 or self.lr_decay <= 0 or self.lr_decay_every < 1:
            raise ValueError("invalid learning-rate schedule")

    def lr_at(self, epoch):
        """Stepwise-decayed learning rate for a 1-indexed epoch."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.lr_decay_every)


def _kaiming_uniform(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class LifterNet:
    """Parameter container plus forward/backward passes.

    params holds the trainable tensors, stats the batch-norm running
    mean/variance.  Forward in train mode returns pending running-stat
    updates instead of mutating, so finite-difference probes stay free of
    side effects; the training loop commits them via apply_stats.
    """

    def __init__(self, rng=None, dtype=np.float32, dropout_rate=0.5):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout rate {dropout_rate} outside [0, 1)")
        self.dtype = np.dtype(dtype)
        self.dropout_rate = float(dropout_rate)
        self.params = {}
        self.stats = {}
        if rng is None:
            rng = np.random.default_rng(0)
        dims = {"in": (INPUT_DIM, HIDDEN_DIM)}
        for name in _STAGES[1:]:
            dims[name] = (HIDDEN_DIM, HIDDEN_DIM)
        for name, (fan_in, fan_out) in dims.items():
            self.params[f"{name}.w"] = _kaiming_uniform(rng, fan_in, fan_out, self.dtype)
            bias_bound = 1.0 / np.sqrt(fan_in)
            self.params[f"{name}.b"] = rng.uniform(
                -bias_bound, bias_bound, size=fan_out
            ).astype(self.dtype)
            self.params[f"{name}.gamma"] = np.ones(fan_out, dtype=self.dtype)
            self.params[f"{name}.beta"] = np.zeros(fan_out, dtype=self.dtype)
            self.stats[f"{name}.mean"] = np.zeros(fan_out, dtype=self.dtype)
            self.stats[f"{name}.var"] = np.ones(fan_out, dtype=self.dtype)
        self.params["out.w"] = _kaiming_uniform(rng, HIDDEN_DIM, OUTPUT_DIM, self.dtype)
        bias_bound = 1.0 / np.sqrt(HIDDEN_DIM)
        self.params["out.b"] = rng.uniform(
            -bias_bound, bias_bound, size=OUTPUT_DIM
        ).astype(self.dtype)

    # ---- layer primitives ----

    def _bn_forward(self, x, name, mode):
        gamma = self.params[f"{name}.gamma"]
        beta = self.params[f"{name}.beta"]
        if mode == "train":
            mu = x.mean(axis=0)
            var = x.var(axis=0)
        else:
            mu = self.stats[f"{name}.mean"]
            var = self.stats[f"{name}.var"]
        inv_std = 1.0 / np.sqrt(var + np.asarray(_BN_EPS, dtype=x.dtype))
        xhat = (x - mu) * inv_std
        out = gamma * xhat + beta
        updates = None
        if mode == "train":
            n = x.shape[0]
            unbiased = var * (n / (n - 1.0))
            m = _BN_MOMENTUM
            updates = {
                f"{name}.mean": ((1 - m) * self.stats[f"{name}.mean"] + m * mu).astype(x.dtype),
                f"{name}.var": (
                    (1 - m) * self.stats[f"{name}.var"] + m * unbiased
                ).astype(x.dtype),
            }
        cache = (xhat, inv_std, gamma, mode == "train")
        return out, cache, updates

    def _bn_backward(self, gy, cache):
        xhat, inv_std, gamma, trained = cache
        ggamma = (gy * xhat).sum(axis=0)
        gbeta = gy.sum(axis=0)
        gxhat = gy * gamma
        if trained:
            n = gy.shape[0]
            gx = (
                inv_std
                / n
                * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    def _stage_forward(self, x, name, mode, drop_rng):
        w = self.params[f"{name}.w"]
        a = x @ w + self.params[f"{name}.b"]
        bn_out, bn_cache, updates = self._bn_forward(a, name, mode)
        relu_mask = bn_out > 0
        h = bn_out * relu_mask
        drop_mask = None
        if mode == "train" and self.dropout_rate > 0:
            keep = 1.0 - self.dropout_rate
            drop_mask = (drop_rng.random(h.shape) < keep).astype(x.dtype) / np.asarray(
                keep, dtype=x.dtype
            )
            h = h * drop_mask
        cache = (x, w, bn_cache, relu_mask, drop_mask)
        return h, cache, updates

    def _stage_backward(self, gy, name, cache, grads):
        x, w, bn_cache, relu_mask, drop_mask = cache
        if drop_mask is not None:
            gy = gy * drop_mask
        gy = gy * relu_mask
        ga, ggamma, gbeta = self._bn_backward(gy, bn_cache)
        grads[f"{name}.gamma"] = ggamma
        grads[f"{name}.beta"] = gbeta
        grads[f"{name}.w"] = x.T @ ga
        grads[f"{name}.b"] = ga.sum(axis=0)
        return ga @ w.T

    # ---- full network ----

    def forward(self, x, mode="eval", drop_rng=None):
        """Returns (psi_hat, cache, stat_updates).

        psi_hat is (batch, 96).  cache is None in eval mode; in train
        mode it feeds backward().  stat_updates maps running-stat names
        to their post-batch values and is only produced in train mode.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != INPUT_DIM:
            raise ValueError(f"expected (batch, {INPUT_DIM}) inputs, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("non-finite input")
        if mode == "train" and drop_rng is None and self.dropout_rate > 0:
            raise ValueError("train mode with dropout needs a generator")
        if mode == "train" and x.shape[0] < 2:
            raise ValueError("train mode needs batch size >= 2 (batch norm)")

        updates = {}
        caches = []

        def run_stage(h, name):
            h, cache, upd = self._stage_forward(h, name, mode, drop_rng)
            caches.append(cache)
            if upd:
                updates.update(upd)
            return h

        h = run_stage(x, "in")
        block1_in = h
        h = run_stage(h, "res1a")
        h = run_stage(h, "res1b")
        h = block1_in + h
        block2_in = h
        h = run_stage(h, "res2a")
        h = run_stage(h, "res2b")
        h = block2_in + h
        y = h @ self.params["out.w"] + self.params["out.b"]
        if squeeze:
            y = y[0]
        cache = (caches, h) if mode == "train" else None
        return y, cache, (updates if mode == "train" else None)

    def backward(self, grad_out, cache):
        """Gradients of a scalar loss given d(loss)/d(psi_hat)."""
        caches, head_in = cache
        grads = {}
        gy = np.asarray(grad_out, dtype=self.dtype)
        if gy.ndim == 1:
            gy = gy[None, :]
        grads["out.w"] = head_in.T @ gy
        grads["out.b"] = gy.sum(axis=0)
        g = gy @ self.params["out.w"].T
        g_block2 = self._stage_backward(
            self._stage_backward(g, "res2b", caches[4], grads), "res2a", caches[3], grads
        )
        g = g + g_block2  # residual add: skip path plus branch path
        g_block1 = self._stage_backward(
            self._stage_backward(g, "res1b", caches[2], grads), "res1a", caches[1], grads
        )
        g = g + g_block1
        self._stage_backward(g, "in", caches[0], grads)
        return grads

    def apply_stats(self, updates):
        for name, value in updates.items():
            self.stats[name] = value

    def predict(self, x, batch_size=2048):
        """Eval-mode forward in batches; returns (n, 96)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        outs = []
        for start in range(0, x.shape[0], batch_size):
            y, _, _ = self.forward(x[start : start + batch_size], mode="eval")
            outs.append(y)
        return np.concatenate(outs, axis=0)


def loss_2d(pred, gt):
    """Mean absolute error over all coordinates."""
    p = pred.points if hasattr(pred, "points") else np.asarray(pred, dtype=float)
    g = gt.points if hasattr(gt, "points") else np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"point count mismatch: {p.shape} vs {g.shape}")
    return float(np.mean(np.abs(p - g)))


def loss_3d(pred, gt):
    """Mean squared error over all coordinates."""
    p = pred.points if hasattr(pred, "points") else np.asarray(pred, dtype=float)
    g = gt.points if hasattr(gt, "points") else np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"point count mismatch: {p.shape} vs {g.shape}")
    return float(np.mean((p - g) ** 2))


class Adam:
    """Standard Adam with bias correction.

    Moments update in place with a fixed operation order, so a given
    seed and lr schedule replays the same trajectory bitwise.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def batch_loss_and_grads(model, inputs, targets, weights=(0.1, 1.0), mode="train",
                         drop_rng=None):
    """Weighted loss over one labeled batch and its parameter gradients.

    weights = (w_2d, w_3d); only the 3D term reaches the parameters, the
    2D term is input-side and carried by the caller as a monitor.
    Returns (loss_3d_value, grads, stat_updates).
    """
    _, w_3d = weights
    psi_hat, cache, updates = model.forward(inputs, mode=mode, drop_rng=drop_rng)
    diff = psi_hat - targets.astype(psi_hat.dtype)
    value = float(np.mean(diff.astype(np.float64) ** 2))
    grads = None
    if mode == "train":
        grad_out = (2.0 * w_3d / diff.size) * diff
        grads = model.backward(grad_out, cache)
    return value, grads, updates


def _epoch_rng(seed, epoch, purpose):
    # stateless stream derivation keeps resumed runs bitwise identical
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), purpose]))


@dataclass
class EpochRecord:
    epoch: int
    loss_2d: float
    loss_3d: float
    loss_cr: float
    loss_total: float

    def as_row(self):
        return [self.epoch, self.loss_2d, self.loss_3d, self.loss_cr, self.loss_total]


HISTORY_COLUMNS = ("epoch", "loss_2d", "loss_3d", "loss_cr", "loss_total")


def train(model, data, config, callbacks=(), optimizer=None, start_epoch=1,
          history=None):
    """Run the training loop; returns the loss history.

    data must expose labeled arrays inputs (N, 66), targets (N, 96),
    local (N, 33, 2), local_clean (N, 33, 2), plus unlabeled_local
    (M, 33, 2) and epoch_batches(rng, batch_size, mixed) when mixed
    batches are requested.  Losses are averaged per epoch over samples.
    The cross-ratio term averages over labeled and unlabeled samples
    alike and stays zero during the warmup epochs.
    """
    n = data.inputs.shape[0]
    if n == 0:
        raise ValueError("labeled set is empty; 3D supervision unavailable")
    if optimizer is None:
        optimizer = Adam(model.params)
    if history is None:
        history = []
    quads = edge_quadruples(TAU)
    cr_target = target_cr(DEFAULT_INTERP)

    for epoch in range(start_epoch, config.epochs + 1):
        shuffle_rng = _epoch_rng(config.seed, epoch, 1)
        drop_rng = _epoch_rng(config.seed, epoch, 2)
        lr = config.lr_at(epoch)
        cr_active = config.cr_enabled and epoch > config.cr_warmup_epochs

        if config.mixed:
            batches = data.epoch_batches(shuffle_rng, config.batch_size, mixed=True)
        else:
            order = shuffle_rng.permutation(n)
            batches = [
                (order[s : s + config.batch_size], np.empty(0, dtype=int))
                for s in range(0, n, config.batch_size)
            ]
            # a trailing single sample cannot batch-normalize; fold it in
            if len(batches) > 1 and batches[-1][0].shape[0] < 2:
                merged = np.concatenate([batches[-2][0], batches[-1][0]])
                batches[-2:] = [(merged, np.empty(0, dtype=int))]

        sum_2d = sum_3d = sum_cr = 0.0
        n_labeled = 0
        n_cr = 0
        for labeled_idx, unlabeled_idx in batches:
            b = labeled_idx.shape[0]
            if cr_active:
                locals_2d = data.local[labeled_idx]
                if unlabeled_idx.shape[0] > 0:
                    locals_2d = np.concatenate(
                        [locals_2d, data.unlabeled_local[unlabeled_idx]], axis=0
                    )
                values = cr_loss_values(locals_2d, quads, cr_target, DEFAULT_GATE)
                sum_cr += float(values.sum())
                n_cr += values.shape[0]
            if b == 0:
                continue
            value_3d, grads, updates = batch_loss_and_grads(
                model,
                data.inputs[labeled_idx],
                data.targets[labeled_idx],
                weights=(config.w_2d, config.w_3d),
                drop_rng=drop_rng,
            )
            model.apply_stats(updates)
            optimizer.step(model.params, grads, lr)
            sum_3d += value_3d * b
            sum_2d += (
                float(
                    np.mean(np.abs(data.local[labeled_idx] - data.local_clean[labeled_idx]))
                )
                * b
            )
            n_labeled += b

        mean_2d = sum_2d / n_labeled
        mean_3d = sum_3d / n_labeled
        mean_cr = sum_cr / n_cr if n_cr else 0.0
        total = config.w_2d * mean_2d + config.w_3d * mean_3d + config.w_cr * mean_cr
        record = EpochRecord(epoch, mean_2d, mean_3d, mean_cr, total)
        history.append(record)
        for callback in callbacks:
            callback(epoch, model, record)
    return history


# ---- checkpoint serialization ----
# layout: magic, u32 header length, JSON header, raw row-major buffers in
# header order.  Plain bytes end to end, so identical runs produce
# identical files.


def save_checkpoint(path, model, optimizer=None, epoch=0, config=None, history=()):
    tensors = []
    buffers = []

    def add(kind, name, arr):
        tensors.append(
            {"kind": kind, "name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        )
        buffers.append(np.ascontiguousarray(arr).tobytes())

    for name in sorted(model.params):
        add("param", name, model.params[name])
    for name in sorted(model.stats):
        add("stat", name, model.stats[name])
    if optimizer is not None:
        for name in sorted(optimizer.m):
            add("adam_m", name, optimizer.m[name])
        for name in sorted(optimizer.v):
            add("adam_v", name, optimizer.v[name])

    header = {
        "format": "cuboidlift-checkpoint",
        "version": _CHECKPOINT_VERSION,
        "dtype": str(model.dtype),
        "dropout_rate": model.dropout_rate,
        "epoch": int(epoch),
        "adam": None
        if optimizer is None
        else {"beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
              "t": optimizer.t},
        "config": None if config is None else asdict(config),
        "history": [rec.as_row() for rec in history],
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(path):
    """Returns (model, optimizer, epoch, config, history).

    optimizer is None when the file carries no Adam state; config is
    None when none was stored.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a lifter checkpoint")
        (length,) = np.frombuffer(fh.read(4), dtype=np.uint32)
        header = json.loads(fh.read(int(length)).decode())
        if header.get("version") != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        loaded = {}
        for meta in header["tensors"]:
            arr = np.frombuffer(
                fh.read(int(np.prod(meta["shape"]) or 1) * np.dtype(meta["dtype"]).itemsize),
                dtype=meta["dtype"],
            ).reshape(meta["shape"])
            loaded[(meta["kind"], meta["name"])] = arr.copy()

    model = LifterNet(
        rng=np.random.default_rng(0),
        dtype=np.dtype(header["dtype"]),
        dropout_rate=header["dropout_rate"],
    )
    for name in model.params:
        model.params[name] = loaded[("param", name)]
    for name in model.stats:
        model.stats[name] = loaded[("stat", name)]

    optimizer = None
    if header["adam"] is not None:
        optimizer = Adam(
            model.params,
            beta1=header["adam"]["beta1"],
            beta2=header["adam"]["beta2"],
            eps=header["adam"]["eps"],
        )
        optimizer.t = header["adam"]["t"]
        for name in optimizer.m:
            optimizer.m[name] = loaded[("adam_m", name)]
            optimizer.v[name] = loaded[("adam_v", name)]

    config = None
    if header["config"] is not None:
        config = TrainConfig(**header["config"])
    history = [EpochRecord(*row) for row in header["history"]]
    return model, optimizer, int(header["epoch"]), config, history
