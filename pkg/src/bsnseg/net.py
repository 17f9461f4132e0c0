"""A tiny fully-convolutional segmentation net with an attribute head.

Architecture (all convolutions stride 1, zero "same" padding)::

    x (6, H, W) -> conv1 3x3 6->16 -> tanh -> conv2 3x3 16->16 -> tanh
                -> conv3 1x1 16->3                       = per-pixel logits
    conv2 features -> global average pool -> fc1 16->8 -> relu -> fc2 8->2
                                                         = attribute logits

Forward and backward passes are plain numpy; the backward pass is checked
against central finite differences by :func:`gradient_check`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import raster
from .geometry import assemble_input, draw_transform
from .kernels import compute_mean_mask, global_kernel, individual_kernel
from .loss import LOSS_MODES, attribute_loss, segmentation_loss

log = logging.getLogger(__name__)

IN_CHANNELS = 6
HIDDEN = 16
HEAD_HIDDEN = 8
NUM_CLASSES = 3

PARAM_SHAPES = {
    "conv1.w": (HIDDEN, IN_CHANNELS, 3, 3),
    "conv1.b": (HIDDEN,),
    "conv2.w": (HIDDEN, HIDDEN, 3, 3),
    "conv2.b": (HIDDEN,),
    "conv3.w": (NUM_CLASSES, HIDDEN, 1, 1),
    "conv3.b": (NUM_CLASSES,),
    "fc1.w": (HEAD_HIDDEN, HIDDEN),
    "fc1.b": (HEAD_HIDDEN,),
    "fc2.w": (2, HEAD_HIDDEN),
    "fc2.b": (2,),
}
SEG_PARAMS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b")
ATTR_PARAMS = ("fc1.w", "fc1.b", "fc2.w", "fc2.b")


@dataclass
class TinyNet:
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.params["conv1.w"].dtype

    def astype(self, dtype) -> "TinyNet":
        return TinyNet({k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "TinyNet":
        return TinyNet({k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def _fan_in(shape) -> int:
    return int(np.prod(shape[1:]))


def init_net(seed=0, dtype=np.float32) -> TinyNet:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / _fan_in(shape))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return TinyNet(params)


# -- convolution helpers ------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(..., C, H, W) -> (..., C*k*k, H*W) patch matrix with zero same-padding."""
    *lead, c, h, w = x.shape
    if k == 1:
        return x.reshape(*lead, c, h * w)
    p = k // 2
    xp = np.zeros((*lead, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[..., p:p + h, p:p + w] = x
    cols = np.empty((*lead, c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[..., i, j, :, :] = xp[..., i:i + h, j:j + w]
    return cols.reshape(*lead, c * k * k, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    if k == 1:
        return cols.reshape(c, h, w)
    p = k // 2
    cols = cols.reshape(c, k, k, h, w)
    out = np.zeros((c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w] += cols[:, i, j]
    return out[:, p:p + h, p:p + w]


@dataclass
class Cache:
    params: dict
    x_shape: tuple
    cols1: np.ndarray
    h1: np.ndarray  # (16, HW) post-tanh
    cols2: np.ndarray
    h2: np.ndarray  # (16, HW) post-tanh
    pooled: np.ndarray
    a1: np.ndarray  # fc1 pre-activation
    r1: np.ndarray


# Stage functions broadcast over leading axes of the parameters and
# activations; forward() uses them unbatched.


def _matrix(w: np.ndarray, rows: int) -> np.ndarray:
    return w.reshape(w.shape[:-4] + (rows, -1))


def _conv1(p, cols1):
    return np.tanh(_matrix(p["conv1.w"], HIDDEN) @ cols1 + p["conv1.b"][..., None])


def _conv2(p, cols2):
    return np.tanh(_matrix(p["conv2.w"], HIDDEN) @ cols2 + p["conv2.b"][..., None])


def _heads(p, h2):
    logits = _matrix(p["conv3.w"], NUM_CLASSES) @ h2 + p["conv3.b"][..., None]
    pooled = h2.sum(axis=-1) / h2.shape[-1]
    a1 = (p["fc1.w"] @ pooled[..., None])[..., 0] + p["fc1.b"]
    r1 = np.maximum(a1, 0)
    attr = (p["fc2.w"] @ r1[..., None])[..., 0] + p["fc2.b"]
    return logits, attr, pooled, a1, r1


def forward(net: TinyNet, x):
    """Return ``(logits (3, H, W), attr_logits (2,), cache)``."""
    p = net.params
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim != 3 or x.shape[0] != IN_CHANNELS:
        raise ValueError(f"expected a ({IN_CHANNELS}, H, W) input, got shape {x.shape}")
    _, h, w = x.shape
    cols1 = _im2col(x, 3)
    h1 = _conv1(p, cols1)
    cols2 = _im2col(h1.reshape(HIDDEN, h, w), 3)
    h2 = _conv2(p, cols2)
    logits, attr, pooled, a1, r1 = _heads(p, h2)
    cache = Cache(p, x.shape, cols1, h1, cols2, h2, pooled, a1, r1)
    return logits.reshape(NUM_CLASSES, h, w), attr, cache


def backward(net: TinyNet, cache: Cache, grad_logits, grad_attr=None) -> dict[str, np.ndarray]:
    """Backpropagate logit (and optional attribute) gradients to every parameter."""
    p = net.params
    if cache.params is not p:
        raise ValueError("cache was produced by a different (or since updated) network")
    _, h, w = cache.x_shape
    n = h * w
    g = np.asarray(grad_logits, dtype=net.dtype)
    if g.shape != (NUM_CLASSES, h, w):
        raise ValueError(f"grad_logits shape {g.shape} does not match cached forward")
    g = g.reshape(NUM_CLASSES, n)

    grads = {}
    grads["conv3.w"] = (g @ cache.h2.T).reshape(PARAM_SHAPES["conv3.w"])
    grads["conv3.b"] = g.sum(axis=1)
    dh2 = p["conv3.w"].reshape(NUM_CLASSES, HIDDEN).T @ g

    if grad_attr is None:
        for name in ATTR_PARAMS:
            grads[name] = np.zeros_like(p[name])
    else:
        ga = np.asarray(grad_attr, dtype=net.dtype)
        if ga.shape != (2,):
            raise ValueError(f"grad_attr must be a 2-vector, got shape {ga.shape}")
        grads["fc2.w"] = np.outer(ga, cache.r1)
        grads["fc2.b"] = ga.copy()
        da1 = (p["fc2.w"].T @ ga) * (cache.a1 > 0)
        grads["fc1.w"] = np.outer(da1, cache.pooled)
        grads["fc1.b"] = da1
        dh2 = dh2 + (p["fc1.w"].T @ da1)[:, None] / n

    dz2 = dh2 * (1.0 - cache.h2 * cache.h2)
    grads["conv2.w"] = (dz2 @ cache.cols2.T).reshape(PARAM_SHAPES["conv2.w"])
    grads["conv2.b"] = dz2.sum(axis=1)
    dcols2 = p["conv2.w"].reshape(HIDDEN, -1).T @ dz2
    dh1 = _col2im(dcols2, HIDDEN, h, w, 3).reshape(HIDDEN, n)

    dz1 = dh1 * (1.0 - cache.h1 * cache.h1)
    grads["conv1.w"] = (dz1 @ cache.cols1.T).reshape(PARAM_SHAPES["conv1.w"])
    grads["conv1.b"] = dz1.sum(axis=1)
    return grads


def sgd_step(net: TinyNet, grads: dict, lr: float, momentum: float = 0.0,
             velocity: dict | None = None) -> TinyNet:
    """One SGD update ``v = momentum * v + g; theta -= lr * v``.

    Only parameters present in ``grads`` move. ``velocity`` (if given) is
    updated in place so callers can carry momentum across steps.
    """
    new = dict(net.params)
    for name, g in grads.items():
        theta = net.params[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        if velocity is not None:
            v = velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            velocity[name] = v
        else:
            v = g
        new[name] = (theta - lr * v).astype(theta.dtype, copy=False)
    return TinyNet(new)


def mask_from_logits(logits) -> np.ndarray:
    """Foreground iff the fg logit is at least the bg logit; boundary is ignored."""
    logits = np.asarray(logits)
    return logits[0] >= logits[2]


def predict_mask(net: TinyNet, x) -> np.ndarray:
    logits, _, _ = forward(net, x)
    return mask_from_logits(logits)


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 2.5e-4
    momentum: float = 0.0
    iterations: int = 1000
    phase1_iterations: int | None = None  # default: half of the iterations
    crop: int = 400
    flip_prob: float = 0.5
    seed: int = 0
    loss: str = "combined"
    width: float = 10
    norm: str = "max"
    gk_mode: str = "literal"
    a: float = 0.9
    b: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.phase1_iterations is not None and not 0 <= self.phase1_iterations <= self.iterations:
            raise ValueError("phase1_iterations must lie in [0, iterations]")

    @property
    def phase1(self) -> int:
        if self.phase1_iterations is None:
            return (self.iterations + 1) // 2
        return self.phase1_iterations


@dataclass
class LogRow:
    iteration: int
    phase: int
    seg_loss: float
    attr_loss: float
    total: float


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # bool (H, W)
    attr: int | None = None


@dataclass
class PreparedData:
    inputs: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    attrs: list = field(default_factory=list)
    mean_mask: np.ndarray | None = None
    global_kernel: np.ndarray | None = None


def prepare(dataset, config: TrainConfig, mean_mask=None) -> PreparedData:
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    masks = [raster.check_mask(s.mask) for s in dataset]
    shape = masks[0].shape
    for i, s in enumerate(dataset):
        if masks[i].shape != shape or np.shape(s.image)[1:] != shape:
            raise ValueError(f"sample {i} dimensions differ from sample 0 {shape}")
    if mean_mask is None:
        mean_mask = compute_mean_mask(masks)
    gk = global_kernel(mean_mask, config.a, config.b, config.gk_mode)
    inputs = [assemble_input(s.image, mean_mask) for s in dataset]
    return PreparedData(inputs, masks, [s.attr for s in dataset], mean_mask, gk)


def train(dataset, config: TrainConfig, mean_mask=None, net: TinyNet | None = None):
    """Two-phase SGD on ``(image, mask, attr)`` samples.

    Phase 1 trains the segmentation path only; phase 2 adds the attribute
    loss (weight ``lam``) at a tenth of the learning rate. Returns the trained
    net and the per-iteration loss log.
    """
    data = prepare(dataset, config, mean_mask)
    init_seq, data_seq = np.random.SeedSequence(config.seed).spawn(2)
    if net is None:
        net = init_net(np.random.default_rng(init_seq))
    rng = np.random.default_rng(data_seq)
    velocity: dict = {}
    rows: list[LogRow] = []

    for it in range(config.iterations):
        phase = 1 if it < config.phase1 else 2
        lr = config.lr if phase == 1 else config.lr / 10.0
        idx = int(rng.integers(len(data.inputs)))
        t = draw_transform(data.inputs[idx].shape, config.crop, config.flip_prob, rng)
        x = t.apply(data.inputs[idx])
        mask = t.apply(data.masks[idx])
        kg = t.apply(data.global_kernel)
        kind = None
        if config.loss in ("ik", "combined"):
            kind = individual_kernel(mask, config.width, config.norm)

        logits, attr_logits, cache = forward(net, x)
        if not (np.isfinite(logits).all() and np.isfinite(attr_logits).all()):
            raise FloatingPointError(
                f"non-finite network output at iteration {it} (phase {phase}, sample {idx})")
        seg = segmentation_loss(config.loss, logits, mask, kind, kg)
        attr_value, grad_attr = 0.0, None
        use_attr = phase == 2 and data.attrs[idx] is not None and config.lam != 0
        if use_attr:
            attr = attribute_loss(attr_logits, int(data.attrs[idx]))
            attr_value = attr.value
            grad_attr = config.lam * attr.grad
        total = seg.value + config.lam * attr_value
        if not math.isfinite(total):
            raise FloatingPointError(
                f"non-finite loss at iteration {it} (phase {phase}, sample {idx}): "
                f"seg={seg.value}, attr={attr_value}"
            )
        grads = backward(net, cache, seg.grad, grad_attr)
        if not use_attr:
            grads = {k: grads[k] for k in SEG_PARAMS}
        net = sgd_step(net, grads, lr, config.momentum, velocity)
        rows.append(LogRow(it, phase, seg.value, attr_value, total))

    log.debug("trained %d iterations, final loss %.4f", config.iterations, rows[-1].total)
    return net, rows


LOG_FIELDS = ("iteration", "phase", "seg_loss", "attr_loss", "total")


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r.iteration, r.phase, repr(r.seg_loss), repr(r.attr_loss), repr(r.total)])


# -- checkpoints --------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(net: TinyNet, directory) -> None:
    """One BSNT file per parameter plus a ``name shape`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in PARAM_SHAPES:
        arr = net.params[name]
        raster.write_tensor(arr.reshape(1, 1, -1), directory / f"{name}.bsnt")
        lines.append(f"{name} {','.join(str(d) for d in arr.shape)}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> TinyNet:
    directory = Path(directory)
    params = {}
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, dims = line.split()
        shape = tuple(int(d) for d in dims.split(","))
        if PARAM_SHAPES.get(name) != shape:
            raise raster.FormatError(f"{directory / MANIFEST}: unexpected parameter {name} {shape}")
        params[name] = raster.read_tensor(directory / f"{name}.bsnt").reshape(shape)
    missing = set(PARAM_SHAPES) - set(params)
    if missing:
        raise raster.FormatError(f"{directory}: checkpoint lacks {sorted(missing)}")
    return TinyNet(params)


# -- gradient verification ----------------------------------------------------


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def numeric_gradient(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``theta`` (perturbed in place)."""
    out = np.empty(theta.shape, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return out


def batched_numeric_gradient(f_batch, theta: np.ndarray, h: float = 1e-5,
                             chunk: int = 256) -> np.ndarray:
    """Central differences where ``f_batch(thetas)`` maps a stack of
    perturbed copies ``(B, *theta.shape)`` to ``B`` scalar values."""
    flat = theta.reshape(-1)
    grad = np.empty(flat.size, dtype=np.float64)
    for start in range(0, flat.size, chunk):
        idx = np.arange(start, min(start + chunk, flat.size))
        stack = np.repeat(flat[None, :], 2 * len(idx), axis=0)
        rows = np.arange(len(idx))
        stack[2 * rows, idx] += h
        stack[2 * rows + 1, idx] -= h
        values = np.asarray(f_batch(stack.reshape((-1,) + theta.shape)), dtype=np.float64)
        grad[idx] = (values[0::2] - values[1::2]) / (2.0 * h)
    return grad.reshape(theta.shape)


def _soft_ce_values(z: np.ndarray, target: np.ndarray, weight) -> np.ndarray:
    """Mean weighted soft-label cross-entropy for a stack of (3, N) logits."""
    zmax = z.max(axis=-2, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=-2, keepdims=True))
    per_pixel = -(target * logp).sum(axis=-2)
    if weight is not None:
        per_pixel = per_pixel * weight
    return per_pixel.sum(axis=-1) / z.shape[-1]


def _binary_ce_values(z: np.ndarray, label: int) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    return -logp[..., label]


@dataclass
class GradCheckReport:
    max_error: float
    logit_error: float
    param_errors: dict


def gradient_check(net: TinyNet, x, mask, attr_label=None, loss: str = "combined",
                   width: float = 2, norm: str = "max", gk_mode: str = "literal",
                   a: float = 0.9, b: float = 1.0, lam: float = 1.0,
                   h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences in float64.

    Checks the loss gradient with respect to every logit, then the
    full-pipeline gradient (segmentation loss plus ``lam`` times the attribute
    loss) with respect to every parameter. The error measure is
    ``|g_a - g_n| / max(1, |g_a|, |g_n|)``. The global kernel is derived from
    the mean-mask channel of ``x``.
    """
    net = net.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    mask = raster.check_mask(mask)
    kind = individual_kernel(mask, width, norm)
    kg = global_kernel(np.clip(x[5], 0.0, 1.0), a, b, gk_mode)
    use_attr = attr_label is not None and lam != 0

    logits, attr_logits, cache = forward(net, x)
    seg = segmentation_loss(loss, logits, mask, kind, kg)
    z = logits.copy()
    num_logit = numeric_gradient(
        lambda: segmentation_loss(loss, z, mask, kind, kg).value, z, h)
    logit_err = float(relative_error(seg.grad, num_logit).max())

    grad_attr = lam * attribute_loss(attr_logits, attr_label).grad if use_attr else None
    analytic = backward(net, cache, seg.grad, grad_attr)

    # Forward values for stacks of perturbed parameters, restarting at the
    # stage that owns the perturbed tensor.
    _, hh, ww = x.shape
    n = hh * ww
    if loss in ("ik", "combined"):
        target = kind.reshape(NUM_CLASSES, n)
    else:
        fg = mask.reshape(-1)
        target = np.stack([fg, np.zeros(n, bool), ~fg]).astype(np.float64)
    weight = None if loss in ("ik", "baseline") else kg.reshape(n)

    def batch_loss(name, stack):
        params = dict(net.params)
        params[name] = stack
        stage = name.split(".")[0]
        if stage == "conv1":
            h1 = _conv1(params, cache.cols1)
            h2 = _conv2(params, _im2col(h1.reshape(len(stack), HIDDEN, hh, ww), 3))
        elif stage == "conv2":
            h2 = _conv2(params, cache.cols2)
        else:
            h2 = np.broadcast_to(cache.h2, (len(stack),) + cache.h2.shape)
        out, attr_out = _heads(params, h2)[:2]
        values = _soft_ce_values(out, target, weight)
        if use_attr:
            values = values + lam * _binary_ce_values(attr_out, attr_label)
        return values

    errors = {}
    for name, theta in net.params.items():
        numeric = batched_numeric_gradient(lambda s: batch_loss(name, s), theta, h)
        errors[name] = float(relative_error(analytic[name], numeric).max())
    worst = max(logit_err, max(errors.values()))
    return GradCheckReport(worst, logit_err, errors)
