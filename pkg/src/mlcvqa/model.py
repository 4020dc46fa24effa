"""Temporal quality-prediction head with exact reverse-mode gradients.

Architecture: a 1-D projection convolution (kernel 3, stride 1, padding 1)
followed by two same-shape convolutions, ReLU after each, then a two-layer
MLP scoring every time step; the clip score is the arithmetic mean over
time. Convolutions preserve the temporal length for any T >= 1.

Everything is plain float64 numpy. ``backward`` returns exact gradients of
smooth-L1(loss on the pooled score) for every parameter; there is no
general autodiff here, just this fixed architecture.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .features import FeatureSequence

__all__ = [
    "ModelConfig",
    "ConvParams",
    "DenseParams",
    "QualityModel",
    "Prediction",
    "init_model",
    "forward",
    "smooth_l1",
    "smooth_l1_grad",
    "backward",
    "batch_backward",
    "zero_grads",
    "save_model",
    "load_model",
]

_CKPT_MAGIC = b"MLQM"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 4960
    proj_dim: int = 128
    conv_kernel: int = 3
    conv_stride: int = 1
    conv_padding: int = 1
    n_conv_layers: int = 2
    mlp_hidden: int = 64

    def __post_init__(self) -> None:
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv kernel must be odd")
        if self.conv_padding != (self.conv_kernel - 1) // 2:
            raise ValueError("padding must be (kernel - 1) / 2 to preserve T")
        if self.conv_stride != 1:
            raise ValueError("only stride 1 is supported")
        for name in ("input_dim", "proj_dim", "n_conv_layers", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class ConvParams:
    w: np.ndarray  # (out, in, kernel)
    b: np.ndarray  # (out,)


@dataclass
class DenseParams:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)


@dataclass
class QualityModel:
    config: ModelConfig
    proj: ConvParams
    convs: list[ConvParams]
    mlp: list[DenseParams]

    def named_params(self):
        yield "proj.w", self.proj.w
        yield "proj.b", self.proj.b
        for i, conv in enumerate(self.convs):
            yield f"convs[{i}].w", conv.w
            yield f"convs[{i}].b", conv.b
        for i, dense in enumerate(self.mlp):
            yield f"mlp[{i}].w", dense.w
            yield f"mlp[{i}].b", dense.b


@dataclass
class Prediction:
    per_step: np.ndarray
    score: float


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # fan-in Kaiming-uniform, leaky-relu gain convention: U(+-1/sqrt(fan_in))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(cfg: ModelConfig, seed: int = 0) -> QualityModel:
    """Kaiming-uniform (fan-in) weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    k = cfg.conv_kernel
    proj = ConvParams(
        w=_kaiming_uniform(rng, (cfg.proj_dim, cfg.input_dim, k), cfg.input_dim * k),
        b=np.zeros(cfg.proj_dim),
    )
    convs = [
        ConvParams(
            w=_kaiming_uniform(rng, (cfg.proj_dim, cfg.proj_dim, k), cfg.proj_dim * k),
            b=np.zeros(cfg.proj_dim),
        )
        for _ in range(cfg.n_conv_layers)
    ]
    mlp = [
        DenseParams(
            w=_kaiming_uniform(rng, (cfg.mlp_hidden, cfg.proj_dim), cfg.proj_dim),
            b=np.zeros(cfg.mlp_hidden),
        ),
        DenseParams(
            w=_kaiming_uniform(rng, (1, cfg.mlp_hidden), cfg.mlp_hidden),
            b=np.zeros(1),
        ),
    ]
    return QualityModel(config=cfg, proj=proj, convs=convs, mlp=mlp)


def _as_input(x) -> np.ndarray:
    data = x.data if isinstance(x, FeatureSequence) else x
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"input must be T x D, got shape {arr.shape}")
    return arr


def _tap_matrices(p: ConvParams) -> list[np.ndarray]:
    # kernel-tap slices are strided along the last axis, which knocks the
    # matmuls off the BLAS fast path; copy each tap once per call instead
    return [np.ascontiguousarray(p.w[:, :, tap]) for tap in range(p.w.shape[2])]


def _conv1d(x: np.ndarray, p: ConvParams, pad: int) -> np.ndarray:
    # x: (T, in) zero-padded along T; one matmul per kernel tap
    t = x.shape[0]
    xp = np.zeros((t + 2 * pad, x.shape[1]))
    xp[pad : pad + t] = x
    taps = _tap_matrices(p)
    out = xp[0:t] @ taps[0].T
    for tap in range(1, len(taps)):
        out += xp[tap : tap + t] @ taps[tap].T
    out += p.b
    return out


def _conv1d_backward(
    d_out: np.ndarray, x: np.ndarray, p: ConvParams, pad: int
) -> tuple[np.ndarray, ConvParams]:
    t = x.shape[0]
    xp = np.zeros((t + 2 * pad, x.shape[1]))
    xp[pad : pad + t] = x
    dw = np.empty_like(p.w)
    dxp = np.zeros_like(xp)
    for tap, w_tap in enumerate(_tap_matrices(p)):
        dw[:, :, tap] = d_out.T @ xp[tap : tap + t]
        dxp[tap : tap + t] += d_out @ w_tap
    db = d_out.sum(axis=0)
    return dxp[pad : pad + t], ConvParams(w=dw, b=db)


def _forward_trace(model: QualityModel, x: np.ndarray):
    cfg = model.config
    if x.shape[1] != cfg.input_dim:
        raise ValueError(f"input has {x.shape[1]} dims, model expects {cfg.input_dim}")
    pad = cfg.conv_padding
    conv_inputs = []
    preacts = []
    h = x
    for params in (model.proj, *model.convs):
        conv_inputs.append(h)
        z = _conv1d(h, params, pad)
        preacts.append(z)
        h = np.maximum(z, 0.0)
    mlp_in = h
    z1 = mlp_in @ model.mlp[0].w.T + model.mlp[0].b
    h1 = np.maximum(z1, 0.0)
    per_step = (h1 @ model.mlp[1].w.T + model.mlp[1].b)[:, 0]
    return conv_inputs, preacts, mlp_in, z1, h1, per_step


def forward(model: QualityModel, x) -> Prediction:
    """Per-step scores and their temporal mean for a T x input_dim input."""
    arr = _as_input(x)
    per_step = _forward_trace(model, arr)[-1]
    return Prediction(per_step=per_step, score=float(per_step.mean()))


def smooth_l1(y: float, y_hat: float) -> float:
    """0.5 e^2 inside the unit error band, |e| - 0.5 outside."""
    e = abs(y - y_hat)
    return 0.5 * e * e if e < 1.0 else e - 0.5


def smooth_l1_grad(y: float, y_hat: float) -> float:
    """d loss / d y_hat."""
    e = y_hat - y
    if abs(e) < 1.0:
        return e
    return 1.0 if e > 0 else -1.0


def zero_grads(model: QualityModel) -> QualityModel:
    return QualityModel(
        config=model.config,
        proj=ConvParams(np.zeros_like(model.proj.w), np.zeros_like(model.proj.b)),
        convs=[ConvParams(np.zeros_like(c.w), np.zeros_like(c.b)) for c in model.convs],
        mlp=[DenseParams(np.zeros_like(d.w), np.zeros_like(d.b)) for d in model.mlp],
    )


def backward(model: QualityModel, x, y: float) -> tuple[float, QualityModel]:
    """Loss and exact parameter gradients of smooth_l1(y, forward(x).score).

    The gradient structure mirrors QualityModel field-for-field.
    """
    arr = _as_input(x)
    conv_inputs, preacts, mlp_in, z1, h1, per_step = _forward_trace(model, arr)
    t = arr.shape[0]
    score = float(per_step.mean())
    loss = smooth_l1(y, score)
    d_step = np.full((t, 1), smooth_l1_grad(y, score) / t)

    grads = zero_grads(model)
    grads.mlp[1].w[:] = d_step.T @ h1
    grads.mlp[1].b[:] = d_step.sum(axis=0)
    dh1 = d_step @ model.mlp[1].w
    dz1 = dh1 * (z1 > 0.0)
    grads.mlp[0].w[:] = dz1.T @ mlp_in
    grads.mlp[0].b[:] = dz1.sum(axis=0)
    dh = dz1 @ model.mlp[0].w

    pad = model.config.conv_padding
    layers = [model.proj, *model.convs]
    grad_layers = [grads.proj, *grads.convs]
    for i in range(len(layers) - 1, -1, -1):
        dz = dh * (preacts[i] > 0.0)
        dh, layer_grads = _conv1d_backward(dz, conv_inputs[i], layers[i], pad)
        grad_layers[i].w[:] = layer_grads.w
        grad_layers[i].b[:] = layer_grads.b
    return loss, grads


def _batched_conv1d(xp: np.ndarray, taps: list[np.ndarray], b: np.ndarray, t: int) -> np.ndarray:
    # xp: (B, T + 2*pad, Cin) already padded
    out = np.broadcast_to(b, (xp.shape[0], t, b.shape[0])).copy()
    for tap, w_tap in enumerate(taps):
        out += xp[:, tap : tap + t, :] @ w_tap.T
    return out


def batch_backward(model: QualityModel, xs, ys) -> tuple[float, QualityModel]:
    """Mean loss and mean-reduced gradients over a batch in one pass.

    Equivalent to averaging ``backward`` over the batch (up to summation
    rounding) but vectorized across samples; sequences are grouped by T so
    mixed-length batches still work.
    """
    arrs = [_as_input(x) for x in xs]
    targets = [float(y) for y in ys]
    if len(arrs) != len(targets) or not arrs:
        raise ValueError("xs and ys must be equal-length and non-empty")
    n = len(arrs)
    cfg = model.config
    pad = cfg.conv_padding
    grads = zero_grads(model)
    grad_layers = [grads.proj, *grads.convs]
    layers = [model.proj, *model.convs]
    total_loss = 0.0

    groups: dict[int, list[int]] = {}
    for i, arr in enumerate(arrs):
        if arr.shape[1] != cfg.input_dim:
            raise ValueError(f"input has {arr.shape[1]} dims, model expects {cfg.input_dim}")
        groups.setdefault(arr.shape[0], []).append(i)

    layer_taps = [_tap_matrices(p) for p in layers]
    for t, indices in sorted(groups.items()):
        x = np.stack([arrs[i] for i in indices])  # (B, T, D)
        y = np.array([targets[i] for i in indices])
        b = x.shape[0]
        conv_inputs = []
        preacts = []
        h = x
        for params, taps in zip(layers, layer_taps):
            xp = np.zeros((b, t + 2 * pad, h.shape[2]))
            xp[:, pad : pad + t, :] = h
            conv_inputs.append(xp)
            z = _batched_conv1d(xp, taps, params.b, t)
            preacts.append(z)
            h = np.maximum(z, 0.0)
        z1 = h @ model.mlp[0].w.T + model.mlp[0].b
        h1 = np.maximum(z1, 0.0)
        per_step = (h1 @ model.mlp[1].w.T + model.mlp[1].b)[:, :, 0]  # (B, T)
        scores = per_step.mean(axis=1)
        errs = scores - y
        total_loss += float(np.sum(np.where(np.abs(errs) < 1.0, 0.5 * errs * errs, np.abs(errs) - 0.5)))
        d_score = np.where(np.abs(errs) < 1.0, errs, np.sign(errs)) / n
        d_step = np.broadcast_to((d_score / t)[:, None, None], (b, t, 1))

        grads.mlp[1].w += np.tensordot(d_step, h1, axes=([0, 1], [0, 1]))
        grads.mlp[1].b += d_step.sum(axis=(0, 1))
        dh1 = d_step @ model.mlp[1].w
        dz1 = dh1 * (z1 > 0.0)
        grads.mlp[0].w += np.tensordot(dz1, np.maximum(preacts[-1], 0.0), axes=([0, 1], [0, 1]))
        grads.mlp[0].b += dz1.sum(axis=(0, 1))
        dh = dz1 @ model.mlp[0].w
        for i in range(len(layers) - 1, -1, -1):
            dz = dh * (preacts[i] > 0.0)
            dxp = np.zeros_like(conv_inputs[i])
            for tap, w_tap in enumerate(layer_taps[i]):
                grad_layers[i].w[:, :, tap] += np.tensordot(
                    dz, conv_inputs[i][:, tap : tap + t, :], axes=([0, 1], [0, 1])
                )
                dxp[:, tap : tap + t, :] += dz @ w_tap
            grad_layers[i].b += dz.sum(axis=(0, 1))
            dh = dxp[:, pad : pad + t, :]
    return total_loss / n, grads


def _write_tensor(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(fh) -> np.ndarray:
    raw = fh.read(1)
    if len(raw) != 1:
        raise ValueError("truncated checkpoint: missing tensor rank")
    (ndim,) = struct.unpack("<B", raw)
    shape = []
    for _ in range(ndim):
        shape.append(struct.unpack("<I", fh.read(4))[0])
    count = int(np.prod(shape))
    payload = fh.read(count * 4)
    if len(payload) != count * 4:
        raise ValueError("truncated checkpoint: short tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


def save_model(model: QualityModel, path: str) -> None:
    """Binary checkpoint: magic MLQM, version, config block, float32 tensors."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(
            struct.pack(
                "<HIIIIIII",
                _CKPT_VERSION,
                cfg.input_dim,
                cfg.proj_dim,
                cfg.conv_kernel,
                cfg.conv_stride,
                cfg.conv_padding,
                cfg.n_conv_layers,
                cfg.mlp_hidden,
            )
        )
        for _, param in model.named_params():
            _write_tensor(fh, param)


def load_model(path: str) -> QualityModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        header = fh.read(struct.calcsize("<HIIIIIII"))
        version, input_dim, proj_dim, kernel, stride, padding, n_conv, mlp_hidden = struct.unpack(
            "<HIIIIIII", header
        )
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        cfg = ModelConfig(
            input_dim=input_dim,
            proj_dim=proj_dim,
            conv_kernel=kernel,
            conv_stride=stride,
            conv_padding=padding,
            n_conv_layers=n_conv,
            mlp_hidden=mlp_hidden,
        )
        model = init_model(cfg, seed=0)
        for _, param in model.named_params():
            tensor = _read_tensor(fh)
            if tensor.shape != param.shape:
                raise ValueError(f"{path}: tensor shape {tensor.shape} != expected {param.shape}")
            param[:] = tensor
    return model
