"""Dense-tensor layer operations with analytic gradients, plus a
finite-difference gradient checker and the binary checkpoint format.

Forward passes delegate to torch; gradients come from autograd. The
gradient checker below is an independent central-difference oracle and
never consults autograd for its numeric estimates.
"""

from __future__ import annotations

import struct

import numpy as np
import torch
import torch.nn.functional as F

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_ALPHA = 0.2
DROPOUT_P = 0.2


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Strided cross-correlation (NCHW)."""
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Adjoint of conv2d with the same kernel layout."""
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding,
                              output_padding=output_padding)


def batch_norm2d(x, running_mean, running_var, weight, bias,
                 training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch normalization; train mode needs batch >= 2."""
    if training and x.shape[0] < 2:
        raise ValueError("batch norm in train mode needs a batch of >= 2")
    return F.batch_norm(x, running_mean, running_var, weight, bias,
                        training=training, momentum=momentum, eps=eps)


def leaky_relu(x, alpha: float = LEAKY_ALPHA):
    return F.leaky_relu(x, negative_slope=alpha)


def dropout(x, p: float = DROPOUT_P, training: bool = True,
            generator: torch.Generator | None = None):
    """Inverted dropout with an explicit generator for determinism."""
    if not (0 <= p < 1):
        raise ValueError("dropout probability must be in [0, 1)")
    if not training or p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator,
                      device=x.device, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def adaptive_avg_pool2d(x):
    """Per-channel spatial mean, kept as a 1x1 map."""
    return F.adaptive_avg_pool2d(x, 1)


def affine(x, weight, bias=None):
    """y = x W^T + b."""
    return F.linear(x, weight, bias)


def kaiming_uniform_(tensor: torch.Tensor, fan_in: int,
                     a: float = LEAKY_ALPHA,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Kaiming-uniform init with leaky-rectifier gain, seeded explicitly."""
    gain = np.sqrt(2.0 / (1.0 + a ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


def uniform_bias_(tensor: torch.Tensor, fan_in: int,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


def grad_check(fn, tensors, eps: float = 1e-4,
               entries_per_tensor: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between autograd gradients of the scalar fn and
    central finite differences over the given tensors.

    Checks every entry unless entries_per_tensor caps the per-tensor sample
    (sampled deterministically). Use float64 tensors; finite differences are
    unreliable in float32.
    """
    tensors = list(tensors)
    for t in tensors:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=False)

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.view(-1)
            n = flat.numel()
            if entries_per_tensor is None or entries_per_tensor >= n:
                idx = range(n)
            else:
                idx = rng.choice(n, size=entries_per_tensor, replace=False)
            gflat = g.reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = fn().item()
                flat[i] = orig - eps
                f_minus = fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                analytic = gflat[i].item()
                denom = max(abs(analytic), abs(numeric), 1e-6)
                max_rel = max(max_rel, abs(analytic - numeric) / denom)
    for t in tensors:
        t.requires_grad_(False)
    return max_rel


CKPT_MAGIC = b"CVDE"
CKPT_VERSION = 1


def save_checkpoint(path, named_tensors: dict[str, torch.Tensor]) -> None:
    """Binary checkpoint: magic, u32 version, then per tensor u16 name
    length, UTF-8 name, u32 rank, u32 extents, float32 data."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, tensor in named_tensors.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"not a CVDE checkpoint: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        tensors: dict[str, torch.Tensor] = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            (name_len,) = struct.unpack("<H", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            tensors[name] = torch.from_numpy(data.copy())
    return tensors
