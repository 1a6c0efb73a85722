"""Shared transformer building blocks, gradient checking, checkpoint arrays.

Blocks are pre-norm (LayerNorm -> multi-head self-attention -> residual, then
LayerNorm -> GELU MLP with 4x expansion -> residual), CLIP-style.  Reverse-mode
gradients come from torch autograd; grad_check verifies them against central
finite differences in double precision.
"""

from __future__ import annotations

import io
import json
import os
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn

INIT_STD = 0.02
CHECKPOINT_MAGIC = b"MFCLIPCK"
CHECKPOINT_VERSION = 1


def trunc_normal_(tensor: torch.Tensor, std: float = INIT_STD) -> torch.Tensor:
    return nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std)


def init_linear(module: nn.Module) -> None:
    """Truncated-normal weights, zero biases, for Linear/Conv/Embedding."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            trunc_normal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            trunc_normal_(m.weight)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads != 0:
            raise ValueError(f"dimension {d} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = d // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(
        self, x: torch.Tensor, return_weights: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class Mlp(nn.Module):
    def __init__(self, d: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(d, ratio * d)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(ratio * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP block; output shape equals input shape."""

    def __init__(self, d: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = Mlp(d, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        _, attn = self.attn(self.ln1(x), return_weights=True)
        return attn


def zero_output_projections_(block: TransformerBlock) -> TransformerBlock:
    """Zero attn.proj and mlp.fc2 so the block reduces to the identity."""
    with torch.no_grad():
        block.attn.proj.weight.zero_()
        block.attn.proj.bias.zero_()
        block.mlp.fc2.weight.zero_()
        block.mlp.fc2.bias.zero_()
    return block


class GradCheckError(RuntimeError):
    pass


def _named_params(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"param{i}", p) for i, p in enumerate(params)]


def grad_check(
    f: Callable[[], torch.Tensor],
    params,
    eps: float = 1e-4,
    samples_per_param: int = 4,
    seed: int = 0,
    floor: float = 1e-4,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` is a closure producing a scalar from ``params`` (a module, a mapping
    name -> tensor, or a sequence of tensors).  A handful of coordinates per
    parameter is probed.  Everything should run in double precision.  The
    relative error divides by max(|grad|, |fd|, floor); below ``floor`` the
    comparison is effectively absolute, so cancellation noise on dead
    coordinates does not register as disagreement.
    """
    named = _named_params(params)
    for _, p in named:
        if p.grad is not None:
            p.grad = None
    value = f()
    if value.numel() != 1:
        raise GradCheckError("f must return a scalar")
    value.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in named:
        if not torch.isfinite(p.data).all():
            raise GradCheckError(f"non-finite values in parameter {name}")
        grad = p.grad
        if grad is None:
            grad = torch.zeros_like(p)
        if not torch.isfinite(grad).all():
            raise GradCheckError(f"non-finite gradient for parameter {name}")
        n = p.numel()
        flat = p.data.view(-1)
        gflat = grad.view(-1)
        count = min(samples_per_param, n)
        coords = rng.choice(n, size=count, replace=False)
        for c in coords:
            c = int(c)
            old = flat[c].item()
            flat[c] = old + eps
            with torch.no_grad():
                up = f().item()
            flat[c] = old - eps
            with torch.no_grad():
                down = f().item()
            flat[c] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite probe value at {name}[{c}]")
            fd = (up - down) / (2.0 * eps)
            ad = gflat[c].item()
            rel = abs(ad - fd) / max(abs(ad), abs(fd), floor)
            worst = max(worst, rel)
    return worst


# --- checkpoint array container ----------------------------------------------
#
# Layout: MAGIC, u64 little-endian manifest length, JSON manifest, raw
# little-endian array bytes.  The manifest records name/shape/dtype/offset per
# array plus a free-form "meta" dict.


def save_arrays(path: str, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    entries = []
    blob = io.BytesIO()
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        data = arr.tobytes()  # C-order copy regardless of input layout
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blob.write(data)
        offset += len(data)
    manifest = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "params": entries, "meta": meta}
    ).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(manifest).to_bytes(8, "little"))
        fh.write(manifest)
        fh.write(blob.getvalue())
    os.replace(tmp, path)


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        size = int.from_bytes(fh.read(8), "little")
        manifest = json.loads(fh.read(size).decode("utf-8"))
        if manifest["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {manifest['format_version']}"
            )
        payload = fh.read()
    arrays = {}
    for entry in manifest["params"]:
        start = entry["offset"]
        raw = payload[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, manifest["meta"]


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def load_state_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy arrays into a module's state, failing loudly on any mismatch."""
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise ValueError(f"state mismatch: missing={missing} unexpected={extra}")
    for name, tensor in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {tuple(arr.shape)} "
                f"vs model {tuple(tensor.shape)}"
            )
        tensor.copy_(torch.from_numpy(arr.copy()).to(tensor.dtype))
