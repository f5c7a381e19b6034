"""Small shared torch helpers (CPU-only, deterministic per seed)."""

from __future__ import annotations

import numpy as np
import torch


def to_tensor(arrays):
    data = arrays.data if hasattr(arrays, "data") and not torch.is_tensor(arrays) else arrays
    if torch.is_tensor(data):
        return data.float()
    return torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))


def batch_logits(net, arrays, chunk=256):
    """Forward pass in eval mode, chunked, gradients off. Returns float32 ndarray."""
    net.eval()
    xs = to_tensor(arrays)
    outs = []
    with torch.no_grad():
        for start in range(0, xs.shape[0], chunk):
            outs.append(net(xs[start:start + chunk]))
    return torch.cat(outs).numpy().astype(np.float32, copy=False)


def argmax_labels(logits):
    """Top-1 with ties broken toward the lowest class index."""
    return np.argmax(logits, axis=1).astype(np.int64)


def epoch_permutations(n, epochs, seed):
    g = torch.Generator().manual_seed(int(seed))
    return [torch.randperm(n, generator=g) for _ in range(epochs)]
