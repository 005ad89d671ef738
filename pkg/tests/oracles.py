"""Independent brute-force oracles the tests check the library against.

Everything here is written straight from the defining formulas in plain
numpy/python loops, deliberately sharing no code with the package.
"""

import math

import numpy as np


def linear(x, module):
    """y = x W^T + b with a torch Linear's weights, in float64."""
    w = module.weight.detach().cpu().numpy().astype(np.float64)
    out = x @ w.T
    if module.bias is not None:
        out = out + module.bias.detach().cpu().numpy().astype(np.float64)
    return out


def softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def dense_attention(q_tokens, kv_tokens, attn_module, mask=None):
    """Per-window, per-head softmax attention computed with explicit loops.

    q_tokens: (num_windows, Nq, c) float64; kv_tokens: (num_windows, Nk, c);
    mask: (num_windows, Nq, Nk) additive or None. Mirrors the projections of
    a WindowAttention module but no torch code path.
    """
    nw, nq, c = q_tokens.shape
    heads = attn_module.num_heads
    hd = c // heads
    out = np.zeros((nw, nq, c))
    for w in range(nw):
        q = linear(q_tokens[w], attn_module.q)
        k = linear(kv_tokens[w], attn_module.k)
        v = linear(kv_tokens[w], attn_module.v)
        merged = np.zeros((nq, c))
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            logits = (q[:, sl] / math.sqrt(hd)) @ k[:, sl].T
            if mask is not None:
                logits = logits + mask[w]
            merged[:, sl] = softmax_rows(logits) @ v[:, sl]
        out[w] = linear(merged, attn_module.proj)
    return out


def layer_norm(x, module, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)  # biased, as torch uses
    y = (x - mu) / np.sqrt(var + eps)
    w = module.weight.detach().cpu().numpy().astype(np.float64)
    b = module.bias.detach().cpu().numpy().astype(np.float64)
    return y * w + b


_erf = np.vectorize(math.erf)


def gelu(x):
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def feed_forward(x, module):
    return linear(gelu(linear(x, module.fc1)), module.fc2)


def fd_gradient(fn, tensor, eps=1e-5):
    """Central finite differences of scalar fn() wrt every element of tensor."""
    flat = tensor.data.view(-1)
    grad = np.zeros(flat.numel())
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = fn()
        flat[i] = orig - eps
        minus = fn()
        flat[i] = orig
        grad[i] = (plus - minus) / (2.0 * eps)
    return grad.reshape(tuple(tensor.shape))


def fd_gradient_subset(fn, named_params, picks, eps=1e-5):
    """Central differences at chosen (name, flat_index) coordinates."""
    out = []
    params = dict(named_params)
    for name, idx in picks:
        flat = params[name].data.view(-1)
        orig = flat[idx].item()
        flat[idx] = orig + eps
        plus = fn()
        flat[idx] = orig - eps
        minus = fn()
        flat[idx] = orig
        out.append((plus - minus) / (2.0 * eps))
    return np.array(out)


def pairwise_auc(scores, labels):
    """O(n^2) Mann-Whitney AUC: ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def per_frame_mse(restored, real):
    """Plain loop over frames and pixels."""
    out = []
    for t in range(restored.shape[0]):
        diff = np.asarray(restored[t], dtype=np.float64) - np.asarray(real[t], dtype=np.float64)
        out.append(float((diff * diff).sum() / diff.size))
    return out
