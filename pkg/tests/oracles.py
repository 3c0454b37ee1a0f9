"""Independent NumPy re-computations used as test oracles."""
import numpy as np


def np_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def mha_numpy(mha, q_tokens, kv_tokens):
    """Multi-head attention from an ``nn.MultiheadAttention``'s weights, token-by-token."""
    c = mha.embed_dim
    heads = mha.num_heads
    d = c // heads
    w = mha.in_proj_weight.detach().double().numpy()
    b = mha.in_proj_bias.detach().double().numpy()
    wo = mha.out_proj.weight.detach().double().numpy()
    bo = mha.out_proj.bias.detach().double().numpy()
    q = q_tokens @ w[:c].T + b[:c]
    k = kv_tokens @ w[c:2 * c].T + b[c:2 * c]
    v = kv_tokens @ w[2 * c:].T + b[2 * c:]
    out = np.zeros((q.shape[0], c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for t in range(q.shape[0]):
            scores = np.array([q[t, sl] @ k[u, sl] for u in range(k.shape[0])]) / np.sqrt(d)
            a = np_softmax(scores)
            out[t, sl] = sum(a[u] * v[u, sl] for u in range(k.shape[0]))
    return out @ wo.T + bo


def linear_np(layer, x):
    return x @ layer.weight.detach().double().numpy().T + layer.bias.detach().double().numpy()


def conv1x1_np(conv, x):
    """1x1 convolution on a ``(C, H, W)`` array, pixel by pixel."""
    w = conv.weight.detach().double().numpy()[:, :, 0, 0]
    bias = conv.bias.detach().double().numpy()
    c, h, wd = x.shape
    out = np.zeros((w.shape[0], h, wd))
    for i in range(h):
        for j in range(wd):
            out[:, i, j] = w @ x[:, i, j] + bias
    return out


def ffn_np(ffn, x):
    return conv1x1_np(ffn[2], np.maximum(conv1x1_np(ffn[0], x), 0.0))


def mlp_np(mlp, x):
    return linear_np(mlp[2], np.maximum(linear_np(mlp[0], x), 0.0))


def topk_oracle(sigma, k):
    """Full sort by (-value, index)."""
    return sorted(range(len(sigma)), key=lambda i: (-sigma[i], i))[:k]


def precision_oracle(pred, gt):
    correct = 0
    total = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        correct += int(bool(p) == bool(g))
        total += 1
    return 100.0 * correct / total


def jaccard_oracle(pred, gt):
    inter = union = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        inter += int(bool(p) and bool(g))
        union += int(bool(p) or bool(g))
    return 100.0 if union == 0 else 100.0 * inter / union
