"""Brute-force reference implementations, written without the autograd engine.

Everything here works on plain numpy arrays with explicit loops or direct
formula evaluation so it stays independent of the code under test.
"""

import math

import numpy as np


def conv1d_ref(x, w, b, padding):
    T, c_in = x.shape
    K, _, c_out = w.shape
    t_out = T + 2 * padding - K + 1
    out = np.zeros((t_out, c_out))
    for t in range(t_out):
        for o in range(c_out):
            acc = b[o]
            for k in range(K):
                src = t + k - padding
                if 0 <= src < T:
                    for c in range(c_in):
                        acc += x[src, c] * w[k, c, o]
            out[t, o] = acc
    return out


def relu_ref(x):
    return np.maximum(x, 0.0)


def softmax_ref(v):
    v = np.asarray(v, dtype=float)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_ref(q, k, v):
    d = q.shape[-1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = np.array([q[i] @ k[j] / math.sqrt(d) for j in range(k.shape[0])])
        weights = softmax_ref(scores)
        for j in range(k.shape[0]):
            out[i] += weights[j] * v[j]
    return out


def expert_ref(x, p):
    """p: ExpertParams (only ``.data`` is read)."""
    k1, k2 = p.w1.shape[0], p.w2.shape[0]
    h = relu_ref(conv1d_ref(x, p.w1.data, p.b1.data, (k1 - 1) // 2))
    return conv1d_ref(h, p.w2.data, p.b2.data, (k2 - 1) // 2)


def router_ref(x, p):
    h = relu_ref(conv1d_ref(x, p.w1.data, p.b1.data, 0))
    h = relu_ref(conv1d_ref(h, p.w2.data, p.b2.data, 0))
    pooled = h.sum(axis=0) / h.shape[0]
    logits = np.array([pooled @ p.proj.data[:, n] + p.proj_b.data[n] for n in range(p.proj.shape[1])])
    return softmax_ref(logits)


def molre_ref(x, block, task, k):
    """Evaluate every shared expert, sort gates (ties to lower index), sum the top k."""
    gates = router_ref(x, block.routers[task])
    outs = [expert_ref(x, e) for e in block.shared]
    order = sorted(range(len(gates)), key=lambda i: (-gates[i], i))[:k]
    total = np.zeros_like(x)
    for n in order:
        total += gates[n] * outs[n]
    return total + expert_ref(x, block.task_experts[task])


def projected_attention_ref(q_src, kv_src, p):
    q = q_src @ p.wq.data + p.bq.data
    k = kv_src @ p.wk.data + p.bk.data
    v = kv_src @ p.wv.data + p.bv.data
    return attention_ref(q, k, v)


def fusion_layer_ref(h_t, h_a, layer):
    z_t = projected_attention_ref(h_t, h_a, layer.cross["text"])
    z_a = projected_attention_ref(h_a, h_t, layer.cross["audio"])
    h_t, h_a = h_t + z_t, h_a + z_a
    h_t = h_t + projected_attention_ref(h_t, h_t, layer.self_attn["text"])
    h_a = h_a + projected_attention_ref(h_a, h_a, layer.self_attn["audio"])
    for name in ("text", "audio"):
        f = layer.ffn[name]
        src = h_t if name == "text" else h_a
        upd = relu_ref(src @ f.w1.data + f.b1.data) @ f.w2.data + f.b2.data
        if name == "text":
            h_t = h_t + upd
        else:
            h_a = h_a + upd
    return h_t, h_a


def fuse_ref(h_t, h_a, params):
    t = np.vstack([params.cls["text"].data, h_t])
    a = np.vstack([params.cls["audio"].data, h_a])
    for layer in params.layers:
        t, a = fusion_layer_ref(t, a, layer)
    return np.concatenate([t[0], a[0]])


def sigmoid_ref(z):
    return 1.0 / (1.0 + np.exp(-z))


def head_ref(z, p):
    return relu_ref(z @ p.w1.data + p.b1.data) @ p.w2.data + p.b2.data


def model_ref(x_t, x_a, model):
    """Full mmolre forward for one sample, composed from the references above."""
    streams_t = {task: x_t for task in model.molre.tasks}
    streams_a = {task: x_a for task in model.molre.tasks}
    for b_t, b_a in zip(model.unitse["text"], model.unitse["audio"]):
        streams_t = {task: molre_ref(streams_t[task], b_t, task, model.molre.top_k) for task in streams_t}
        streams_a = {task: molre_ref(streams_a[task], b_a, task, model.molre.top_k) for task in streams_a}
    out = {}
    for task in model.tasks:
        z = fuse_ref(streams_t[task], streams_a[task], model.fusion[task])
        y = head_ref(z, model.heads[task])
        out[task] = y[0] if task == "SA" else sigmoid_ref(y)
    return out


def mae_ref(y, y_hat):
    return sum(abs(a - b) for a, b in zip(y, y_hat)) / len(y)


def bce_ref(y, p, eps=1e-7):
    total = 0.0
    for yi, pi in zip(np.asarray(y), np.asarray(p)):
        for yij, pij in zip(yi, pi):
            pij = min(max(pij, eps), 1 - eps)
            total += yij * math.log(pij) + (1 - yij) * math.log(1 - pij)
    return -total / len(y)
