"""Hand-written numpy backprop used as an independent check on the tape."""

import numpy as np


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def forward(weights, activation, x):
    """Returns augmented layer inputs, pre-activations and log-probabilities."""
    inputs, pre = [], []
    h = x
    for i, w in enumerate(weights):
        h_aug = np.hstack([h, np.ones((h.shape[0], 1))])
        z = h_aug @ w
        inputs.append(h_aug)
        pre.append(z)
        if i < len(weights) - 1:
            h = sigmoid(z) if activation == "sigmoid" else np.maximum(z, 0)
    z = pre[-1]
    m = z.max(axis=1, keepdims=True)
    logp = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    return inputs, pre, logp


def per_example_grads(weights, activation, x, y):
    """d J_i / d W_l for every example i, as a list over layers of [n, *W_l.shape]."""
    inputs, pre, logp = forward(weights, activation, x)
    n = x.shape[0]
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0  # dJ_i/dz_L
    layer_g = [None] * len(weights)
    layer_g[-1] = g
    for i in range(len(weights) - 1, 0, -1):
        back = g @ weights[i][:-1].T
        z = pre[i - 1]
        if activation == "sigmoid":
            s = sigmoid(z)
            g = back * s * (1 - s)
        else:
            g = back * (z > 0)
        layer_g[i - 1] = g
    grads = [np.einsum("ni,nj->nij", a, b) for a, b in zip(inputs, layer_g)]
    return grads, layer_g, inputs


def random_problem(rng, layers=None, width_max=32, n_max=8, m_max=8, k=None, activation=None):
    """Random MLP sizes and a training/validation batch pair."""
    from metaweight.nn import Batch, MlpModel

    layers = layers or int(rng.integers(2, 4))
    k = k or int(rng.integers(2, 5))
    d = int(rng.integers(2, 6))
    sizes = [d] + [int(rng.integers(2, width_max + 1)) for _ in range(layers - 1)] + [k]
    model = MlpModel.init(sizes, activation or ("sigmoid" if rng.random() < 0.7 else "relu"),
                          seed=int(rng.integers(1 << 30)))
    # non-zero biases so the augmented column matters
    model = model.with_weights([w + np.vstack([np.zeros((w.shape[0] - 1, w.shape[1])),
                                               rng.normal(0, 0.3, (1, w.shape[1]))]) for w in model.weights])
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    batch = Batch(rng.normal(size=(n, d)), rng.integers(0, k, n))
    val = Batch(rng.normal(size=(m, d)), rng.integers(0, k, m))
    return model, batch, val
