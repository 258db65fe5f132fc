"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from dmelab.model import NetworkConfig, init_params, loss_and_gradients


def finite_difference_check(step=1e-4, weight_decay=0.01, seed=1):
    """Per-layer relative error ||fd - analytic|| / max(||fd||, ||analytic||) on a 2-block, 8x8 network."""
    cfg = NetworkConfig(input_size=8, blocks=((3, 3, 1), (4, 3, 1)), global_average_pool=True, dropout_keep_prob=0.8)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, np.float64)
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.1, params[k].shape)
    x = rng.random((4, 8, 8, 3))
    y = rng.integers(0, 2, (4, 3)).astype(float)
    y[1, 2] = np.nan
    mask = (rng.random((4, cfg.feature_dim)) < 0.8) / 0.8

    def loss():
        return loss_and_gradients(params, cfg, x, y, weight_decay, True, dropout_mask=mask)[0]

    _, grads = loss_and_gradients(params, cfg, x, y, weight_decay, True, dropout_mask=mask)
    errors = {}
    for k, p in params.items():
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + step
            up = loss()
            p[i] = old - step
            down = loss()
            p[i] = old
            fd[i] = (up - down) / (2 * step)
        denom = max(np.linalg.norm(fd), np.linalg.norm(grads[k]), 1e-12)
        errors[k] = float(np.linalg.norm(fd - grads[k]) / denom)
    return errors


def adam_first_step(theta=1.0, lr=0.001, b1=0.9, b2=0.999, eps=0.1):
    """Hand-written bias-corrected Adam step on loss theta**2."""
    g = 2 * theta
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)
