import numpy as np

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


def adam_step(params, lr, step, betas=DEFAULT_BETAS, eps=DEFAULT_EPS):
    """
    Apply one bias-corrected Adam update in place and clear the gradients.

    Args:
        params: iterable of Parameter
        lr: learning rate
        step: 1-based index of this update (drives the bias correction)
    """
    beta1, beta2 = betas
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for p in params:
        g = p.grad
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / correction1
        v_hat = p.adam_v / correction2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


class Adam:
    """Adam over a fixed parameter list; keeps the step counter for checkpoints."""

    def __init__(self, params, lr, betas=DEFAULT_BETAS, eps=DEFAULT_EPS):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        adam_step(self.params, self.lr, self.step_count, self.betas, self.eps)
