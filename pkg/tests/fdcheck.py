"""Central finite-difference gradient checks shared by the test modules."""

import numpy as np

H = 1e-5


def fd_entry(f, arr, idx, h=H):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def sample_indices(shape, rng, n):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check_params(loss_fn, params, rng, n_entries=4, h=H):
    """Relative error of analytic vs central-FD gradient, per named parameter tensor.

    ``loss_fn()`` must be deterministic and return a scalar Tensor.  Returns a
    dict name -> ||analytic - fd|| / (||fd|| + 1e-8) over sampled entries.
    """
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    analytic = {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy())
                for name, p in params}
    value = lambda: loss_fn().item()
    errors = {}
    for name, p in params:
        idx = sample_indices(p.shape, rng, n_entries)
        a = np.array([analytic[name][i] for i in idx])
        fd = np.array([fd_entry(value, p.data, i, h) for i in idx])
        errors[name] = float(np.linalg.norm(a - fd) / (np.linalg.norm(fd) + 1e-8))
    return errors
