"""Shared oracles for the test-suite."""

import copy

import numpy as np
import torch


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def fd_gradient_check(module, loss_fn, probes=20, seed=0, h=1e-6, floor=1e-5, dtype=torch.float32):
    """Compare autograd (at `dtype`) against float64 central differences.

    `loss_fn(module, dtype)` must build its inputs deterministically for the
    given dtype. Returns the list of relative errors over `probes` randomly
    chosen scalar parameters.
    """
    module = module.to(dtype)
    module.zero_grad()
    loss_fn(module, dtype).backward()
    named = [(n, p) for n, p in module.named_parameters()]
    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)

    ref = copy.deepcopy(module).double()
    ref_params = dict(ref.named_parameters())
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(probes):
        k = rng.choice(len(named), p=sizes / sizes.sum())
        name, p = named[k]
        i = int(rng.integers(p.numel()))
        auto = float(p.grad.reshape(-1)[i])
        q = ref_params[name]
        with torch.no_grad():
            orig = q.reshape(-1)[i].item()
            q.view(-1)[i] = orig + h
            up = float(loss_fn(ref, torch.float64))
            q.view(-1)[i] = orig - h
            down = float(loss_fn(ref, torch.float64))
            q.view(-1)[i] = orig
        fd = (up - down) / (2 * h)
        errors.append(abs(auto - fd) / max(abs(auto), abs(fd), floor))
    return errors


def conv_params(cin, cout, k=3):
    return k * k * cin * cout + cout


def linear_params(i, o):
    return i * o + o
