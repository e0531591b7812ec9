import numpy as np
import torch


def central_difference_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of a scalar function of one tensor, float64."""
    x = x.detach().clone().to(torch.float64)
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        fp = float(fn(x))
        flat[i] = orig - eps
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def assert_gradient_matches(fn, x: torch.Tensor, rtol: float = 1e-4) -> None:
    """Backprop gradient vs central finite differences, max-norm relative."""
    x = x.detach().clone().to(torch.float64).requires_grad_(True)
    fn(x).backward()
    numeric = central_difference_grad(fn, x)
    scale = max(float(numeric.abs().max()), float(x.grad.abs().max()), 1e-8)
    err = float((x.grad - numeric).abs().max()) / scale
    assert err < rtol, f"gradient mismatch: rel err {err:.3e} >= {rtol}"


def random_simplex(shape, num_classes, rng) -> np.ndarray:
    """Random (C, *shape) probability maps bounded away from 0 and 1."""
    raw = rng.uniform(0.2, 1.0, size=(num_classes,) + tuple(shape))
    return raw / raw.sum(axis=0, keepdims=True)
