import numpy as np


def sine(x):
    return np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])


def sine_grad(x):
    return np.stack([
        np.pi * np.cos(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]),
        np.pi * np.sin(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1]),
    ], axis=-1)


def sine_f0(x):
    return 2.0 * np.pi ** 2 * sine(x)


def hat_profile(x):
    return (1.0 - np.abs(2.0 * x[..., 0] - 1.0)) * (
        1.0 - np.abs(2.0 * x[..., 1] - 1.0)
    )
