import numpy as np


def trial_to_image(trial_data: np.ndarray) -> np.ndarray:
    """[channels, samples] trial -> [1, samples, channels] image (time is the row axis)."""
    return np.ascontiguousarray(trial_data.T)[None]


def image_to_map(image: np.ndarray) -> np.ndarray:
    """Inverse of ``trial_to_image`` for input-shaped gradients and relevances."""
    return np.ascontiguousarray(image[0].T)


def trials_to_images(data: np.ndarray) -> np.ndarray:
    """[N, channels, samples] -> [N, 1, samples, channels]."""
    return np.ascontiguousarray(np.asarray(data, dtype=float).transpose(0, 2, 1))[:, None]
