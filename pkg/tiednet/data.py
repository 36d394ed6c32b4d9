"""
Synthetic image classification data.

Every class owns a fixed Gaussian pattern; a sample is its class pattern
plus independent Gaussian noise. With unit signal and unit noise the classes
are linearly separable with a wide margin at any realistic image size.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, resolve_dtype


@dataclass
class SyntheticDataset:
    samples: Tensor
    labels: np.ndarray
    num_classes: int
    seed: int

    def __len__(self):
        return int(self.labels.size)

    @property
    def image(self):
        return self.samples.dims[-1]

    def subset(self, indices):
        indices = np.asarray(indices)
        return SyntheticDataset(
            samples=Tensor(self.samples.data[indices]),
            labels=self.labels[indices],
            num_classes=self.num_classes,
            seed=self.seed,
        )

    def split(self, holdout_fraction=0.25):
        """
        Splits into (train, held-out) keeping class balance: the last
        `holdout_fraction` of every class goes to the held-out part.
        """
        train, held = [], []
        for label in range(self.num_classes):
            members = np.flatnonzero(self.labels == label)
            cut = len(members) - int(round(len(members) * holdout_fraction))
            train.extend(members[:cut])
            held.extend(members[cut:])
        return self.subset(np.sort(train)), self.subset(np.sort(held))


def gen_synthetic(num_classes, n_per_class, image, seed, channels=3, signal=1.0,
                  noise=1.0, noise_seed=None, dtype='f32'):
    """
    Generates a balanced, shuffled synthetic dataset.

    Args:
        num_classes (int): Number of classes.
        n_per_class (int): Samples per class.
        image (int): Side of the square images.
        seed (int): Fixes the class patterns and, unless `noise_seed` is
            given, the noise and order too.
        channels (int): Image channels.
        signal (float): Pattern amplitude.
        noise (float): Noise standard deviation.
        noise_seed (int, optional): Draws fresh noise over the same class
            patterns, for held-out evaluation data.
        dtype (str): 'f32' or 'f64'.

    Returns:
        SyntheticDataset: `num_classes * n_per_class` samples.
    """
    if num_classes < 1 or n_per_class < 1 or image < 1:
        raise ShapeError(
            f'need positive class count, class size and image side, got '
            f'{num_classes}, {n_per_class}, {image}'
        )
    rng = np.random.default_rng(seed)
    patterns = rng.standard_normal((num_classes, channels, image, image))
    if noise_seed is not None:
        rng = np.random.default_rng([seed, noise_seed])

    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    labels = labels[rng.permutation(labels.size)]
    samples = signal * patterns[labels] + noise * rng.standard_normal(
        (labels.size, channels, image, image)
    )
    return SyntheticDataset(
        samples=Tensor(samples.astype(resolve_dtype(dtype))),
        labels=labels,
        num_classes=num_classes,
        seed=seed,
    )


def linear_readout_accuracy(train, test):
    """
    Accuracy of a closed-form least-squares linear classifier.

    Fits one-hot targets on flattened `train` samples (with a bias column)
    and scores argmax predictions on `test`; ties go to the lowest class.
    """
    def features(data):
        flat = data.samples.data.reshape(len(data), -1).astype(np.float64)
        return np.hstack([flat, np.ones((len(data), 1))])

    targets = np.eye(train.num_classes)[train.labels]
    weights, *_ = np.linalg.lstsq(features(train), targets, rcond=None)
    predictions = np.argmax(features(test) @ weights, axis=1)
    return float(np.mean(predictions == test.labels))
