"""Shared oracles for the unit and acceptance tests."""

from fractions import Fraction

import numpy as np
import torch


def brute_force_dice(a, b) -> float:
    """Dice by walking every voxel."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    inter = na = nb = 0
    for x, y in zip(a.tolist(), b.tolist()):
        na += x
        nb += y
        inter += x and y
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def autograd(f, x: np.ndarray) -> np.ndarray:
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    f(t).backward()
    return t.grad.numpy()


def rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def random_prob_field(rng, shape=(4, 4, 4)):
    """Two-class probabilities in [0.1, 0.9] and a random binary mask."""
    p1 = rng.uniform(0.1, 0.9, shape)
    return np.stack([1 - p1, p1]), (rng.random(shape) > 0.5).astype(np.float64)


def otsu_exhaustive(values, n_bins=256) -> float:
    """Try every cut of the 256-bin histogram in exact rational arithmetic;
    return the upper edge of the best low class (first maximum wins)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    hist, edges = np.histogram(v, bins=n_bins, range=(v.min(), v.max()))
    centers = [Fraction(float(c)) for c in (edges[:-1] + edges[1:]) / 2]
    counts = [int(h) for h in hist]
    best, best_k = Fraction(-1), None
    for k in range(n_bins - 1):
        n0, n1 = sum(counts[: k + 1]), sum(counts[k + 1 :])
        if n0 == 0 or n1 == 0:
            score = Fraction(0)
        else:
            mu0 = sum(h * c for h, c in zip(counts[: k + 1], centers[: k + 1])) / n0
            mu1 = sum(h * c for h, c in zip(counts[k + 1 :], centers[k + 1 :])) / n1
            score = n0 * n1 * (mu0 - mu1) ** 2
        if score > best:
            best, best_k = score, k
    return float(edges[best_k + 1])


def two_lung_volume(shape=(64, 64, 100), z_range=(20, 80), lung_hu=-850.0):
    """Body cylinder spanning every slice with two ellipsoidal lungs whose
    cranio-caudal extent is exactly ``z_range``."""
    X, Y, Z = shape
    x, y, z = np.meshgrid(*(np.arange(n, dtype=float) for n in shape), indexing="ij")
    body = ((x - (X - 1) / 2) / (0.42 * X)) ** 2 + ((y - (Y - 1) / 2) / (0.36 * Y)) ** 2 <= 1
    zc, zs = (z_range[0] + z_range[1]) / 2, (z_range[1] - z_range[0]) / 2 + 0.5
    lung = np.zeros(shape, bool)
    for side in (-1, 1):
        lung |= ((x - (X - 1) / 2 - side * 0.19 * X) / (0.12 * X)) ** 2 + ((y - (Y - 1) / 2) / (0.2 * Y)) ** 2 + ((z - zc) / zs) ** 2 <= 1
    vol = np.where(body, 0.0, -1000.0)
    vol[lung] = lung_hu
    return vol.astype(np.float32), lung


def class_spanning_phantoms():
    from lungquant.phantom import CLASS_SPANNING_FRACTIONS, generate_phantom

    return [generate_phantom(seed, f) for seed, f in enumerate(CLASS_SPANNING_FRACTIONS)]


def spanning_training_set(phantoms, k=4):
    """Indices of the phantoms at the extremes of lesion percentage and of
    body size (voxels above -900 HU), topped up by lesion percentage."""
    p = [ph.lesion_percentage for ph in phantoms]
    body = [int((ph.volume.voxels > -900).sum()) for ph in phantoms]
    picks = []
    for i in (int(np.argmin(p)), int(np.argmax(p)), int(np.argmin(body)), int(np.argmax(body))):
        if i not in picks:
            picks.append(i)
    for i in np.argsort(p)[::-1]:
        if len(picks) >= k:
            break
        if int(i) not in picks:
            picks.append(int(i))
    return sorted(picks[:k])


def train_toy_cascade(
    phantoms,
    train_idx,
    epochs=200,
    lung_dims=(64, 64, 40),
    lesion_dims=(48, 40, 32),
    lung_stop=0.98,
    lesion_stop=0.72,
    lesion_aug=2,
    seed=0,
):
    """Overfit toy U-nets (depth 3, base 8) on ``phantoms[train_idx]``.

    Lesion crops use the reference lung box, as in cascade training, and are
    augmented ``lesion_aug`` times each. Both nets are scored on their
    unaugmented training pairs and stop once that Dice reaches the given
    value, which keeps the lesion net short of memorising its four crops.
    Returns (unet1, history1, unet2, history2, lung_pairs, lesion_pairs).
    """
    from lungquant.augment import AugmentationSpec, augment_dataset
    from lungquant.model import UNetConfig, build_unet
    from lungquant.preprocess import LESION_WINDOW, LUNG_WINDOW
    from lungquant.refine import bounding_box, crop
    from lungquant.trainer import TrainConfig, prepare_pair, train

    lung_cfg = UNetConfig(depth=3, base_channels=8, input_dims=lung_dims)
    lesion_cfg = UNetConfig(depth=3, base_channels=8, input_dims=lesion_dims)
    chosen = [phantoms[i] for i in train_idx]
    lung_pairs = [prepare_pair(p.volume.voxels, p.lung.voxels, LUNG_WINDOW, lung_dims) for p in chosen]
    crops = []
    for p in chosen:
        box = bounding_box(p.lung, p.lung.spacing)
        crops.append((crop(p.volume, box).voxels, crop(p.lesion, box).voxels))
    extra = augment_dataset(crops, AugmentationSpec(factor=lesion_aug, rng_seed=seed))
    lesion_pairs = [prepare_pair(v, m, LESION_WINDOW, lesion_dims) for v, m in crops]
    lesion_train = lesion_pairs + [prepare_pair(v, m, LESION_WINDOW, lesion_dims) for v, m in extra]

    common = dict(epochs=epochs, learning_rate=2e-3, batch_size=4, seed=seed, augmentation=AugmentationSpec(factor=0))
    cfg1 = TrainConfig(loss="dice", early_stop_dice=lung_stop, unet=lung_cfg, **common)
    cfg2 = TrainConfig(loss="dice+wce", early_stop_dice=lesion_stop, unet=lesion_cfg, **common)
    unet1, h1 = train(build_unet(lung_cfg, seed=seed), lung_pairs, lung_pairs, cfg1)
    unet2, h2 = train(build_unet(lesion_cfg, seed=seed), lesion_train, lesion_pairs, cfg2)
    return unet1, h1, unet2, h2, lung_pairs, lesion_pairs
