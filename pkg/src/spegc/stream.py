"""Synthetic disc/cup segmentation scenes under parametric intensity shifts."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .rng import Rng

BACKGROUND, DISC, CUP = 0, 1, 2
N_CLASSES = 3
CLASS_NAMES = {DISC: "disc", CUP: "cup"}


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    gain: float = 1.0
    bias: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.gain, self.bias, self.gamma, self.noise_sigma, self.blur_radius) == (1.0, 0.0, 1.0, 0.0, 0)

    def to_dict(self) -> dict:
        return asdict(self)


SOURCE = DomainSpec("source")

# Two default target domains: darker/low-contrast/blurred, and brighter/noisier.
DEFAULT_TARGETS = (
    DomainSpec("A", gain=0.75, bias=0.06, gamma=1.4, noise_sigma=0.04, blur_radius=1),
    DomainSpec("B", gain=1.15, bias=-0.12, gamma=0.75, noise_sigma=0.07, blur_radius=0),
)


@dataclass
class StreamSample:
    image: np.ndarray
    mask: np.ndarray
    domain_id: str
    scene_index: int
    index: int = 0


def render_scene(rng: Rng, size: int = 48) -> tuple[np.ndarray, np.ndarray]:
    """Clean image in [0, 1] and its label mask for one random scene."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = size / 2.0
    cy, cx = c + rng.uniform(-0.1, 0.1, 2) * size
    a, b = rng.uniform(0.19, 0.27, 2) * size
    ang = rng.uniform(0.0, np.pi)
    scale = rng.uniform(0.42, 0.62)
    off = rng.uniform(-0.02, 0.02, 2) * size

    def ellipse_radius(y0, x0, ra, rb):
        dy, dx = yy - y0, xx - x0
        u = dx * np.cos(ang) + dy * np.sin(ang)
        v = -dx * np.sin(ang) + dy * np.cos(ang)
        return np.sqrt((u / ra) ** 2 + (v / rb) ** 2)

    r_disc = ellipse_radius(cy, cx, a, b)
    r_cup = ellipse_radius(cy + off[0], cx + off[1], a * scale, b * scale)
    disc = r_disc <= 1.0
    cup = (r_cup <= 1.0) & disc
    mask = np.zeros((size, size), dtype=np.int64)
    mask[disc] = DISC
    mask[cup] = CUP

    # soft-edged intensity layers plus smooth background shading and texture
    soft_disc = 1.0 / (1.0 + np.exp((r_disc - 1.0) * 12.0))
    soft_cup = 1.0 / (1.0 + np.exp((r_cup - 1.0) * 12.0)) * soft_disc
    k1, k2 = rng.uniform(0.5, 2.0, 2) * 2 * np.pi / size
    phase = rng.uniform(0, 2 * np.pi, 2)
    shade = 0.05 * np.cos(k1 * xx + phase[0]) * np.cos(k2 * yy + phase[1])
    base = rng.uniform(0.18, 0.28)
    disc_level = rng.uniform(0.52, 0.62)
    cup_level = rng.uniform(0.80, 0.90)
    img = base + shade + (disc_level - base) * soft_disc + (cup_level - disc_level) * soft_cup
    img = img + rng.normal(0.0, 0.015, (size, size))
    return np.clip(img, 0.0, 1.0), mask


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return img
    w = 2 * radius + 1
    padded = np.pad(img, radius, mode="reflect")
    csum = padded.cumsum(axis=0).cumsum(axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0)))
    h, wd = img.shape
    total = (csum[w:w + h, w:w + wd] - csum[0:h, w:w + wd]
             - csum[w:w + h, 0:wd] + csum[0:h, 0:wd])
    return total / (w * w)


def corrupt(clean: np.ndarray, spec: DomainSpec, rng: Rng | None = None,
            clamp: bool = True) -> np.ndarray:
    """Apply gamma, blur, gain/bias, then additive Gaussian noise."""
    x = np.power(clean, spec.gamma)
    x = box_blur(x, spec.blur_radius)
    x = spec.gain * x + spec.bias
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("a noisy domain needs an rng")
        x = x + rng.normal(0.0, spec.noise_sigma, x.shape)
    return np.clip(x, 0.0, 1.0) if clamp else x


def generate_stream(seed: int, domains: Sequence[DomainSpec], steps_per_domain: int,
                    shuffle: bool = False, size: int = 48,
                    purpose: str = "target") -> list[StreamSample]:
    """Ordered samples, ``steps_per_domain`` per domain, optionally shuffled.

    Scene ``i`` has the same geometry whatever domain corrupts it, so masks
    depend only on ``(seed, purpose, i)``.
    """
    if not domains:
        raise ValueError("domain sequence is empty")
    if steps_per_domain < 1:
        raise ValueError("steps_per_domain must be >= 1")
    root = Rng(seed).child(purpose)
    samples = []
    i = 0
    for spec in domains:
        for _ in range(steps_per_domain):
            clean, mask = render_scene(root.child("scene", i), size)
            image = corrupt(clean, spec, root.child("noise", i))
            samples.append(StreamSample(image=image, mask=mask, domain_id=spec.domain_id,
                                        scene_index=i))
            i += 1
    if shuffle:
        order = root.child("shuffle").permutation(len(samples))
        samples = [samples[j] for j in order]
    for pos, s in enumerate(samples):
        s.index = pos
    return samples


def dice_score(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """Overlap ``2|A n B| / (|A| + |B|)`` for one class label; 1.0 if both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if cls not in (BACKGROUND, DISC, CUP):
        raise ValueError(f"unknown class label {cls}")
    a = pred == cls
    b = gt == cls
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def foreground_dice(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    return {name: dice_score(pred, gt, cls) for cls, name in CLASS_NAMES.items()}
