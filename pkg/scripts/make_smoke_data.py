"""Regenerate the bundled smoke corpus from scikit-image's sample images.

Writes 256x256 native-resolution crops (no resampling) to src/repsr/data/smoke/.
"""
from pathlib import Path

import numpy as np
import skimage.data
from PIL import Image

OUT = Path(__file__).resolve().parents[1] / "src" / "repsr" / "data" / "smoke"
SIZE = 256

# (sample name, top, left); files are numbered so the last two serve as the default hold-out set
CROPS = [
    ("astronaut", 40, 120),
    ("rocket", 100, 200),
    ("immunohistochemistry", 128, 128),
    ("camera", 60, 180),
    ("brick", 100, 100),
    ("coins", 30, 60),
    ("coffee", 80, 200),
    ("chelsea", 30, 120),
]


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for i, (name, y, x) in enumerate(CROPS):
        img = getattr(skimage.data, name)()
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        crop = np.ascontiguousarray(img[y:y + SIZE, x:x + SIZE, :3])
        assert crop.shape == (SIZE, SIZE, 3), (name, crop.shape)
        Image.fromarray(crop).save(OUT / f"{i:02d}_{name}.png", optimize=True)


if __name__ == "__main__":
    main()
