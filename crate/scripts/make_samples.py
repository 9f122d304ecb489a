"""Regenerate the bundled low/normal sample pairs.

Normal-light images are public-domain / CC0 photographs shipped with
scikit-image, center-cropped and resized to 128x128. Low-light
counterparts are synthesized with a gamma/exposure drop plus
Poisson-Gaussian sensor noise, then quantized to 8 bits.

    python3 scripts/make_samples.py crates/core/assets/samples
"""
import sys
from pathlib import Path

import numpy as np
from skimage import data, transform, util

SIZE = 128
SOURCES = {
    "astronaut": data.astronaut,
    "coffee": data.coffee,
    "chelsea": data.chelsea,
    "rocket": data.rocket,
}


def square_resize(img):
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = img[top : top + s, left : left + s]
    return transform.resize(crop, (SIZE, SIZE), anti_aliasing=True)


def darken(img, rng):
    exposure = rng.uniform(0.15, 0.3)
    gamma = rng.uniform(1.6, 2.2)
    dark = exposure * np.power(img, gamma)
    photons = 600.0
    shot = rng.poisson(dark * photons) / photons
    read = rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(shot + read, 0.0, 1.0)


def write_ppm(path, img):
    q = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240501)
    for name, load in SOURCES.items():
        normal = square_resize(util.img_as_float(load())[..., :3])
        write_ppm(out / f"{name}_normal.ppm", normal)
        write_ppm(out / f"{name}_low.ppm", darken(normal, rng))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/assets/samples")
