"""Corpus sintético de texturas y carga de conjuntos de imágenes con recorte"""
import logging
from pathlib import Path
from typing import List

import numpy as np
from scipy import ndimage

from imagecore import ImageTensor, load_image, save_image
from utils import ConfigurationError, derive_seed

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = ('.ppm', '.png')


def synthetic_image(size: int, seed: int) -> ImageTensor:
    """Campo gaussiano suave por canal más bordes escalón y rectángulos"""
    rng = np.random.default_rng(seed)
    smooth = rng.uniform(2.0, max(3.0, size / 8.0))
    data = np.empty((3, size, size))
    for c in range(3):
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), smooth, mode='wrap')
        field = (field - field.mean()) / (field.std() + 1e-12)
        data[c] = 0.5 + 0.15 * field

    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(1, 4)):
        angle = rng.uniform(0.0, np.pi)
        offset = rng.uniform(-0.3, 0.3) * size
        side = (np.cos(angle) * (xx - size / 2) + np.sin(angle) * (yy - size / 2)) > offset
        data += rng.uniform(-0.2, 0.2, size=3)[:, None, None] * side
    for _ in range(rng.integers(1, 5)):
        h, w = rng.integers(size // 8, size // 2, size=2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        data[:, top:top + h, left:left + w] = rng.uniform(0.0, 1.0, size=3)[:, None, None]
    return ImageTensor(np.clip(data, 0.0, 1.0))


def generate_corpus(count: int, size: int, output_dir, seed: int) -> List[Path]:
    """Escribe count imágenes PPM deterministas en output_dir"""
    if count < 1 or size < 8:
        raise ConfigurationError(f"corpus.count ≥ 1 y corpus.size ≥ 8 (recibido {count}, {size})")
    output_dir = Path(output_dir)
    paths = []
    for i in range(count):
        path = output_dir / f"sintetica_{i:04d}.ppm"
        save_image(synthetic_image(size, derive_seed(seed, i)), path)
        paths.append(path)
    logger.info(f"[CORPUS] {count} imágenes {size}x{size} escritas en {output_dir}")
    return paths


def random_crop(img: ImageTensor, crop: int, rng: np.random.Generator) -> ImageTensor:
    if img.height < crop or img.width < crop:
        raise ConfigurationError(f"Imagen {img.height}x{img.width} menor que el recorte {crop}")
    top = int(rng.integers(0, img.height - crop + 1))
    left = int(rng.integers(0, img.width - crop + 1))
    return ImageTensor(img.data[:, top:top + crop, left:left + crop])


def load_dataset(path, crop: int, count: int, seed: int) -> List[ImageTensor]:
    """Carga hasta count imágenes recortadas; sin ruta, genera el corpus en memoria"""
    if not path:
        return [synthetic_image(crop, derive_seed(seed, i)) for i in range(count)]
    directory = Path(path)
    if not directory.is_dir():
        raise FileNotFoundError(f"Directorio de dataset no encontrado: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigurationError(f"No hay imágenes PPM/PNG en {directory}")
    rng = np.random.default_rng(derive_seed(seed, len(files)))
    images = [random_crop(load_image(p), crop, rng) for p in files[:count]]
    logger.info(f"[CORPUS] {len(images)} imágenes cargadas desde {directory} (recorte {crop})")
    return images
