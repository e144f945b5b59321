"""Imágenes: representación, E/S PPM/PNG, aritmética de residuos y métricas"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from utils import (
    ConfigurationError,
    DimensionError,
    ImageFormatError,
    UnsupportedFormatError,
)

logger = logging.getLogger(__name__)

# Pesos canónicos de MS-SSIM por escala
MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

_WHITESPACE = b' \t\n\r\v\f'


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """Imagen RGB en [0,1] con disposición (canal, fila, columna)"""
    data: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.data)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DimensionError(f"Se esperaba forma (3, H, W), no {arr.shape}")
        if arr.shape[1] == 0 or arr.shape[2] == 0:
            raise DimensionError("Imagen vacía")
        if not np.all(np.isfinite(arr)):
            raise ValueError("La imagen contiene valores no finitos")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"Valores fuera de [0,1]: [{arr.min()}, {arr.max()}]")
        object.__setattr__(self, 'data', arr)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def from_hwc(cls, values: np.ndarray) -> 'ImageTensor':
        """Construye desde un array (H, W, 3)"""
        return cls(np.moveaxis(np.asarray(values, dtype=np.float64), -1, 0))

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self.data, 0, -1)


@dataclass(frozen=True)
class ResidualTensor:
    """Residuo r = a − b con valores en [−1,1]"""
    data: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.data)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DimensionError(f"Se esperaba forma (3, H, W), no {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("El residuo contiene valores no finitos")
        if arr.min() < -1.0 or arr.max() > 1.0:
            raise ValueError(f"Residuo fuera de [−1,1]: [{arr.min()}, {arr.max()}]")
        object.__setattr__(self, 'data', arr)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape


def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt is None:
        fmt = path.suffix.lstrip('.')
    fmt = fmt.lower()
    if fmt not in ('ppm', 'png'):
        raise UnsupportedFormatError(f"Formato no soportado '{fmt}' para {path}")
    return fmt


def _next_token(raw: bytes, pos: int):
    """Lee el siguiente token de cabecera PPM saltando espacios y comentarios"""
    n = len(raw)
    while pos < n:
        if raw[pos] in _WHITESPACE:
            pos += 1
        elif raw[pos] == ord('#'):
            while pos < n and raw[pos] not in b'\r\n':
                pos += 1
        else:
            break
    start = pos
    while pos < n and raw[pos] not in _WHITESPACE and raw[pos] != ord('#'):
        pos += 1
    return raw[start:pos], start, pos


def _read_header_int(raw: bytes, pos: int, name: str):
    token, start, end = _next_token(raw, pos)
    if not token:
        raise ImageFormatError(f"Cabecera PPM incompleta: falta {name}", start)
    if not token.isdigit():
        raise ImageFormatError(f"Valor no numérico para {name}: {token!r}", start)
    return int(token), end


def _parse_ppm(raw: bytes) -> np.ndarray:
    """Parsea un PPM binario P6 de 8 bits y devuelve bytes (H, W, 3)"""
    magic = raw[:2]
    if magic in (b'P1', b'P2', b'P4', b'P5'):
        raise UnsupportedFormatError(f"PNM {magic.decode()} no es RGB")
    if magic == b'P3':
        raise UnsupportedFormatError("PPM ASCII (P3) no soportado; usar P6")
    if magic != b'P6':
        raise ImageFormatError(f"Magic PPM inválido {magic!r}", 0)

    pos = 2
    width, pos = _read_header_int(raw, pos, 'ancho')
    height, pos = _read_header_int(raw, pos, 'alto')
    maxval, pos = _read_header_int(raw, pos, 'maxval')
    if width == 0 or height == 0:
        raise ImageFormatError("Dimensiones nulas", pos)
    if maxval != 255:
        raise UnsupportedFormatError(f"Solo se admiten 8 bits (maxval 255), no {maxval}")
    if pos >= len(raw) or raw[pos] not in _WHITESPACE:
        raise ImageFormatError("Falta el separador tras maxval", pos)
    pos += 1

    needed = width * height * 3
    if len(raw) - pos < needed:
        raise ImageFormatError(
            f"Datos truncados: {len(raw) - pos} de {needed} bytes", len(raw)
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=needed, offset=pos)
    return pixels.reshape(height, width, 3)


def load_image(path, fmt: Optional[str] = None) -> ImageTensor:
    """Carga una imagen PPM (P6) o PNG RGB de 8 bits; byte b → b/255"""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"No se pudo leer {path}: {e}") from e

    if fmt == 'ppm':
        pixels = _parse_ppm(raw)
    else:
        from io import BytesIO
        from PIL import Image, UnidentifiedImageError
        try:
            with Image.open(BytesIO(raw)) as img:
                if img.format != 'PNG':
                    raise ImageFormatError(f"{path} no es un PNG", 0)
                if img.mode != 'RGB':
                    raise UnsupportedFormatError(f"PNG en modo {img.mode}; se requiere RGB de 8 bits")
                pixels = np.asarray(img, dtype=np.uint8)
        except UnidentifiedImageError:
            raise ImageFormatError(f"PNG ilegible: {path}", 0) from None

    return ImageTensor.from_hwc(pixels.astype(np.float64) / 255.0)


def to_bytes(img: ImageTensor) -> np.ndarray:
    """Cuantiza a bytes (H, W, 3) con redondeo half-up"""
    return np.floor(img.to_hwc() * 255.0 + 0.5).astype(np.uint8)


def save_image(img: ImageTensor, path, fmt: Optional[str] = None) -> None:
    """Guarda la imagen como PPM P6 o PNG con round(x·255)"""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    pixels = to_bytes(img)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == 'ppm':
            header = f"P6\n{img.width} {img.height}\n255\n".encode('ascii')
            path.write_bytes(header + pixels.tobytes())
        else:
            from PIL import Image
            Image.fromarray(pixels, 'RGB').save(path, format='PNG')
    except OSError as e:
        raise OSError(f"No se pudo escribir {path}: {e}") from e


def _check_shapes(a, b) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"Formas distintas: {a.shape} vs {b.shape}")


def residual(a: ImageTensor, b: ImageTensor) -> ResidualTensor:
    """r = a − b elemento a elemento (sin recorte)"""
    _check_shapes(a, b)
    return ResidualTensor(a.data - b.data)


def compensate(recon: ImageTensor, res: ResidualTensor) -> ImageTensor:
    """s̃ = clamp(ŝ + r̂, 0, 1)"""
    _check_shapes(recon, res)
    return ImageTensor(np.clip(recon.data + res.data, 0.0, 1.0))


def mse(a: ImageTensor, b: ImageTensor) -> float:
    _check_shapes(a, b)
    return float(np.mean((a.data - b.data) ** 2))


def psnr(a: ImageTensor, b: ImageTensor) -> float:
    """PSNR con pico 1; +inf si las imágenes son idénticas"""
    error = mse(a, b)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / error)


def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - SSIM_WINDOW // 2
    g = np.exp(-(x ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Filtrado gaussiano separable con salida 'valid'"""
    half = SSIM_WINDOW // 2
    out = ndimage.correlate1d(x, window, axis=0, mode='reflect')
    out = ndimage.correlate1d(out, window, axis=1, mode='reflect')
    return out[half:x.shape[0] - half, half:x.shape[1] - half]


def _ssim_terms(x: np.ndarray, y: np.ndarray, window: np.ndarray):
    """Devuelve (media de cs, media de ssim) para un canal y una escala"""
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    sxx = _filter_valid(x * x, window) - mu_x * mu_x
    syy = _filter_valid(y * y, window) - mu_y * mu_y
    sxy = _filter_valid(x * y, window) - mu_x * mu_y
    cs_map = (2.0 * sxy + c2) / (sxx + syy + c2)
    l_map = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return float(np.mean(cs_map)), float(np.mean(l_map * cs_map))


def _downsample(x: np.ndarray) -> np.ndarray:
    h = x.shape[0] - x.shape[0] % 2
    w = x.shape[1] - x.shape[1] % 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_scales(height: int, width: int) -> int:
    """Número de escalas: la más gruesa debe medir al menos la ventana"""
    side = min(height, width)
    if side < SSIM_WINDOW:
        raise ConfigurationError(
            f"Imagen {height}x{width} menor que la ventana MS-SSIM ({SSIM_WINDOW})"
        )
    scales = 1
    while scales < len(MS_SSIM_WEIGHTS) and side // (2 ** scales) >= SSIM_WINDOW:
        scales += 1
    return scales


def ms_ssim(a: ImageTensor, b: ImageTensor) -> float:
    """MS-SSIM multi-escala; media de los tres canales"""
    _check_shapes(a, b)
    scales = ms_ssim_scales(a.height, a.width)
    weights = MS_SSIM_WEIGHTS[:scales] / MS_SSIM_WEIGHTS[:scales].sum()
    window = _gaussian_window()

    per_channel = []
    for c in range(3):
        x = a.data[c]
        y = b.data[c]
        value = 1.0
        for j in range(scales):
            cs, ssim = _ssim_terms(x, y, window)
            term = ssim if j == scales - 1 else cs
            value *= max(term, 0.0) ** weights[j]
            if j < scales - 1:
                x = _downsample(x)
                y = _downsample(y)
        per_channel.append(value)
    return float(np.mean(per_channel))
