"""Códecs semánticos del enlace principal y compresor de residuos del enlace paralelo

Los códigos reales se ordenan canal-mayor, bloques por filas y coeficientes
(zig-zag) al final. El códec lineal entrenable usa bloque-mayor y las 3·keep
componentes del bloque al final.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.fft import dctn, idctn

from channel import ChannelRealization, channel_uses, semantic_transmit, snr_to_noise_variance
from entropy_model import SymbolGrid, grid_shape_for
from imagecore import ImageTensor, ResidualTensor, mse
from utils import (
    ConfigurationError,
    DimensionError,
    derive_seed,
    peek_weights_header,
    read_weights,
    write_weights,
)

logger = logging.getLogger(__name__)

CODEC_MAGIC = b'MHCD'
COMPRESSOR_MAGIC = b'MHRC'
DEFAULT_BLOCK = 8
DEFAULT_GAMMA = 1.15


@lru_cache(maxsize=None)
def zigzag_order(block: int) -> Tuple[int, ...]:
    """Índices planos (fila·block + columna) en orden zig-zag tipo JPEG"""
    cells = [(i, j) for i in range(block) for j in range(block)]
    cells.sort(key=lambda ij: (ij[0] + ij[1], ij[0] if (ij[0] + ij[1]) % 2 else ij[1]))
    return tuple(i * block + j for i, j in cells)


def _pad_edge(data: np.ndarray, multiple: int) -> np.ndarray:
    ph = -data.shape[1] % multiple
    pw = -data.shape[2] % multiple
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, ph), (0, pw)), mode='edge')
    return data


def to_blocks(data: np.ndarray, block: int) -> np.ndarray:
    """(3, H, W) → (3, bh, bw, block, block)"""
    _, h, w = data.shape
    return data.reshape(3, h // block, block, w // block, block).transpose(0, 1, 3, 2, 4)


def from_blocks(blocks: np.ndarray) -> np.ndarray:
    c, bh, bw, b, _ = blocks.shape
    return blocks.transpose(0, 1, 3, 2, 4).reshape(c, bh * b, bw * b)


def block_grid(height: int, width: int, block: int) -> Tuple[int, int]:
    return -(-height // block), -(-width // block)


@dataclass(frozen=True)
class BlockDctCodec:
    """DCT-II ortonormal 8×8 por bloque y canal con selección zonal zig-zag"""
    block: int = DEFAULT_BLOCK
    keep: int = 4
    kind: str = field(default='block_dct', init=False)

    def __post_init__(self):
        if self.block < 1:
            raise ConfigurationError("El bloque debe ser positivo")
        if not 1 <= self.keep <= self.block ** 2:
            raise ConfigurationError(
                f"keep={self.keep} excede los {self.block ** 2} coeficientes del bloque"
            )

    @classmethod
    def for_length(cls, height: int, width: int, length: int, block: int = DEFAULT_BLOCK) -> 'BlockDctCodec':
        """Conserva ⌈L/(3·bloques)⌉ coeficientes por bloque"""
        bh, bw = block_grid(height, width, block)
        keep = -(-int(length) // (3 * bh * bw))
        if keep > block ** 2:
            raise ConfigurationError(f"L={length} excede los coeficientes disponibles")
        return cls(block, keep)

    def code_length(self, height: int, width: int) -> int:
        bh, bw = block_grid(height, width, self.block)
        return 3 * bh * bw * self.keep

    def coefficients(self, img: ImageTensor) -> np.ndarray:
        """Todos los coeficientes (3, bh, bw, block²) en orden zig-zag"""
        blocks = to_blocks(_pad_edge(img.data, self.block), self.block)
        coeffs = dctn(blocks, axes=(3, 4), norm='ortho')
        flat = coeffs.reshape(coeffs.shape[:3] + (self.block ** 2,))
        return flat[..., list(zigzag_order(self.block))]

    def encode(self, img: ImageTensor) -> np.ndarray:
        return self.coefficients(img)[..., :self.keep].ravel()

    def decode_raw(self, code, height: int, width: int) -> np.ndarray:
        """Transformada inversa sin recorte a [0,1]"""
        code = np.asarray(code, dtype=np.float64).ravel()
        expected = self.code_length(height, width)
        if code.size != expected:
            raise DimensionError(f"Código de longitud {code.size}, se esperaba {expected}")
        bh, bw = block_grid(height, width, self.block)
        zz = np.zeros((3, bh, bw, self.block ** 2))
        zz[..., :self.keep] = code.reshape(3, bh, bw, self.keep)
        flat = np.empty_like(zz)
        flat[..., list(zigzag_order(self.block))] = zz
        blocks = idctn(flat.reshape(3, bh, bw, self.block, self.block), axes=(3, 4), norm='ortho')
        return from_blocks(blocks)[:, :height, :width]

    def decode(self, code, height: int, width: int) -> ImageTensor:
        return ImageTensor(np.clip(self.decode_raw(code, height, width), 0.0, 1.0))


@dataclass(frozen=True)
class LinearBlockCodec:
    """Códec lineal por bloque: W_e (3·keep × 3·block²) y W_d (3·block² × 3·keep)"""
    encoder: np.ndarray
    decoder: np.ndarray
    block: int = DEFAULT_BLOCK
    kind: str = field(default='trainable_linear', init=False)

    def __post_init__(self):
        dims = 3 * self.block ** 2
        enc = np.array(self.encoder, dtype=np.float64, order='C', copy=True)
        dec = np.array(self.decoder, dtype=np.float64, order='C', copy=True)
        if enc.ndim != 2 or enc.shape[1] != dims or dec.shape != (dims, enc.shape[0]):
            raise DimensionError(
                f"Pesos incompatibles: W_e {enc.shape}, W_d {dec.shape} para bloque {self.block}"
            )
        if enc.shape[0] % 3:
            raise ConfigurationError("El nº de filas de W_e debe ser múltiplo de 3")
        enc.setflags(write=False)
        dec.setflags(write=False)
        object.__setattr__(self, 'encoder', enc)
        object.__setattr__(self, 'decoder', dec)

    @classmethod
    def initial(cls, keep: int = 4, block: int = DEFAULT_BLOCK, seed: int = 0) -> 'LinearBlockCodec':
        """Filas ortonormales aleatorias y decodificador traspuesto"""
        dims = 3 * block ** 2
        if not 1 <= 3 * keep <= dims:
            raise ConfigurationError(f"keep={keep} excede la dimensión del bloque")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dims, 3 * keep)))
        return cls(q.T, q, block)

    @property
    def keep(self) -> int:
        return self.encoder.shape[0] // 3

    def code_length(self, height: int, width: int) -> int:
        bh, bw = block_grid(height, width, self.block)
        return bh * bw * self.encoder.shape[0]

    def block_vectors(self, img: ImageTensor) -> np.ndarray:
        """(bloques, 3·block²) en orden de filas de bloques"""
        return image_to_vectors(img.data, self.block)

    def encode(self, img: ImageTensor) -> np.ndarray:
        return (self.block_vectors(img) @ self.encoder.T).ravel()

    def decode_raw(self, code, height: int, width: int) -> np.ndarray:
        code = np.asarray(code, dtype=np.float64).ravel()
        expected = self.code_length(height, width)
        if code.size != expected:
            raise DimensionError(f"Código de longitud {code.size}, se esperaba {expected}")
        vectors = code.reshape(-1, self.encoder.shape[0]) @ self.decoder.T
        return vectors_to_image(vectors, height, width, self.block)

    def decode(self, code, height: int, width: int) -> ImageTensor:
        return ImageTensor(np.clip(self.decode_raw(code, height, width), 0.0, 1.0))

    def with_weights(self, encoder: np.ndarray, decoder: np.ndarray) -> 'LinearBlockCodec':
        return LinearBlockCodec(encoder, decoder, self.block)


def image_to_vectors(data: np.ndarray, block: int) -> np.ndarray:
    blocks = to_blocks(_pad_edge(data, block), block)
    # (3, bh, bw, b, b) → (bh, bw, 3, b, b)
    return blocks.transpose(1, 2, 0, 3, 4).reshape(-1, 3 * block * block)


def vectors_to_image(vectors: np.ndarray, height: int, width: int, block: int) -> np.ndarray:
    bh, bw = block_grid(height, width, block)
    blocks = vectors.reshape(bh, bw, 3, block, block).transpose(2, 0, 1, 3, 4)
    return from_blocks(blocks)[:, :height, :width]


def codec_encode(codec, img: ImageTensor) -> np.ndarray:
    return codec.encode(img)


def codec_decode(codec, code, height: int, width: int) -> ImageTensor:
    return codec.decode(code, height, width)


def save_codec(codec: LinearBlockCodec, path) -> None:
    write_weights(path, CODEC_MAGIC, codec.block, codec.keep, 0, [codec.encoder, codec.decoder])


def load_codec(path) -> LinearBlockCodec:
    header = peek_weights_header(path, CODEC_MAGIC)
    block, keep = header['features'], header['mixtures']
    dims = 3 * block ** 2
    _, (encoder, decoder) = read_weights(path, CODEC_MAGIC, [(3 * keep, dims), (dims, 3 * keep)])
    return LinearBlockCodec(encoder, decoder, block)


# ---------------------------------------------------------------------------
# Compresor de residuos
# ---------------------------------------------------------------------------

def quantize_residual(values, levels: int) -> np.ndarray:
    """[−1,1] → [0, Q−1] con redondeo al bin más cercano"""
    x = np.asarray(values, dtype=np.float64)
    s = np.floor((x + 1.0) / 2.0 * (levels - 1) + 0.5)
    return np.clip(s, 0, levels - 1).astype(np.int64)


def dequantize_residual(symbols, levels: int) -> np.ndarray:
    """Centro del bin: 2s/(Q−1) − 1"""
    return 2.0 * np.asarray(symbols, dtype=np.float64) / (levels - 1) - 1.0


@dataclass(frozen=True)
class ResidualCompressor:
    """Media ponderada por bloque d×d + cuantizador; inversa con patrón de subida

    Con pooling 1/d² y patrón unitario es el par media de bloque / vecino más cercano.
    """
    factor: int = 32
    levels: int = 17
    pool: Optional[np.ndarray] = None
    pattern: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.factor < 1:
            raise ConfigurationError("El factor de submuestreo debe ser positivo")
        if self.levels < 2:
            raise ConfigurationError("Q debe ser al menos 2")
        d = self.factor
        pool = np.full((d, d), 1.0 / d ** 2) if self.pool is None else np.array(self.pool, dtype=np.float64, order='C')
        pattern = np.ones((d, d)) if self.pattern is None else np.array(self.pattern, dtype=np.float64, order='C')
        if pool.shape != (d, d) or pattern.shape != (d, d):
            raise DimensionError(f"Pesos del compresor deben ser ({d}, {d})")
        pool.setflags(write=False)
        pattern.setflags(write=False)
        object.__setattr__(self, 'pool', pool)
        object.__setattr__(self, 'pattern', pattern)

    def grid_shape(self, height: int, width: int) -> Tuple[int, int]:
        return grid_shape_for(height, width, self.factor)

    def pooled(self, data: np.ndarray) -> np.ndarray:
        """Media ponderada por bloque de un array (3, H, W) → (3, U, V)"""
        blocks = to_blocks(_pad_edge(data, self.factor), self.factor)
        return np.einsum('cuvij,ij->cuv', blocks, self.pool)

    def upsampled(self, centers: np.ndarray, height: int, width: int) -> np.ndarray:
        blocks = centers[:, :, :, None, None] * self.pattern
        return from_blocks(blocks)[:, :height, :width]

    def with_weights(self, pool: np.ndarray, pattern: np.ndarray) -> 'ResidualCompressor':
        return ResidualCompressor(self.factor, self.levels, pool, pattern)


def residual_compress(comp: ResidualCompressor, r: ResidualTensor) -> SymbolGrid:
    """r → r̃: media por bloque y cuantización uniforme a Q niveles"""
    return SymbolGrid(quantize_residual(comp.pooled(r.data), comp.levels), comp.levels)


def residual_decompress(comp: ResidualCompressor, grid: SymbolGrid, height: int, width: int) -> ResidualTensor:
    """r̃ → r̂: centros de bin y subida al tamaño de la imagen"""
    if grid.levels != comp.levels:
        raise DimensionError(f"Rejilla con Q={grid.levels}, compresor con Q={comp.levels}")
    if grid.grid_shape != comp.grid_shape(height, width):
        raise DimensionError(
            f"Rejilla {grid.grid_shape} no corresponde a {height}x{width} con d={comp.factor}"
        )
    centers = dequantize_residual(grid.symbols, comp.levels)
    return ResidualTensor(np.clip(comp.upsampled(centers, height, width), -1.0, 1.0))


def save_compressor(comp: ResidualCompressor, path) -> None:
    write_weights(path, COMPRESSOR_MAGIC, comp.factor, 0, comp.levels, [comp.pool, comp.pattern])


def load_compressor(path) -> ResidualCompressor:
    header = peek_weights_header(path, COMPRESSOR_MAGIC)
    d = header['features']
    _, (pool, pattern) = read_weights(path, COMPRESSOR_MAGIC, [(d, d), (d, d)])
    return ResidualCompressor(d, header['levels'], pool, pattern)


# ---------------------------------------------------------------------------
# Pérdida recursiva
# ---------------------------------------------------------------------------

def hop_weights(hops: int, gamma: float) -> np.ndarray:
    """γ^(N−n) para n = 1..N"""
    if gamma <= 0:
        raise ConfigurationError(f"γ debe ser positivo ({gamma})")
    if hops < 1:
        raise ConfigurationError("Se necesita al menos un salto")
    return gamma ** np.arange(hops - 1, -1, -1, dtype=np.float64)


def weighted_hop_loss(hop_mses, gamma: float = DEFAULT_GAMMA) -> float:
    """(1/(N·I)) Σ_i Σ_n γ^(N−n)·MSE_n^i a partir de una matriz (I, N)"""
    m = np.atleast_2d(np.asarray(hop_mses, dtype=np.float64))
    images, hops = m.shape
    return float(np.sum(m * hop_weights(hops, gamma)) / (hops * images))


def transmit_image(codec, img: ImageTensor, ch: ChannelRealization, unbias: bool = False) -> ImageTensor:
    """Un salto del enlace semántico: codificar, canal, decodificar"""
    received, _ = semantic_transmit(codec.encode(img), ch, unbias)
    return codec.decode(received, img.height, img.width)


def recursive_loss(images: Sequence[ImageTensor], codec, hops: int, gamma: float = DEFAULT_GAMMA,
                   snr_db: float = 10.0, fading: str = 'rayleigh', noiseless: bool = False,
                   seed: int = 0) -> float:
    """Simula la cadena de N saltos por imagen y pondera D(s_n, ŝ_n) con γ^(N−n)"""
    if not images:
        raise ConfigurationError("Conjunto de imágenes vacío")
    noise_var = 0.0 if noiseless else snr_to_noise_variance(snr_db)
    mses = np.zeros((len(images), hops))
    for i, img in enumerate(images):
        uses = channel_uses(codec.code_length(img.height, img.width))
        current = img
        for n in range(hops):
            ch = ChannelRealization.draw(uses, noise_var, derive_seed(seed, i, n + 1, 0), fading, noiseless)
            recon = transmit_image(codec, current, ch)
            mses[i, n] = mse(current, recon)
            current = recon
    loss = weighted_hop_loss(mses, gamma)
    logger.debug(f"[ENTRENAMIENTO] Pérdida recursiva N={hops}, γ={gamma}: {loss:.6f}")
    return loss
