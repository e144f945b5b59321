"""Canal: empaquetado complejo, normalización de potencia, Rayleigh/AWGN y ecualización MMSE"""
import dataclasses
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from utils import DegenerateInputError, DimensionError

logger = logging.getLogger(__name__)

# Un SymbolVector es un np.ndarray complejo 1-D
SymbolVector = np.ndarray


def _streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Dos flujos independientes (ganancias, ruido) derivados de la semilla"""
    gains_seq, noise_seq = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(gains_seq), np.random.default_rng(noise_seq)


@dataclass(frozen=True)
class ChannelRealization:
    """Ganancias por símbolo, σ² y semilla de un uso del canal"""
    gains: np.ndarray
    noise_variance: float
    seed: int
    noiseless: bool = False

    def __post_init__(self):
        gains = np.array(self.gains, dtype=np.complex128, copy=True).ravel()
        gains.setflags(write=False)
        object.__setattr__(self, 'gains', gains)
        object.__setattr__(self, 'noise_variance', float(self.noise_variance))
        if self.noiseless:
            if self.noise_variance < 0:
                raise ValueError("σ² no puede ser negativa")
        elif not self.noise_variance > 0:
            raise ValueError(f"σ² debe ser positiva salvo en modo sin ruido ({self.noise_variance})")

    @property
    def length(self) -> int:
        return self.gains.size

    @classmethod
    def draw(cls, length: int, noise_variance: float, seed: int,
             fading: str = 'rayleigh', noiseless: bool = False) -> 'ChannelRealization':
        """Sortea ganancias CN(0,1) (o unitarias para AWGN) desde la semilla"""
        if fading == 'rayleigh':
            rng, _ = _streams(seed)
            gains = (rng.standard_normal(length) + 1j * rng.standard_normal(length)) / np.sqrt(2.0)
        elif fading == 'awgn':
            gains = np.ones(length, dtype=np.complex128)
        else:
            raise ValueError(f"Tipo de desvanecimiento desconocido: {fading}")
        return cls(gains, noise_variance, seed, noiseless)


def pack_complex(real_vec) -> SymbolVector:
    """(x_{2i}, x_{2i+1}) → x_{2i} + j·x_{2i+1}"""
    v = np.asarray(real_vec, dtype=np.float64).ravel()
    if v.size % 2:
        raise DimensionError(f"Longitud impar ({v.size}) no empaquetable")
    return v[0::2] + 1j * v[1::2]


def unpack_complex(symbols: SymbolVector) -> np.ndarray:
    """Inversa exacta de pack_complex"""
    s = np.asarray(symbols, dtype=np.complex128).ravel()
    out = np.empty(2 * s.size, dtype=np.float64)
    out[0::2] = s.real
    out[1::2] = s.imag
    return out


def average_power(x: SymbolVector) -> float:
    return float(np.mean(np.abs(x) ** 2))


def power_normalize(x: SymbolVector) -> Tuple[SymbolVector, float]:
    """Escala a potencia media 1; devuelve la escala para invertir en recepción"""
    x = np.asarray(x, dtype=np.complex128)
    power = average_power(x) if x.size else 0.0
    if power == 0.0:
        raise DegenerateInputError("No se puede normalizar un vector todo ceros")
    scale = float(np.sqrt(power))
    return x / scale, scale


def snr_to_noise_variance(snr_db: float) -> float:
    """σ² = 10^(−SNR/10) con potencia de señal unitaria"""
    return float(10.0 ** (-float(snr_db) / 10.0))


def _check_length(x: SymbolVector, ch: ChannelRealization) -> None:
    if x.size != ch.length:
        raise DimensionError(f"Longitud {x.size} distinta de la realización ({ch.length})")


def rayleigh_transmit(x: SymbolVector, ch: ChannelRealization) -> SymbolVector:
    """z = h·x + n con n ~ CN(0, σ²) sorteado desde ch.seed"""
    x = np.asarray(x, dtype=np.complex128).ravel()
    _check_length(x, ch)
    z = ch.gains * x
    if ch.noiseless or ch.noise_variance == 0.0:
        return z
    _, rng = _streams(ch.seed)
    std = np.sqrt(ch.noise_variance / 2.0)
    noise = std * (rng.standard_normal(x.size) + 1j * rng.standard_normal(x.size))
    return z + noise


def mmse_equalize(received: SymbolVector, ch: ChannelRealization) -> SymbolVector:
    """ŷ = conj(h)·z / (|h|² + σ²)"""
    z = np.asarray(received, dtype=np.complex128).ravel()
    _check_length(z, ch)
    h = ch.gains
    return np.conj(h) * z / (np.abs(h) ** 2 + ch.noise_variance)


def mmse_gain(ch: ChannelRealization) -> np.ndarray:
    """Ganancia real del filtro MMSE: |h|² / (|h|² + σ²)"""
    g = np.abs(ch.gains) ** 2
    return g / (g + ch.noise_variance)


def mmse_unbias(equalized: SymbolVector, ch: ChannelRealization) -> SymbolVector:
    """Elimina el sesgo del MMSE antes de la demodulación suave"""
    return np.asarray(equalized, dtype=np.complex128) / mmse_gain(ch)


def post_equalization_noise_variance(ch: ChannelRealization, floor: float = 1e-12) -> np.ndarray:
    """Varianza efectiva tras MMSE sin sesgo: σ²/(|h|²+σ²) dividido por la ganancia"""
    g = np.abs(ch.gains) ** 2
    effective = (ch.noise_variance / (g + ch.noise_variance)) / mmse_gain(ch)
    return np.maximum(effective, floor)


def emulated_channel(ch: ChannelRealization) -> ChannelRealization:
    """Réplica del canal en el transmisor: mismas ganancias, σ² y semilla"""
    return dataclasses.replace(ch)


def awgn_transmit(x: SymbolVector, noise_variance: float, seed: int) -> SymbolVector:
    """Canal AWGN: ganancias unitarias y el mismo flujo de ruido que Rayleigh"""
    x = np.asarray(x, dtype=np.complex128).ravel()
    ch = ChannelRealization.draw(x.size, noise_variance, seed, fading='awgn')
    return rayleigh_transmit(x, ch)


def channel_uses(code_length: int) -> int:
    """Símbolos complejos necesarios para un código real (longitud impar → relleno)"""
    return -(-int(code_length) // 2)


def semantic_transmit(code, ch: ChannelRealization, unbias: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Código real → potencia unitaria → canal → MMSE → escala inversa → código real

    Con unbias, cada símbolo se divide por su ganancia MMSE |h|²/(|h|²+σ²) y la
    ganancia efectiva devuelta es 1.

    Returns:
        (código recibido, ganancia efectiva por componente real)
    """
    code = np.asarray(code, dtype=np.float64).ravel()
    length = code.size
    padded = np.append(code, 0.0) if length % 2 else code
    symbols = pack_complex(padded)
    _check_length(symbols, ch)
    gain = np.ones(length) if unbias else np.repeat(mmse_gain(ch), 2)[:length]
    if not np.any(symbols):
        logger.debug("[CANAL] Código nulo: se transmite silencio")
        return np.zeros(length), gain
    x, scale = power_normalize(symbols)
    equalized = mmse_equalize(rayleigh_transmit(x, ch), ch)
    if unbias:
        equalized = mmse_unbias(equalized, ch)
    return unpack_complex(equalized * scale)[:length], gain
