"""Codificador aritmético (range coder) de 64 bits guiado por tablas de frecuencia externas

Los símbolos se recorren en orden canal-mayor (c=1,2,3) y, dentro de cada canal,
por filas; ese orden forma parte del contrato del flujo.

Ejemplo:

    tables = [quantize_pmf(p) for p in pmfs]
    stream = ac_encode(symbols, static_provider(tables))
    assert ac_decode(stream, static_provider(tables), len(symbols)) == symbols
"""
import bisect
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from utils import TruncatedStreamError

logger = logging.getLogger(__name__)

FREQ_BITS = 16
TOTAL = 1 << FREQ_BITS
RANGE_BITS = 64
MASK = (1 << RANGE_BITS) - 1
TOP = 1 << (RANGE_BITS - 8)
STATE_BYTES = RANGE_BITS // 8
# Bytes a cero que el decodificador puede leer más allá del final
MAX_ZERO_FILL = STATE_BYTES - 1


@dataclass(frozen=True)
class FrequencyTable:
    """Frecuencias acumuladas enteras con total 2^16 y mínimo 1 por símbolo"""
    cumulative: Tuple[int, ...]

    def __post_init__(self):
        cum = tuple(int(c) for c in self.cumulative)
        if len(cum) < 2 or cum[0] != 0 or cum[-1] != TOTAL:
            raise ValueError(f"Tabla inválida: debe empezar en 0 y terminar en {TOTAL}")
        if any(b <= a for a, b in zip(cum, cum[1:])):
            raise ValueError("Tabla inválida: acumulado no estrictamente creciente")
        object.__setattr__(self, 'cumulative', cum)

    @property
    def size(self) -> int:
        return len(self.cumulative) - 1

    def frequency(self, symbol: int) -> int:
        return self.cumulative[symbol + 1] - self.cumulative[symbol]

    @property
    def frequencies(self) -> np.ndarray:
        return np.diff(np.asarray(self.cumulative, dtype=np.int64))

    @classmethod
    def from_frequencies(cls, freqs) -> 'FrequencyTable':
        return cls((0,) + tuple(int(c) for c in np.cumsum(np.asarray(freqs, dtype=np.int64))))

    @classmethod
    def uniform(cls, size: int) -> 'FrequencyTable':
        return quantize_pmf(np.full(size, 1.0 / size))


@dataclass(frozen=True)
class Bitstream:
    """Buffer de bytes más longitud en bits"""
    data: bytes
    bit_length: int

    def __post_init__(self):
        if self.bit_length > 8 * len(self.data):
            raise ValueError("bit_length supera la capacidad del buffer")

    @classmethod
    def from_bytes(cls, data: bytes) -> 'Bitstream':
        return cls(bytes(data), 8 * len(data))


TableProvider = Callable[[int, Sequence[int]], FrequencyTable]


def static_provider(tables: Sequence[FrequencyTable]) -> TableProvider:
    """Proveedor que devuelve tables[t] sin mirar el historial"""
    return lambda t, history: tables[t]


def quantize_pmf_batch(pmfs) -> np.ndarray:
    """Reparto de mayores restos a total 2^16 con mínimo 1 por símbolo

    Args:
        pmfs: array (N, Q) de probabilidades

    Returns:
        acumulados enteros (N, Q+1)
    """
    p = np.atleast_2d(np.asarray(pmfs, dtype=np.float64))
    n, q = p.shape
    if q > TOTAL:
        raise ValueError(f"Alfabeto de {q} símbolos no cabe en total {TOTAL}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("La pmf contiene entradas negativas o no finitas")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"La pmf no suma 1 (suma mínima {sums.min()}, máxima {sums.max()})")

    remaining = TOTAL - q
    scaled = p / sums[:, None] * remaining
    floors = np.floor(scaled)
    deficit = remaining - floors.sum(axis=1).astype(np.int64)
    # desempate estable: a igual resto gana el índice menor
    order = np.argsort(-(scaled - floors), axis=1, kind='stable')
    ranks = np.empty_like(order)
    ranks[np.arange(n)[:, None], order] = np.arange(q)[None, :]
    freqs = 1 + floors.astype(np.int64) + (ranks < deficit[:, None])

    cum = np.zeros((n, q + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cum[:, 1:])
    return cum


def quantize_pmf(pmf) -> FrequencyTable:
    """Cuantiza una pmf real a una FrequencyTable"""
    return FrequencyTable(tuple(quantize_pmf_batch(np.asarray(pmf)[None, :])[0].tolist()))


class RangeEncoder:
    """Codificador con propagación de acarreo mediante byte en caché"""

    def __init__(self):
        self._low = 0
        self._range = MASK
        self._cache = 0
        self._has_cache = False
        self._pending = 0
        self._out = bytearray()
        self._finished = False

    def _shift_low(self) -> None:
        low = self._low
        if low < 0xFF << (RANGE_BITS - 8) or low > MASK:
            carry = low >> RANGE_BITS
            if self._has_cache:
                self._out.append((self._cache + carry) & 0xFF)
            self._out.extend(bytes([(0xFF + carry) & 0xFF]) * self._pending)
            self._pending = 0
            self._cache = (low >> (RANGE_BITS - 8)) & 0xFF
            self._has_cache = True
        else:
            self._pending += 1
        self._low = (low << 8) & MASK

    def encode(self, cum_low: int, freq: int) -> None:
        """Estrecha el intervalo al subintervalo [cum_low, cum_low+freq) de 2^16"""
        if freq <= 0:
            raise ValueError("Frecuencia nula: el símbolo no es codificable")
        r = self._range >> FREQ_BITS
        self._low += r * cum_low
        self._range = r * freq
        while self._range < TOP:
            self._shift_low()
            self._range <<= 8

    def finish(self) -> bytes:
        """Vacía el estado con el mínimo de bytes (1 o 2) que fija un valor del intervalo"""
        if self._finished:
            return bytes(self._out)
        flush = 1
        while (1 << (RANGE_BITS + 1 - 8 * flush)) > self._range:
            flush += 1
        unit = 1 << (RANGE_BITS - 8 * flush)
        self._low = -(-self._low // unit) * unit
        for _ in range(flush + 1):
            self._shift_low()
        self._finished = True
        return bytes(self._out)

    def __enter__(self):
        return self

    def __exit__(self, *_):
        self.finish()
        return False


class RangeDecoder:
    """Decodificador espejo de RangeEncoder"""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._overrun = 0
        self._range = MASK
        self._code = 0
        for _ in range(STATE_BYTES):
            self._code = (self._code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos < len(self._data):
            b = self._data[self._pos]
            self._pos += 1
            return b
        self._overrun += 1
        if self._overrun > MAX_ZERO_FILL:
            raise TruncatedStreamError(
                f"Flujo agotado tras {len(self._data)} bytes"
            )
        return 0

    def decode(self, table: FrequencyTable) -> int:
        r = self._range >> FREQ_BITS
        value = min(self._code // r, TOTAL - 1)
        cum = table.cumulative
        symbol = bisect.bisect_right(cum, value) - 1
        self._code -= r * cum[symbol]
        self._range = r * (cum[symbol + 1] - cum[symbol])
        while self._range < TOP:
            self._code = ((self._code << 8) | self._next_byte()) & MASK
            self._range <<= 8
        return symbol


def ac_encode(symbols: Sequence[int], provider: TableProvider) -> Bitstream:
    """Codifica symbols pidiendo la tabla del símbolo t antes de consumirlo"""
    history: List[int] = []
    with RangeEncoder() as encoder:
        for t, symbol in enumerate(symbols):
            symbol = int(symbol)
            table = provider(t, history)
            if not 0 <= symbol < table.size:
                raise ValueError(f"Símbolo {symbol} fuera del alfabeto de {table.size}")
            encoder.encode(table.cumulative[symbol], table.frequency(symbol))
            history.append(symbol)
    data = encoder.finish()
    return Bitstream(data, 8 * len(data))


def ac_decode(bits: Bitstream, provider: TableProvider, n_symbols: int) -> List[int]:
    """Inversa de ac_encode; TruncatedStreamError si el flujo no alcanza"""
    if n_symbols == 0:
        return []
    decoder = RangeDecoder(bits.data)
    history: List[int] = []
    for t in range(n_symbols):
        history.append(decoder.decode(provider(t, history)))
    return history


def codelength_bound(tables: Sequence[FrequencyTable], symbols: Sequence[int]) -> float:
    """Entropía cruzada Σ −log2(freq_t(s_t)/2^16) en bits"""
    return float(sum(FREQ_BITS - math.log2(table.frequency(int(s)))
                     for table, s in zip(tables, symbols)))
