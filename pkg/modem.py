"""Capa física digital del enlace residual: LDPC, QAM Gray, CRC-32 y tramas"""
import functools
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from utils import AlistFormatError, CodeConstructionError, DimensionError

logger = logging.getLogger(__name__)

# Recorte de mensajes variable→check durante BP
LLR_CLIP = 20.0
DEFAULT_MAX_ITERS = 50

FRAME_MAGIC = b'MH'
FRAME_HEADER = struct.Struct('>2sII')

# Códigos incluidos: (n, peso de columna, peso de fila, semilla de construcción)
BUILTIN_CODES = {
    'r12_n96': (96, 3, 6, 96),
    'r12_n1024': (1024, 3, 6, 1024),
    'r23_n1536': (1536, 3, 9, 1536),
}


def crc32(data: bytes) -> int:
    """CRC-32 reflejado (0xEDB88320, init y XOR final 0xFFFFFFFF)"""
    return zlib.crc32(bytes(data)) & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# LDPC
# ---------------------------------------------------------------------------

class DecodeResult(NamedTuple):
    info_bits: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True)
class LdpcCode:
    """Código LDPC: H_c (M×N), adyacencias y codificador sistemático derivado"""
    name: str
    parity_check: np.ndarray
    checks: np.ndarray
    variables: np.ndarray
    info_positions: np.ndarray
    parity_positions: np.ndarray
    parity_generator: np.ndarray

    @property
    def n(self) -> int:
        return self.parity_check.shape[1]

    @property
    def m(self) -> int:
        return self.parity_check.shape[0]

    @property
    def k(self) -> int:
        return self.info_positions.size

    @property
    def rate(self) -> float:
        return self.k / self.n

    @classmethod
    def from_parity_check(cls, parity_check, name: str = 'custom') -> 'LdpcCode':
        """Deriva el codificador por eliminación gaussiana en GF(2)

        Los pivotes se buscan desde la última columna, de modo que la información
        ocupa las primeras posiciones siempre que el rango lo permite.
        """
        h = (np.asarray(parity_check) % 2).astype(np.uint8)
        if h.ndim != 2 or h.shape[0] >= h.shape[1]:
            raise CodeConstructionError(f"Matriz de paridad con forma inválida {h.shape}")
        m, n = h.shape
        if np.any(h.sum(axis=1) == 0):
            raise CodeConstructionError("La matriz de paridad tiene filas vacías")

        reduced = h.copy()
        pivots: List[int] = []
        row = 0
        for col in range(n - 1, -1, -1):
            if row == m:
                break
            candidates = np.nonzero(reduced[row:, col])[0]
            if candidates.size == 0:
                continue
            pivot = row + int(candidates[0])
            if pivot != row:
                reduced[[row, pivot]] = reduced[[pivot, row]]
            others = np.nonzero(reduced[:, col])[0]
            others = others[others != row]
            reduced[others] ^= reduced[row]
            pivots.append(col)
            row += 1
        if row < m:
            raise CodeConstructionError(f"Rango {row} < {m}: H_c no tiene rango completo")

        parity_positions = np.array(pivots, dtype=np.int64)
        mask = np.ones(n, dtype=bool)
        mask[parity_positions] = False
        info_positions = np.nonzero(mask)[0]
        generator = reduced[:, info_positions].copy()

        checks, variables = np.nonzero(h)
        for arr in (h, checks, variables, info_positions, parity_positions, generator):
            arr.setflags(write=False)
        return cls(name, h, checks, variables, info_positions, parity_positions, generator)


def build_regular_code(n: int, col_weight: int, row_weight: int, seed: int,
                       name: str = 'regular', attempts: int = 500) -> LdpcCode:
    """Construye un código regular sin ciclos de longitud 4 y con rango completo"""
    if (n * col_weight) % row_weight:
        raise CodeConstructionError("n·w_c debe ser múltiplo de w_r")
    m = n * col_weight // row_weight
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, attempt])
        h = _place_edges(n, m, col_weight, row_weight, rng)
        if h is None:
            continue
        try:
            code = LdpcCode.from_parity_check(h, name)
        except CodeConstructionError:
            continue
        logger.debug(f"[LDPC] {name} construido en el intento {attempt + 1}")
        return code
    raise CodeConstructionError(f"No se pudo construir {name} en {attempts} intentos")


def _place_edges(n: int, m: int, col_weight: int, row_weight: int,
                 rng: np.random.Generator) -> Optional[np.ndarray]:
    """Colocación progresiva: cada columna elige filas de menor grado sin cerrar 4-ciclos"""
    h = np.zeros((m, n), dtype=np.uint8)
    degree = np.zeros(m, dtype=np.int64)
    covered = np.zeros((m, m), dtype=bool)
    for col in range(n):
        chosen: List[int] = []
        for _ in range(col_weight):
            ok = degree < row_weight
            for r in chosen:
                ok &= ~covered[r]
                ok[r] = False
            candidates = np.nonzero(ok)[0]
            if candidates.size == 0:
                return None
            lowest = candidates[degree[candidates] == degree[candidates].min()]
            chosen.append(int(rng.choice(lowest)))
        for a in chosen:
            for b in chosen:
                if a != b:
                    covered[a, b] = True
        h[chosen, col] = 1
        degree[chosen] += 1
    return h


@functools.lru_cache(maxsize=None)
def builtin_code(name: str) -> LdpcCode:
    """Códigos incluidos, construidos de forma determinista y cacheados"""
    if name not in BUILTIN_CODES:
        raise AlistFormatError(f"Código desconocido '{name}'; disponibles: {', '.join(BUILTIN_CODES)}")
    n, wc, wr, seed = BUILTIN_CODES[name]
    code = build_regular_code(n, wc, wr, seed, name=name)
    logger.info(f"[LDPC] Código {name} listo: N={code.n}, K={code.k}, tasa {code.rate:.3f}")
    return code


def _alist_ints(line: str, number: int) -> List[int]:
    try:
        return [int(tok) for tok in line.split()]
    except ValueError:
        raise AlistFormatError(f"Línea {number} del alist no numérica: {line!r}") from None


def ldpc_load_alist(path) -> LdpcCode:
    """Carga una matriz de paridad en formato alist (MacKay)"""
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except FileNotFoundError:
        raise FileNotFoundError(f"Archivo alist no encontrado: {path}") from None

    if len(lines) < 4:
        raise AlistFormatError(f"Alist truncado: {path}")
    dims = _alist_ints(lines[0], 1)
    maxima = _alist_ints(lines[1], 2)
    if len(dims) != 2 or len(maxima) != 2:
        raise AlistFormatError(f"Cabecera alist inválida en {path}")
    n, m = dims
    col_weights = _alist_ints(lines[2], 3)
    row_weights = _alist_ints(lines[3], 4)
    if len(col_weights) != n or len(row_weights) != m:
        raise AlistFormatError(f"Listas de grados con longitud incorrecta en {path}")
    if max(col_weights) > maxima[0] or max(row_weights) > maxima[1]:
        raise AlistFormatError(f"Grados mayores que los máximos declarados en {path}")
    if sum(col_weights) != sum(row_weights):
        raise AlistFormatError(f"Listas de grados inconsistentes en {path}")
    if len(lines) < 4 + n + m:
        raise AlistFormatError(f"Alist truncado: faltan listas de adyacencia en {path}")

    h = np.zeros((m, n), dtype=np.uint8)
    for j in range(n):
        rows = [r for r in _alist_ints(lines[4 + j], 5 + j) if r]
        if len(rows) != col_weights[j] or any(not 1 <= r <= m for r in rows):
            raise AlistFormatError(f"Columna {j + 1} inconsistente con su grado en {path}")
        h[np.array(rows) - 1, j] = 1
    for i in range(m):
        cols = [c for c in _alist_ints(lines[4 + n + i], 5 + n + i) if c]
        if len(cols) != row_weights[i] or any(not 1 <= c <= n for c in cols):
            raise AlistFormatError(f"Fila {i + 1} inconsistente con su grado en {path}")
        if sorted(np.nonzero(h[i])[0] + 1) != sorted(cols):
            raise AlistFormatError(f"Fila {i + 1} no coincide con las listas de columnas en {path}")

    return LdpcCode.from_parity_check(h, name=path.stem)


def ldpc_save_alist(code: LdpcCode, path) -> None:
    """Escribe la matriz de paridad en formato alist"""
    h = code.parity_check
    col_lists = [np.nonzero(h[:, j])[0] + 1 for j in range(code.n)]
    row_lists = [np.nonzero(h[i])[0] + 1 for i in range(code.m)]
    max_col = max(len(c) for c in col_lists)
    max_row = max(len(r) for r in row_lists)

    def padded(values, width):
        return ' '.join(str(v) for v in list(values) + [0] * (width - len(values)))

    lines = [f"{code.n} {code.m}", f"{max_col} {max_row}",
             ' '.join(str(len(c)) for c in col_lists),
             ' '.join(str(len(r)) for r in row_lists)]
    lines += [padded(c, max_col) for c in col_lists]
    lines += [padded(r, max_row) for r in row_lists]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join(lines) + '\n')


def syndrome(code: LdpcCode, bits) -> np.ndarray:
    """H_c·cᵀ sobre GF(2)"""
    c = np.asarray(bits, dtype=np.int64)
    return (np.bincount(code.checks, weights=c[code.variables], minlength=code.m) % 2).astype(np.uint8)


def ldpc_encode(code: LdpcCode, info_bits) -> np.ndarray:
    """Palabra código sistemática de N bits"""
    u = np.asarray(info_bits, dtype=np.uint8).ravel()
    if u.size != code.k:
        raise DimensionError(f"Se esperaban {code.k} bits de información, no {u.size}")
    c = np.zeros(code.n, dtype=np.uint8)
    c[code.info_positions] = u
    c[code.parity_positions] = (code.parity_generator.astype(np.int64) @ u) % 2
    return c


def _check_update_sum_product(q: np.ndarray, code: LdpcCode) -> np.ndarray:
    t = np.tanh(np.clip(q, -LLR_CLIP, LLR_CLIP) / 2.0)
    negative = (t < 0).astype(np.float64)
    log_mag = np.log(np.maximum(np.abs(t), 1e-300))
    total_log = np.bincount(code.checks, weights=log_mag, minlength=code.m)
    total_neg = np.bincount(code.checks, weights=negative, minlength=code.m)
    ext_log = total_log[code.checks] - log_mag
    ext_neg = np.rint(total_neg[code.checks] - negative).astype(np.int64)
    prod = np.where(ext_neg % 2 == 1, -1.0, 1.0) * np.exp(ext_log)
    prod = np.clip(prod, -1.0 + 1e-15, 1.0 - 1e-15)
    return 2.0 * np.arctanh(prod)


def _check_update_min_sum(q: np.ndarray, code: LdpcCode, starts: np.ndarray) -> np.ndarray:
    q = np.clip(q, -LLR_CLIP, LLR_CLIP)
    mag = np.abs(q)
    negative = (q < 0).astype(np.int64)
    min1 = np.minimum.reduceat(mag, starts)
    is_min = mag == min1[code.checks]
    # primer arco mínimo de cada check
    first = np.zeros(mag.size, dtype=bool)
    idx = np.nonzero(is_min)[0]
    _, first_pos = np.unique(code.checks[idx], return_index=True)
    first[idx[first_pos]] = True
    min2 = np.minimum.reduceat(np.where(first, np.inf, mag), starts)
    ext_mag = np.where(first, min2[code.checks], min1[code.checks])
    total_neg = np.add.reduceat(negative, starts)
    sign = np.where((total_neg[code.checks] - negative) % 2 == 1, -1.0, 1.0)
    return sign * ext_mag


def ldpc_decode(code: LdpcCode, llrs, max_iters: int = DEFAULT_MAX_ITERS,
                method: str = 'sum_product') -> DecodeResult:
    """Propagación de creencias con parada temprana por síndrome nulo

    Convenio: LLR positivo ⇒ bit 0. La convergencia exige síndrome nulo y
    ningún LLR a posteriori exactamente cero.
    """
    channel = np.asarray(llrs, dtype=np.float64).ravel()
    if channel.size != code.n:
        raise DimensionError(f"Se esperaban {code.n} LLRs, no {channel.size}")
    if method not in ('sum_product', 'min_sum'):
        raise ValueError(f"Decodificador desconocido: {method}")
    starts = np.searchsorted(code.checks, np.arange(code.m))

    q = channel[code.variables]
    hard = (channel < 0).astype(np.uint8)
    for iteration in range(1, max_iters + 1):
        if method == 'sum_product':
            r = _check_update_sum_product(q, code)
        else:
            r = _check_update_min_sum(q, code, starts)
        total = channel + np.bincount(code.variables, weights=r, minlength=code.n)
        q = total[code.variables] - r
        hard = (total < 0).astype(np.uint8)
        if np.all(total != 0) and not syndrome(code, hard).any():
            return DecodeResult(hard[code.info_positions].copy(), True, iteration)
    return DecodeResult(hard[code.info_positions].copy(), False, max_iters)


# ---------------------------------------------------------------------------
# QAM
# ---------------------------------------------------------------------------

def _gray_inverse(g: int) -> int:
    shift = g >> 1
    while shift:
        g ^= shift
        shift >>= 1
    return g


@dataclass(frozen=True)
class QamConstellation:
    """Constelación QAM cuadrada con etiquetado Gray por eje y energía media 1

    Etiqueta de b bits (MSB primero): la primera mitad elige el nivel en fase,
    la segunda el de cuadratura; bit 0 ⇒ semieje positivo. 4QAM '00' → (1+1j)/√2.
    """
    order: int
    points: np.ndarray
    labels: np.ndarray

    @property
    def bits_per_symbol(self) -> int:
        return self.labels.shape[1]


@functools.lru_cache(maxsize=None)
def qam_constellation(order: int) -> QamConstellation:
    if order not in (4, 16, 64):
        raise ValueError(f"Orden QAM no soportado: {order}")
    bits = order.bit_length() - 1
    half = bits // 2
    side = 1 << half
    levels = np.array([side - 1 - 2 * _gray_inverse(g) for g in range(side)], dtype=np.float64)
    label = np.arange(order)
    points = (levels[label >> half] + 1j * levels[label & (side - 1)]) / np.sqrt(2.0 * (order - 1) / 3.0)
    labels = ((label[:, None] >> np.arange(bits - 1, -1, -1)[None, :]) & 1).astype(np.uint8)
    points.setflags(write=False)
    labels.setflags(write=False)
    return QamConstellation(order, points, labels)


def qam_modulate(const: QamConstellation, bits) -> np.ndarray:
    """Mapea bits a símbolos complejos"""
    b = np.asarray(bits, dtype=np.int64).ravel()
    k = const.bits_per_symbol
    if b.size % k:
        raise DimensionError(f"{b.size} bits no es múltiplo de {k}")
    weights = 1 << np.arange(k - 1, -1, -1)
    return const.points[b.reshape(-1, k) @ weights]


def qam_demodulate_hard(const: QamConstellation, received) -> np.ndarray:
    """Decisión por mínima distancia"""
    y = np.asarray(received, dtype=np.complex128).ravel()
    nearest = np.argmin(np.abs(y[:, None] - const.points[None, :]), axis=1)
    return const.labels[nearest].ravel()


def qam_demodulate_llr(const: QamConstellation, received, post_eq_noise_var,
                       exact: bool = False) -> np.ndarray:
    """LLR por bit (positivo ⇒ 0): max-log por defecto, log-sum-exp si exact"""
    y = np.asarray(received, dtype=np.complex128).ravel()
    noise = np.broadcast_to(np.asarray(post_eq_noise_var, dtype=np.float64), y.shape)
    if np.any(noise <= 0):
        raise ValueError("La varianza de ruido debe ser positiva")
    d2 = np.abs(y[:, None] - const.points[None, :]) ** 2
    llrs = np.empty((y.size, const.bits_per_symbol), dtype=np.float64)
    for b in range(const.bits_per_symbol):
        ones = const.labels[:, b] == 1
        if exact:
            metric = -d2 / noise[:, None]
            llrs[:, b] = logsumexp(metric[:, ~ones], axis=1) - logsumexp(metric[:, ones], axis=1)
        else:
            llrs[:, b] = (d2[:, ones].min(axis=1) - d2[:, ~ones].min(axis=1)) / noise
    return llrs.ravel()


# ---------------------------------------------------------------------------
# Tramas y enlace digital
# ---------------------------------------------------------------------------

def build_frame(payload: bytes) -> bytes:
    """Cabecera (magic, longitud en bits, CRC-32) big-endian + payload"""
    return FRAME_HEADER.pack(FRAME_MAGIC, 8 * len(payload), crc32(payload)) + bytes(payload)


def parse_frame(data: bytes) -> Optional[bytes]:
    """Devuelve el payload si magic, longitud y CRC son válidos; None si no"""
    if len(data) < FRAME_HEADER.size:
        return None
    magic, bit_length, checksum = FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC or bit_length % 8:
        return None
    end = FRAME_HEADER.size + bit_length // 8
    if end > len(data):
        return None
    payload = bytes(data[FRAME_HEADER.size:end])
    if crc32(payload) != checksum:
        return None
    return payload


@dataclass(frozen=True)
class FrameReport:
    payload: Optional[bytes]
    codewords: int
    converged: int
    iterations: int

    @property
    def delivered(self) -> bool:
        return self.payload is not None


@dataclass(frozen=True)
class DigitalLink:
    """LDPC + QAM para una trama completa"""
    code: LdpcCode
    constellation: QamConstellation
    max_iters: int = DEFAULT_MAX_ITERS
    decoder: str = 'sum_product'
    exact_llr: bool = False

    def codewords_for(self, frame_bits: int) -> int:
        return max(1, -(-frame_bits // self.code.k))

    def modulate(self, frame: bytes) -> Tuple[np.ndarray, int]:
        """Trama → símbolos QAM; devuelve también el nº de palabras código"""
        bits = np.unpackbits(np.frombuffer(bytes(frame), dtype=np.uint8))
        blocks = self.codewords_for(bits.size)
        info = np.zeros(blocks * self.code.k, dtype=np.uint8)
        info[:bits.size] = bits
        coded = np.concatenate([ldpc_encode(self.code, blk) for blk in info.reshape(blocks, self.code.k)])
        per_symbol = self.constellation.bits_per_symbol
        padded = np.zeros(-(-coded.size // per_symbol) * per_symbol, dtype=np.uint8)
        padded[:coded.size] = coded
        return qam_modulate(self.constellation, padded), blocks

    def demodulate(self, received, noise_var, blocks: int, inject_flips: int = 0) -> FrameReport:
        """Símbolos ecualizados (sin sesgo) → LLR → BP → trama verificada por CRC"""
        llrs = qam_demodulate_llr(self.constellation, received, noise_var, exact=self.exact_llr)
        llrs = llrs[:blocks * self.code.n].copy()
        if inject_flips:
            llrs[:inject_flips] = -llrs[:inject_flips]
        info = []
        converged = 0
        iterations = 0
        for blk in llrs.reshape(blocks, self.code.n):
            result = ldpc_decode(self.code, blk, self.max_iters, self.decoder)
            info.append(result.info_bits)
            converged += int(result.converged)
            iterations += result.iterations
        frame = np.packbits(np.concatenate(info)).tobytes()
        payload = parse_frame(frame)
        if converged < blocks:
            logger.debug(f"[LDPC] {blocks - converged}/{blocks} palabras sin converger")
        return FrameReport(payload, blocks, converged, iterations)
