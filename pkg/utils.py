"""Utilidades varias: errores, semillas, cabeceras de pesos y logging"""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Cabecera de 16 bytes: magic, versión, nº de features, K, Q (little-endian)
WEIGHTS_HEADER = struct.Struct('<4sHHII')
WEIGHTS_VERSION = 1


class DimensionError(ValueError):
    """Formas o longitudes incompatibles"""


class ImageFormatError(ValueError):
    """Archivo de imagen malformado"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


class UnsupportedFormatError(ValueError):
    """Formato de imagen no soportado (no RGB, no 8 bits, extensión desconocida)"""


class ConfigurationError(ValueError):
    """Configuración inválida"""


class DegenerateInputError(ValueError):
    """Entrada degenerada (p. ej. vector de símbolos todo ceros)"""


class AlistFormatError(ValueError):
    """Archivo alist malformado"""


class CodeConstructionError(ValueError):
    """Matriz de paridad sin rango completo"""


class TruncatedStreamError(ValueError):
    """Flujo aritmético agotado antes de decodificar todos los símbolos"""


class SchemaError(ValueError):
    """CSV sin las columnas documentadas"""


class TrainingDivergedError(RuntimeError):
    """La pérdida superó 10 veces la inicial"""


class StageDependencyError(RuntimeError):
    """Faltan los pesos de una etapa previa de entrenamiento"""


def setup_logging(level: str = 'INFO') -> None:
    """Configura logging con el formato común de los puntos de entrada"""
    logging.basicConfig(
        format=LOG_FORMAT,
        level=getattr(logging, str(level).upper(), logging.INFO)
    )


def derive_seed(*keys: int) -> int:
    """Deriva una semilla de 64 bits determinista a partir de claves enteras"""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def write_weights(path, magic: bytes, features: int, mixtures: int, levels: int,
                  arrays: Sequence[np.ndarray]) -> None:
    """Escribe arrays como doubles little-endian tras la cabecera de 16 bytes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = WEIGHTS_HEADER.pack(magic, WEIGHTS_VERSION, features, mixtures, levels)
    body = b''.join(np.ascontiguousarray(a, dtype='<f8').tobytes() for a in arrays)
    try:
        with open(path, 'wb') as f:
            f.write(header)
            f.write(body)
    except OSError as e:
        raise OSError(f"No se pudieron escribir los pesos en {path}: {e}") from e
    logger.debug(f"[PESOS] {path} escrito ({len(body) // 8} valores)")


def read_weights(path, magic: bytes, shapes: List[Tuple[int, ...]]) -> Tuple[Dict[str, int], List[np.ndarray]]:
    """Lee un archivo de pesos y lo reparte en arrays con las formas indicadas

    Returns:
        (cabecera como dict, lista de arrays)
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"No se pudieron leer los pesos de {path}: {e}") from e

    if len(raw) < WEIGHTS_HEADER.size:
        raise ConfigurationError(f"Archivo de pesos truncado: {path}")
    found, version, features, mixtures, levels = WEIGHTS_HEADER.unpack_from(raw)
    if found != magic:
        raise ConfigurationError(f"Magic inesperado en {path}: {found!r} (esperado {magic!r})")
    if version != WEIGHTS_VERSION:
        raise ConfigurationError(f"Versión de pesos {version} no soportada en {path}")

    values = np.frombuffer(raw, dtype='<f8', offset=WEIGHTS_HEADER.size)
    expected = sum(int(np.prod(s)) for s in shapes)
    if values.size != expected:
        raise ConfigurationError(
            f"{path} contiene {values.size} valores, se esperaban {expected}"
        )

    arrays = []
    start = 0
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(values[start:start + n].astype(np.float64).reshape(shape))
        start += n
    header = {'features': features, 'mixtures': mixtures, 'levels': levels}
    return header, arrays


def peek_weights_header(path, magic: bytes) -> Dict[str, int]:
    """Lee solo la cabecera de un archivo de pesos"""
    path = Path(path)
    try:
        with open(path, 'rb') as f:
            raw = f.read(WEIGHTS_HEADER.size)
    except OSError as e:
        raise OSError(f"No se pudieron leer los pesos de {path}: {e}") from e
    if len(raw) < WEIGHTS_HEADER.size:
        raise ConfigurationError(f"Archivo de pesos truncado: {path}")
    found, _, features, mixtures, levels = WEIGHTS_HEADER.unpack(raw)
    if found != magic:
        raise ConfigurationError(f"Magic inesperado en {path}: {found!r} (esperado {magic!r})")
    return {'features': features, 'mixtures': mixtures, 'levels': levels}
