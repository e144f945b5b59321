"""Modelo de entropía: mezcla de logísticas discretizada con autorregresión RGB

Los símbolos s ∈ [0, Q−1] se centran a x = 2s/(Q−1) − 1 ∈ [−1, 1] antes de
entrar en las medias condicionadas y en la discretización; cada bin mide
2/(Q−1) en esas unidades.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from accoder import FrequencyTable, quantize_pmf_batch
from imagecore import ImageTensor
from utils import DimensionError, peek_weights_header, read_weights, write_weights

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-3
PROB_FLOOR = 2.0 ** -24
DEFAULT_MIXTURES = 5
FEATURES_PER_CHANNEL = 4
FEATURE_COUNT = 3 * FEATURES_PER_CHANNEL
ESTIMATOR_MAGIC = b'MHRE'
# Grupos de pre-activaciones por celda: logits, medias, escalas, λ
PARAM_GROUPS = 4


@dataclass(frozen=True)
class SymbolGrid:
    """Códigos cuantizados r̃ de forma (3, U, V) con alfabeto Q"""
    symbols: np.ndarray
    levels: int

    def __post_init__(self):
        s = np.array(self.symbols, dtype=np.int64, copy=True)
        if s.ndim != 3 or s.shape[0] != 3:
            raise DimensionError(f"SymbolGrid requiere forma (3, U, V), no {s.shape}")
        if self.levels < 2:
            raise ValueError("Q debe ser al menos 2")
        if s.size and (s.min() < 0 or s.max() > self.levels - 1):
            raise ValueError(f"Símbolos fuera de [0, {self.levels - 1}]")
        s.setflags(write=False)
        object.__setattr__(self, 'symbols', s)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.symbols.shape[1], self.symbols.shape[2]

    @property
    def count(self) -> int:
        return self.symbols.size

    def traversal(self) -> List[int]:
        """Orden canal-mayor, filas dentro de cada canal"""
        return self.symbols.ravel().tolist()

    @classmethod
    def from_traversal(cls, values: Sequence[int], levels: int, grid_shape: Tuple[int, int]) -> 'SymbolGrid':
        u, v = grid_shape
        return cls(np.asarray(values, dtype=np.int64).reshape(3, u, v), levels)


def centered(symbols, levels: int) -> np.ndarray:
    """s → 2s/(Q−1) − 1"""
    return 2.0 * np.asarray(symbols, dtype=np.float64) / (levels - 1) - 1.0


def bin_edges(levels: int) -> np.ndarray:
    """Fronteras interiores entre símbolos consecutivos (Q−1 valores)"""
    j = np.arange(1, levels, dtype=np.float64)
    return -1.0 + (2.0 * j - 1.0) / (levels - 1)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class LogisticMixtureParams:
    """Pre-activaciones (K, 3, U, V) de π (softmax), μ, σ (softplus + σ_min) y λ

    λ[:, 0] multiplica al canal 1 en la media del canal 2; λ[:, 1] y λ[:, 2]
    a los canales 1 y 2 en la media del canal 3.
    """
    logits: np.ndarray
    means: np.ndarray
    scale_pre: np.ndarray
    lambdas: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.logits)
        for name in ('logits', 'means', 'scale_pre', 'lambdas'):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if arr.shape != shape or arr.ndim != 4 or arr.shape[1] != 3:
                raise DimensionError(f"{name} con forma {arr.shape}; se esperaba (K, 3, U, V) común")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def mixtures(self) -> int:
        return self.logits.shape[0]

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.logits.shape[2], self.logits.shape[3]

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits, axis=0)

    @property
    def scales(self) -> np.ndarray:
        return softplus(self.scale_pre) + SIGMA_MIN

    def flat(self) -> np.ndarray:
        return np.stack([self.logits, self.means, self.scale_pre, self.lambdas])

    @classmethod
    def from_flat(cls, stacked: np.ndarray) -> 'LogisticMixtureParams':
        return cls(stacked[0], stacked[1], stacked[2], stacked[3])


@dataclass(frozen=True)
class LogisticMixtureGradients:
    logits: np.ndarray
    means: np.ndarray
    scale_pre: np.ndarray
    lambdas: np.ndarray

    def flat(self) -> np.ndarray:
        return np.stack([self.logits, self.means, self.scale_pre, self.lambdas])


def _check_grid(params: LogisticMixtureParams, grid: SymbolGrid) -> None:
    if params.grid_shape != grid.grid_shape:
        raise DimensionError(
            f"Parámetros para rejilla {params.grid_shape} y rejilla {grid.grid_shape}"
        )


def conditioned_means(params: LogisticMixtureParams, grid: SymbolGrid) -> np.ndarray:
    """μ̃ por (k, c, u, v) con autorregresión sobre canales previos"""
    _check_grid(params, grid)
    x = centered(grid.symbols, grid.levels)
    lam = params.lambdas
    mt = np.array(params.means, copy=True)
    mt[:, 1] += lam[:, 0] * x[0]
    mt[:, 2] += lam[:, 1] * x[0] + lam[:, 2] * x[1]
    return mt


def logistic_cdf(x, mu, sigma):
    """1/(1+exp(−(x−μ)/σ)) estable para argumentos grandes"""
    return expit((np.asarray(x, dtype=np.float64) - mu) / sigma)


def discretized_logistic_pmf(symbol, mu, sigma, levels: int):
    """Masa del bin del símbolo; los bins extremos absorben las colas"""
    s = np.asarray(symbol)
    if np.any(s < 0) or np.any(s > levels - 1):
        raise ValueError(f"Símbolo fuera de [0, {levels - 1}]")
    s = s.astype(np.float64)
    lower = -1.0 + (2.0 * s - 1.0) / (levels - 1)
    upper = -1.0 + (2.0 * s + 1.0) / (levels - 1)
    zl = (lower - mu) / sigma
    zu = (upper - mu) / sigma
    bottom = s == 0
    top = s == levels - 1
    # lado derecho: diferencia de colas superiores para no perder precisión
    direct = np.where(top, 1.0, expit(zu)) - np.where(bottom, 0.0, expit(zl))
    tails = np.where(bottom, 1.0, expit(-zl)) - np.where(top, 0.0, expit(-zu))
    return np.where(zl + zu > 0, tails, direct)


def symbol_probabilities(params: LogisticMixtureParams, grid: SymbolGrid) -> np.ndarray:
    """p(r̃[c,u,v]) para cada posición de la rejilla, forma (3, U, V)"""
    mt = conditioned_means(params, grid)
    comp = discretized_logistic_pmf(grid.symbols[None], mt, params.scales, grid.levels)
    return np.sum(params.weights * comp, axis=0)


def mixture_pmf(params: LogisticMixtureParams, grid: SymbolGrid, c: int, u: int, v: int) -> float:
    """Σ_k π·pmf del símbolo grid[c,u,v] con medias condicionadas"""
    mt = conditioned_means(params, grid)
    symbol = grid.symbols[c, u, v]
    comp = discretized_logistic_pmf(symbol, mt[:, c, u, v], params.scales[:, c, u, v], grid.levels)
    return float(np.sum(params.weights[:, c, u, v] * comp))


def joint_nll(params: LogisticMixtureParams, grid: SymbolGrid, unit: str = 'nats') -> float:
    """−Σ log max(p, 2^−24) sobre toda la rejilla"""
    p = np.maximum(symbol_probabilities(params, grid), PROB_FLOOR)
    nll = float(-np.sum(np.log(p)))
    if unit == 'bits':
        return nll / np.log(2.0)
    if unit != 'nats':
        raise ValueError(f"Unidad desconocida: {unit}")
    return nll


def nll_gradients(params: LogisticMixtureParams, grid: SymbolGrid) -> LogisticMixtureGradients:
    """Gradientes analíticos de joint_nll (nats) respecto a las pre-activaciones"""
    mt = conditioned_means(params, grid)
    q = grid.levels
    s = grid.symbols[None].astype(np.float64)
    sigma = params.scales
    pi = params.weights

    lower = -1.0 + (2.0 * s - 1.0) / (q - 1)
    upper = -1.0 + (2.0 * s + 1.0) / (q - 1)
    zl = (lower - mt) / sigma
    zu = (upper - mt) / sigma
    bottom = np.broadcast_to(s == 0, mt.shape)
    top = np.broadcast_to(s == q - 1, mt.shape)

    comp = discretized_logistic_pmf(grid.symbols[None], mt, sigma, q)
    fu = np.where(top, 0.0, expit(zu) * expit(-zu))
    fl = np.where(bottom, 0.0, expit(zl) * expit(-zl))
    d_comp_mu = -(fu - fl) / sigma
    d_comp_sigma = -(np.where(top, 0.0, fu * zu) - np.where(bottom, 0.0, fl * zl)) / sigma

    p = np.sum(pi * comp, axis=0)
    active = p >= PROB_FLOOR
    inv_p = np.where(active, 1.0 / np.maximum(p, PROB_FLOOR), 0.0)

    d_logits = np.where(active, pi - pi * comp * inv_p, 0.0)
    d_mu = -pi * d_comp_mu * inv_p
    d_sigma = -pi * d_comp_sigma * inv_p
    d_scale_pre = d_sigma * expit(params.scale_pre)

    x = centered(grid.symbols, q)
    d_lambdas = np.zeros_like(d_mu)
    d_lambdas[:, 0] = d_mu[:, 1] * x[0]
    d_lambdas[:, 1] = d_mu[:, 2] * x[0]
    d_lambdas[:, 2] = d_mu[:, 2] * x[1]
    return LogisticMixtureGradients(d_logits, d_mu, d_scale_pre, d_lambdas)


def channel_pmfs(params: LogisticMixtureParams, earlier: np.ndarray, c: int, levels: int) -> np.ndarray:
    """pmf completa (U, V, Q) del canal c dados los símbolos de canales < c"""
    x = centered(earlier, levels) if c else None
    lam = params.lambdas
    mt = np.array(params.means[:, c], copy=True)
    if c == 1:
        mt += lam[:, 0] * x[0]
    elif c == 2:
        mt += lam[:, 1] * x[0] + lam[:, 2] * x[1]
    sigma = params.scales[:, c]
    cdf = expit((bin_edges(levels) - mt[..., None]) / sigma[..., None])
    k, u, v, _ = cdf.shape
    cdf = np.concatenate([np.zeros((k, u, v, 1)), cdf, np.ones((k, u, v, 1))], axis=-1)
    comp = np.diff(cdf, axis=-1)
    return np.einsum('kuv,kuvq->uvq', params.weights[:, c], comp)


class MixtureTableProvider:
    """Proveedor de tablas de frecuencia canal a canal, idéntico en ambos extremos"""

    def __init__(self, params: LogisticMixtureParams, levels: int):
        self.params = params
        self.levels = levels
        self.grid_shape = params.grid_shape
        self._sites = self.grid_shape[0] * self.grid_shape[1]
        self._cache: Dict[int, np.ndarray] = {}

    def channel_tables(self, c: int, earlier: np.ndarray) -> np.ndarray:
        pmfs = channel_pmfs(self.params, earlier, c, self.levels)
        return quantize_pmf_batch(pmfs.reshape(-1, self.levels))

    def __call__(self, t: int, history: Sequence[int]) -> FrequencyTable:
        c, site = divmod(t, self._sites)
        if c not in self._cache:
            u, v = self.grid_shape
            earlier = np.asarray(history[:c * self._sites], dtype=np.int64).reshape(c, u, v)
            self._cache[c] = self.channel_tables(c, earlier)
        return FrequencyTable(tuple(self._cache[c][site].tolist()))


def tables_for_grid(params: LogisticMixtureParams, grid: SymbolGrid) -> List[FrequencyTable]:
    """Tablas en orden de recorrido, condicionadas por los símbolos reales de la rejilla"""
    provider = MixtureTableProvider(params, grid.levels)
    symbols = grid.traversal()
    return [provider(t, symbols) for t in range(len(symbols))]


# ---------------------------------------------------------------------------
# Estimador de residuos
# ---------------------------------------------------------------------------

def _pad_to_multiple(data: np.ndarray, factor: int) -> np.ndarray:
    h, w = data.shape[-2:]
    ph = -h % factor
    pw = -w % factor
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, ph), (0, pw)), mode='edge')
    return data


def grid_shape_for(height: int, width: int, factor: int) -> Tuple[int, int]:
    return -(-height // factor), -(-width // factor)


def block_features(condition: ImageTensor, factor: int) -> np.ndarray:
    """Media, desviación y energía de gradiente horizontal/vertical por bloque y canal

    Returns:
        array (U, V, 12)
    """
    data = _pad_to_multiple(condition.data, factor)
    _, h, w = data.shape
    u, v = h // factor, w // factor
    dh = np.diff(data, axis=2, append=data[:, :, -1:])
    dv = np.diff(data, axis=1, append=data[:, -1:, :])

    def blocks(x):
        return x.reshape(3, u, factor, v, factor)

    b = blocks(data)
    feats = np.stack([
        b.mean(axis=(2, 4)),
        b.std(axis=(2, 4)),
        (blocks(dh) ** 2).mean(axis=(2, 4)),
        (blocks(dv) ** 2).mean(axis=(2, 4)),
    ], axis=1)
    return feats.reshape(FEATURE_COUNT, u, v).transpose(1, 2, 0)


@dataclass(frozen=True)
class ResidualEstimator:
    """Mapa afín por celda: features del bloque de š → pre-activaciones de la mezcla"""
    weights: np.ndarray
    bias: np.ndarray
    mixtures: int
    levels: int

    def __post_init__(self):
        outputs = PARAM_GROUPS * self.mixtures * 3
        w = np.array(self.weights, dtype=np.float64, order='C', copy=True)
        b = np.array(self.bias, dtype=np.float64, order='C', copy=True)
        if w.shape != (outputs, FEATURE_COUNT) or b.shape != (outputs,):
            raise DimensionError(
                f"Estimador con pesos {w.shape} y sesgo {b.shape}; "
                f"se esperaba ({outputs}, {FEATURE_COUNT}) y ({outputs},)"
            )
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, 'weights', w)
        object.__setattr__(self, 'bias', b)

    @classmethod
    def default(cls, mixtures: int = DEFAULT_MIXTURES, levels: int = 17) -> 'ResidualEstimator':
        """Pesos nulos y un prior centrado en 0 con escalas de ¼ a 4 bins"""
        bin_width = 2.0 / (levels - 1)
        scales = bin_width * np.geomspace(0.25, 4.0, mixtures) if mixtures > 1 else np.array([bin_width])
        bias = np.zeros((PARAM_GROUPS, mixtures, 3))
        bias[2] = softplus_inverse(scales - SIGMA_MIN)[:, None]
        return cls(np.zeros((bias.size, FEATURE_COUNT)), bias.ravel(), mixtures, levels)

    def with_parameters(self, weights: np.ndarray, bias: np.ndarray) -> 'ResidualEstimator':
        return ResidualEstimator(weights, bias, self.mixtures, self.levels)


def estimator_forward(estimator: ResidualEstimator, condition: ImageTensor, factor: int,
                      grid_shape: Optional[Tuple[int, int]] = None) -> LogisticMixtureParams:
    """p(r̃|š) = R_e(š): parámetros de la mezcla para cada celda de la rejilla"""
    expected = grid_shape_for(condition.height, condition.width, factor)
    if grid_shape is not None and tuple(grid_shape) != expected:
        raise DimensionError(f"Condición con rejilla {expected}, se pidió {tuple(grid_shape)}")
    feats = block_features(condition, factor)
    pre = feats @ estimator.weights.T + estimator.bias
    u, v = expected
    stacked = pre.reshape(u, v, PARAM_GROUPS, estimator.mixtures, 3).transpose(2, 3, 4, 0, 1)
    return LogisticMixtureParams.from_flat(stacked)


def estimator_gradients(estimator: ResidualEstimator, condition: ImageTensor, factor: int,
                        grid: SymbolGrid) -> Tuple[float, np.ndarray, np.ndarray]:
    """NLL (nats) de una rejilla y su gradiente respecto a pesos y sesgo del estimador"""
    params = estimator_forward(estimator, condition, factor, grid.grid_shape)
    nll = joint_nll(params, grid)
    grads = nll_gradients(params, grid).flat()
    u, v = grid.grid_shape
    d_pre = grads.transpose(3, 4, 0, 1, 2).reshape(u, v, -1)
    feats = block_features(condition, factor)
    d_weights = np.einsum('uvp,uvf->pf', d_pre, feats)
    d_bias = d_pre.sum(axis=(0, 1))
    return nll, d_weights, d_bias


def save_estimator(estimator: ResidualEstimator, path) -> None:
    write_weights(path, ESTIMATOR_MAGIC, FEATURE_COUNT, estimator.mixtures, estimator.levels,
                  [estimator.weights, estimator.bias])


def load_estimator(path) -> ResidualEstimator:
    header = peek_weights_header(path, ESTIMATOR_MAGIC)
    outputs = PARAM_GROUPS * header['mixtures'] * 3
    header, (weights, bias) = read_weights(path, ESTIMATOR_MAGIC,
                                           [(outputs, FEATURE_COUNT), (outputs,)])
    return ResidualEstimator(weights, bias, header['mixtures'], header['levels'])
