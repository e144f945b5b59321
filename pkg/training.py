"""Entrenamiento en tres etapas: códec semántico, compresor de residuos y estimador de entropía

Las realizaciones de canal de cada etapa dependen solo de (semilla, imagen,
realización, salto), no del paso, de modo que la pérdida registrada en cada
paso es la misma función objetivo evaluada en pesos distintos.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from channel import ChannelRealization, channel_uses, semantic_transmit, snr_to_noise_variance
from codec import (
    LinearBlockCodec,
    ResidualCompressor,
    dequantize_residual,
    from_blocks,
    hop_weights,
    image_to_vectors,
    quantize_residual,
    residual_compress,
    to_blocks,
    transmit_image,
)
from entropy_model import ResidualEstimator, estimator_gradients
from imagecore import ImageTensor, residual
from utils import ConfigurationError, TrainingDivergedError, derive_seed

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class TrainingConfig:
    hops: int = 4
    gamma: float = 1.15
    steps: int = 200
    optimizer: str = 'adam'
    learning_rate: float = 2e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 100
    min_learning_rate: float = 2e-5
    realizations: int = 4
    snr_db: float = 10.0
    fading: str = 'rayleigh'
    noiseless: bool = False
    unbias: bool = False
    reference: str = 'source'
    seed: int = 7

    def __post_init__(self):
        if self.hops < 1:
            raise ConfigurationError("train.hops debe ser al menos 1")
        if self.gamma <= 0:
            raise ConfigurationError("train.gamma debe ser positivo")
        if self.steps < 0 or self.realizations < 1:
            raise ConfigurationError("train.steps ≥ 0 y train.realizations ≥ 1")
        if self.learning_rate < 0:
            raise ConfigurationError("train.learning_rate no puede ser negativa")
        if self.optimizer not in ('adam', 'sgd'):
            raise ConfigurationError(f"Optimizador desconocido: {self.optimizer}")
        if self.reference not in ('hop_input', 'source'):
            raise ConfigurationError(f"residual.reference desconocida: {self.reference}")

    @classmethod
    def from_config(cls, cfg: Dict[str, Any]) -> 'TrainingConfig':
        train = cfg['train']
        return cls(
            hops=train['hops'],
            gamma=train['gamma'],
            steps=train['steps'],
            optimizer=train['optimizer'],
            learning_rate=train['learning_rate'],
            lr_decay=train['lr_decay'],
            lr_decay_every=train['lr_decay_every'],
            min_learning_rate=train['min_learning_rate'],
            realizations=train['realizations'],
            snr_db=train['snr_db'],
            fading=cfg['run']['fading'],
            noiseless=cfg['run']['noiseless'],
            unbias=cfg['run']['mmse_unbias'],
            reference=cfg['residual']['reference'],
            seed=cfg['seed'],
        )

    @property
    def noise_variance(self) -> float:
        return 0.0 if self.noiseless else snr_to_noise_variance(self.snr_db)

    def learning_rate_at(self, step: int) -> float:
        """Decaimiento escalonado con suelo; tasa nula se mantiene nula"""
        if self.learning_rate == 0.0:
            return 0.0
        every = max(1, self.lr_decay_every)
        lr = self.learning_rate * self.lr_decay ** (step // every)
        return max(lr, self.min_learning_rate)


class GradientDescent:
    def step(self, params: List[np.ndarray], grads: List[np.ndarray], lr: float) -> List[np.ndarray]:
        return [p - lr * g for p, g in zip(params, grads)]


class Adam:
    """Adam con momentos por parámetro"""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Optional[List[np.ndarray]] = None
        self._v: Optional[List[np.ndarray]] = None
        self._t = 0

    def step(self, params: List[np.ndarray], grads: List[np.ndarray], lr: float) -> List[np.ndarray]:
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * g * g
            m_hat = self._m[i] / (1 - self.beta1 ** self._t)
            v_hat = self._v[i] / (1 - self.beta2 ** self._t)
            out.append(p - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def make_optimizer(cfg: TrainingConfig):
    return Adam() if cfg.optimizer == 'adam' else GradientDescent()


def write_loss_curve(path, losses: Sequence[float], rates: Sequence[float]) -> None:
    """CSV con step, loss, learning_rate precedido de la versión de esquema"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            f.write(f"# schema_version={config.SCHEMA_VERSION}\n")
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['step', 'loss', 'learning_rate'])
            for step, (loss, lr) in enumerate(zip(losses, rates)):
                writer.writerow([step, repr(float(loss)), repr(float(lr))])
    except OSError as e:
        raise OSError(f"No se pudo escribir la curva de pérdida en {path}: {e}") from e


def _check_divisible(images: Sequence[ImageTensor], multiple: int, what: str) -> None:
    if not images:
        raise ConfigurationError("Conjunto de entrenamiento vacío")
    for img in images:
        if img.height % multiple or img.width % multiple:
            raise ConfigurationError(
                f"Imagen {img.height}x{img.width} no divisible por {what}={multiple}"
            )


def _run_optimizer(stage: int, params: List[np.ndarray], objective, cfg: TrainingConfig,
                   log_path=None) -> Tuple[List[np.ndarray], List[float]]:
    """Bucle común: evalúa, registra, comprueba divergencia y actualiza"""
    optimizer = make_optimizer(cfg)
    losses: List[float] = []
    rates: List[float] = []
    initial = None
    for step in range(cfg.steps + 1):
        loss, grads = objective(params)
        losses.append(loss)
        lr = cfg.learning_rate_at(step)
        rates.append(lr)
        if initial is None:
            initial = loss
            logger.info(f"[ENTRENAMIENTO] Etapa {stage}: pérdida inicial {loss:.6f}")
        elif not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * initial:
            raise TrainingDivergedError(
                f"Etapa {stage} divergió en el paso {step}: pérdida {loss:.6g} "
                f"frente a {initial:.6g} inicial (lr={lr:g})"
            )
        if step == cfg.steps:
            break
        params = optimizer.step(params, grads, lr)
        if step and step % 50 == 0:
            logger.debug(f"[ENTRENAMIENTO] Etapa {stage} paso {step}: {loss:.6f}")
    logger.info(f"[ENTRENAMIENTO] Etapa {stage}: pérdida final {losses[-1]:.6f} tras {cfg.steps} pasos")
    if log_path is not None:
        write_loss_curve(log_path, losses, rates)
    return params, losses


# ---------------------------------------------------------------------------
# Etapa 1
# ---------------------------------------------------------------------------

def _chain_seed(cfg: TrainingConfig, stage: int, image: int, realization: int, hop: int) -> int:
    return derive_seed(cfg.seed, stage, image, realization, hop)


def stage1_loss_and_gradients(codec: LinearBlockCodec, images: Sequence[ImageTensor],
                              cfg: TrainingConfig) -> Tuple[float, np.ndarray, np.ndarray]:
    """Pérdida recursiva y gradientes respecto a W_e y W_d por modo inverso

    La escala de normalización de potencia se trata como constante y el canal,
    para (h, n) fijos, como ŷ = β·y + ruido.
    """
    enc, dec = codec.encoder, codec.decoder
    weights = hop_weights(cfg.hops, cfg.gamma)
    noise_var = cfg.noise_variance
    total = 0.0
    d_enc = np.zeros_like(enc)
    d_dec = np.zeros_like(dec)

    for i, img in enumerate(images):
        source = image_to_vectors(img.data, codec.block)
        pixels = source.size
        uses = channel_uses(codec.code_length(img.height, img.width))
        for r in range(cfg.realizations):
            x = source
            caches = []
            for n in range(cfg.hops):
                y = x @ enc.T
                ch = ChannelRealization.draw(uses, noise_var, _chain_seed(cfg, 1, i, r, n),
                                             cfg.fading, cfg.noiseless)
                received, gain = semantic_transmit(y.ravel(), ch, cfg.unbias)
                y_hat = received.reshape(y.shape)
                raw = y_hat @ dec.T
                out = np.clip(raw, 0.0, 1.0)
                mask = (raw > 0.0) & (raw < 1.0)
                total += weights[n] * np.mean((x - out) ** 2) / cfg.hops
                caches.append((x, y_hat, gain.reshape(y.shape), out, mask))
                x = out

            g_next = np.zeros_like(source)
            for n in reversed(range(cfg.hops)):
                x, y_hat, gain, out, mask = caches[n]
                coef = 2.0 * weights[n] / (cfg.hops * pixels)
                g_raw = (g_next + coef * (out - x)) * mask
                d_dec += g_raw.T @ y_hat
                g_y = (g_raw @ dec) * gain
                d_enc += g_y.T @ x
                g_next = coef * (x - out) + g_y @ enc

    count = len(images) * cfg.realizations
    return total / count, d_enc / count, d_dec / count


def train_stage1(codec: LinearBlockCodec, images: Sequence[ImageTensor], cfg: TrainingConfig,
                 log_path=None) -> Tuple[LinearBlockCodec, List[float]]:
    """Descenso por gradiente sobre la pérdida recursiva con pesos compartidos entre saltos"""
    if getattr(codec, 'kind', None) != 'trainable_linear':
        raise ConfigurationError("La etapa 1 requiere un códec trainable_linear")
    _check_divisible(images, codec.block, 'bloque')
    logger.info(f"[ENTRENAMIENTO] Etapa 1: {len(images)} imágenes, N={cfg.hops}, γ={cfg.gamma}")

    def objective(params):
        loss, d_enc, d_dec = stage1_loss_and_gradients(codec.with_weights(*params), images, cfg)
        return loss, [d_enc, d_dec]

    params, losses = _run_optimizer(1, [codec.encoder, codec.decoder], objective, cfg, log_path)
    return codec.with_weights(*params), losses


# ---------------------------------------------------------------------------
# Etapa 2
# ---------------------------------------------------------------------------

def stage2_loss_and_gradients(codec, compressor: Optional[ResidualCompressor],
                              images: Sequence[ImageTensor],
                              cfg: TrainingConfig) -> Tuple[float, np.ndarray, np.ndarray]:
    """Pérdida recursiva sobre salidas compensadas; sin compresor, r̂ = 0

    El residuo se forma contra la imagen original o contra la entrada del salto
    según cfg.reference. El cuantizador usa gradiente de paso directo y la
    entrada de cada salto se trata como constante al derivar.
    """
    weights = hop_weights(cfg.hops, cfg.gamma)
    noise_var = cfg.noise_variance
    total = 0.0
    d = compressor.factor if compressor is not None else 1
    d_pool = np.zeros((d, d))
    d_pattern = np.zeros((d, d))

    for i, img in enumerate(images):
        uses = channel_uses(codec.code_length(img.height, img.width))
        for r in range(cfg.realizations):
            x = img.data
            for n in range(cfg.hops):
                ch = ChannelRealization.draw(uses, noise_var, _chain_seed(cfg, 2, i, r, n),
                                             cfg.fading, cfg.noiseless)
                recon = transmit_image(codec, ImageTensor(x), ch, cfg.unbias).data
                if compressor is None:
                    out = recon
                    total += weights[n] * np.mean((x - out) ** 2) / cfg.hops
                    x = out
                    continue

                target = img.data if cfg.reference == 'source' else x
                res_blocks = to_blocks(target - recon, d)
                pooled = np.einsum('cuvij,ij->cuv', res_blocks, compressor.pool)
                centers = dequantize_residual(quantize_residual(pooled, compressor.levels),
                                              compressor.levels)
                up = centers[:, :, :, None, None] * compressor.pattern
                comp = recon + np.clip(from_blocks(up), -1.0, 1.0)
                out = np.clip(comp, 0.0, 1.0)
                total += weights[n] * np.mean((x - out) ** 2) / cfg.hops

                coef = 2.0 * weights[n] / (cfg.hops * x.size)
                g_comp = coef * (out - x) * ((comp > 0.0) & (comp < 1.0))
                g_up = to_blocks(g_comp, d) * (np.abs(up) <= 1.0)
                d_pattern += np.einsum('cuvij,cuv->ij', g_up, centers)
                g_pooled = np.einsum('cuvij,ij->cuv', g_up, compressor.pattern) * (np.abs(pooled) <= 1.0)
                d_pool += np.einsum('cuvij,cuv->ij', res_blocks, g_pooled)
                x = out

    count = len(images) * cfg.realizations
    return total / count, d_pool / count, d_pattern / count


def train_stage2(codec, compressor: ResidualCompressor, images: Sequence[ImageTensor],
                 cfg: TrainingConfig, log_path=None) -> Tuple[ResidualCompressor, List[float]]:
    """Ajusta pooling y patrón de subida del compresor con el códec congelado"""
    _check_divisible(images, compressor.factor, 'factor')
    logger.info(f"[ENTRENAMIENTO] Etapa 2: {len(images)} imágenes, d={compressor.factor}, Q={compressor.levels}")
    area = compressor.factor ** 2

    # pooling escalado por d² para que un paso de Adam sea comparable en ambos tensores
    def objective(params):
        pool_scaled, pattern = params
        loss, d_pool, d_pattern = stage2_loss_and_gradients(
            codec, compressor.with_weights(pool_scaled / area, pattern), images, cfg
        )
        return loss, [d_pool / area, d_pattern]

    params, losses = _run_optimizer(
        2, [compressor.pool * area, compressor.pattern], objective, cfg, log_path
    )
    return compressor.with_weights(params[0] / area, params[1]), losses


# ---------------------------------------------------------------------------
# Etapa 3
# ---------------------------------------------------------------------------

def residual_samples(codec, compressor: ResidualCompressor, images: Sequence[ImageTensor],
                     cfg: TrainingConfig, stage_key: int = 3):
    """Pares (š, r̃) de un único salto por imagen"""
    samples = []
    for i, img in enumerate(images):
        uses = channel_uses(codec.code_length(img.height, img.width))
        ch = ChannelRealization.draw(uses, cfg.noise_variance, _chain_seed(cfg, stage_key, i, 0, 0),
                                     cfg.fading, cfg.noiseless)
        recon = transmit_image(codec, img, ch, cfg.unbias)
        grid = residual_compress(compressor, residual(img, recon))
        samples.append((recon, grid))
    return samples


def stage3_loss_and_gradients(estimator: ResidualEstimator, samples,
                              factor: int) -> Tuple[float, np.ndarray, np.ndarray]:
    """NLL media por símbolo en bits y gradientes (misma normalización)"""
    total = 0.0
    symbols = 0
    d_w = np.zeros_like(estimator.weights)
    d_b = np.zeros_like(estimator.bias)
    for condition, grid in samples:
        nll, gw, gb = estimator_gradients(estimator, condition, factor, grid)
        total += nll
        symbols += grid.count
        d_w += gw
        d_b += gb
    scale = 1.0 / (symbols * np.log(2.0))
    return total * scale, d_w * scale, d_b * scale


def train_stage3(codec, compressor: ResidualCompressor, estimator: ResidualEstimator,
                 images: Sequence[ImageTensor], cfg: TrainingConfig,
                 log_path=None) -> Tuple[ResidualEstimator, List[float]]:
    """Ajusta el estimador sobre residuos de un solo salto con códec y compresor congelados"""
    if estimator.levels != compressor.levels:
        raise ConfigurationError(
            f"Estimador con Q={estimator.levels} y compresor con Q={compressor.levels}"
        )
    if not images:
        raise ConfigurationError("Conjunto de entrenamiento vacío")
    samples = residual_samples(codec, compressor, images, cfg)
    logger.info(f"[ENTRENAMIENTO] Etapa 3: {len(samples)} rejillas, K={estimator.mixtures}")

    def objective(params):
        loss, d_w, d_b = stage3_loss_and_gradients(estimator.with_parameters(*params), samples,
                                                   compressor.factor)
        return loss, [d_w, d_b]

    params, losses = _run_optimizer(3, [estimator.weights, estimator.bias], objective, cfg, log_path)
    return estimator.with_parameters(*params), losses
