"""Comprobaciones rápidas de extremo a extremo con artefactos deterministas

Cada comprobación devuelve (nombre, ok, detalle). Los artefactos (CSV y pesos)
dependen solo de la semilla, lo que permite comparar dos ejecuciones byte a byte.
"""
import copy
import dataclasses
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from accoder import (
    FrequencyTable,
    ac_decode,
    ac_encode,
    codelength_bound,
    quantize_pmf,
    quantize_pmf_batch,
    static_provider,
)
from channel import ChannelRealization, mmse_equalize, rayleigh_transmit
from codec import BlockDctCodec, LinearBlockCodec, ResidualCompressor, save_codec, save_compressor
from corpus import load_dataset, synthetic_image
from entropy_model import (
    LogisticMixtureParams,
    MixtureTableProvider,
    ResidualEstimator,
    SymbolGrid,
    channel_pmfs,
    estimator_forward,
    joint_nll,
    nll_gradients,
    save_estimator,
)
from modem import DigitalLink, build_frame, builtin_code, qam_constellation
from pipeline import (
    CSV_COLUMNS,
    build_run_config,
    load_source_image,
    run_multihop,
    sweep,
    trial_seeds,
    write_csv,
)
from training import TrainingConfig, residual_samples, train_stage1, train_stage2, train_stage3
from utils import derive_seed

logger = logging.getLogger(__name__)

CHECK_COLUMNS = ['check', 'passed', 'detail']

Check = Tuple[str, bool, str]


def check_arithmetic_coder(rng: np.random.Generator, cases: int = 200) -> Check:
    worst_gap = (np.inf, -np.inf)
    for _ in range(cases):
        q = int(rng.integers(2, 40))
        n = int(rng.integers(1, 200))
        tables = [quantize_pmf(rng.dirichlet(np.full(q, 0.5))) for _ in range(n)]
        symbols = [int(rng.integers(0, q)) for _ in range(n)]
        stream = ac_encode(symbols, static_provider(tables))
        if ac_decode(stream, static_provider(tables), n) != symbols:
            return 'codificador_aritmetico', False, f"ida y vuelta fallida (Q={q}, n={n})"
        gap = stream.bit_length - codelength_bound(tables, symbols)
        worst_gap = (min(worst_gap[0], gap), max(worst_gap[1], gap))
    ok = worst_gap[0] >= -1.0 and worst_gap[1] <= 64.0
    return 'codificador_aritmetico', ok, f"exceso en [{worst_gap[0]:.2f}, {worst_gap[1]:.2f}] bits"


def _random_params(rng: np.random.Generator, mixtures: int, shape) -> LogisticMixtureParams:
    full = (mixtures, 3) + tuple(shape)
    return LogisticMixtureParams(
        rng.standard_normal(full), rng.uniform(-0.8, 0.8, full),
        rng.uniform(-1.0, 0.5, full), rng.uniform(-0.5, 0.5, full),
    )


def check_entropy_model(rng: np.random.Generator, draws: int = 100, points: int = 10) -> Check:
    levels = 17
    for _ in range(draws):
        params = _random_params(rng, 3, (1, 1))
        earlier = rng.integers(0, levels, size=(2, 1, 1))
        for c in range(3):
            cum = quantize_pmf_batch(channel_pmfs(params, earlier[:c], c, levels).reshape(-1, levels))
            if np.any(cum[:, -1] != 1 << 16):
                return 'modelo_entropia', False, "tabla con total distinto de 2^16"

    step = 1e-4
    worst = 0.0
    for _ in range(points):
        params = _random_params(rng, 2, (2, 2))
        grid = SymbolGrid(rng.integers(0, levels, size=(3, 2, 2)), levels)
        analytic = nll_gradients(params, grid).flat()
        base = params.flat()
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[idx] += step
            minus[idx] -= step
            numeric[idx] = (joint_nll(LogisticMixtureParams.from_flat(plus), grid)
                            - joint_nll(LogisticMixtureParams.from_flat(minus), grid)) / (2 * step)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, err)
    return 'modelo_entropia', worst <= 1e-4, f"error relativo máximo del gradiente {worst:.2e}"


def check_channel(rng: np.random.Generator, symbols: int = 10000) -> Check:
    ch = ChannelRealization.draw(symbols, 0.1, int(rng.integers(1 << 31)))
    x = (rng.standard_normal(symbols) + 1j * rng.standard_normal(symbols)) / np.sqrt(2)
    z = rayleigh_transmit(x, ch)
    y = mmse_equalize(z, ch)
    h = ch.gains
    err = 0.0
    for i in range(0, symbols, 97):
        scalar = np.conj(h[i]) * z[i] / (abs(h[i]) ** 2 + 0.1)
        err = max(err, abs(scalar - y[i]))
    return 'canal', err <= 1e-12, f"desviación máxima frente a la fórmula escalar {err:.1e}"


def check_modem(rng: np.random.Generator, frames: int = 50) -> Check:
    link = DigitalLink(builtin_code('r12_n96'), qam_constellation(16))
    failures = 0
    for f in range(frames):
        payload = rng.integers(0, 256, size=int(rng.integers(1, 20)), dtype=np.uint8).tobytes()
        symbols, blocks = link.modulate(build_frame(payload))
        report = link.demodulate(symbols, np.full(symbols.size, 1e-6), blocks)
        failures += report.payload != payload
    return 'modem', failures == 0, f"{failures}/{frames} tramas erróneas sin ruido"


def _small_config(cfg: Dict[str, Any], output_dir: Path) -> Dict[str, Any]:
    small = copy.deepcopy(cfg)
    small['run'].update(experiment='hops', grid=[1, 3], trials=2, image_size=64, image='',
                        output_csv=str(output_dir / 'verify_results.csv'))
    small['residual'].update(factor=16, levels=17, estimator_weights='', compressor='block_mean', alist='')
    return small


# ---------------------------------------------------------------------------
# Criterios de aceptación a escala completa (20 semillas, 128x128)
# ---------------------------------------------------------------------------

def _scaled(cfg: Dict[str, Any], run: Dict[str, Any], residual: Dict[str, Any]) -> Dict[str, Any]:
    scaled = copy.deepcopy(cfg)
    scaled['run'].update(experiment='single', grid=[], metrics=['psnr'], **run)
    scaled['residual'].update(**residual)
    scaled['codec'].update(kind='block_dct')
    return scaled


def final_psnr(source, run_cfg, seeds: List[int]) -> np.ndarray:
    """PSNR de la salida final por semilla y salto, forma (semillas, N)"""
    return np.array([[r.psnr_comp for r in run_multihop(source, run_cfg, s)[1]] for s in seeds])


def check_distortion_accumulation(cfg: Dict[str, Any], seeds: int = 20) -> Check:
    """Sin compensación la PSNR media no sube en 5, 10, 20 y 30 saltos y cae ≥ 2 dB"""
    scaled = _scaled(cfg, {'hops': 30, 'snr_db': 10.0, 'compensation': 'none'}, {'enabled': False})
    mean = final_psnr(load_source_image(scaled), build_run_config(scaled),
                      trial_seeds(cfg['seed'], seeds)).mean(axis=0)
    at = mean[[4, 9, 19, 29]]
    ok = bool(np.all(np.diff(at) <= 0.0) and at[3] <= at[0] - 2.0)
    return 'acumulacion_distorsion', ok, "PSNR media 5/10/20/30 saltos: " + '/'.join(f"{v:.2f}" for v in at)


def check_compensation_gain(cfg: Dict[str, Any], seeds: int = 20) -> Check:
    """Calendario completo a N=20 frente a 'none' con semillas emparejadas"""
    scaled = _scaled(cfg, {'hops': 20, 'snr_db': 10.0, 'compensation': 'all'},
                     {'enabled': True, 'snr_db': 10.0})
    run_cfg = build_run_config(scaled)
    source = load_source_image(scaled)
    comp_final, plain_final, overhead = [], [], []
    for s in trial_seeds(cfg['seed'], seeds):
        _, reports = run_multihop(source, run_cfg, s)
        _, plain = run_multihop(source, dataclasses.replace(run_cfg, schedule='none'), s)
        comp_final.append(reports[-1].psnr_comp)
        plain_final.append(plain[-1].psnr_comp)
        overhead.extend(2 * r.residual_channel_symbols / r.semantic_reals for r in reports)
    gain = float(np.mean(comp_final) - np.mean(plain_final))
    ratio = float(np.mean(overhead))
    ok = gain >= 1.0 and ratio <= 0.2
    return 'ganancia_compensacion', ok, f"ganancia {gain:.2f} dB con sobrecoste CBR {100 * ratio:.1f}%"


def check_partial_schedules(cfg: Dict[str, Any], seeds: int = 20) -> Check:
    """RL 1–10 y RL 21–30 superan a 'none' en el salto 30 y la tardía no queda > 1.5 dB detrás"""
    scaled = _scaled(cfg, {'hops': 30, 'snr_db': 10.0, 'compensation': 'all'},
                     {'enabled': True, 'snr_db': 10.0})
    run_cfg = build_run_config(scaled)
    source = load_source_image(scaled)
    seed_list = trial_seeds(cfg['seed'], seeds)
    final = {
        schedule: float(final_psnr(source, dataclasses.replace(run_cfg, schedule=schedule), seed_list)[:, -1].mean())
        for schedule in ('none', '1-10', '21-30')
    }
    ok = final['1-10'] > final['none'] and final['21-30'] > final['none'] and final['21-30'] >= final['1-10'] - 1.5
    return 'calendarios_parciales', ok, ', '.join(f"{k}: {v:.2f} dB" for k, v in final.items())


def coded_bits(samples, estimator: ResidualEstimator, factor: int, uniform: bool = False) -> int:
    """Bits del flujo AAC real sobre pares (š, r̃), con el estimador o con tablas uniformes"""
    total = 0
    for condition, grid in samples:
        if uniform:
            provider = static_provider([FrequencyTable.uniform(grid.levels)] * grid.count)
        else:
            provider = MixtureTableProvider(estimator_forward(estimator, condition, factor, grid.grid_shape),
                                            grid.levels)
        total += ac_encode(grid.traversal(), provider).bit_length
    return total


def check_training(cfg: Dict[str, Any], images: int = 32, crop: int = 32) -> Check:
    """Etapa 1 con N=4, γ=1.15 baja ≥ 20 %; etapa 3 bate a las tablas uniformes fuera de muestra"""
    tcfg = dataclasses.replace(TrainingConfig.from_config(cfg), hops=4, gamma=1.15)
    train_set = load_dataset('', crop, images, cfg['seed'])
    held_out = load_dataset('', crop, 8, derive_seed(cfg['seed'], 0x5EED))
    initial = LinearBlockCodec.initial(cfg['codec']['keep'], cfg['codec']['block'], seed=cfg['seed'])
    _, losses1 = train_stage1(initial, train_set, tcfg)
    drop = 1.0 - losses1[-1] / losses1[0]

    codec = BlockDctCodec(cfg['codec']['block'], cfg['codec']['keep'])
    compressor = ResidualCompressor(8, cfg['residual']['levels'])
    estimator, _ = train_stage3(codec, compressor, ResidualEstimator.default(levels=compressor.levels),
                                train_set, tcfg)
    samples = residual_samples(codec, compressor, held_out, tcfg, stage_key=4)
    symbols = sum(grid.count for _, grid in samples)
    trained = coded_bits(samples, estimator, compressor.factor)
    uniform = coded_bits(samples, estimator, compressor.factor, uniform=True)
    ok = drop >= 0.2 and trained / symbols < np.log2(compressor.levels) and trained < uniform
    return 'entrenamiento_aceptacion', ok, (
        f"etapa 1 baja {100 * drop:.1f}%, etapa 3 {trained / symbols:.3f} bits/símbolo, "
        f"flujo {trained} frente a {uniform} bits uniformes"
    )


def acceptance_checks(cfg: Dict[str, Any]) -> List[Check]:
    return [
        check_distortion_accumulation(cfg),
        check_compensation_gain(cfg),
        check_partial_schedules(cfg),
        check_training(cfg),
    ]


def run_verification(cfg: Dict[str, Any], output_dir, full: bool = False) -> Tuple[List[Check], Path]:
    """Ejecuta las comprobaciones y escribe artefactos en output_dir

    Con full se añaden los criterios de aceptación a escala completa, que tardan minutos.
    """
    output_dir = Path(output_dir)
    rng = np.random.default_rng(derive_seed(cfg['seed'], 0xACE))
    checks = [
        check_arithmetic_coder(rng),
        check_entropy_model(rng),
        check_channel(rng),
        check_modem(rng),
    ]

    small = _small_config(cfg, output_dir)
    run_cfg = build_run_config(small)
    rows = sweep('hops', small['run']['grid'], run_cfg, synthetic_image(64, cfg['seed']),
                 small['run']['trials'], cfg['seed'])
    write_csv(output_dir / 'verify_results.csv', rows, CSV_COLUMNS)
    first = [r for r in rows if r['hop'] == 1]
    not_worse = all(r['psnr_comp_db'] >= r['psnr_recon_db'] or r['frame_status'] != 'delivered' for r in first)
    checks.append(('pipeline', bool(rows) and not_worse, f"{len(rows)} filas por salto"))

    tcfg = TrainingConfig(hops=2, steps=5, realizations=1, seed=cfg['seed'])
    images = load_dataset('', 32, 4, cfg['seed'])
    codec, losses1 = train_stage1(LinearBlockCodec.initial(2, 8, seed=cfg['seed']), images, tcfg,
                                  output_dir / 'stage1_loss.csv')
    save_codec(codec, output_dir / 'stage1_codec.bin')
    compressor, _ = train_stage2(BlockDctCodec(8, 4), ResidualCompressor(8, 17), images, tcfg,
                                 output_dir / 'stage2_loss.csv')
    save_compressor(compressor, output_dir / 'stage2_compressor.bin')
    estimator, losses3 = train_stage3(BlockDctCodec(8, 4), compressor, ResidualEstimator.default(3, 17),
                                      images, tcfg, output_dir / 'stage3_loss.csv')
    save_estimator(estimator, output_dir / 'stage3_estimator.bin')
    checks.append(('entrenamiento', losses1[-1] <= losses1[0] and losses3[-1] <= losses3[0],
                   f"etapa 1 {losses1[0]:.5f}→{losses1[-1]:.5f}, etapa 3 {losses3[0]:.3f}→{losses3[-1]:.3f} bits"))
    if full:
        logger.info("[VERIFICAR] Criterios de aceptación a escala completa")
        checks.extend(acceptance_checks(cfg))

    path = write_csv(output_dir / 'verify_checks.csv',
                     [{'check': n, 'passed': ok, 'detail': d} for n, ok, d in checks], CHECK_COLUMNS)
    for name, ok, detail in checks:
        log = logger.info if ok else logger.error
        log(f"[VERIFICAR] {name}: {'OK' if ok else 'FALLO'} ({detail})")
    return checks, path
