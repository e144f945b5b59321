"""Orquestación de saltos, cadena multi-salto, enlace de compensación y barridos"""
import csv
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

import config
from accoder import Bitstream, ac_decode, ac_encode
from channel import (
    ChannelRealization,
    channel_uses,
    emulated_channel,
    mmse_equalize,
    mmse_unbias,
    post_equalization_noise_variance,
    rayleigh_transmit,
    semantic_transmit,
    snr_to_noise_variance,
)
from codec import (
    BlockDctCodec,
    LinearBlockCodec,
    ResidualCompressor,
    load_codec,
    load_compressor,
    residual_compress,
    residual_decompress,
)
from corpus import synthetic_image
from entropy_model import (
    MixtureTableProvider,
    ResidualEstimator,
    SymbolGrid,
    estimator_forward,
    load_estimator,
)
from imagecore import ImageTensor, compensate, load_image, ms_ssim, psnr, residual
from modem import DigitalLink, build_frame, builtin_code, ldpc_load_alist, qam_constellation
from utils import ConfigurationError, derive_seed

logger = logging.getLogger(__name__)

SEMANTIC_LINK = 0
RESIDUAL_LINK = 1

STATUS_DELIVERED = 'delivered'
STATUS_CRC_FAILED = 'crc_failed'
STATUS_DISABLED = 'disabled'

CSV_COLUMNS = [
    'experiment_id', 'grid_value', 'trial_seed', 'hop', 'psnr_recon_db', 'psnr_comp_db',
    'msssim_recon', 'msssim_comp', 'semantic_reals', 'residual_channel_symbols',
    'residual_payload_bits', 'cbr', 'frame_status',
]

SUMMARY_COLUMNS = [
    'experiment_id', 'grid_value', 'trials', 'psnr_recon_mean', 'psnr_recon_std',
    'psnr_comp_mean', 'psnr_comp_std', 'msssim_comp_mean', 'msssim_comp_std', 'cbr_mean',
]


@dataclass(frozen=True)
class LinkConfig:
    snr_db: float = 10.0
    fading: str = 'rayleigh'
    noiseless: bool = False
    unbias: bool = False

    @property
    def noise_variance(self) -> float:
        return 0.0 if self.noiseless else snr_to_noise_variance(self.snr_db)

    def realization(self, length: int, seed: int) -> ChannelRealization:
        return ChannelRealization.draw(length, self.noise_variance, seed, self.fading, self.noiseless)


@dataclass(frozen=True)
class HopConfig:
    """Parámetros de un salto: enlace semántico, enlace de residuos y semillas"""
    semantic: LinkConfig = field(default_factory=LinkConfig)
    residual_enabled: bool = False
    residual: LinkConfig = field(default_factory=LinkConfig)
    digital: Optional[DigitalLink] = None
    inject_flips: int = 0
    semantic_seed: int = 0
    residual_seed: int = 0

    def __post_init__(self):
        if self.residual_enabled and self.digital is None:
            raise ConfigurationError("Enlace de residuos activo sin código LDPC/QAM")

    def for_hop(self, trial_seed: int, hop: int, enabled: bool) -> 'HopConfig':
        """Semillas por (prueba, salto, enlace), independientes del calendario"""
        return dataclasses.replace(
            self,
            residual_enabled=enabled and self.digital is not None,
            semantic_seed=derive_seed(trial_seed, hop, SEMANTIC_LINK),
            residual_seed=derive_seed(trial_seed, hop, RESIDUAL_LINK),
        )


@dataclass(frozen=True)
class ResidualStack:
    compressor: ResidualCompressor
    estimator: ResidualEstimator

    def __post_init__(self):
        if self.estimator.levels != self.compressor.levels:
            raise ConfigurationError(
                f"Estimador con Q={self.estimator.levels} y compresor con Q={self.compressor.levels}"
            )


@dataclass(frozen=True)
class RunConfig:
    hops: int
    codec: Any
    stack: ResidualStack
    hop_template: HopConfig
    schedule: Any = 'all'
    metrics: Tuple[str, ...] = ('psnr', 'ms_ssim')
    reference: str = 'source'
    cbr_accounting: str = 'channel'
    experiment_id: str = 'mhpsc'

    def __post_init__(self):
        if self.hops < 1:
            raise ConfigurationError("run.hops debe ser al menos 1")
        if self.reference not in ('hop_input', 'source'):
            raise ConfigurationError(f"residual.reference desconocida: {self.reference}")
        if self.cbr_accounting not in ('channel', 'payload'):
            raise ConfigurationError(f"run.cbr_accounting desconocida: {self.cbr_accounting}")
        parse_schedule(self.schedule, self.hops)

    @property
    def compensated_hops(self) -> FrozenSet[int]:
        return parse_schedule(self.schedule, self.hops)


@dataclass(frozen=True)
class HopReport:
    hop: int
    psnr_recon: float
    psnr_comp: float
    msssim_recon: float
    msssim_comp: float
    semantic_reals: int
    residual_channel_symbols: int
    residual_payload_bits: int
    residual_coded_bits: int
    cbr: float
    cbr_cumulative: float
    frame_status: str


@dataclass(frozen=True)
class HopOutcome:
    """ŝ, salida final y contabilidad del enlace paralelo de un salto"""
    recon: ImageTensor
    output: ImageTensor
    semantic_reals: int
    status: str
    channel_symbols: int = 0
    payload_bits: int = 0
    coded_bits: int = 0
    bits_per_symbol: int = 1


def parse_schedule(schedule, hops: int) -> FrozenSet[int]:
    """'all', 'none', 'a-b' o lista de saltos → conjunto ⊆ {1..N}"""
    everything = frozenset(range(1, hops + 1))
    if isinstance(schedule, str):
        text = schedule.strip().lower()
        if text == 'all':
            return everything
        if text == 'none':
            return frozenset()
        parts = text.split('-')
        if len(parts) != 2 or not all(p.strip().isdigit() for p in parts):
            raise ConfigurationError(f"Calendario de compensación inválido: {schedule!r}")
        start, end = int(parts[0]), int(parts[1])
        if start > end:
            raise ConfigurationError(f"Calendario vacío o invertido: {schedule!r}")
        hops_set = frozenset(range(start, end + 1))
    else:
        hops_set = frozenset(int(h) for h in schedule)
    if not hops_set <= everything:
        raise ConfigurationError(f"Calendario {schedule!r} fuera de 1..{hops}")
    return hops_set


def cbr(semantic_reals: int, residual_symbols: int, height: int, width: int) -> float:
    """(L + 2·L_r)/(H·W·3) con L_r en símbolos complejos del enlace de residuos"""
    if semantic_reals < 0 or residual_symbols < 0:
        raise ValueError("Los recuentos de CBR no pueden ser negativos")
    return (semantic_reals + 2 * residual_symbols) / (height * width * 3)


def _transmit(img: ImageTensor, codec, hop_cfg: HopConfig) -> Tuple[ImageTensor, int, ChannelRealization]:
    code = codec.encode(img)
    ch = hop_cfg.semantic.realization(channel_uses(code.size), hop_cfg.semantic_seed)
    received, _ = semantic_transmit(code, ch, hop_cfg.semantic.unbias)
    return codec.decode(received, img.height, img.width), code.size, ch


def run_hop_common(img: ImageTensor, codec, hop_cfg: HopConfig) -> Tuple[ImageTensor, int]:
    """Codificar → normalizar → canal → MMSE → escala inversa → decodificar

    Returns:
        (ŝ, nº de reales del código semántico)
    """
    recon, length, _ = _transmit(img, codec, hop_cfg)
    return recon, length


def send_residual(target: ImageTensor, recon: ImageTensor, emulated: ImageTensor,
                  stack: ResidualStack, hop_cfg: HopConfig, semantic_reals: int = 0) -> HopOutcome:
    """Enlace paralelo: r = objetivo − š → AAC → trama → LDPC/QAM → canal → s̃"""
    comp = stack.compressor
    link = hop_cfg.digital
    grid = residual_compress(comp, residual(target, emulated))
    tx_params = estimator_forward(stack.estimator, emulated, comp.factor, grid.grid_shape)
    stream = ac_encode(grid.traversal(), MixtureTableProvider(tx_params, comp.levels))
    frame = build_frame(stream.data)

    symbols, blocks = link.modulate(frame)
    ch = hop_cfg.residual.realization(symbols.size, hop_cfg.residual_seed)
    equalized = mmse_equalize(rayleigh_transmit(symbols, ch), ch)
    report = link.demodulate(mmse_unbias(equalized, ch), post_equalization_noise_variance(ch),
                             blocks, hop_cfg.inject_flips)
    sizes = dict(recon=recon, semantic_reals=semantic_reals, channel_symbols=symbols.size,
                 payload_bits=8 * len(stream.data), coded_bits=blocks * link.code.n,
                 bits_per_symbol=link.constellation.bits_per_symbol)

    if not report.delivered:
        logger.warning(f"[RESIDUOS] Trama descartada por CRC ({report.converged}/{report.codewords} "
                       f"palabras convergidas)")
        return HopOutcome(output=recon, status=STATUS_CRC_FAILED, **sizes)

    # el receptor recalcula las tablas desde su propia ŝ
    rx_params = estimator_forward(stack.estimator, recon, comp.factor, grid.grid_shape)
    try:
        values = ac_decode(Bitstream.from_bytes(report.payload),
                           MixtureTableProvider(rx_params, comp.levels), grid.count)
    except ValueError as e:
        logger.warning(f"[RESIDUOS] Flujo aritmético ilegible tras CRC válido: {e}")
        return HopOutcome(output=recon, status=STATUS_CRC_FAILED, **sizes)
    received = SymbolGrid.from_traversal(values, comp.levels, grid.grid_shape)
    restored = residual_decompress(comp, received, recon.height, recon.width)
    return HopOutcome(output=compensate(recon, restored), status=STATUS_DELIVERED, **sizes)


def run_hop_compensated(img: ImageTensor, codec, stack: ResidualStack, hop_cfg: HopConfig,
                        reference: Optional[ImageTensor] = None) -> Tuple[ImageTensor, HopOutcome]:
    """Salto con compensación; reference sustituye a la entrada del salto al formar r"""
    if not hop_cfg.residual_enabled:
        raise ConfigurationError("run_hop_compensated requiere el enlace de residuos activo")
    recon, length, ch = _transmit(img, codec, hop_cfg)
    # réplica del canal en el transmisor: misma semilla ⇒ š == ŝ
    replayed, _ = semantic_transmit(codec.encode(img), emulated_channel(ch), hop_cfg.semantic.unbias)
    emulated = codec.decode(replayed, img.height, img.width)
    target = img if reference is None else reference
    outcome = send_residual(target, recon, emulated, stack, hop_cfg, length)
    return outcome.output, outcome


def _metric(name: str, metrics: Sequence[str], fn, a, b) -> float:
    return fn(a, b) if name in metrics else math.nan


def run_multihop(source: ImageTensor, run_cfg: RunConfig, trial_seed: int) -> Tuple[ImageTensor, List[HopReport]]:
    """Cadena de N saltos; la entrada del salto n es la salida final del salto n−1"""
    schedule = run_cfg.compensated_hops
    current = source
    reports: List[HopReport] = []
    per_hop_cbr: List[float] = []

    for hop in range(1, run_cfg.hops + 1):
        hop_cfg = run_cfg.hop_template.for_hop(trial_seed, hop, hop in schedule)
        if hop_cfg.residual_enabled:
            reference = source if run_cfg.reference == 'source' else None
            output, outcome = run_hop_compensated(current, run_cfg.codec, run_cfg.stack, hop_cfg, reference)
        else:
            recon, length = run_hop_common(current, run_cfg.codec, hop_cfg)
            output = recon
            outcome = HopOutcome(recon, recon, length, STATUS_DISABLED)
        recon = outcome.recon
        length = outcome.semantic_reals

        if run_cfg.cbr_accounting == 'payload':
            residual_symbols = -(-outcome.payload_bits // outcome.bits_per_symbol)
        else:
            residual_symbols = outcome.channel_symbols
        hop_cbr = cbr(length, residual_symbols, source.height, source.width)
        per_hop_cbr.append(hop_cbr)

        reports.append(HopReport(
            hop=hop,
            psnr_recon=_metric('psnr', run_cfg.metrics, psnr, source, recon),
            psnr_comp=_metric('psnr', run_cfg.metrics, psnr, source, output),
            msssim_recon=_metric('ms_ssim', run_cfg.metrics, ms_ssim, source, recon),
            msssim_comp=_metric('ms_ssim', run_cfg.metrics, ms_ssim, source, output),
            semantic_reals=length,
            residual_channel_symbols=outcome.channel_symbols,
            residual_payload_bits=outcome.payload_bits,
            residual_coded_bits=outcome.coded_bits,
            cbr=hop_cbr,
            cbr_cumulative=float(np.mean(per_hop_cbr)),
            frame_status=outcome.status,
        ))
        logger.debug(f"[PIPELINE] Salto {hop}: PSNR {reports[-1].psnr_comp:.2f} dB, {outcome.status}")
        current = output

    return current, reports


# ---------------------------------------------------------------------------
# Construcción desde la configuración
# ---------------------------------------------------------------------------

def build_codec(cfg: Dict[str, Any]):
    section = cfg['codec']
    if section['kind'] == 'block_dct':
        return BlockDctCodec(section['block'], section['keep'])
    if section['weights']:
        codec = load_codec(config.resolve_path(section['weights']))
        if codec.block != section['block']:
            raise ConfigurationError(
                f"codec.block={section['block']} no coincide con los pesos (bloque {codec.block})"
            )
        return codec
    return LinearBlockCodec.initial(section['keep'], section['block'], seed=cfg['seed'])


def build_stack(cfg: Dict[str, Any]) -> ResidualStack:
    section = cfg['residual']
    if section['compressor'] == 'trainable':
        if not section['compressor_weights']:
            raise ConfigurationError("residual.compressor='trainable' requiere residual.compressor_weights")
        compressor = load_compressor(config.resolve_path(section['compressor_weights']))
    else:
        compressor = ResidualCompressor(section['factor'], section['levels'])
    if section['estimator_weights']:
        estimator = load_estimator(config.resolve_path(section['estimator_weights']))
    else:
        estimator = ResidualEstimator.default(section['mixtures'], compressor.levels)
    return ResidualStack(compressor, estimator)


def build_digital_link(cfg: Dict[str, Any]) -> DigitalLink:
    section = cfg['residual']
    if section['alist']:
        code = ldpc_load_alist(config.resolve_path(section['alist']))
    else:
        code = builtin_code(section['code'])
    return DigitalLink(code, qam_constellation(section['qam_order']), section['max_iters'],
                       section['decoder'], exact_llr=section['llr'] == 'exact')


def build_run_config(cfg: Dict[str, Any]) -> RunConfig:
    run = cfg['run']
    res = cfg['residual']
    digital = build_digital_link(cfg) if res['enabled'] else None
    template = HopConfig(
        semantic=LinkConfig(run['snr_db'], run['fading'], run['noiseless'], run['mmse_unbias']),
        residual_enabled=False,
        residual=LinkConfig(res['snr_db'], res['fading'], res['noiseless']),
        digital=digital,
        inject_flips=res['inject_flips'],
    )
    hops = run['hops']
    if run['experiment'] == 'hops' and run['grid']:
        # el calendario se valida contra la cadena más larga del barrido
        hops = max(int(v) for v in run['grid'])
    return RunConfig(
        hops=hops,
        codec=build_codec(cfg),
        stack=build_stack(cfg),
        hop_template=template,
        schedule=run['compensation'] if res['enabled'] else 'none',
        metrics=tuple(run['metrics']),
        reference=res['reference'],
        cbr_accounting=run['cbr_accounting'],
        experiment_id=run['experiment_id'],
    )


def load_source_image(cfg: Dict[str, Any]) -> ImageTensor:
    run = cfg['run']
    if run['image']:
        return load_image(config.resolve_path(run['image']))
    return synthetic_image(run['image_size'], cfg['seed'])


# ---------------------------------------------------------------------------
# Barridos y CSV
# ---------------------------------------------------------------------------

def point_config(run_cfg: RunConfig, experiment: str, value) -> RunConfig:
    """Variante de run_cfg para un punto de la rejilla"""
    if experiment == 'single':
        return run_cfg
    if experiment == 'snr':
        template = dataclasses.replace(
            run_cfg.hop_template,
            semantic=dataclasses.replace(run_cfg.hop_template.semantic, snr_db=float(value)),
            residual=dataclasses.replace(run_cfg.hop_template.residual, snr_db=float(value)),
        )
        return dataclasses.replace(run_cfg, hop_template=template)
    if experiment == 'cbr':
        if not isinstance(run_cfg.codec, BlockDctCodec):
            raise ConfigurationError("El barrido de CBR requiere el códec block_dct")
        return dataclasses.replace(run_cfg, codec=BlockDctCodec(run_cfg.codec.block, int(value)))
    if experiment == 'hops':
        hops = int(value)
        if hops > run_cfg.hops:
            raise ConfigurationError(f"Punto {hops} supera run.hops={run_cfg.hops}")
        schedule = sorted(h for h in run_cfg.compensated_hops if h <= hops)
        return dataclasses.replace(run_cfg, hops=hops, schedule=schedule)
    raise ConfigurationError(f"Experimento desconocido: {experiment}")


def trial_seeds(seed: int, trials: int) -> List[int]:
    return [derive_seed(seed, t) for t in range(trials)]


def _grid_label(experiment: str, value, run_cfg: RunConfig):
    return run_cfg.hops if experiment == 'single' else value


def sweep(experiment: str, grid: Sequence, run_cfg: RunConfig, source: ImageTensor,
          trials: int, seed: int, jobs: int = 1) -> List[Dict[str, Any]]:
    """Ejecuta run_multihop por punto y prueba; filas ordenadas por (punto, prueba, salto)"""
    points = list(grid) if experiment != 'single' else [None]
    if not points:
        raise ConfigurationError(f"Rejilla vacía para el experimento '{experiment}'")
    if trials < 1:
        raise ConfigurationError("run.trials debe ser al menos 1")
    configs = [point_config(run_cfg, experiment, v) for v in points]
    seeds = trial_seeds(seed, trials)
    tasks = [(p, t) for p in range(len(points)) for t in range(trials)]

    def work(task):
        p, t = task
        return task, run_multihop(source, configs[p], seeds[t])[1]

    logger.info(f"[PIPELINE] Barrido '{experiment}': {len(points)} puntos × {trials} pruebas, {jobs} hilos")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="sweep") as executor:
            results = dict(executor.map(work, tasks))
    else:
        results = dict(work(task) for task in tasks)

    rows = []
    for p, t in tasks:
        label = _grid_label(experiment, points[p], configs[p])
        for report in results[(p, t)]:
            rows.append({
                'experiment_id': run_cfg.experiment_id,
                'grid_value': label,
                'trial_seed': seeds[t],
                'hop': report.hop,
                'psnr_recon_db': report.psnr_recon,
                'psnr_comp_db': report.psnr_comp,
                'msssim_recon': report.msssim_recon,
                'msssim_comp': report.msssim_comp,
                'semantic_reals': report.semantic_reals,
                'residual_channel_symbols': report.residual_channel_symbols,
                'residual_payload_bits': report.residual_payload_bits,
                'cbr': report.cbr_cumulative,
                'frame_status': report.frame_status,
            })
    return rows


def _final_hop_rows(rows: Sequence[Dict[str, Any]]) -> Dict[Any, List[Dict[str, Any]]]:
    last: Dict[Tuple[Any, int], Dict[str, Any]] = {}
    for row in rows:
        key = (row['grid_value'], row['trial_seed'])
        if key not in last or row['hop'] > last[key]['hop']:
            last[key] = row
    grouped: Dict[Any, List[Dict[str, Any]]] = {}
    for (value, _), row in last.items():
        grouped.setdefault(value, []).append(row)
    return grouped


def summarize(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Media y desviación de la calidad en el último salto por punto de la rejilla"""
    summary = []
    for value, final in _final_hop_rows(rows).items():
        def stats(column):
            values = np.array([r[column] for r in final], dtype=np.float64)
            return float(np.mean(values)), float(np.std(values))
        pr_mean, pr_std = stats('psnr_recon_db')
        pc_mean, pc_std = stats('psnr_comp_db')
        ms_mean, ms_std = stats('msssim_comp')
        summary.append({
            'experiment_id': final[0]['experiment_id'],
            'grid_value': value,
            'trials': len(final),
            'psnr_recon_mean': pr_mean,
            'psnr_recon_std': pr_std,
            'psnr_comp_mean': pc_mean,
            'psnr_comp_std': pc_std,
            'msssim_comp_mean': ms_mean,
            'msssim_comp_std': ms_std,
            'cbr_mean': stats('cbr')[0],
        })
    return summary


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> Path:
    """CSV con la versión de esquema en la primera línea"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            f.write(f"# schema_version={config.SCHEMA_VERSION}\n")
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_format(row[c]) for c in columns])
    except OSError as e:
        raise OSError(f"No se pudo escribir {path}: {e}") from e
    logger.info(f"[PIPELINE] {len(rows)} filas escritas en {path}")
    return path


def summary_csv_path(results_path) -> Path:
    path = Path(results_path)
    return path.with_name(f"{path.stem}_summary.csv")


def write_summary_text(path, summary: Sequence[Dict[str, Any]], experiment: str) -> Path:
    """Resumen legible por punto de la rejilla"""
    lines = [f"Experimento: {experiment}", ""]
    for s in summary:
        lines.append(
            f"{experiment}={s['grid_value']}: PSNR sin compensar {s['psnr_recon_mean']:.2f} ± "
            f"{s['psnr_recon_std']:.2f} dB, compensado {s['psnr_comp_mean']:.2f} ± "
            f"{s['psnr_comp_std']:.2f} dB, MS-SSIM {s['msssim_comp_mean']:.4f}, "
            f"CBR {s['cbr_mean']:.4f} ({s['trials']} pruebas)"
        )
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    except OSError as e:
        raise OSError(f"No se pudo escribir {path}: {e}") from e
    return path


def run_experiment(cfg: Dict[str, Any]) -> Tuple[Path, Path]:
    """Ejecuta el experimento configurado y escribe CSV, resumen CSV y resumen de texto"""
    run = cfg['run']
    run_cfg = build_run_config(cfg)
    source = load_source_image(cfg)
    rows = sweep(run['experiment'], run['grid'], run_cfg, source, run['trials'], cfg['seed'], run['jobs'])
    summary = summarize(rows)
    csv_path = write_csv(config.resolve_path(run['output_csv']), rows, CSV_COLUMNS)
    write_csv(summary_csv_path(csv_path), summary, SUMMARY_COLUMNS)
    text_path = write_summary_text(config.resolve_path(run['summary']), summary, run['experiment'])
    return csv_path, text_path
