"""Interfaz de línea de comandos: run, train, plot, gen-corpus y verify

Códigos de salida: 0 correcto, 1 fallo en ejecución, 2 error de configuración.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import config
from codec import LinearBlockCodec, ResidualCompressor, load_codec, load_compressor, save_codec, save_compressor
from corpus import generate_corpus, load_dataset
from entropy_model import ResidualEstimator, save_estimator
from pipeline import run_experiment
from plotting import PLOT_KINDS, plot_results
from training import TrainingConfig, train_stage1, train_stage2, train_stage3
from utils import (
    AlistFormatError,
    ConfigurationError,
    SchemaError,
    StageDependencyError,
    setup_logging,
)
from verification import run_verification

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

CONFIG_ERRORS = (ConfigurationError, SchemaError, AlistFormatError, StageDependencyError, FileNotFoundError)

STAGE_FILES = {
    1: 'stage1_codec.bin',
    2: 'stage2_compressor.bin',
    3: 'stage3_estimator.bin',
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help=f"archivo TOML (relativo a {config.CONFIG_DIR} si no existe)")
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='CLAVE=VALOR',
                        help="override con ruta de puntos, p. ej. residual.snr_db=12; clave suelta → run.<clave>")
    parser.add_argument('--seed', type=int, help="semilla global (equivale a --set seed=N)")
    parser.add_argument('--log-level', default=config.LOG_LEVEL, help="nivel de logging (DEBUG, INFO, ...)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='mhpsc',
        description="Simulador de comunicación semántica multi-salto con compensación paralela de residuos",
    )
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help="ejecuta run.experiment y escribe CSV y resumen")
    _common(run)
    run.add_argument('--jobs', type=int, help="hilos para el barrido (run.jobs)")

    train = sub.add_parser('train', help="ejecuta una etapa de entrenamiento")
    _common(train)
    train.add_argument('--stage', type=int, choices=(1, 2, 3), required=True, help="etapa (1, 2 o 3)")

    plot = sub.add_parser('plot', help="gráfica SVG a partir de un CSV de resultados")
    plot.add_argument('csv', help="CSV de resultados de run")
    plot.add_argument('--kind', choices=PLOT_KINDS, required=True, help="eje x: snr, cbr o hops")
    plot.add_argument('--output', help="ruta del SVG (por defecto junto al CSV)")
    plot.add_argument('--metric', default='psnr_comp_db',
                      help="columna del eje y (psnr_comp_db, psnr_recon_db, msssim_comp, msssim_recon)")
    plot.add_argument('--log-level', default=config.LOG_LEVEL, help="nivel de logging")

    corpus = sub.add_parser('gen-corpus', help="genera el corpus sintético de texturas")
    _common(corpus)
    corpus.add_argument('--output-dir', help="directorio de salida (corpus.output_dir)")

    verify = sub.add_parser('verify', help="comprobaciones rápidas con artefactos deterministas")
    _common(verify)
    verify.add_argument('--output-dir', default='verify', help="directorio de artefactos")
    verify.add_argument('--full', action='store_true',
                        help="añade los criterios de aceptación a escala completa (minutos)")
    return parser


def _load(args, extra: Optional[List[str]] = None):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    overrides.extend(extra or [])
    return config.load_config(args.config, overrides)


def cmd_run(args) -> int:
    extra = [f"run.jobs={args.jobs}"] if args.jobs is not None else []
    cfg = _load(args, extra)
    csv_path, summary_path = run_experiment(cfg)
    print(f"Resultados: {csv_path}")
    print(f"Resumen: {summary_path}")
    return EXIT_OK


def _require(path: Path, stage: int, needed: int) -> Path:
    if not path.exists():
        raise StageDependencyError(
            f"La etapa {stage} necesita los pesos de la etapa {needed} ({path}); ejecuta antes 'train --stage {needed}'"
        )
    return path


def cmd_train(args) -> int:
    cfg = _load(args)
    train = cfg['train']
    residual = cfg['residual']
    out_dir = config.resolve_path(train['output_dir'])
    dataset = config.resolve_path(train['dataset']) if train['dataset'] else ''
    stage = args.stage

    # dependencias antes de cargar datos
    codec_path = out_dir / STAGE_FILES[1]
    compressor_path = out_dir / STAGE_FILES[2]
    if stage >= 2:
        _require(codec_path, stage, 1)
    if stage == 3:
        _require(compressor_path, stage, 2)

    images = load_dataset(dataset, train['crop'], train['images'], cfg['seed'])
    tcfg = TrainingConfig.from_config(cfg)
    log_path = out_dir / f"stage{stage}_loss.csv"

    if stage == 1:
        initial = LinearBlockCodec.initial(cfg['codec']['keep'], cfg['codec']['block'], seed=cfg['seed'])
        codec, _ = train_stage1(initial, images, tcfg, log_path)
        save_codec(codec, codec_path)
        print(f"Códec: {codec_path}")
    elif stage == 2:
        codec = load_codec(codec_path)
        compressor = ResidualCompressor(residual['factor'], residual['levels'])
        compressor, _ = train_stage2(codec, compressor, images, tcfg, log_path)
        save_compressor(compressor, compressor_path)
        print(f"Compresor: {compressor_path}")
    else:
        codec = load_codec(codec_path)
        compressor = load_compressor(compressor_path)
        estimator = ResidualEstimator.default(residual['mixtures'], compressor.levels)
        estimator, _ = train_stage3(codec, compressor, estimator, images, tcfg, log_path)
        estimator_path = out_dir / STAGE_FILES[3]
        save_estimator(estimator, estimator_path)
        print(f"Estimador: {estimator_path}")
    print(f"Curva de pérdida: {log_path}")
    return EXIT_OK


def cmd_plot(args) -> int:
    csv_path = Path(args.csv)
    output = Path(args.output) if args.output else csv_path.with_name(f"{csv_path.stem}_{args.kind}.svg")
    plot_results(csv_path, args.kind, output, args.metric)
    print(f"Gráfica: {output}")
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    cfg = _load(args)
    section = cfg['corpus']
    out_dir = Path(args.output_dir) if args.output_dir else config.resolve_path(section['output_dir'])
    paths = generate_corpus(section['count'], section['size'], out_dir, cfg['seed'])
    print(f"{len(paths)} imágenes en {out_dir}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load(args)
    out_dir = config.resolve_path(args.output_dir)
    checks, path = run_verification(cfg, out_dir, full=args.full)
    failed = [name for name, ok, _ in checks if not ok]
    print(f"Comprobaciones: {path}")
    if failed:
        print(f"Fallidas: {', '.join(failed)}")
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    'run': cmd_run,
    'train': cmd_train,
    'plot': cmd_plot,
    'gen-corpus': cmd_gen_corpus,
    'verify': cmd_verify,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except CONFIG_ERRORS as e:
        logger.error(f"[CLI] Error de configuración: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"[CLI] Error en '{args.command}': {e}", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
