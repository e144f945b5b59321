"""Gráficas SVG de calidad frente a SNR, CBR o número de saltos a partir del CSV de resultados"""
import csv
import logging
from pathlib import Path
from typing import Dict, List, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from utils import SchemaError  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_KINDS = ('snr', 'cbr', 'hops')
REQUIRED_COLUMNS = ('experiment_id', 'grid_value', 'trial_seed', 'hop', 'psnr_comp_db', 'cbr')

X_LABELS = {
    'snr': 'SNR (dB)',
    'cbr': 'CBR',
    'hops': 'Número de saltos',
}
Y_LABELS = {
    'psnr_comp_db': 'PSNR (dB)',
    'psnr_recon_db': 'PSNR sin compensar (dB)',
    'msssim_comp': 'MS-SSIM',
    'msssim_recon': 'MS-SSIM sin compensar',
}

# Texto SVG como <text> y ids estables entre ejecuciones
SVG_STYLE = {
    'svg.fonttype': 'none',
    'svg.hashsalt': 'mhpsc',
}


def read_results(path) -> List[Dict[str, str]]:
    """Lee el CSV de resultados ignorando las líneas de comentario"""
    path = Path(path)
    try:
        with open(path, newline='', encoding='utf-8') as f:
            lines = [ln for ln in f if not ln.startswith('#')]
    except FileNotFoundError:
        raise FileNotFoundError(f"CSV no encontrado: {path}") from None
    if not lines:
        raise SchemaError(f"CSV vacío: {path}")
    reader = csv.DictReader(lines)
    missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise SchemaError(f"Faltan columnas en {path}: {', '.join(missing)}")
    rows = list(reader)
    if not rows:
        raise SchemaError(f"CSV sin filas de datos: {path}")
    return rows


def series_points(rows: List[Dict[str, str]], kind: str, metric: str) -> Dict[str, List[Tuple[float, float]]]:
    """Media por punto de la rejilla del último salto de cada prueba, una serie por experimento"""
    if metric not in rows[0]:
        raise SchemaError(f"Columna de métrica ausente: {metric}")
    final: Dict[Tuple[str, str, str], Dict[str, str]] = {}
    for row in rows:
        key = (row['experiment_id'], row['grid_value'], row['trial_seed'])
        if key not in final or int(row['hop']) > int(final[key]['hop']):
            final[key] = row

    grouped: Dict[str, Dict[str, List[Tuple[float, float]]]] = {}
    for (series, value, _), row in final.items():
        x = float(row['cbr']) if kind == 'cbr' else float(value)
        grouped.setdefault(series, {}).setdefault(value, []).append((x, float(row[metric])))

    points = {}
    for series, by_value in grouped.items():
        averaged = []
        for samples in by_value.values():
            xs, ys = zip(*samples)
            averaged.append((sum(xs) / len(xs), sum(ys) / len(ys)))
        points[series] = sorted(averaged)
    return points


def plot_results(csv_path, kind: str, output_path, metric: str = 'psnr_comp_db') -> Path:
    """Gráfica de líneas SVG; cada serie lleva id 'series-<experimento>'"""
    if kind not in PLOT_KINDS:
        raise SchemaError(f"Tipo de gráfica desconocido: {kind}")
    points = series_points(read_results(csv_path), kind, metric)

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(SVG_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for name, pts in sorted(points.items()):
            xs, ys = zip(*pts)
            line, = ax.plot(xs, ys, marker='o', label=name)
            line.set_gid(f"series-{name}")
        ax.set_xlabel(X_LABELS[kind])
        ax.set_ylabel(Y_LABELS.get(metric, metric))
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        try:
            fig.savefig(output_path, format='svg', metadata={'Date': None})
        except OSError as e:
            raise OSError(f"No se pudo escribir {output_path}: {e}") from e
        finally:
            plt.close(fig)
    logger.info(f"[GRAFICAS] {len(points)} series escritas en {output_path}")
    return output_path
