"""Configuración del simulador: variables de entorno y archivos TOML"""
import copy
import logging
import os
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional

from utils import ConfigurationError

logger = logging.getLogger(__name__)

# Cargar variables de entorno desde .env si existe
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    # python-dotenv no está instalado, usar variables de entorno del sistema
    pass

# Base directory
BASE_DIR = Path(__file__).parent

# Directorio por defecto para --config relativos
CONFIG_DIR = Path(os.getenv('MHPSC_CONFIG_DIR', str(BASE_DIR)))

# Raíz de corpus, pesos y resultados cuando las rutas son relativas
DATA_DIR = Path(os.getenv('MHPSC_DATA_DIR', str(BASE_DIR / 'data_out')))

LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

SCHEMA_VERSION = 1

EXPERIMENTS = ('single', 'snr', 'cbr', 'hops')
CODEC_KINDS = ('block_dct', 'trainable_linear')
COMPRESSOR_KINDS = ('block_mean', 'trainable')
FADING_KINDS = ('rayleigh', 'awgn')
QAM_ORDERS = (4, 16, 64)

DEFAULTS: Dict[str, Any] = {
    'schema_version': SCHEMA_VERSION,
    'seed': 7,
    'run': {
        'experiment': 'single',
        'experiment_id': 'mhpsc',
        'grid': [],
        'trials': 20,
        'hops': 20,
        'image': '',
        'image_size': 128,
        'compensation': 'all',
        'snr_db': 10.0,
        'fading': 'rayleigh',
        'noiseless': False,
        'mmse_unbias': False,
        'jobs': 1,
        'output_csv': 'results/run.csv',
        'summary': 'results/run_summary.txt',
        'cbr_accounting': 'channel',
        'metrics': ['psnr', 'ms_ssim'],
    },
    'codec': {
        'kind': 'block_dct',
        'block': 8,
        'keep': 4,
        'weights': '',
    },
    'residual': {
        'enabled': True,
        'snr_db': 10.0,
        'fading': 'rayleigh',
        'noiseless': False,
        'code': 'r12_n1024',
        'alist': '',
        'qam_order': 16,
        'max_iters': 50,
        'decoder': 'sum_product',
        'llr': 'maxlog',
        'compressor': 'block_mean',
        'factor': 32,
        'levels': 17,
        'compressor_weights': '',
        'estimator_weights': '',
        'mixtures': 5,
        'reference': 'source',
        'inject_flips': 0,
    },
    'train': {
        'dataset': '',
        'images': 32,
        'crop': 128,
        'hops': 4,
        'gamma': 1.15,
        'steps': 200,
        'optimizer': 'adam',
        'learning_rate': 2e-3,
        'lr_decay': 0.5,
        'lr_decay_every': 100,
        'min_learning_rate': 2e-5,
        'realizations': 4,
        'snr_db': 10.0,
        'output_dir': 'weights',
    },
    'corpus': {
        'count': 32,
        'size': 128,
        'output_dir': 'corpus',
    },
}

# Valores permitidos para claves de texto cerradas
CHOICES = {
    'run.experiment': EXPERIMENTS,
    'run.fading': FADING_KINDS,
    'run.cbr_accounting': ('channel', 'payload'),
    'codec.kind': CODEC_KINDS,
    'residual.fading': FADING_KINDS,
    'residual.decoder': ('sum_product', 'min_sum'),
    'residual.llr': ('maxlog', 'exact'),
    'residual.compressor': COMPRESSOR_KINDS,
    'residual.reference': ('hop_input', 'source'),
    'train.optimizer': ('adam', 'sgd'),
}


def resolve_path(value: str) -> Path:
    """Resuelve una ruta de la configuración; las relativas cuelgan de DATA_DIR"""
    path = Path(value).expanduser()
    if path.is_absolute():
        return path
    return DATA_DIR / path


def resolve_config_path(value: str) -> Path:
    """Localiza un archivo de configuración (directorio actual, luego CONFIG_DIR)"""
    path = Path(value).expanduser()
    if path.is_absolute() or path.exists():
        return path
    candidate = CONFIG_DIR / path
    if candidate.exists():
        return candidate
    return path


def _locate_key(text: str, section: Optional[str], key: str) -> Optional[int]:
    """Devuelve la línea (1-based) donde aparece key dentro de section, si existe"""
    current = None
    pattern = re.compile(rf'^\s*{re.escape(key)}\s*=')
    for number, line in enumerate(text.splitlines(), start=1):
        header = re.match(r'^\s*\[([^\]]+)\]', line)
        if header:
            current = header.group(1).strip()
            continue
        if current == section and pattern.match(line):
            return number
    return None


def _where(text: Optional[str], section: Optional[str], key: str) -> str:
    if text is None:
        return ''
    line = _locate_key(text, section, key)
    return f" (línea {line})" if line else ''


def _check_value(dotted: str, value: Any, default: Any) -> Any:
    """Valida el tipo de un valor frente a su default y lo normaliza"""
    if dotted == 'run.compensation':
        if isinstance(value, str):
            return value
        if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return value
        raise ConfigurationError(f"{dotted} debe ser 'all', 'none', 'a-b' o lista de enteros")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{dotted} debe ser booleano, no {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{dotted} debe ser entero, no {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{dotted} debe ser numérico, no {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{dotted} debe ser texto, no {value!r}")
        allowed = CHOICES.get(dotted)
        if allowed and value not in allowed:
            raise ConfigurationError(f"{dotted}={value!r} no es válido; opciones: {', '.join(allowed)}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"{dotted} debe ser una lista, no {value!r}")
        return value
    return value


def merge_config(document: Dict[str, Any], text: Optional[str] = None) -> Dict[str, Any]:
    """Fusiona un documento con DEFAULTS rechazando claves desconocidas"""
    merged = copy.deepcopy(DEFAULTS)
    for key, value in document.items():
        if key not in DEFAULTS:
            raise ConfigurationError(f"Clave desconocida '{key}'{_where(text, None, key)}")
        default = DEFAULTS[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"'{key}' debe ser una sección{_where(text, None, key)}")
            for sub, sub_value in value.items():
                dotted = f"{key}.{sub}"
                if sub not in default:
                    raise ConfigurationError(f"Clave desconocida '{dotted}'{_where(text, key, sub)}")
                try:
                    merged[key][sub] = _check_value(dotted, sub_value, default[sub])
                except ConfigurationError as e:
                    raise ConfigurationError(f"{e}{_where(text, key, sub)}") from None
        else:
            try:
                merged[key] = _check_value(key, value, default)
            except ConfigurationError as e:
                raise ConfigurationError(f"{e}{_where(text, None, key)}") from None

    if merged['schema_version'] != SCHEMA_VERSION:
        raise ConfigurationError(
            f"schema_version {merged['schema_version']} no soportada (esperada {SCHEMA_VERSION})"
        )
    return merged


def _parse_scalar(raw: str) -> Any:
    """Interpreta el valor de --set como TOML; si no parsea, como texto"""
    try:
        return tomllib.loads(f"v = {raw}")['v']
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(cfg: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Aplica overrides 'clave=valor' (ruta con puntos; clave suelta → run.<clave>)"""
    document = copy.deepcopy(cfg)
    for item in overrides or []:
        if '=' not in item:
            raise ConfigurationError(f"Override inválido '{item}': se esperaba clave=valor")
        key, raw = item.split('=', 1)
        key = key.strip()
        parts = key.split('.')
        if len(parts) == 1:
            parts = [key] if key in DEFAULTS and not isinstance(DEFAULTS[key], dict) else ['run', key]
        if len(parts) > 2:
            raise ConfigurationError(f"Override '{key}' demasiado profundo")
        value = _parse_scalar(raw.strip())
        if len(parts) == 1:
            document[parts[0]] = value
        else:
            section, sub = parts
            if section not in DEFAULTS or not isinstance(DEFAULTS[section], dict):
                raise ConfigurationError(f"Sección desconocida en override '{key}'")
            document.setdefault(section, {})[sub] = value
    return merge_config(document)


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None) -> Dict[str, Any]:
    """Carga un TOML (o solo defaults si path es None) y aplica overrides"""
    if path is None:
        cfg = copy.deepcopy(DEFAULTS)
    else:
        resolved = resolve_config_path(path)
        try:
            text = resolved.read_text(encoding='utf-8')
        except FileNotFoundError:
            raise ConfigurationError(f"Archivo de configuración no encontrado: {resolved}") from None
        try:
            document = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"TOML inválido en {resolved}: {e}") from None
        cfg = merge_config(document, text)
        logger.info(f"[CONFIG] Configuración cargada desde {resolved}")
    return apply_overrides(cfg, overrides or [])
