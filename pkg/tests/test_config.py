"""Tests para la carga y validación de la configuración"""
import pytest

import config
from utils import ConfigurationError


@pytest.fixture
def toml_file(tmp_path):
    """Escribe un TOML temporal y devuelve su ruta"""
    def write(text):
        path = tmp_path / 'conf.toml'
        path.write_text(text, encoding='utf-8')
        return str(path)
    return write


def test_valores_por_defecto():
    """Test sin archivo se usan los defaults"""
    cfg = config.load_config()
    assert cfg == config.DEFAULTS
    assert cfg is not config.DEFAULTS


def test_base_toml_coincide_con_defaults():
    """Test base.toml documenta exactamente los defaults"""
    assert config.load_config(str(config.BASE_DIR / 'base.toml')) == config.DEFAULTS


def test_clave_desconocida_con_linea(toml_file):
    """Test clave desconocida indica clave y línea"""
    path = toml_file('seed = 3\n[run]\nsaltos = 4\n')
    with pytest.raises(ConfigurationError) as exc:
        config.load_config(path)
    assert 'run.saltos' in str(exc.value)
    assert 'línea 3' in str(exc.value)


def test_tipo_incorrecto(toml_file):
    """Test entero donde se espera texto"""
    with pytest.raises(ConfigurationError) as exc:
        config.load_config(toml_file('[codec]\nkind = 3\n'))
    assert 'codec.kind' in str(exc.value)


def test_opcion_invalida(toml_file):
    """Test valor fuera de las opciones permitidas"""
    with pytest.raises(ConfigurationError):
        config.load_config(toml_file('[run]\nfading = "rician"\n'))


def test_flotante_acepta_entero(toml_file):
    """Test snr_db = 12 se normaliza a 12.0"""
    cfg = config.load_config(toml_file('[run]\nsnr_db = 12\n'))
    assert cfg['run']['snr_db'] == 12.0
    assert isinstance(cfg['run']['snr_db'], float)


def test_overrides():
    """Test clave suelta, ruta con puntos y clave de primer nivel"""
    cfg = config.load_config(None, ['hops=5', 'residual.snr_db=12', 'seed=11', 'compensation=21-30'])
    assert cfg['run']['hops'] == 5
    assert cfg['residual']['snr_db'] == 12.0
    assert cfg['seed'] == 11
    assert cfg['run']['compensation'] == '21-30'


def test_override_invalido():
    """Test override sin '=' o con sección desconocida"""
    with pytest.raises(ConfigurationError):
        config.load_config(None, ['hops'])
    with pytest.raises(ConfigurationError):
        config.load_config(None, ['modem.order=4'])


def test_version_de_esquema(toml_file):
    """Test schema_version distinta se rechaza"""
    with pytest.raises(ConfigurationError):
        config.load_config(toml_file('schema_version = 2\n'))


def test_archivo_inexistente(tmp_path):
    """Test archivo de configuración inexistente"""
    with pytest.raises(ConfigurationError):
        config.load_config(str(tmp_path / 'no_existe.toml'))


def test_rutas_relativas(monkeypatch, tmp_path):
    """Test rutas relativas cuelgan de DATA_DIR y las absolutas se respetan"""
    monkeypatch.setattr(config, 'DATA_DIR', tmp_path)
    assert config.resolve_path('results/run.csv') == tmp_path / 'results' / 'run.csv'
    assert config.resolve_path('/tmp/x.csv').as_posix() == '/tmp/x.csv'
