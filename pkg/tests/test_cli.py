"""Tests para la interfaz de línea de comandos"""
import pytest

import cli
import config

SMALL_TOML = """\
[run]
hops = 2
trials = 1
image_size = 32
metrics = ["psnr"]

[residual]
code = "r12_n96"
factor = 16
noiseless = true

[train]
images = 2
crop = 16
steps = 3
hops = 2
realizations = 1

[codec]
keep = 2
"""


@pytest.fixture(autouse=True)
def data_dir(monkeypatch, tmp_path):
    """Rutas relativas de resultados y pesos dentro de tmp_path"""
    monkeypatch.setattr(config, 'DATA_DIR', tmp_path)
    return tmp_path


@pytest.fixture
def toml(tmp_path):
    """Configuración pequeña para ejecuciones rápidas"""
    path = tmp_path / 'small.toml'
    path.write_text(SMALL_TOML, encoding='utf-8')
    return str(path)


def test_run_escribe_resultados(toml, data_dir):
    """Test run termina con 0 y escribe el CSV"""
    assert cli.main(['run', '--config', toml]) == cli.EXIT_OK
    assert (data_dir / 'results' / 'run.csv').exists()
    assert (data_dir / 'results' / 'run_summary.csv').exists()
    assert (data_dir / 'results' / 'run_summary.txt').exists()


def test_run_reproducible(toml, data_dir):
    """Test misma configuración ⇒ mismo CSV byte a byte"""
    cli.main(['run', '--config', toml, '--set', 'run.output_csv="a.csv"'])
    cli.main(['run', '--config', toml, '--set', 'run.output_csv="b.csv"', '--jobs', '2'])
    assert (data_dir / 'a.csv').read_bytes() == (data_dir / 'b.csv').read_bytes()


def test_alist_inexistente(toml, data_dir, capsys):
    """Test alist inexistente ⇒ código 2 con la ruta en stderr"""
    code = cli.main(['run', '--config', toml, '--set', 'residual.alist="falta.alist"'])
    assert code == cli.EXIT_CONFIG
    assert str(data_dir / 'falta.alist') in capsys.readouterr().err


def test_clave_desconocida(toml, capsys):
    """Test clave desconocida ⇒ código 2"""
    assert cli.main(['run', '--config', toml, '--set', 'run.velocidad=3']) == cli.EXIT_CONFIG
    assert 'run.velocidad' in capsys.readouterr().err


def test_etapa3_sin_etapas_previas(toml, capsys):
    """Test etapa 3 sin pesos previos ⇒ código 2"""
    assert cli.main(['train', '--config', toml, '--stage', '3']) == cli.EXIT_CONFIG
    assert 'La etapa 3 necesita' in capsys.readouterr().err


def test_etapa1_pesos_y_curva(toml, data_dir):
    """Test etapa 1 escribe pesos y curva y es reproducible con la misma semilla"""
    assert cli.main(['train', '--config', toml, '--stage', '1', '--seed', '7']) == cli.EXIT_OK
    first = data_dir / 'weights' / 'stage1_codec.bin'
    assert first.exists()
    assert (data_dir / 'weights' / 'stage1_loss.csv').exists()
    assert cli.main(['train', '--config', toml, '--stage', '1', '--seed', '7',
                     '--set', 'train.output_dir="otra"']) == cli.EXIT_OK
    assert (data_dir / 'otra' / 'stage1_codec.bin').read_bytes() == first.read_bytes()


def test_plot(toml, data_dir):
    """Test plot sobre el CSV de un run"""
    cli.main(['run', '--config', toml])
    csv_path = data_dir / 'results' / 'run.csv'
    assert cli.main(['plot', str(csv_path), '--kind', 'hops']) == cli.EXIT_OK
    assert (data_dir / 'results' / 'run_hops.svg').exists()


def test_plot_csv_vacio(tmp_path):
    """Test CSV vacío ⇒ código 2"""
    path = tmp_path / 'vacio.csv'
    path.write_text("# schema_version=1\n", encoding='utf-8')
    assert cli.main(['plot', str(path), '--kind', 'snr']) == cli.EXIT_CONFIG


def test_gen_corpus(tmp_path):
    """Test gen-corpus escribe count imágenes"""
    out = tmp_path / 'corpus'
    code = cli.main(['gen-corpus', '--set', 'corpus.count=2', '--set', 'corpus.size=16',
                     '--output-dir', str(out)])
    assert code == cli.EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ['sintetica_0000.ppm', 'sintetica_0001.ppm']


def test_ayuda():
    """Test --help termina con código 0"""
    with pytest.raises(SystemExit) as exc:
        cli.main(['--help'])
    assert exc.value.code == 0


def test_verify_opcion_full():
    """Test verify acepta --full y por defecto ejecuta solo las comprobaciones rápidas"""
    parser = cli.build_parser()
    assert parser.parse_args(['verify', '--full']).full is True
    assert parser.parse_args(['verify']).full is False
