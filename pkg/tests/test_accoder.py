"""Tests para el codificador aritmético y la cuantización de pmfs"""
import numpy as np
import pytest

from accoder import (
    TOTAL,
    Bitstream,
    FrequencyTable,
    ac_decode,
    ac_encode,
    codelength_bound,
    quantize_pmf,
    quantize_pmf_batch,
    static_provider,
)
from utils import TruncatedStreamError


@pytest.fixture
def rng():
    """Generador con semilla fija"""
    return np.random.default_rng(16)


def _random_case(rng, max_q=40, max_n=200, min_n=1):
    q = int(rng.integers(2, max_q + 1))
    n = int(rng.integers(min_n, max_n + 1))
    tables = [quantize_pmf(rng.dirichlet(np.full(q, 0.5))) for _ in range(n)]
    symbols = [int(rng.integers(0, q)) for _ in range(n)]
    return tables, symbols


def test_tabla_invalida():
    """Test tablas que no empiezan en 0, no suman 2^16 o tienen frecuencias nulas"""
    with pytest.raises(ValueError):
        FrequencyTable((1, TOTAL))
    with pytest.raises(ValueError):
        FrequencyTable((0, 100))
    with pytest.raises(ValueError):
        FrequencyTable((0, 0, TOTAL))


def test_cuantizacion_total_y_minimo():
    """Test total 2^16 y frecuencia mínima 1 con probabilidades diminutas"""
    pmf = np.array([1.0 - 3e-12, 1e-12, 1e-12, 1e-12])
    table = quantize_pmf(pmf)
    assert table.cumulative[-1] == TOTAL
    assert table.frequencies.min() == 1
    assert table.frequency(0) == TOTAL - 3


def test_cuantizacion_por_lotes(rng):
    """Test cada fila del lote suma 2^16"""
    cum = quantize_pmf_batch(rng.dirichlet(np.ones(17), size=50))
    assert cum.shape == (50, 18)
    assert np.all(cum[:, -1] == TOTAL)
    assert np.all(np.diff(cum, axis=1) >= 1)


def test_cuantizacion_pmf_no_normalizada():
    """Test pmf que no suma 1"""
    with pytest.raises(ValueError):
        quantize_pmf([0.5, 0.2])


def test_ida_y_vuelta_aleatoria(rng):
    """Test codificación sin pérdidas y longitud cercana a la entropía cruzada"""
    for _ in range(300):
        tables, symbols = _random_case(rng)
        stream = ac_encode(symbols, static_provider(tables))
        assert ac_decode(stream, static_provider(tables), len(symbols)) == symbols
        gap = stream.bit_length - codelength_bound(tables, symbols)
        assert -1.0 <= gap <= 64.0


@pytest.mark.slow
def test_ida_y_vuelta_10000_casos(rng):
    """Test 10^4 casos con Q en 2..1024 sin pérdidas y dentro de la cota"""
    for _ in range(10_000):
        tables, symbols = _random_case(rng, max_q=1024, max_n=60, min_n=0)
        stream = ac_encode(symbols, static_provider(tables))
        assert ac_decode(stream, static_provider(tables), len(symbols)) == symbols
        gap = stream.bit_length - codelength_bound(tables, symbols)
        assert -1.0 <= gap <= 64.0


def test_secuencia_vacia():
    """Test cero símbolos"""
    stream = ac_encode([], static_provider([]))
    assert ac_decode(stream, static_provider([]), 0) == []


def test_distribucion_muy_sesgada():
    """Test 10^4 símbolos casi seguros ocupan muy pocos bytes"""
    table = quantize_pmf([1.0 - 1e-9, 1e-9])
    stream = ac_encode([0] * 10_000, lambda t, history: table)
    assert len(stream.data) <= 3
    assert ac_decode(stream, lambda t, history: table, 10_000) == [0] * 10_000


def test_proveedor_adaptativo(rng):
    """Test tablas dependientes del historial en ambos extremos"""
    favored = [quantize_pmf(np.where(np.arange(8) == s, 0.65, 0.05)) for s in range(8)]
    first = FrequencyTable.uniform(8)

    def provider(t, history):
        return favored[history[-1]] if history else first

    symbols = [int(s) for s in rng.integers(0, 8, size=500)]
    stream = ac_encode(symbols, provider)
    assert ac_decode(stream, provider, len(symbols)) == symbols


def test_flujo_truncado(rng):
    """Test decodificar más allá del flujo lanza TruncatedStreamError"""
    table = FrequencyTable.uniform(256)
    symbols = [int(s) for s in rng.integers(0, 256, size=100)]
    stream = ac_encode(symbols, lambda t, history: table)
    short = Bitstream.from_bytes(stream.data[:2])
    with pytest.raises(TruncatedStreamError):
        ac_decode(short, lambda t, history: table, len(symbols))


def test_simbolo_fuera_del_alfabeto():
    """Test símbolo mayor que el tamaño de la tabla"""
    with pytest.raises(ValueError):
        ac_encode([5], static_provider([FrequencyTable.uniform(4)]))


@pytest.mark.slow
def test_secuencias_largas(rng):
    """Test longitudes de 0 a 10^5 símbolos con una tabla fija por caso"""
    for n in (0, 1, 10, 1_000, 30_000, 100_000):
        q = int(rng.integers(2, 1025))
        table = quantize_pmf(rng.dirichlet(np.full(q, 0.5)))
        symbols = [int(s) for s in rng.choice(q, size=n, p=table.frequencies / TOTAL)]
        stream = ac_encode(symbols, static_provider([table] * n))
        assert ac_decode(stream, static_provider([table] * n), n) == symbols
        gap = stream.bit_length - codelength_bound([table] * n, symbols)
        assert -1.0 <= gap <= 64.0


def test_bytes_aleatorios_no_rompen_el_decodificador(rng):
    """Test bytes arbitrarios devuelven símbolos válidos o TruncatedStreamError"""
    table = quantize_pmf(rng.dirichlet(np.ones(17)))
    for _ in range(200):
        data = rng.integers(0, 256, size=int(rng.integers(0, 40)), dtype=np.uint8).tobytes()
        n = int(rng.integers(1, 100))
        try:
            decoded = ac_decode(Bitstream.from_bytes(data), static_provider([table] * n), n)
        except TruncatedStreamError:
            continue
        assert len(decoded) == n
        assert all(0 <= s < 17 for s in decoded)


def test_otra_tabla_cambia_el_flujo(rng):
    """Test mismos símbolos con tablas distintas producen flujos distintos"""
    symbols = [int(s) for s in rng.integers(0, 17, size=200)]
    skewed = quantize_pmf(np.where(np.arange(17) == 8, 0.5, 0.5 / 16))
    uniform = ac_encode(symbols, static_provider([FrequencyTable.uniform(17)] * 200))
    other = ac_encode(symbols, static_provider([skewed] * 200))
    assert uniform.data != other.data
    assert ac_decode(other, static_provider([skewed] * 200), 200) == symbols
