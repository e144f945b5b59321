"""Tests para LDPC, QAM, CRC-32 y el enlace digital"""
import itertools

import numpy as np
import pytest

from channel import (
    ChannelRealization,
    mmse_equalize,
    mmse_unbias,
    post_equalization_noise_variance,
    rayleigh_transmit,
    snr_to_noise_variance,
)
from modem import (
    DigitalLink,
    LdpcCode,
    build_frame,
    builtin_code,
    crc32,
    ldpc_decode,
    ldpc_encode,
    ldpc_load_alist,
    ldpc_save_alist,
    parse_frame,
    qam_constellation,
    qam_demodulate_hard,
    qam_demodulate_llr,
    qam_modulate,
    syndrome,
)
from utils import AlistFormatError, CodeConstructionError, DimensionError


@pytest.fixture
def code96():
    """Código incluido de tasa 1/2 y N=96"""
    return builtin_code('r12_n96')


@pytest.fixture
def rng():
    """Generador con semilla fija"""
    return np.random.default_rng(96)


@pytest.fixture
def codeword(code96, rng):
    """Palabra código aleatoria y sus bits de información"""
    info = rng.integers(0, 2, size=code96.k, dtype=np.uint8)
    return info, ldpc_encode(code96, info)


def _llrs(bits, magnitude=4.0):
    return magnitude * (1.0 - 2.0 * np.asarray(bits, dtype=np.float64))


def test_crc32_vector_de_referencia():
    """Test CRC-32 de '123456789'"""
    assert crc32(b"123456789") == 0xCBF43926


def test_codigo_incluido_regular(code96):
    """Test (3,6)-regular de tasa 1/2"""
    h = code96.parity_check
    assert (code96.n, code96.k) == (96, 48)
    assert code96.rate == 0.5
    assert np.all(h.sum(axis=0) == 3)
    assert np.all(h.sum(axis=1) == 6)


def test_codigo_incluido_sin_ciclos_de_4(code96):
    """Test dos checks comparten como mucho una variable"""
    h = code96.parity_check.astype(np.int64)
    overlap = h @ h.T
    np.fill_diagonal(overlap, 0)
    assert overlap.max() <= 1


def test_codigo_desconocido():
    """Test nombre de código no incluido"""
    with pytest.raises(AlistFormatError):
        builtin_code('r12_n7')


def test_codificacion_sindrome_nulo(code96, codeword):
    """Test H_c·cᵀ = 0 y parte sistemática"""
    info, c = codeword
    assert not syndrome(code96, c).any()
    assert np.array_equal(c[code96.info_positions], info)


def test_codificacion_longitud_incorrecta(code96):
    """Test nº de bits de información distinto de K"""
    with pytest.raises(DimensionError):
        ldpc_encode(code96, np.zeros(10))


def test_matriz_sin_rango_completo():
    """Test filas repetidas ⇒ CodeConstructionError"""
    h = np.array([[1, 1, 0, 0], [1, 1, 0, 0]])
    with pytest.raises(CodeConstructionError):
        LdpcCode.from_parity_check(h)


def test_decodificacion_sin_errores(code96, codeword):
    """Test LLRs limpios convergen en una iteración"""
    info, c = codeword
    result = ldpc_decode(code96, _llrs(c))
    assert result.converged
    assert result.iterations == 1
    assert np.array_equal(result.info_bits, info)


def test_corrige_todos_los_errores_simples(code96, codeword):
    """Test todos los patrones de 1 bit se corrigen"""
    info, c = codeword
    for pos in range(code96.n):
        llrs = _llrs(c)
        llrs[pos] = -llrs[pos]
        result = ldpc_decode(code96, llrs)
        assert result.converged, f"posición {pos}"
        assert np.array_equal(result.info_bits, info)


@pytest.mark.slow
def test_corrige_todos_los_errores_dobles(code96, codeword):
    """Test todos los patrones de 2 bits se corrigen"""
    info, c = codeword
    for a, b in itertools.combinations(range(code96.n), 2):
        llrs = _llrs(c)
        llrs[[a, b]] = -llrs[[a, b]]
        result = ldpc_decode(code96, llrs)
        assert result.converged, f"posiciones {a}, {b}"
        assert np.array_equal(result.info_bits, info)


def test_min_sum_invariante_a_escala(code96, codeword):
    """Test min-sum da el mismo resultado con LLRs escalados"""
    _, c = codeword
    llrs = _llrs(c, magnitude=1.0)
    llrs[5] = -llrs[5]
    base = ldpc_decode(code96, llrs, method='min_sum')
    scaled = ldpc_decode(code96, 2.5 * llrs, method='min_sum')
    assert base.converged and scaled.converged
    assert base.iterations == scaled.iterations
    assert np.array_equal(base.info_bits, scaled.info_bits)


def test_llr_nulos_no_convergen(code96):
    """Test LLRs a cero agotan las iteraciones"""
    result = ldpc_decode(code96, np.zeros(code96.n), max_iters=7)
    assert not result.converged
    assert result.iterations == 7


def test_decodificacion_longitud_incorrecta(code96):
    """Test nº de LLRs distinto de N"""
    with pytest.raises(DimensionError):
        ldpc_decode(code96, np.zeros(95))


def test_alist_guardar_y_cargar(code96, tmp_path):
    """Test alist conserva la matriz de paridad"""
    path = tmp_path / 'r12_n96.alist'
    ldpc_save_alist(code96, path)
    loaded = ldpc_load_alist(path)
    assert np.array_equal(loaded.parity_check, code96.parity_check)
    assert loaded.k == code96.k


def test_alist_malformado(tmp_path):
    """Test alist con cabecera no numérica"""
    path = tmp_path / 'malo.alist'
    path.write_text("4 2\nx y\n1 1 1 1\n2 2\n")
    with pytest.raises(AlistFormatError):
        ldpc_load_alist(path)


def test_alist_grados_inconsistentes(tmp_path):
    """Test columna con más filas que su grado"""
    path = tmp_path / 'grados.alist'
    path.write_text("4 2\n1 2\n1 1 1 1\n2 2\n1 2\n1\n2\n2\n1 2\n3 4\n")
    with pytest.raises(AlistFormatError):
        ldpc_load_alist(path)


def test_alist_inexistente(tmp_path):
    """Test archivo alist inexistente incluye la ruta"""
    path = tmp_path / 'no_existe.alist'
    with pytest.raises(FileNotFoundError) as exc:
        ldpc_load_alist(path)
    assert str(path) in str(exc.value)


@pytest.mark.parametrize('order', [4, 16, 64])
def test_qam_energia_unitaria(order):
    """Test energía media 1"""
    const = qam_constellation(order)
    assert np.mean(np.abs(const.points) ** 2) == pytest.approx(1.0)


def test_qam4_etiqueta_cero():
    """Test 4QAM '00' → (1+1j)/√2"""
    const = qam_constellation(4)
    assert qam_modulate(const, [0, 0])[0] == pytest.approx((1 + 1j) / np.sqrt(2))


@pytest.mark.parametrize('order', [16, 64])
def test_qam_gray(order):
    """Test vecinos más cercanos difieren en un solo bit"""
    const = qam_constellation(order)
    points = const.points
    dist = np.abs(points[:, None] - points[None, :])
    step = np.min(dist[dist > 1e-9])
    for i, j in zip(*np.nonzero(np.abs(dist - step) < 1e-9)):
        assert np.sum(const.labels[i] != const.labels[j]) == 1


def test_qam_decision_dura_sin_ruido(rng):
    """Test demodulación dura recupera los bits"""
    const = qam_constellation(64)
    bits = rng.integers(0, 2, size=600)
    assert np.array_equal(qam_demodulate_hard(const, qam_modulate(const, bits)), bits)


def test_qam_llr_signo(rng):
    """Test LLR positivo ⇔ bit 0 sin ruido, en max-log y exacto"""
    const = qam_constellation(16)
    bits = rng.integers(0, 2, size=400)
    symbols = qam_modulate(const, bits)
    for exact in (False, True):
        llrs = qam_demodulate_llr(const, symbols, 0.05, exact=exact)
        assert np.array_equal(llrs < 0, bits == 1)


def test_trama_valida_y_corrupta():
    """Test CRC acepta la trama intacta y rechaza un byte alterado"""
    frame = bytearray(build_frame(b"residuo"))
    assert parse_frame(bytes(frame)) == b"residuo"
    frame[-1] ^= 0x01
    assert parse_frame(bytes(frame)) is None


def test_enlace_digital_sin_ruido(code96, rng):
    """Test cadena digital sin ruido sin errores de trama"""
    link = DigitalLink(code96, qam_constellation(16))
    for _ in range(100):
        payload = rng.integers(0, 256, size=int(rng.integers(1, 40)), dtype=np.uint8).tobytes()
        symbols, blocks = link.modulate(build_frame(payload))
        report = link.demodulate(symbols, np.full(symbols.size, 1e-6), blocks)
        assert report.payload == payload
        assert report.converged == blocks


def test_enlace_digital_bits_invertidos(code96):
    """Test inversión forzada de LLRs ⇒ trama rechazada"""
    link = DigitalLink(code96, qam_constellation(16))
    symbols, blocks = link.modulate(build_frame(b"0123456789"))
    report = link.demodulate(symbols, np.full(symbols.size, 1e-6), blocks, inject_flips=24)
    assert not report.delivered


@pytest.mark.slow
def test_fer_awgn_16qam():
    """Test FER < 1% con 16QAM, tasa 1/2 y SNR 12 dB en AWGN"""
    link = DigitalLink(builtin_code('r12_n1024'), qam_constellation(16))
    rng = np.random.default_rng(12)
    noise_var = snr_to_noise_variance(12.0)
    errors = 0
    for f in range(1000):
        payload = rng.integers(0, 256, size=48, dtype=np.uint8).tobytes()
        symbols, blocks = link.modulate(build_frame(payload))
        ch = ChannelRealization.draw(symbols.size, noise_var, f, fading='awgn')
        equalized = mmse_unbias(mmse_equalize(rayleigh_transmit(symbols, ch), ch), ch)
        report = link.demodulate(equalized, post_equalization_noise_variance(ch), blocks)
        errors += report.payload != payload
    assert errors < 10
