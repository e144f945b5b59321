"""Tests para el canal Rayleigh/AWGN y la ecualización MMSE"""
import numpy as np
import pytest

from channel import (
    ChannelRealization,
    average_power,
    awgn_transmit,
    channel_uses,
    emulated_channel,
    mmse_equalize,
    pack_complex,
    power_normalize,
    rayleigh_transmit,
    semantic_transmit,
    snr_to_noise_variance,
    unpack_complex,
)
from utils import DegenerateInputError, DimensionError


@pytest.fixture
def rng():
    """Generador con semilla fija"""
    return np.random.default_rng(2024)


def _symbols(rng, n):
    return (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2.0)


def test_empaquetado_inverso(rng):
    """Test unpack_complex invierte pack_complex"""
    v = rng.standard_normal(10)
    packed = pack_complex(v)
    assert packed[0] == v[0] + 1j * v[1]
    assert np.array_equal(unpack_complex(packed), v)


def test_empaquetado_longitud_impar():
    """Test longitud impar no empaquetable"""
    with pytest.raises(DimensionError):
        pack_complex(np.ones(5))


def test_normalizacion_de_potencia(rng):
    """Test potencia media unitaria tras normalizar"""
    x = 3.0 * _symbols(rng, 100)
    y, scale = power_normalize(x)
    assert average_power(y) == pytest.approx(1.0)
    assert np.allclose(y * scale, x)


def test_normalizacion_vector_nulo():
    """Test vector todo ceros"""
    with pytest.raises(DegenerateInputError):
        power_normalize(np.zeros(4, dtype=complex))


def test_snr_a_varianza():
    """Test σ² = 10^(−SNR/10)"""
    assert snr_to_noise_variance(10.0) == pytest.approx(0.1)
    assert snr_to_noise_variance(0.0) == pytest.approx(1.0)


def test_realizacion_determinista():
    """Test misma semilla ⇒ mismas ganancias"""
    a = ChannelRealization.draw(64, 0.1, seed=9)
    b = ChannelRealization.draw(64, 0.1, seed=9)
    c = ChannelRealization.draw(64, 0.1, seed=10)
    assert np.array_equal(a.gains, b.gains)
    assert not np.array_equal(a.gains, c.gains)


def test_varianza_nula_sin_modo_sin_ruido():
    """Test σ² = 0 exige el modo sin ruido"""
    with pytest.raises(ValueError):
        ChannelRealization(np.ones(4), 0.0, seed=0)
    assert ChannelRealization(np.ones(4), 0.0, seed=0, noiseless=True).length == 4


def test_potencia_media_de_ganancias():
    """Test E|h|² = 1 ± 1% sobre 10^6 realizaciones"""
    ch = ChannelRealization.draw(1_000_000, 0.1, seed=123)
    assert np.mean(np.abs(ch.gains) ** 2) == pytest.approx(1.0, rel=0.01)


def test_transmision_sin_ruido(rng):
    """Test modo sin ruido ⇒ z = h·x"""
    x = _symbols(rng, 50)
    ch = ChannelRealization.draw(50, 0.0, seed=1, noiseless=True)
    assert np.array_equal(rayleigh_transmit(x, ch), ch.gains * x)


def test_longitud_distinta_de_la_realizacion(rng):
    """Test símbolos y realización con longitudes distintas"""
    ch = ChannelRealization.draw(8, 0.1, seed=1)
    with pytest.raises(DimensionError):
        rayleigh_transmit(_symbols(rng, 9), ch)


def test_mmse_formula_escalar(rng):
    """Test la ecualización vectorial coincide con la fórmula escalar"""
    n = 100_000
    ch = ChannelRealization.draw(n, 0.1, seed=77)
    z = rayleigh_transmit(_symbols(rng, n), ch)
    y = mmse_equalize(z, ch)
    h = ch.gains
    expected = np.array([np.conj(h[i]) * z[i] / (abs(h[i]) ** 2 + 0.1) for i in range(0, n, 101)])
    assert np.max(np.abs(y[::101] - expected)) <= 1e-12


def test_mse_ecualizado_decrece_con_snr(rng):
    """Test MSE tras MMSE estrictamente decreciente en SNR {0, 10, 20, 30} dB"""
    n = 4000
    x = _symbols(rng, n)
    errors = []
    for snr in (0.0, 10.0, 20.0, 30.0):
        total = 0.0
        for seed in range(20):
            ch = ChannelRealization.draw(n, snr_to_noise_variance(snr), seed)
            total += np.mean(np.abs(mmse_equalize(rayleigh_transmit(x, ch), ch) - x) ** 2)
        errors.append(total / 20)
    assert errors[0] > errors[1] > errors[2] > errors[3]


def test_awgn_varianza_de_ruido(rng):
    """Test la varianza empírica del ruido AWGN es σ²"""
    x = _symbols(rng, 200_000)
    z = awgn_transmit(x, 0.25, seed=4)
    assert np.var(z - x) == pytest.approx(0.25, rel=0.02)


def test_canal_emulado_reproduce_la_salida(rng):
    """Test la réplica del canal da la misma salida"""
    x = _symbols(rng, 32)
    ch = ChannelRealization.draw(32, 0.1, seed=21)
    assert np.array_equal(rayleigh_transmit(x, ch), rayleigh_transmit(x, emulated_channel(ch)))


def test_usos_de_canal():
    """Test ⌈L/2⌉ símbolos complejos"""
    assert channel_uses(7) == 4
    assert channel_uses(8) == 4


def test_transmision_semantica_sin_ruido(rng):
    """Test AWGN sin ruido devuelve el código con longitud impar"""
    code = rng.standard_normal(7)
    ch = ChannelRealization.draw(channel_uses(7), 0.0, seed=3, fading='awgn', noiseless=True)
    received, gain = semantic_transmit(code, ch)
    assert received.shape == (7,)
    assert np.allclose(received, code, atol=1e-12)
    assert np.allclose(gain, 1.0)


def test_transmision_semantica_codigo_nulo():
    """Test un código nulo se transmite como silencio"""
    ch = ChannelRealization.draw(3, 0.1, seed=3)
    received, _ = semantic_transmit(np.zeros(6), ch)
    assert np.array_equal(received, np.zeros(6))


def test_transmision_semantica_ganancia_acotada(rng):
    """Test la ganancia MMSE por componente está en (0, 1]"""
    code = rng.standard_normal(64)
    ch = ChannelRealization.draw(32, 0.1, seed=8)
    _, gain = semantic_transmit(code, ch)
    assert gain.shape == (64,)
    assert np.all(gain > 0.0) and np.all(gain <= 1.0)


def test_transmision_semantica_sin_sesgo(rng):
    """Test sin ruido y σ² > 0: MMSE contrae el código y unbias lo restituye"""
    code = rng.standard_normal(64)
    ch = ChannelRealization.draw(32, 0.1, seed=8, noiseless=True)
    biased, gain = semantic_transmit(code, ch)
    assert np.allclose(biased, gain * code, atol=1e-12)
    assert np.mean(gain) < 1.0
    restored, unit = semantic_transmit(code, ch, unbias=True)
    assert np.allclose(restored, code, atol=1e-9)
    assert np.array_equal(unit, np.ones(64))
