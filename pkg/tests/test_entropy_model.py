"""Tests para la mezcla de logísticas discretizada y el estimador de residuos"""
import numpy as np
import pytest

from accoder import TOTAL, ac_decode, ac_encode, codelength_bound, quantize_pmf_batch
from codec import LinearBlockCodec, save_codec
from entropy_model import (
    FEATURE_COUNT,
    LogisticMixtureParams,
    MixtureTableProvider,
    ResidualEstimator,
    SymbolGrid,
    block_features,
    channel_pmfs,
    discretized_logistic_pmf,
    estimator_forward,
    estimator_gradients,
    joint_nll,
    load_estimator,
    mixture_pmf,
    nll_gradients,
    save_estimator,
    tables_for_grid,
)
from imagecore import ImageTensor
from utils import ConfigurationError, DimensionError


def _random_params(rng, mixtures=3, grid=(2, 3), scale_low=-1.0, scale_high=0.5):
    full = (mixtures, 3) + grid
    return LogisticMixtureParams(
        logits=rng.standard_normal(full),
        means=0.3 * rng.standard_normal(full),
        scale_pre=rng.uniform(scale_low, scale_high, full),
        lambdas=0.3 * rng.standard_normal(full),
    )


@pytest.fixture
def rng():
    """Generador con semilla fija"""
    return np.random.default_rng(17)


@pytest.fixture
def grid(rng):
    """Rejilla 3x2x3 con Q=9"""
    return SymbolGrid(rng.integers(0, 9, size=(3, 2, 3)), 9)


@pytest.fixture
def condicion():
    """Imagen 16x16 con textura para el estimador"""
    rng = np.random.default_rng(4)
    return ImageTensor(rng.uniform(0.0, 1.0, size=(3, 16, 16)))


def test_rejilla_validacion():
    """Test forma, alfabeto y rango de símbolos"""
    with pytest.raises(DimensionError):
        SymbolGrid(np.zeros((2, 2, 2)), 9)
    with pytest.raises(ValueError):
        SymbolGrid(np.zeros((3, 2, 2)), 1)
    with pytest.raises(ValueError):
        SymbolGrid(np.full((3, 2, 2), 9), 9)


def test_rejilla_recorrido():
    """Test orden canal-mayor y reconstrucción desde el recorrido"""
    g = SymbolGrid(np.arange(12).reshape(3, 2, 2), 17)
    assert g.traversal() == list(range(12))
    back = SymbolGrid.from_traversal(g.traversal(), 17, (2, 2))
    assert np.array_equal(back.symbols, g.symbols)


def test_pmf_suma_uno():
    """Test la pmf discretizada suma 1 sobre el alfabeto"""
    symbols = np.arange(17)
    for mu, sigma in ((0.0, 0.1), (0.7, 0.02), (-1.3, 0.5)):
        assert discretized_logistic_pmf(symbols, mu, sigma, 17).sum() == pytest.approx(1.0, abs=1e-12)


def test_pmf_colas_estables():
    """Test media muy fuera del rango concentra la masa en el bin extremo"""
    assert discretized_logistic_pmf(16, 50.0, 0.01, 17) == pytest.approx(1.0)
    assert discretized_logistic_pmf(0, 50.0, 0.01, 17) == pytest.approx(0.0, abs=1e-300)


def test_pmf_simbolo_fuera_de_rango():
    """Test símbolo fuera de [0, Q−1]"""
    with pytest.raises(ValueError):
        discretized_logistic_pmf(17, 0.0, 0.1, 17)


def test_pmfs_por_canal_coinciden(rng, grid):
    """Test channel_pmfs coincide con mixture_pmf y cada fila suma 1"""
    params = _random_params(rng)
    for c in range(3):
        pmfs = channel_pmfs(params, grid.symbols[:c], c, grid.levels)
        assert np.allclose(pmfs.sum(axis=-1), 1.0)
        for u in range(2):
            for v in range(3):
                expected = mixture_pmf(params, grid, c, u, v)
                assert pmfs[u, v, grid.symbols[c, u, v]] == pytest.approx(expected, rel=1e-9)


def test_nll_en_bits(rng, grid):
    """Test bits = nats / ln 2"""
    params = _random_params(rng)
    assert joint_nll(params, grid, unit='bits') == pytest.approx(joint_nll(params, grid) / np.log(2.0))


def test_gradientes_por_diferencias_finitas(rng, grid):
    """Test gradientes analíticos frente a diferencias centrales"""
    params = _random_params(rng)
    analytic = nll_gradients(params, grid).flat()
    base = params.flat()
    step = 1e-5
    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += step
        minus[idx] -= step
        numeric[idx] = (joint_nll(LogisticMixtureParams.from_flat(plus), grid)
                        - joint_nll(LogisticMixtureParams.from_flat(minus), grid)) / (2 * step)
    assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def test_proveedor_con_codificador_aritmetico(rng, grid):
    """Test el proveedor de tablas reproduce la rejilla tras codificar"""
    params = _random_params(rng)
    stream = ac_encode(grid.traversal(), MixtureTableProvider(params, grid.levels))
    decoded = ac_decode(stream, MixtureTableProvider(params, grid.levels), grid.count)
    assert decoded == grid.traversal()


def test_tablas_cercanas_a_la_nll(rng, grid):
    """Test la cota de longitud de las tablas cuantizadas sigue a la NLL en bits"""
    params = _random_params(rng, scale_low=0.0, scale_high=1.0)
    bound = codelength_bound(tables_for_grid(params, grid), grid.traversal())
    assert abs(bound - joint_nll(params, grid, unit='bits')) <= 0.05 * grid.count


def test_estimador_por_defecto(condicion):
    """Test prior centrado en 0, escalas de ¼ a 4 bins y pesos uniformes"""
    est = ResidualEstimator.default(mixtures=5, levels=17)
    params = estimator_forward(est, condicion, 8)
    assert params.grid_shape == (2, 2)
    assert np.all(params.means == 0.0)
    assert np.all(params.lambdas == 0.0)
    assert np.allclose(params.weights, 0.2)
    expected = (2.0 / 16) * np.geomspace(0.25, 4.0, 5)
    assert np.allclose(params.scales[:, 1, 0, 1], expected)


def test_gradientes_del_estimador(rng, condicion):
    """Test gradiente de pesos y sesgo frente a diferencias centrales"""
    est = ResidualEstimator.default(mixtures=3, levels=17)
    est = est.with_parameters(0.1 * rng.standard_normal(est.weights.shape), est.bias)
    grid = SymbolGrid(rng.integers(0, 17, size=(3, 2, 2)), 17)
    _, d_weights, d_bias = estimator_gradients(est, condicion, 8, grid)

    def nll(weights, bias):
        return joint_nll(estimator_forward(est.with_parameters(weights, bias), condicion, 8), grid)

    step = 1e-6
    for p in (0, 7, 13, 20, 35):
        bias = est.bias.copy()
        bias[p] += step
        up = nll(est.weights, bias)
        bias[p] -= 2 * step
        down = nll(est.weights, bias)
        assert d_bias[p] == pytest.approx((up - down) / (2 * step), rel=1e-4, abs=1e-7)
    for p, f in ((4, 0), (10, 5), (30, 11)):
        weights = est.weights.copy()
        weights[p, f] += step
        up = nll(weights, est.bias)
        weights[p, f] -= 2 * step
        down = nll(weights, est.bias)
        assert d_weights[p, f] == pytest.approx((up - down) / (2 * step), rel=1e-4, abs=1e-7)


def test_estimador_guardar_y_cargar(rng, tmp_path):
    """Test los pesos del estimador sobreviven al archivo"""
    est = ResidualEstimator.default(mixtures=2, levels=9)
    est = est.with_parameters(rng.standard_normal(est.weights.shape), est.bias)
    path = tmp_path / 'estimador.bin'
    save_estimator(est, path)
    loaded = load_estimator(path)
    assert (loaded.mixtures, loaded.levels) == (2, 9)
    assert np.array_equal(loaded.weights, est.weights)
    assert np.array_equal(loaded.bias, est.bias)


def test_estimador_magic_incorrecto(tmp_path):
    """Test cargar pesos de códec como estimador"""
    path = tmp_path / 'codec.bin'
    save_codec(LinearBlockCodec.initial(keep=2), path)
    with pytest.raises(ConfigurationError):
        load_estimator(path)


def test_features_con_relleno():
    """Test imagen 20x20 con factor 8 ⇒ rejilla 3x3"""
    img = ImageTensor(np.full((3, 20, 20), 0.5))
    feats = block_features(img, 8)
    assert feats.shape == (3, 3, FEATURE_COUNT)
    assert np.allclose(feats[..., 0], 0.5)


def test_rejilla_incompatible(condicion):
    """Test rejilla pedida distinta de la de la condición"""
    with pytest.raises(DimensionError):
        estimator_forward(ResidualEstimator.default(), condicion, 8, grid_shape=(3, 3))


def test_causalidad_entre_canales(rng):
    """Test permutar el tercer canal no cambia las tablas de los dos primeros"""
    params = _random_params(rng)
    grid = SymbolGrid(rng.integers(0, 9, size=(3, 2, 3)), 9)
    permuted = grid.symbols.copy()
    permuted[2] = rng.permutation(permuted[2].ravel()).reshape(2, 3)
    permuted[2, 0, 0] = (permuted[2, 0, 0] + 1) % 9
    other = SymbolGrid(permuted, 9)
    sites = 6
    a = tables_for_grid(params, grid)
    b = tables_for_grid(params, other)
    assert a[:2 * sites] == b[:2 * sites]
    for c in range(2):
        assert np.array_equal(channel_pmfs(params, grid.symbols[:c], c, 9),
                              channel_pmfs(params, other.symbols[:c], c, 9))

    shifted = grid.symbols.copy()
    shifted[0] = (shifted[0] + 4) % 9
    assert tables_for_grid(params, SymbolGrid(shifted, 9))[2 * sites:] != a[2 * sites:]


def test_mil_tablas_aleatorias_validas(rng):
    """Test 10^3 parámetros aleatorios dan tablas con total 2^16 y frecuencia mínima 1"""
    for _ in range(1000):
        params = _random_params(rng, mixtures=3, grid=(1, 1), scale_low=-3.0, scale_high=2.0)
        earlier = rng.integers(0, 17, size=(2, 1, 1))
        for c in range(3):
            cum = quantize_pmf_batch(channel_pmfs(params, earlier[:c], c, 17).reshape(-1, 17))
            assert np.all(cum[:, -1] == TOTAL)
            assert np.all(np.diff(cum, axis=1) >= 1)


@pytest.mark.slow
def test_gradientes_en_cien_puntos(rng):
    """Test gradiente analítico frente a diferencias centrales en 100 puntos aleatorios"""
    step = 1e-5
    for _ in range(100):
        params = _random_params(rng, mixtures=2, grid=(2, 2))
        grid = SymbolGrid(rng.integers(0, 17, size=(3, 2, 2)), 17)
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
        assert err <= 1e-4
