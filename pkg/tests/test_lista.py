import numpy as np
import pytest

from unfoldlab import classical as cl
from unfoldlab import datagen as dg
from unfoldlab import lista
from unfoldlab.errors import DomainError
from unfoldlab.rng import Rng


def _instance(seed=11, m=20, n=40, k=5):
    return dg.gen_sparse_instance(m, n, k, 0.0, seed=seed)


def test_softplus_inverse_roundtrip():
    for y in (1e-6, 0.02, 0.5, 1.0, 7.0, 40.0):
        assert lista.softplus_np(lista.softplus_inv(y)) == pytest.approx(y, rel=1e-12)
    assert lista.softplus_np(lista.softplus_inv(0.0)) < 1e-300


def test_identity_layer():
    model = lista.ListaModel(k_layers=1, m=3, n=3, coupled=False)
    model.params["layer01.w1"] = np.eye(3)
    model.params["layer01.w2"] = np.zeros((3, 3))
    model.params["layer01.beta"] = np.array([lista.softplus_inv(0.0)])
    x = np.array([0.5, -1.0, 2.0])
    s, _ = lista.lista_forward(x, model)
    assert np.allclose(s, x, atol=1e-300)


def test_large_beta_zeroes_output():
    inst = _instance()
    model = lista.lista_init_from_ista(inst.h, 0.5, 0.1, 4)
    for k in range(1, 5):
        model.params[f"layer{k:02d}.beta"] = np.array([lista.softplus_inv(1e6)])
    s, _ = lista.lista_forward(inst.x, model)
    assert np.all(s == 0.0)


@pytest.mark.parametrize("coupled", [False, True])
def test_ista_equivalence_every_layer(coupled):
    inst = _instance()
    mu = 0.9 / np.linalg.norm(inst.h, 2) ** 2
    rho = 0.05
    k_layers = 8
    model = lista.lista_init_from_ista(inst.h, mu, rho, k_layers, coupled=coupled)
    _, traj = lista.lista_forward(inst.x, model)
    ref = cl.ista_run(inst, cl.IstaConfig(mu=mu, rho=rho, max_iters=k_layers,
                                          record_trajectory=True))
    for got, want in zip(traj, ref.trajectory):
        assert np.max(np.abs(got - want)) < 1e-12


def test_w2_symmetric_from_init():
    inst = _instance()
    model = lista.lista_init_from_ista(inst.h, 0.4, 0.1, 3)
    w2 = model.params["layer01.w2"]
    assert np.allclose(w2, w2.T, atol=1e-15)


def test_coupling_residual_zero_for_init_and_coupled():
    inst = _instance()
    free = lista.lista_init_from_ista(inst.h, 0.4, 0.1, 5)
    assert all(r == 0.0 for r in lista.coupling_residual(free, inst.h))
    coupled = lista.lista_init_from_ista(inst.h, 0.4, 0.1, 5, coupled=True)
    assert all(r == 0.0 for r in lista.coupling_residual(coupled, inst.h))


def test_coupling_residual_nonzero_after_perturbation():
    inst = _instance()
    model = lista.lista_init_from_ista(inst.h, 0.4, 0.1, 3)
    model.params["layer02.w2"] = model.params["layer02.w2"] + 0.01
    res = lista.coupling_residual(model, inst.h)
    assert res[0] == 0.0 and res[1] > 0.0


def test_param_counts():
    inst = _instance(m=15, n=30)
    k_layers = 6
    free = lista.lista_init_from_ista(inst.h, 0.4, 0.1, k_layers)
    coupled = lista.lista_init_from_ista(inst.h, 0.4, 0.1, k_layers, coupled=True)
    m, n = 15, 30
    assert free.param_count() == k_layers * (n * m + n * n + 1)
    assert coupled.param_count() == k_layers * (n * m + 1)
    assert free.param_count() == lista.free_param_count(k_layers, m, n)
    assert coupled.param_count() == lista.coupled_param_count(k_layers, m, n)
    assert coupled.param_count() < free.param_count()


def test_homogeneous_when_thresholds_zero():
    inst = _instance()
    model = lista.lista_init_from_ista(inst.h, 0.4, 0.0, 4, coupled=True)
    s1, _ = lista.lista_forward(inst.x, model)
    s2, _ = lista.lista_forward(2.5 * inst.x, model)
    assert np.allclose(s2, 2.5 * s1, rtol=1e-12, atol=1e-14)


def test_tied_parameters_shared():
    inst = _instance()
    model = lista.lista_init_from_ista(inst.h, 0.4, 0.1, 5, tied=True)
    assert set(model.params) == {"shared.w1", "shared.w2", "shared.beta"}
    assert model.stage_of("shared.w1") == 0
    _, traj = lista.lista_forward(inst.x, model)
    assert len(traj) == 5


def test_rate_fit_exact_exponential():
    k = np.arange(1, 11)
    errors = 3.7 * np.exp(-0.5 * k)
    c, amp = lista.rate_fit(errors, noise_sigma=0.0)
    assert abs(c - 0.5) < 1e-9
    assert abs(amp - 3.7) < 1e-6


def test_rate_fit_constant_sequence():
    c, _ = lista.rate_fit(np.full(8, 0.25), noise_sigma=0.0)
    assert abs(c) < 1e-9


def test_rate_fit_noise_floor_subtraction():
    k = np.arange(1, 12)
    errors = 2.0 * np.exp(-0.8 * k) + 0.05
    errors[-1] = 0.05  # exact floor at the final layer
    c, _ = lista.rate_fit(errors, noise_sigma=0.1)
    assert abs(c - 0.8) < 1e-6


def test_rate_fit_too_few_layers():
    with pytest.raises(DomainError):
        lista.rate_fit(np.array([1.0, 0.5]), noise_sigma=0.0)
    with pytest.raises(DomainError):
        # all layers at the floor
        lista.rate_fit(np.full(5, 0.3), noise_sigma=1.0)


def test_stage_mapping():
    inst = _instance()
    model = lista.lista_init_from_ista(inst.h, 0.4, 0.1, 3)
    assert model.stage_of("layer01.w1") == 1
    assert model.stage_of("layer03.beta") == 3
    assert model.group_of("layer01.beta") == lista.SCALAR_GROUP
    assert model.group_of("layer01.w1") == lista.NET_GROUP
