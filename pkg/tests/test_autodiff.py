import numpy as np
import pytest

from unfoldlab import autodiff as ad
from unfoldlab.errors import ContractError, DimensionError, DomainError, SingularMatrixError
from unfoldlab.psi import PsiOperator, psi_apply, psi_apply_inv

from conftest import central_diff, rel_err

PRIM_TOL = 1e-5
FD_STEP = 1e-5


def _loss_of(build):
    """Wrap an op composition into scalar numpy function + tape gradient."""

    def numpy_loss(*arrays):
        tape = ad.Tape()
        leaves = [tape.leaf(a) for a in arrays]
        return build(tape, leaves).item()

    def grads(*arrays):
        tape = ad.Tape()
        leaves = [tape.leaf(a, requires_grad=True) for a in arrays]
        store = ad.backward(tape, build(tape, leaves))
        return [store[leaf] for leaf in leaves]

    return numpy_loss, grads


def check_gradients(build, arrays, tol=PRIM_TOL):
    f, g = _loss_of(build)
    got = g(*arrays)
    for i in range(len(arrays)):
        want = central_diff(f, arrays, i, step=FD_STEP)
        assert rel_err(got[i], want) < tol, f"operand {i}: {rel_err(got[i], want)}"


# ---------------------------------------------------------------------------
# forward contracts


def test_matmul_identity():
    tape = ad.Tape()
    a = tape.leaf(np.eye(2))
    b = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(ad.matmul(a, b).values, b.values)


def test_matmul_hand_expansion():
    tape = ad.Tape()
    a = tape.leaf(np.array([[1.0, 0.0], [0.0, 0.0]]))
    b = tape.leaf(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.array_equal(ad.matmul(a, b).values, np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_matmul_shape_error_names_shapes():
    tape = ad.Tape()
    a = tape.leaf(np.zeros((2, 3)))
    b = tape.leaf(np.zeros((2, 3)))
    with pytest.raises(DimensionError, match=r"\(2, 3\)"):
        ad.matmul(a, b)


@pytest.mark.parametrize("y,zeta,want", [(1.2, 0.5, 0.7), (0.0, 0.9, 0.0), (-0.3, 0.5, 0.0)])
def test_soft_threshold_values(y, zeta, want):
    tape = ad.Tape()
    t = ad.soft_threshold(tape.leaf(np.array([y])), zeta)
    assert t.values[0] == pytest.approx(want, abs=1e-15)


def test_soft_threshold_rejects_negative_zeta():
    tape = ad.Tape()
    with pytest.raises(DomainError):
        ad.soft_threshold(tape.leaf(np.array([1.0])), -0.1)


def test_soft_threshold_lipschitz_and_odd(rng):
    a = rng.normal(size=500)
    b = rng.normal(size=500)
    for zeta in (0.0, 0.3, 1.7):
        ta = ad.soft_threshold(ad.Tape().leaf(a), zeta).values
        tb = ad.soft_threshold(ad.Tape().leaf(b), zeta).values
        assert np.all(np.abs(ta - tb) <= np.abs(a - b) + 1e-15)
        tna = ad.soft_threshold(ad.Tape().leaf(-a), zeta).values
        assert np.allclose(tna, -ta, atol=1e-15)


def test_gram_solve_orthonormal_columns(rng):
    q, _ = np.linalg.qr(rng.normal(size=(10, 4)))
    g = rng.normal(size=(10, 4))
    tape = ad.Tape()
    z = ad.gram_solve(tape.leaf(q), tape.leaf(g))
    assert np.allclose(z.values, g, atol=1e-12)


def test_gram_solve_scalar_gram(rng):
    m = np.zeros((7, 3))
    m[:3, :3] = 2.0 * np.eye(3)
    g = rng.normal(size=(7, 3))
    tape = ad.Tape()
    z = ad.gram_solve(tape.leaf(m), tape.leaf(g))
    assert np.allclose(z.values, g / 4.0, atol=1e-13)


def test_gram_solve_residual(rng):
    for seed in range(3):
        r = np.random.default_rng(seed)
        m = r.normal(size=(30, 5))
        g = r.normal(size=(30, 5))
        tape = ad.Tape()
        z = ad.gram_solve(tape.leaf(m), tape.leaf(g)).values
        resid = np.linalg.norm(z @ (m.T @ m) - g) / np.linalg.norm(g)
        assert resid <= 1e-10


def test_gram_solve_singular_raises():
    tape = ad.Tape()
    m = tape.leaf(np.zeros((5, 2)) + 1e-12)
    g = tape.leaf(np.ones((5, 2)))
    with pytest.raises(SingularMatrixError) as ei:
        ad.gram_solve(m, g)
    assert ei.value.cond > 1e12 or not np.isfinite(ei.value.cond)


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(1, 8, 9))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    tape = ad.Tape()
    out = ad.conv2d(tape.leaf(x), tape.leaf(k), tape.leaf(np.zeros(1)))
    assert np.array_equal(out.values, x)


def test_conv2d_ones_kernel_interior():
    c = 1.3
    x = np.full((1, 6, 6), c)
    k = np.ones((1, 1, 3, 3))
    tape = ad.Tape()
    out = ad.conv2d(tape.leaf(x), tape.leaf(k), tape.leaf(np.zeros(1)))
    assert out.values[0, 3, 3] == pytest.approx(9.0 * c, rel=1e-15)


def test_conv2d_channel_mismatch():
    tape = ad.Tape()
    with pytest.raises(DimensionError):
        ad.conv2d(tape.leaf(np.zeros((2, 4, 4))), tape.leaf(np.zeros((1, 3, 3, 3))),
                  tape.leaf(np.zeros(1)))


def test_elementwise_identities(rng):
    a = rng.normal(size=(4, 5))
    tape = ad.Tape()
    ta = tape.leaf(a)
    zero = ad.add(ta, ad.scale(ta, -1.0))
    assert np.all(zero.values == 0.0)
    r = ad.relu(tape.leaf(np.array([-1.5])))
    assert r.values[0] == 0.0
    same = ad.scale(ta, 1.0)
    assert np.array_equal(same.values, a)


def test_frobenius_sq_values(rng):
    tape = ad.Tape()
    assert ad.frobenius_sq(tape.leaf(np.zeros((3, 3)))).item() == 0.0
    assert ad.frobenius_sq(tape.leaf(np.array([[3.0, 4.0]]))).item() == 25.0
    a = np.random.default_rng(7).normal(size=(7, 5))
    brute = sum(a[i, j] ** 2 for i in range(7) for j in range(5))
    assert ad.frobenius_sq(tape.leaf(a)).item() == pytest.approx(brute, rel=1e-15)


def test_backward_requires_scalar():
    tape = ad.Tape()
    a = tape.leaf(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(tape, ad.square(a))


def test_backward_frobenius_analytic(rng):
    a = rng.normal(size=(4, 3))
    tape = ad.Tape()
    ta = tape.leaf(a, requires_grad=True)
    store = ad.backward(tape, ad.frobenius_sq(ta))
    assert np.allclose(store[ta], 2.0 * a, atol=1e-14)


def test_backward_soft_threshold_sign_pattern(rng):
    y = rng.normal(size=50) * 5.0
    y[np.abs(y) < 1.5] += 3.0  # keep everything above the threshold
    tape = ad.Tape()
    ty = tape.leaf(y, requires_grad=True)
    out = ad.soft_threshold(ty, 1.0)
    store = ad.backward(tape, ad.frobenius_sq(out))
    assert np.allclose(store[ty], 2.0 * out.values, atol=1e-14)

    # sum of |T(y)| with every |y| above the threshold: gradient is the sign
    tape2 = ad.Tape()
    ty2 = tape2.leaf(y, requires_grad=True)
    store2 = ad.backward(tape2, ad.abs_sum(ad.soft_threshold(ty2, 1.0)))
    assert np.array_equal(store2[ty2], np.sign(y))


def test_gradient_store_zero_for_unreached(rng):
    tape = ad.Tape()
    a = tape.leaf(rng.normal(size=(3, 3)), requires_grad=True)
    b = tape.leaf(rng.normal(size=(3, 3)), requires_grad=True)
    store = ad.backward(tape, ad.frobenius_sq(a))
    assert store.get(b) is None
    assert np.array_equal(store[b], np.zeros((3, 3)))


def test_determinism_bitwise(rng):
    a = rng.normal(size=(6, 4))
    b = rng.normal(size=(4, 6))

    def run():
        tape = ad.Tape()
        ta = tape.leaf(a, requires_grad=True)
        tb = tape.leaf(b, requires_grad=True)
        loss = ad.frobenius_sq(ad.soft_threshold(ad.matmul(ta, tb), 0.3))
        store = ad.backward(tape, loss)
        return loss.item(), store[ta].copy(), store[tb].copy()

    l1, ga1, gb1 = run()
    l2, ga2, gb2 = run()
    assert l1 == l2
    assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


def test_leaf_rejects_nonfinite():
    tape = ad.Tape()
    with pytest.raises(DomainError):
        tape.leaf(np.array([np.nan]))


def test_shape_validation():
    with pytest.raises(DimensionError):
        ad.check_shape(())
    with pytest.raises(DimensionError):
        ad.check_shape((3, 0))
    with pytest.raises(DimensionError):
        ad.check_shape((1, 1, 1, 1, 1))


# ---------------------------------------------------------------------------
# finite-difference gradient checks, three shapes per primitive


SHAPES_2D = [(3, 4), (5, 2), (6, 6)]


@pytest.mark.parametrize("shape", SHAPES_2D)
def test_fd_matmul(rng, shape):
    m, n = shape
    a = rng.normal(size=(m, n))
    b = rng.normal(size=(n, m + 1))
    check_gradients(lambda t, lv: ad.frobenius_sq(ad.matmul(lv[0], lv[1])), [a, b])


@pytest.mark.parametrize("shape", [(12,), (4, 5), (2, 3, 4)])
def test_fd_soft_threshold(rng, shape):
    y = rng.normal(size=shape)
    y = np.where(np.abs(np.abs(y) - 0.5) < 0.05, y + 0.2, y)  # stay off the kink
    z = np.array([0.5])

    def build(t, lv):
        return ad.frobenius_sq(ad.soft_threshold(lv[0], lv[1]))

    check_gradients(build, [y, z])


@pytest.mark.parametrize("n,r", [(8, 2), (10, 3), (14, 4)])
def test_fd_gram_solve(rng, n, r):
    m = rng.normal(size=(n, r)) + 0.1
    g = rng.normal(size=(n, r))
    check_gradients(lambda t, lv: ad.frobenius_sq(ad.gram_solve(lv[0], lv[1])), [m, g], tol=1e-4)


@pytest.mark.parametrize("cin,cout,hw", [(1, 1, 4), (2, 3, 5), (4, 2, 6)])
def test_fd_conv2d(rng, cin, cout, hw):
    x = rng.normal(size=(cin, hw, hw))
    k = rng.normal(size=(cout, cin, 3, 3)) * 0.5
    b = rng.normal(size=cout)

    def build(t, lv):
        return ad.frobenius_sq(ad.conv2d(lv[0], lv[1], lv[2]))

    check_gradients(build, [x, k, b])


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "square", "relu"])
@pytest.mark.parametrize("shape", [(7,), (3, 4), (2, 2, 3)])
def test_fd_elementwise(rng, kind, shape):
    a = rng.normal(size=shape)
    b = rng.normal(size=shape)
    if kind == "relu":
        a = a + np.sign(a) * 0.1  # keep away from the kink

    ops = {
        "add": lambda t, lv: ad.frobenius_sq(ad.mul(ad.add(lv[0], lv[1]), lv[1])),
        "sub": lambda t, lv: ad.frobenius_sq(ad.mul(ad.sub(lv[0], lv[1]), lv[0])),
        "mul": lambda t, lv: ad.frobenius_sq(ad.mul(lv[0], lv[1])),
        "square": lambda t, lv: ad.frobenius_sq(ad.square(lv[0])),
        "relu": lambda t, lv: ad.frobenius_sq(ad.relu(lv[0])),
    }
    arrays = [a] if kind in ("square", "relu") else [a, b]
    check_gradients(ops[kind], arrays)


@pytest.mark.parametrize("shape", SHAPES_2D)
def test_fd_scale_by_tensor(rng, shape):
    a = rng.normal(size=shape)
    s = np.array([0.7])
    check_gradients(lambda t, lv: ad.frobenius_sq(ad.scale(lv[0], lv[1])), [a, s])


@pytest.mark.parametrize("shape", SHAPES_2D)
def test_fd_transpose_abs_sum_softplus(rng, shape):
    a = rng.normal(size=shape)
    a = a + np.sign(a) * 0.1

    def build(t, lv):
        return ad.add(ad.abs_sum(ad.transpose(lv[0])), ad.softplus(ad.frobenius_sq(lv[0])))

    check_gradients(build, [a])


@pytest.mark.parametrize("n", [3, 5, 8])
def test_fd_solve(rng, n):
    a = rng.normal(size=(n, n)) + 3.0 * np.eye(n)
    b = rng.normal(size=(n, 2))
    check_gradients(lambda t, lv: ad.frobenius_sq(ad.solve(lv[0], lv[1])), [a, b], tol=1e-4)


def test_fd_stack_take_channel(rng):
    a = rng.normal(size=(4, 4))
    b = rng.normal(size=(4, 4))

    def build(t, lv):
        s = ad.stack_channels([lv[0], lv[1]])
        return ad.frobenius_sq(ad.take_channel(s, 1))

    check_gradients(build, [a, b])


@pytest.mark.parametrize("mode", ["orthogonal", "general"])
def test_fd_psi_ops(rng, mode):
    n = 6
    if mode == "orthogonal":
        mat, _ = np.linalg.qr(rng.normal(size=(n, n)))
    else:
        mat = rng.normal(size=(n, n)) + 3.0 * np.eye(n)
    op = PsiOperator(mat)
    b = rng.normal(size=(n, 4))

    def build(t, lv):
        return ad.frobenius_sq(ad.add(psi_apply(op, lv[0]), psi_apply_inv(op, lv[0])))

    check_gradients(build, [b])


def test_fd_composite_graph(rng):
    # matmul -> soft_threshold -> frobenius_sq, all leaves checked
    a = rng.normal(size=(5, 3))
    b = rng.normal(size=(3, 4))
    z = np.array([0.4])

    def build(t, lv):
        return ad.frobenius_sq(ad.soft_threshold(ad.matmul(lv[0], lv[1]), lv[2]))

    check_gradients(build, [a, b, z])


def test_psi_solve_matches_solve(rng):
    n = 8
    mat = rng.normal(size=(n, n)) + 4.0 * np.eye(n)
    op = PsiOperator(mat)
    b = rng.normal(size=(n, n))
    assert np.allclose(mat @ op.apply_inv(b), b, atol=1e-10)
    assert op.mode == "general"
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    oq = PsiOperator(q)
    assert oq.mode == "orthogonal"
    assert np.allclose(oq.apply_inv(b), q.T @ b)
    ident = PsiOperator(np.eye(n))
    assert ident.mode == "identity"
    t = ad.Tape().leaf(b)
    assert psi_apply(ident, t) is t
