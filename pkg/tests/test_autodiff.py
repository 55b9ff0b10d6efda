import tracemalloc

import numpy as np
import pytest

from autodiff import (
    AdjointPair, MMDLoss, apply_back, expect, expect_grad, faithful_grad, fidelity_grad,
    mat_back, mmd_expect, mmd_grad, operator_fidelity, rbf_kernel,
)
from blocks import (
    S, Z, add, apply, chain, control, dagger, dispatch, matblock, measure_node, mat, nparameters,
    parameters, put, scale, shift, time_evolve, Rx, Rz, X,
)
from circuits import general_u4, heisenberg, rand_unitary, variational_circuit
from errors import ShapeError, UnsupportedError, ValidationError
from matrices import DiagonalMat, OuterProductMat, to_dense
from register import Register, count_allocations, rand_state, zero_state


def _rx_circuit(theta):
    return chain(1, put(1, 1, Rx(theta)))


def _finite_diff(loss, circuit, eps):
    theta = parameters(circuit)
    out = np.zeros(theta.size)
    for k in range(theta.size):
        step = np.zeros(theta.size)
        step[k] = eps
        dispatch(circuit, theta + step)
        plus = loss()
        dispatch(circuit, theta - step)
        minus = loss()
        out[k] = (plus - minus) / (2 * eps)
    dispatch(circuit, theta)
    return out


def test_expect_simple_values():
    assert expect(Z, zero_state(1))[0] == pytest.approx(1)
    value = expect(put(1, 1, Z), (zero_state(1), _rx_circuit(0.4)))[0]
    assert value == pytest.approx(0.921061, abs=1e-6)
    assert expect(heisenberg(2), zero_state(2))[0] == pytest.approx(1)


def test_expect_is_per_batch():
    reg = zero_state(1, nbatch=3)
    reg.state[:, 1] = [0, 1]
    values = expect(Z, reg)
    assert values.tolist() == pytest.approx([1, -1, 1])


def test_expect_rejects_non_hermitian_observables():
    with pytest.raises(ValidationError):
        expect(put(1, 1, S), zero_state(1))


def test_rx_gradient():
    result = expect_grad(put(1, 1, Z), (zero_state(1), _rx_circuit(0.4)))
    assert result.param_grads[0] == pytest.approx(-np.sin(0.4), abs=1e-10)
    assert result.param_grads[0] == pytest.approx(-0.389418, abs=1e-6)
    assert result.value[0] == pytest.approx(np.cos(0.4))


def test_apply_back_uncomputes(rng):
    circuit = dispatch(variational_circuit(3, 2), "random", rng=rng)
    reg = rand_state(3, rng=rng)
    psi = reg.clone()
    apply(psi, circuit)
    pair = AdjointPair(psi, Register(np.zeros_like(psi.state), 3))
    grads = apply_back(pair, circuit)
    assert np.allclose(psi.state, reg.state, atol=1e-10)
    assert np.array_equal(grads, np.zeros(nparameters(circuit)))


def test_mat_back_shift_at_zero():
    g = mat_back(shift(0.0), DiagonalMat([0, 1]))
    assert g[0] == pytest.approx(0)


def test_mat_back_rotation_matches_finite_differences(rng):
    eps = 1e-5
    for _ in range(100):
        theta = rng.uniform(-np.pi, np.pi)
        ubar = OuterProductMat(rng.standard_normal(2) + 1j * rng.standard_normal(2),
                               rng.standard_normal(2) + 1j * rng.standard_normal(2))
        dense_bar = to_dense(ubar)

        def loss(t):
            return 2 * np.vdot(dense_bar, to_dense(mat(Rz(t)))).real

        fd = (loss(theta + eps) - loss(theta - eps)) / (2 * eps)
        assert mat_back(Rz(theta), ubar)[0] == pytest.approx(fd, abs=1e-7)


def test_zero_adjoint_gives_zero_gradient():
    ubar = OuterProductMat(np.zeros(2), np.zeros(2))
    assert mat_back(Rx(0.3), ubar)[0] == 0


@pytest.mark.parametrize("seed", range(20))
def test_reverse_mode_matches_shift_rule_and_finite_differences(seed):
    circuit = dispatch(variational_circuit(4, 3), "random", seed=seed)
    h = heisenberg(4)
    reg = zero_state(4)
    reverse = expect_grad(h, (reg, circuit)).param_grads
    shifted = faithful_grad(h, (reg, circuit))
    assert np.max(np.abs(reverse - shifted)) <= 1e-8

    fd = _finite_diff(lambda: expect(h, (reg, circuit))[0], circuit, 1e-4)
    assert np.max(np.abs(reverse - fd)) <= 1e-6


def test_reverse_mode_sums_over_batches(rng):
    circuit = dispatch(variational_circuit(3, 1), "random", rng=rng)
    obs = put(3, 2, Z)
    reg = rand_state(3, nbatch=2, rng=rng)
    total = expect_grad(obs, (reg, circuit)).param_grads
    parts = [
        expect_grad(obs, (Register(reg.state[:, [b]].copy(), 3), circuit)).param_grads
        for b in range(2)
    ]
    assert np.allclose(total, parts[0] + parts[1])


def test_shared_node_gradients_add_up():
    r = Rx(0.7)
    circuit = chain(2, put(2, 1, r), put(2, 2, r))
    obs = put(2, 1, Z) + put(2, 2, Z)
    result = expect_grad(obs, (zero_state(2), circuit))
    assert result.param_grads.shape == (1,)
    assert result.param_grads[0] == pytest.approx(-2 * np.sin(0.7))


def test_controlled_and_shift_gates_differentiate(rng):
    circuit = chain(
        3,
        put(3, 1, Rx(0.4)), put(3, 2, Rx(1.2)),
        control(3, (1, -2), 3, Rx(0.9)),
        put(3, 3, shift(0.3)),
        control(3, 3, 1, shift(1.1)),
        put(3, (2, 3), chain(2, put(2, 2, Rz(0.2)), control(2, 2, 1, Rx(0.5)))),
    )
    obs = put(3, 1, Z) + 0.5 * put(3, 3, Z) + put(3, 2, Z)
    reg = rand_state(3, rng=rng)
    reverse = expect_grad(obs, (reg, circuit)).param_grads
    fd = _finite_diff(lambda: expect(obs, (reg, circuit))[0], circuit, 1e-5)
    assert np.allclose(reverse, fd, atol=1e-7)


def test_time_evolution_gradient(rng):
    circuit = chain(2, put(2, 1, Rx(0.3)), time_evolve(heisenberg(2), 0.4), put(2, 2, Rx(0.8)))
    obs = put(2, 1, Z)
    reg = rand_state(2, rng=rng)
    reverse = expect_grad(obs, (reg, circuit)).param_grads
    fd = _finite_diff(lambda: expect(obs, (reg, circuit))[0], circuit, 1e-5)
    assert np.allclose(reverse, fd, atol=1e-7)


@pytest.mark.parametrize("depth", [10, 100, 1000])
def test_allocations_do_not_grow_with_depth(depth):
    h = heisenberg(3)
    counts = []
    for d in (depth, 2 * depth):
        circuit = dispatch(variational_circuit(3, d), "random", seed=1)
        with count_allocations() as counter:
            expect_grad(h, (zero_state(3), circuit))
        counts.append(counter.count)
    assert counts[0] == counts[1]


def _rx_ladder(n, depth):
    """One Rx and one CNOT per layer."""
    rng = np.random.default_rng(depth)
    layers = []
    for k in range(depth):
        q = k % n + 1
        layers.append(put(n, q, Rx(float(rng.uniform(-np.pi, np.pi)))))
        layers.append(control(n, q, q % n + 1, X))
    return chain(n, layers)


def _traced_peak(n, depth):
    reg = rand_state(n, seed=depth)
    circuit = _rx_ladder(n, depth)
    obs = put(n, 1, Z)
    tracemalloc.start()
    try:
        expect_grad(obs, (reg, circuit))
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak, reg.state.nbytes


def _peak_buffers(n, depth):
    """Peak traced memory of one reverse-mode gradient, in state buffers.

    A 2-qubit run of the same depth is subtracted, which removes the
    per-parameter bookkeeping that every register size shares.
    """
    peak, nbytes = _traced_peak(n, depth)
    baseline, _ = _traced_peak(2, depth)
    return (peak - baseline) / nbytes


@pytest.mark.parametrize("depth", [10, 100, 1000])
def test_reverse_sweep_stays_within_four_buffers(depth):
    assert _peak_buffers(16, depth) <= 4.0


@pytest.mark.slow
def test_reverse_sweep_memory_at_depth_ten_thousand():
    assert _peak_buffers(10, 10_000) <= 4.0


def test_unsupported_circuits():
    reg = zero_state(1)
    with pytest.raises(UnsupportedError):
        expect_grad(Z, (reg, chain(1, put(1, 1, Rx(0.1)), measure_node(1))))
    with pytest.raises(UnsupportedError):
        expect_grad(Z, (reg, chain(1, scale(2, Rx(0.1)))))
    with pytest.raises(UnsupportedError):
        expect_grad(Z, (reg, chain(1, dagger(Rx(0.1)))))
    with pytest.raises(UnsupportedError):
        faithful_grad(Z, (reg, chain(1, put(1, 1, shift(0.1)))))
    with pytest.raises(UnsupportedError):
        r = Rx(0.1)
        faithful_grad(Z, (reg, chain(1, r, r)))


def test_shift_rule_analytic_values():
    grad = faithful_grad(put(1, 1, Z), (zero_state(1), _rx_circuit(np.pi / 2)))
    assert grad[0] == pytest.approx(-1)
    grad = faithful_grad(put(1, 1, Z), (zero_state(1), _rx_circuit(0.0)))
    assert grad[0] == pytest.approx(0, abs=1e-12)


def test_sampled_shift_rule_is_close_to_exact(rng):
    circuit = dispatch(variational_circuit(3, 1), "random", rng=rng)
    obs = put(3, 1, Z)
    reg = zero_state(3)
    exact = faithful_grad(obs, (reg, circuit))
    sampled = faithful_grad(obs, (reg, circuit), nshots=20_000, seed=9)
    # one ±1 estimate per shift, so σ ≤ sqrt(0.5 / nshots) ≈ 0.005
    assert np.max(np.abs(sampled - exact)) <= 0.03


def test_sampled_expect_on_sums(rng):
    circuit = dispatch(variational_circuit(2, 1), "random", rng=rng)
    reg = zero_state(2)
    exact = faithful_grad(heisenberg(2), (reg, circuit))
    sampled = faithful_grad(heisenberg(2), (reg, circuit), nshots=20_000, seed=2)
    assert np.max(np.abs(sampled - exact)) <= 0.06


def test_rbf_kernel():
    k = rbf_kernel(2.0)
    assert k(np.array(0), np.array(0)) == pytest.approx(1)
    assert k(np.array(0), np.array(2)) == pytest.approx(np.exp(-0.5))
    mixed = rbf_kernel(0.5, 2.0)
    assert mixed(np.array(0), np.array(1)) == pytest.approx((np.exp(-2) + np.exp(-0.125)) / 2)


def test_mmd_is_zero_at_the_target():
    circuit = dispatch(variational_circuit(2, 1), "random", seed=4)
    reg = zero_state(2)
    psi = reg.clone()
    apply(psi, circuit)
    target = np.abs(psi.state[:, 0]) ** 2
    loss = MMDLoss(target / target.sum())
    assert mmd_expect(loss, (reg, circuit))[0] == pytest.approx(0, abs=1e-12)


def test_mmd_gradients_agree(rng):
    circuit = dispatch(variational_circuit(3, 2), "random", rng=rng)
    target = rng.uniform(size=8)
    loss = MMDLoss(target / target.sum())
    reg = zero_state(3)
    reverse = mmd_grad(loss, (reg, circuit), mode="reverse")
    shifted = mmd_grad(loss, (reg, circuit), mode="shift")
    assert np.max(np.abs(reverse - shifted)) <= 1e-6
    fd = _finite_diff(lambda: mmd_expect(loss, (reg, circuit))[0], circuit, 1e-5)
    assert np.max(np.abs(reverse - fd)) <= 1e-6


def test_mmd_validation():
    with pytest.raises(ValidationError):
        MMDLoss([0.5, 0.6])
    loss = MMDLoss(np.full(4, 0.25))
    with pytest.raises(ShapeError):
        mmd_expect(loss, zero_state(3))
    with pytest.raises(ValidationError):
        mmd_grad(loss, (zero_state(2), variational_circuit(2, 1)), mode="sideways")


def test_operator_fidelity_ignores_global_phase(rng):
    u = rand_unitary(4, rng=rng)
    assert operator_fidelity(u, np.exp(0.7j) * u) == pytest.approx(1)
    assert operator_fidelity(matblock(u), u) == pytest.approx(1)


def test_fidelity_gradient_matches_finite_differences(rng):
    target = rand_unitary(4, rng=rng)
    ansatz = dispatch(general_u4(), "random", rng=rng)
    fid, grads = fidelity_grad(target, ansatz)
    assert fid == pytest.approx(operator_fidelity(target, ansatz))
    fd = _finite_diff(lambda: operator_fidelity(target, ansatz), ansatz, 1e-5)
    assert np.allclose(grads, fd, atol=1e-7)


def test_fidelity_gradient_shape_check():
    with pytest.raises(ShapeError):
        fidelity_grad(np.eye(8), general_u4())


def test_observable_sum_with_scale():
    obs = add(put(2, 1, Z), scale(0.5, put(2, 2, Z)))
    reg = zero_state(2)
    assert expect(obs, reg)[0] == pytest.approx(1.5)
