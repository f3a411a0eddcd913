import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qestlab import core
from qestlab.core import I2, SX, SZ
from qestlab.errors import DimensionMismatch, InvalidOperator, ZeroProbabilityBranch


def rho_z(t):
    return core.density(0.5 * (I2 + t * SZ))


def test_tensor_examples():
    assert np.abs(core.tensor(I2, I2) - np.eye(4)).max() < 1e-15
    assert np.abs(core.tensor(SZ, SZ) - np.diag([1, -1, -1, 1])).max() < 1e-15
    t = core.tensor(rho_z(0.3), rho_z(0.3))
    assert abs(np.trace(t) - 1) < 1e-12
    w = np.sort(np.linalg.eigvalsh(t))[::-1]
    assert np.abs(w - [0.4225, 0.2275, 0.2275, 0.1225]).max() < 1e-12


def test_tensor_rejects_non_square():
    with pytest.raises(DimensionMismatch):
        core.tensor(np.ones((2, 3)), I2)


def test_partial_trace_examples():
    rng = np.random.default_rng(0)
    rho, tau = core.random_density(rng, 2), core.random_density(rng, 3)
    assert np.abs(core.partial_trace(core.tensor(rho, tau), [2, 3], 0) - rho).max() < 1e-12
    assert np.abs(core.partial_trace(core.tensor(rho, tau), [2, 3], 1) - tau).max() < 1e-12
    assert np.abs(core.partial_trace(np.eye(4) / 4, [2, 2], 0) - I2 / 2).max() < 1e-12
    ghz = core.pure([1, 0, 0, 1])
    assert np.abs(core.partial_trace(ghz, [2, 2], [0]) - I2 / 2).max() < 1e-12


def test_partial_trace_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        core.partial_trace(np.eye(4), [2, 3], 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 3), st.integers(1, 3))
def test_partial_trace_round_trip(seed, da, db):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(da, da)) + 1j * rng.normal(size=(da, da))
    b = rng.normal(size=(db, db)) + 1j * rng.normal(size=(db, db))
    a, b = a + a.conj().T, b + b.conj().T
    out = core.partial_trace(np.kron(a, b), [da, db], 0)
    assert np.abs(out - np.trace(b) * a).max() < 1e-12


def test_outcome_distribution_examples():
    z, x = core.axis_povm([0, 0, 1]), core.axis_povm([1, 0, 0])
    assert np.abs(core.outcome_distribution(I2 / 2, z) - [0.5, 0.5]).max() < 1e-15
    assert np.abs(core.outcome_distribution(rho_z(0.3), z) - [0.65, 0.35]).max() < 1e-15
    assert np.abs(core.outcome_distribution(rho_z(0.3), x) - [0.5, 0.5]).max() < 1e-15


def test_outcome_distribution_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        core.outcome_distribution(np.eye(3) / 3, core.axis_povm([0, 0, 1]))


def test_density_repairs_small_violations_and_rejects_large():
    almost = np.diag([1 + 1e-10, -1e-10]).astype(complex)
    rho = core.density(almost)
    assert core.min_eigenvalue(rho) >= 0 and abs(np.trace(rho) - 1) < 1e-15
    with pytest.raises(InvalidOperator):
        core.density(np.diag([1.1, -0.1]))
    with pytest.raises(InvalidOperator):
        core.density(np.array([[0.5, 1], [0, 0.5]]))
    assert not core.density(I2 / 2).flags.writeable


def test_povm_validation():
    with pytest.raises(InvalidOperator):
        core.Povm.from_elements([I2 / 2, I2 / 3])
    with pytest.raises(InvalidOperator):
        core.Povm.from_elements([np.diag([1.5, 1]), np.diag([-0.5, 0])])
    with pytest.raises(InvalidOperator):
        core.Povm((I2 / 2, I2 / 2), (0, 0))


def test_generated_povms_resolve_identity():
    rng = np.random.default_rng(1)
    povms = [core.pauli_povm(), core.axis_povm([1, 2, 3])] + [
        core.random_povm(rng, d, k) for d in (2, 3, 4) for k in (2, 5)
    ]
    povms.append(core.tensor_povm(povms[0], povms[1]))
    for p in povms:
        assert np.abs(sum(p.elements) - np.eye(p.dim)).max() < 1e-10


def test_posterior_state_examples():
    z = core.luders_instrument(core.axis_povm([0, 0, 1], labels=("+", "-")))
    p, post = core.posterior_state(rho_z(0.3), z, "+")
    assert abs(p - 0.65) < 1e-12
    assert np.abs(post - np.diag([1, 0])).max() < 1e-12
    with pytest.raises(ZeroProbabilityBranch):
        core.posterior_state(core.pure([1, 0]), z, "-")
    dep = core.channel_instrument(core.depolarizing_channel(1.0))
    p, post = core.posterior_state(rho_z(0.3), dep, 0)
    assert abs(p - 1) < 1e-12 and np.abs(post - I2 / 2).max() < 1e-12


def test_posterior_average_reproduces_total_map():
    rng = np.random.default_rng(2)
    for _ in range(20):
        inst = core.luders_instrument(core.random_povm(rng, 3, 4))
        rho = core.random_density(rng, 3)
        avg = 0
        for lab in inst.labels:
            p, post = core.posterior_state(rho, inst, lab)
            avg = avg + p * post
        assert np.abs(avg - inst.apply_all(rho)).max() < 1e-12


def test_instrument_induced_povm_matches_branch_traces():
    rng = np.random.default_rng(3)
    inst = core.tensor_instrument(
        core.luders_instrument(core.random_povm(rng, 2, 3)),
        core.luders_instrument(core.pauli_povm()),
    )
    povm = inst.induced_povm()
    for _ in range(20):
        rho = core.random_density(rng, 4)
        direct = np.array([np.trace(inst.apply_branch(k, rho)).real for k in range(len(inst.labels))])
        assert np.abs(core.outcome_distribution(rho, povm) - direct).max() < 1e-12


def test_instrument_must_be_trace_preserving():
    with pytest.raises(InvalidOperator):
        core.Instrument(((I2 / 2,),), (0,))


def test_choi_examples():
    ident = core.KrausChannel.from_kraus([I2])
    w = np.sort(np.linalg.eigvalsh(core.choi(ident)))[::-1]
    assert np.abs(w - [2, 0, 0, 0]).max() < 1e-12
    assert np.abs(core.choi(core.depolarizing_channel(1.0)) - np.eye(4) / 2).max() < 1e-12
    w = np.sort(np.linalg.eigvalsh(core.choi(core.depolarizing_channel(0.5))))[::-1]
    assert np.abs(w - [1.25, 0.25, 0.25, 0.25]).max() < 1e-12


def test_choi_psd_and_kraus_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(10):
        inst = core.luders_instrument(core.random_povm(rng, 2, 3))
        ch = core.KrausChannel.from_kraus([k for b in inst.branches for k in b])
        c = core.choi(ch)
        assert core.min_eigenvalue(c) >= -1e-10
        back = core.KrausChannel.from_kraus(core.choi_to_kraus(c, 2))
        assert np.abs(core.choi(back) - c).max() < 1e-12
        rho = core.random_density(rng, 2)
        assert np.abs(core.apply_choi(c, rho, 2) - ch.apply(rho)).max() < 1e-12


def test_kraus_channel_must_be_trace_preserving():
    with pytest.raises(InvalidOperator):
        core.KrausChannel.from_kraus([SX / 2])
