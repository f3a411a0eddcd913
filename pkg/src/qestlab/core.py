"""Finite-dimensional operator algebra: states, POVMs, instruments, channels.

Operators are plain complex ``numpy`` arrays. The constructors below repair
round-off (symmetrize, clip tiny negative eigenvalues, renormalize) and only
reject inputs whose violation exceeds ``REJECT_TOL``. Every returned array is
marked read-only so values can be shared freely between workers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidOperator, ZeroProbabilityBranch

REJECT_TOL = 1e-8
PSD_TOL = 1e-10
PROB_CLIP = 1e-12
NULL_PROB = 1e-14

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = (SX, SY, SZ)

for _m in (I2, SX, SY, SZ):
    _m.flags.writeable = False


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.flags.writeable = False
    return a


def _square(a) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    return a


def hermitian(a) -> np.ndarray:
    """Return the Hermitian part of ``a`` after checking it is already close."""
    a = _square(a)
    dev = np.abs(a - a.conj().T).max(initial=0.0)
    if dev > REJECT_TOL:
        raise InvalidOperator(f"matrix is not Hermitian (deviation {dev:.3g})")
    return _frozen(0.5 * (a + a.conj().T))


def density(a) -> np.ndarray:
    """Validate and repair a density matrix.

    Eigenvalues above ``-REJECT_TOL`` are clipped at zero and the result is
    renormalized to unit trace.
    """
    h = np.asarray(hermitian(a))
    tr = np.trace(h).real
    if abs(tr - 1.0) > REJECT_TOL:
        raise InvalidOperator(f"density matrix trace is {tr!r}, expected 1")
    w, v = np.linalg.eigh(h)
    if w[0] < -REJECT_TOL:
        raise InvalidOperator(f"density matrix has eigenvalue {w[0]:.3g}")
    if w[0] < 0:
        w = np.clip(w, 0.0, None)
        h = (v * w) @ v.conj().T
        h = 0.5 * (h + h.conj().T)
    return _frozen(h / np.trace(h).real)


def pure(ket) -> np.ndarray:
    ket = np.asarray(ket, dtype=complex).ravel()
    ket = ket / np.linalg.norm(ket)
    return density(np.outer(ket, ket.conj()))


def maximally_mixed(dim: int) -> np.ndarray:
    return _frozen(np.eye(dim, dtype=complex) / dim)


def bloch_state(r) -> np.ndarray:
    """Qubit state ½(I + r·σ)."""
    r = np.asarray(r, dtype=float)
    return density(0.5 * (I2 + r[0] * SX + r[1] * SY + r[2] * SZ))


def bloch_vector(rho) -> np.ndarray:
    rho = np.asarray(rho)
    return np.array([np.trace(rho @ s).real for s in PAULIS])


def min_eigenvalue(a) -> float:
    return float(np.linalg.eigvalsh(np.asarray(a)).min())


def trace_norm(a) -> float:
    return float(np.abs(np.linalg.eigvalsh(np.asarray(a))).sum())


def tensor(a, b) -> np.ndarray:
    a, b = _square(a), _square(b)
    return _frozen(np.kron(a, b))


def tensor_all(ops: Sequence) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, _square(op))
    return _frozen(out)


def partial_trace(op, dims: Sequence[int], keep) -> np.ndarray:
    """Trace out every subsystem not listed in ``keep``.

    ``dims`` gives the subsystem dimensions in tensor order; ``keep`` is an
    index or collection of indices. Kept subsystems stay in their original
    order.
    """
    op = _square(op)
    dims = [int(d) for d in dims]
    if int(np.prod(dims)) != op.shape[0]:
        raise DimensionMismatch(f"dims {dims} do not factor a {op.shape[0]}-dim operator")
    keep = sorted({keep} if isinstance(keep, (int, np.integer)) else set(keep))
    n = len(dims)
    if any(k < 0 or k >= n for k in keep):
        raise DimensionMismatch(f"keep indices {keep} out of range for {n} subsystems")
    t = op.reshape(dims + dims)
    # trace the highest index first so remaining axis numbers stay valid
    cur = n
    for k in reversed(range(n)):
        if k in keep:
            continue
        t = np.trace(t, axis1=k, axis2=k + cur)
        cur -= 1
    d = int(np.prod([dims[k] for k in keep])) if keep else 1
    return _frozen(t.reshape(d, d))


@dataclass(frozen=True)
class Povm:
    """Finite-outcome POVM. ``labels[k]`` names ``elements[k]``."""

    elements: tuple
    labels: tuple

    def __post_init__(self):
        if len(self.elements) == 0 or len(self.elements) != len(self.labels):
            raise InvalidOperator("POVM needs one label per element and at least one element")
        if len(set(self.labels)) != len(self.labels):
            raise InvalidOperator("POVM labels must be distinct")
        els = tuple(hermitian(e) for e in self.elements)
        dim = els[0].shape[0]
        if any(e.shape != (dim, dim) for e in els):
            raise DimensionMismatch("POVM elements have differing dimensions")
        for e in els:
            lo = min_eigenvalue(e)
            if lo < -REJECT_TOL:
                raise InvalidOperator(f"POVM element has eigenvalue {lo:.3g}")
        dev = np.abs(sum(els) - np.eye(dim)).max()
        if dev > REJECT_TOL:
            raise InvalidOperator(f"POVM elements sum to identity only within {dev:.3g}")
        object.__setattr__(self, "elements", els)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def dim(self) -> int:
        return self.elements[0].shape[0]

    def __len__(self):
        return len(self.elements)

    def index(self, label) -> int:
        return self.labels.index(label)

    @classmethod
    def from_elements(cls, elements, labels=None) -> "Povm":
        elements = tuple(elements)
        if labels is None:
            labels = tuple(range(len(elements)))
        return cls(elements, tuple(labels))


def projective_povm(basis, labels=None) -> Povm:
    """POVM of rank-one projectors onto the columns of ``basis``."""
    basis = np.asarray(basis, dtype=complex)
    els = [np.outer(basis[:, k], basis[:, k].conj()) for k in range(basis.shape[1])]
    return Povm.from_elements(els, labels)


def axis_povm(axis, labels=(0, 1)) -> Povm:
    """Qubit projective measurement along the Bloch unit vector ``axis``; label 0 is +1."""
    n = np.asarray(axis, dtype=float)
    n = n / np.linalg.norm(n)
    ns = n[0] * SX + n[1] * SY + n[2] * SZ
    return Povm.from_elements([0.5 * (I2 + ns), 0.5 * (I2 - ns)], labels)


def pauli_povm() -> Povm:
    """Six-outcome qubit POVM: each Pauli axis projector pair with weight 1/3.

    Labels are ``0..5`` in the order x+, x-, y+, y-, z+, z-.
    """
    els = []
    for s in PAULIS:
        els.append((I2 + s) / 6.0)
        els.append((I2 - s) / 6.0)
    return Povm.from_elements(els)


def trivial_povm(dim: int) -> Povm:
    return Povm.from_elements([np.eye(dim)], (0,))


def tensor_povm(a: Povm, b: Povm) -> Povm:
    els, labels = [], []
    for la, ea in zip(a.labels, a.elements):
        for lb, eb in zip(b.labels, b.elements):
            els.append(np.kron(ea, eb))
            labels.append((la, lb))
    return Povm(tuple(els), tuple(labels))


def random_density(rng: np.random.Generator, dim: int, rank: int | None = None) -> np.ndarray:
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return density(rho / np.trace(rho).real)


def random_povm(rng: np.random.Generator, dim: int, n_outcomes: int) -> Povm:
    """Random POVM from Gaussian PSD seeds, normalized by S^{-1/2} on both sides."""
    seeds = []
    for _ in range(n_outcomes):
        g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        seeds.append(g @ g.conj().T)
    total = sum(seeds)
    w, v = np.linalg.eigh(total)
    s = (v / np.sqrt(w)) @ v.conj().T
    return Povm.from_elements([s @ e @ s for e in seeds])


def outcome_distribution(rho, m: Povm) -> np.ndarray:
    """Outcome probabilities tr(ρ M_ω), clipped at zero and renormalized."""
    rho = _square(rho)
    if rho.shape[0] != m.dim:
        raise DimensionMismatch(f"state dim {rho.shape[0]} != POVM dim {m.dim}")
    p = np.array([np.trace(rho @ e).real for e in m.elements])
    p[np.abs(p) < PROB_CLIP] = 0.0
    p = np.clip(p, 0.0, None)
    return p / p.sum()


@dataclass(frozen=True)
class KrausChannel:
    kraus_ops: tuple
    input_dim: int
    output_dim: int

    def __post_init__(self):
        ops = tuple(_frozen(k) for k in self.kraus_ops)
        if not ops:
            raise InvalidOperator("channel needs at least one Kraus operator")
        for k in ops:
            if k.shape != (self.output_dim, self.input_dim):
                raise DimensionMismatch(
                    f"Kraus shape {k.shape} != ({self.output_dim}, {self.input_dim})"
                )
        dev = np.abs(sum(k.conj().T @ k for k in ops) - np.eye(self.input_dim)).max()
        if dev > REJECT_TOL:
            raise InvalidOperator(f"channel is not trace preserving (deviation {dev:.3g})")
        object.__setattr__(self, "kraus_ops", ops)

    @classmethod
    def from_kraus(cls, ops) -> "KrausChannel":
        ops = [np.asarray(k, dtype=complex) for k in ops]
        dout, din = ops[0].shape
        return cls(tuple(ops), din, dout)

    def apply(self, rho) -> np.ndarray:
        rho = np.asarray(rho)
        return sum(k @ rho @ k.conj().T for k in self.kraus_ops)


def choi(ch: KrausChannel) -> np.ndarray:
    """Unnormalized Choi matrix Σ_jk |j⟩⟨k| ⊗ Λ(|j⟩⟨k|) (input factor first)."""
    d = ch.input_dim
    out = np.zeros((d * ch.output_dim, d * ch.output_dim), dtype=complex)
    for j in range(d):
        for k in range(d):
            e = np.zeros((d, d), dtype=complex)
            e[j, k] = 1.0
            out += np.kron(e, ch.apply(e))
    return hermitian(out)


def choi_to_kraus(c, input_dim: int, tol: float = PSD_TOL) -> list:
    """Kraus operators of the CP map whose Choi matrix (same convention as :func:`choi`) is ``c``."""
    c = np.asarray(hermitian(c))
    dout = c.shape[0] // input_dim
    w, v = np.linalg.eigh(c)
    if w[0] < -REJECT_TOL:
        raise InvalidOperator(f"Choi matrix has eigenvalue {w[0]:.3g}; map is not CP")
    ops = []
    for lam, vec in zip(w, v.T):
        if lam > tol * max(1.0, w[-1]):
            ops.append(np.sqrt(lam) * vec.reshape(input_dim, dout).T)
    return ops


def apply_choi(c, rho, input_dim: int) -> np.ndarray:
    """Apply the linear map with Choi matrix ``c`` to ``rho`` (works for non-CP maps)."""
    c = np.asarray(c)
    dout = c.shape[0] // input_dim
    t = c.reshape(input_dim, dout, input_dim, dout)
    return np.einsum("jakb,jk->ab", t, np.asarray(rho))


def depolarizing_channel(p: float, dim: int = 2) -> KrausChannel:
    """Λ(ρ) = (1-p)ρ + p·I/d in Kraus form (qubit only for the Pauli construction)."""
    if dim != 2:
        raise DimensionMismatch("depolarizing Kraus form is implemented for qubits")
    a = 1.0 - 3.0 * p / 4.0
    if a < -REJECT_TOL or p < -REJECT_TOL:
        raise InvalidOperator(f"depolarizing parameter {p} does not give a CP map")
    ops = [np.sqrt(max(a, 0.0)) * I2] + [np.sqrt(max(p, 0.0) / 4.0) * s for s in PAULIS]
    return KrausChannel.from_kraus(ops)


@dataclass(frozen=True)
class Instrument:
    """CP-map-valued measure in Kraus form: ``branches[k]`` is a list of Kraus ops for ``labels[k]``."""

    branches: tuple
    labels: tuple

    def __post_init__(self):
        if len(self.branches) == 0 or len(self.branches) != len(self.labels):
            raise InvalidOperator("instrument needs one label per branch")
        if len(set(self.labels)) != len(self.labels):
            raise InvalidOperator("instrument labels must be distinct")
        branches = tuple(tuple(_frozen(k) for k in b) for b in self.branches)
        din = branches[0][0].shape[1]
        dout = branches[0][0].shape[0]
        for b in branches:
            for k in b:
                if k.shape != (dout, din):
                    raise DimensionMismatch("instrument Kraus operators have mixed shapes")
        dev = np.abs(sum(k.conj().T @ k for b in branches for k in b) - np.eye(din)).max()
        if dev > REJECT_TOL:
            raise InvalidOperator(f"instrument is not trace preserving (deviation {dev:.3g})")
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def input_dim(self) -> int:
        return self.branches[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.branches[0][0].shape[0]

    def index(self, label: Hashable) -> int:
        return self.labels.index(label)

    def apply_branch(self, k: int, x) -> np.ndarray:
        """Unnormalized branch map applied to any operator ``x`` (linear, no positivity needed)."""
        x = np.asarray(x)
        return sum(K @ x @ K.conj().T for K in self.branches[k])

    def apply_all(self, x) -> np.ndarray:
        return sum(self.apply_branch(k, x) for k in range(len(self.labels)))

    def induced_povm(self) -> Povm:
        return Povm.from_elements(
            [sum(K.conj().T @ K for K in b) for b in self.branches], self.labels
        )


def luders_instrument(m: Povm) -> Instrument:
    """Instrument with single Kraus operator √M_ω per outcome."""
    branches = []
    for e in m.elements:
        w, v = np.linalg.eigh(e)
        branches.append([(v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T])
    return Instrument(tuple(branches), m.labels)


def channel_instrument(ch: KrausChannel, label=0) -> Instrument:
    """Single-outcome instrument realizing a channel."""
    return Instrument((tuple(ch.kraus_ops),), (label,))


def tensor_instrument(a: Instrument, b: Instrument) -> Instrument:
    branches, labels = [], []
    for la, ba in zip(a.labels, a.branches):
        for lb, bb in zip(b.labels, b.branches):
            branches.append([np.kron(ka, kb) for ka in ba for kb in bb])
            labels.append((la, lb))
    return Instrument(tuple(branches), tuple(labels))


def posterior_state(rho, inst: Instrument, label) -> tuple[float, np.ndarray]:
    """Probability of ``label`` and the normalized a posteriori state.

    Raises :class:`ZeroProbabilityBranch` when the branch has probability
    below ``1e-14``.
    """
    rho = _square(rho)
    if rho.shape[0] != inst.input_dim:
        raise DimensionMismatch(f"state dim {rho.shape[0]} != instrument dim {inst.input_dim}")
    out = inst.apply_branch(inst.index(label), rho)
    p = float(np.trace(out).real)
    if p < NULL_PROB:
        raise ZeroProbabilityBranch(f"outcome {label!r} has probability {p:.3g}")
    return p, density(out / p)
