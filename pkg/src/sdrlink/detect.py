"""MIMO detectors: linear (ZF/MMSE), exhaustive ML, and semidefinite
relaxations of the ML problem, either per snapshot (disjoint) or tied across
a whole LDPC codeword through fundamental-polytope constraints (joint).

The ML metric ||y - H x||^2 over x in {-1,+1}^(2Nt) is written through the
homogenized cost matrix

    C = [[H^T H,   -H^T y],
         [-y^T H,  ||y||^2]],       [x; t]^T C [x; t] = ||y - t*x... (t=+-1)

so that lifting X = [x; t][x; t]^T turns the metric into <C, X> and the
relaxation keeps X PSD with unit diagonal.  In the joint problem one PSD
block per snapshot shares a vector f of code-bit relaxations through the
mapping X_k[i, last] = 1 - 2 f_bit, and f is confined to the fundamental
polytope of the code (forbidden-set plus box inequalities).

Bit order: snapshot k carries code bits k*2Nt .. (k+1)*2Nt - 1, with even
offsets on real parts and odd offsets on imaginary parts (model module
conventions).
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from . import conic
from .ldpc import ParityCheckMatrix, generate_fs_constraints
from .model import RealSnapshot, bits_to_symbol_order, qpsk_hard_demap, symbol_to_bit_order

__all__ = [
    "DetectionResult",
    "build_cost_matrix",
    "selection_diag",
    "selection_mapping",
    "zf_detect",
    "mmse_detect",
    "ml_detect_exhaustive",
    "ml_soft_llr",
    "assemble_disjoint_sdr",
    "assemble_joint_sdr",
    "extract_rank1",
    "extract_direct",
    "extract_randomization",
    "llr_from_soft",
    "detect_codeword",
    "DisjointSdrDetector",
    "JointSdrDetector",
]

RANK1_CONFIDENCE_RATIO = 0.1  # second/first eigenvalue above this flags the block
ML_EXHAUSTIVE_MAX_BITS = 16


# ---------------------------------------------------------------------------
# cost matrix and selection matrices
# ---------------------------------------------------------------------------


def build_cost_matrix(snapshot: RealSnapshot) -> np.ndarray:
    """Homogenized quadratic cost: [x; 1]^T C [x; 1] = ||y - H x||^2."""
    H, y = snapshot.H, snapshot.y
    n = H.shape[1]
    C = np.empty((n + 1, n + 1))
    C[:n, :n] = H.T @ H
    C[:n, n] = -(H.T @ y)
    C[n, :n] = C[:n, n]
    C[n, n] = y @ y
    return C


def selection_diag(dim: int, i: int) -> np.ndarray:
    """A_i with tr(A_i X) = X[i, i]."""
    A = np.zeros((dim, dim))
    A[i, i] = 1.0
    return A


def selection_mapping(dim: int, i: int) -> np.ndarray:
    """B_i with tr(B_i X) = X[i, dim-1] (entries 1/2 on the symmetric pair)."""
    B = np.zeros((dim, dim))
    B[i, dim - 1] = B[dim - 1, i] = 0.5
    return B


# ---------------------------------------------------------------------------
# classical detectors
# ---------------------------------------------------------------------------


def zf_detect(snapshot: RealSnapshot):
    """Zero forcing.  Returns (hard +-1 vector, soft vector); raises on a
    rank-deficient channel."""
    H, y = snapshot.H, snapshot.y
    soft, _, rank, _ = np.linalg.lstsq(H, y, rcond=None)
    if rank < H.shape[1]:
        raise ValueError("channel matrix is rank deficient")
    hard = np.where(soft >= 0, 1.0, -1.0)
    return hard, soft


def mmse_detect(snapshot: RealSnapshot):
    """Linear MMSE: soft = (H^T H + sigma2 I)^{-1} H^T y."""
    H, y = snapshot.H, snapshot.y
    G = H.T @ H + snapshot.sigma2 * np.eye(H.shape[1])
    try:
        soft = np.linalg.solve(G, H.T @ y)
    except np.linalg.LinAlgError as exc:
        raise ValueError("MMSE normal matrix is singular") from exc
    hard = np.where(soft >= 0, 1.0, -1.0)
    return hard, soft


def _candidate_matrix(n_bits: int) -> np.ndarray:
    """All +-1 vectors of length n_bits, lexicographic with +1 first."""
    idx = np.arange(1 << n_bits, dtype=np.uint32)
    shifts = n_bits - 1 - np.arange(n_bits)
    bits = (idx[:, None] >> shifts[None, :]) & 1
    return 1.0 - 2.0 * bits


def ml_detect_exhaustive(snapshot: RealSnapshot) -> np.ndarray:
    """Exhaustive ML over {-1,+1}^(2Nt); ties resolved lexicographically with
    +1 preferred.  Guarded to 2Nt <= 16."""
    H, y = snapshot.H, snapshot.y
    n = H.shape[1]
    if n > ML_EXHAUSTIVE_MAX_BITS:
        raise ValueError(f"exhaustive ML limited to {ML_EXHAUSTIVE_MAX_BITS} bits")
    cand = _candidate_matrix(n)
    resid = y[None, :] - cand @ H.T
    costs = np.einsum("ij,ij->i", resid, resid)
    return cand[int(np.argmin(costs))].copy()


def ml_soft_llr(snapshot: RealSnapshot) -> np.ndarray:
    """Max-log bit LLRs: (min cost with bit=1 minus min cost with bit=0)
    over exhaustive candidates, scaled by 1/(2 sigma2).  Bit order output."""
    H, y = snapshot.H, snapshot.y
    n = H.shape[1]
    if n > ML_EXHAUSTIVE_MAX_BITS:
        raise ValueError(f"exhaustive ML limited to {ML_EXHAUSTIVE_MAX_BITS} bits")
    cand = np.asarray(_candidate_matrix(n))
    resid = y[None, :] - cand @ H.T
    costs = np.einsum("ij,ij->i", resid, resid)
    sigma2 = max(snapshot.sigma2, 1e-300)
    llr_sym = np.empty(n)
    for p in range(n):
        plus = cand[:, p] > 0  # symbol +1 <-> bit 0
        llr_sym[p] = (costs[~plus].min() - costs[plus].min()) / (2.0 * sigma2)
    return symbol_to_bit_order(llr_sym)


# ---------------------------------------------------------------------------
# SDR assembly
# ---------------------------------------------------------------------------


def assemble_disjoint_sdr(snapshots) -> list[conic.ConicProblem]:
    """One unit-diagonal SDP per snapshot."""
    out = []
    for snap in snapshots:
        n = snap.H.shape[1] + 1
        prob = conic.ConicProblem([n])
        prob.set_psd_objective(0, build_cost_matrix(snap))
        for i in range(n):
            prob.add_eq(1.0, psd={0: selection_diag(n, i)})
        out.append(prob)
    return out


def assemble_joint_sdr(
    snapshots, pcm: ParityCheckMatrix, degree_cap: int = 16
) -> conic.ConicProblem:
    """K lifted blocks + shared code-bit variables inside the fundamental
    polytope.  Requires K * 2Nt == pcm.n_vars."""
    snapshots = list(snapshots)
    if not snapshots:
        raise ValueError("need at least one snapshot")
    n_sym = snapshots[0].H.shape[1]
    if any(s.H.shape[1] != n_sym for s in snapshots):
        raise ValueError("snapshots must share the antenna count")
    K = len(snapshots)
    if K * n_sym != pcm.n_vars:
        raise ValueError(
            f"{K} snapshots x {n_sym} bits != codeword length {pcm.n_vars}"
        )
    dim = n_sym + 1
    eq = []
    for k in range(K):
        for i in range(dim):
            eq.append(({"psd": {k: selection_diag(dim, i)}}, 1.0))
        for j in range(n_sym):
            # bit j of snapshot k lives at symbol coordinate p
            p = j // 2 if j % 2 == 0 else n_sym // 2 + j // 2
            g = k * n_sym + j
            eq.append(
                ({"psd": {k: selection_mapping(dim, p)}, "nn": {g: 2.0}}, 1.0)
            )
    ineq = []
    for fs in generate_fs_constraints(pcm, degree_cap):
        nn = {int(v): 1.0 for v in fs.subset}
        nn.update({int(v): -1.0 for v in fs.complement})
        ineq.append(({"nn": nn}, float(fs.rhs)))
    for g in range(pcm.n_vars):
        ineq.append(({"nn": {g: 1.0}}, 1.0))
    prob = conic.assemble_with_slacks(
        [dim] * K, pcm.n_vars, 0, {}, eq, ineq
    )
    for k, snap in enumerate(snapshots):
        prob.set_psd_objective(k, build_cost_matrix(snap))
    return prob


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def extract_rank1(X: np.ndarray) -> np.ndarray:
    """Leading-eigenpair readout.  On an exact rank-1 lift [x;t][x;t]^T this
    returns t*x exactly; otherwise the leading eigenvector scaled into the
    symbol coordinates."""
    evals, evecs = np.linalg.eigh(X)
    v = evecs[:, -1]
    return evals[-1] * v[:-1] * v[-1]


def rank1_confidence(X: np.ndarray) -> float:
    """Second-to-first eigenvalue ratio; larger means less rank-1-like."""
    evals = np.linalg.eigvalsh(X)
    top = evals[-1]
    if top <= 0:
        return 1.0
    return float(max(evals[-2], 0.0) / top)


def extract_direct(X: np.ndarray) -> np.ndarray:
    """Last-column readout: X[:, last] approximates t*x with t = X[last, last]."""
    return X[:-1, -1].copy()


def extract_randomization(
    X: np.ndarray,
    cost_matrix: np.ndarray,
    n_trials: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian randomization: draw z ~ N(0, X), align the sign of the
    homogenizing coordinate, quantize, and keep the cheapest candidate.
    Deterministic given the generator state; ties keep the earliest draw."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    n = X.shape[0]
    evals, evecs = np.linalg.eigh(X)
    L = evecs * np.sqrt(np.clip(evals, 0.0, None))[None, :]
    draws = rng.standard_normal((n_trials, n)) @ L.T
    t_sign = np.where(draws[:, -1] >= 0, 1.0, -1.0)
    cand = np.where(draws[:, :-1] * t_sign[:, None] >= 0, 1.0, -1.0)
    hom = np.concatenate([cand, np.ones((n_trials, 1))], axis=1)
    costs = np.einsum("ij,jk,ik->i", hom, cost_matrix, hom)
    return cand[int(np.argmin(costs))].copy()


def llr_from_soft(soft_sym: np.ndarray, sigma2: float, n_t: int) -> np.ndarray:
    """Bit LLRs 2 v / sigma2 from stacked soft symbol values, clamped to +-30.

    sigma2 = 0 maps positive/negative values straight to the clamp.
    """
    soft_sym = np.asarray(soft_sym, dtype=float)
    if soft_sym.shape != (2 * n_t,):
        raise ValueError("soft vector must have length 2*n_t")
    v = symbol_to_bit_order(soft_sym)
    if sigma2 == 0:
        return np.sign(v) * 30.0
    return np.clip(2.0 * v / sigma2, -30.0, 30.0)


# ---------------------------------------------------------------------------
# codeword-level detection
# ---------------------------------------------------------------------------


@dataclass
class DetectionResult:
    """Soft values in bit order (approximately 1 - 2 f), hard bits, LLRs, and
    solver diagnostics."""

    soft: np.ndarray
    hard_bits: np.ndarray
    llr: np.ndarray
    mode: str
    extraction: str
    objective: float
    solver_status: str
    solver_iters: int
    low_confidence: tuple = ()


class DisjointSdrDetector:
    """Per-snapshot SDR with a reusable problem template."""

    def __init__(self, n_t: int, solver: conic.SolverConfig | None = None):
        self.n_t = n_t
        self.dim = 2 * n_t + 1
        self.solver = solver or conic.SolverConfig()
        self._prob = conic.ConicProblem([self.dim])
        for i in range(self.dim):
            self._prob.add_eq(1.0, psd={0: selection_diag(self.dim, i)})

    def solve_snapshot(self, snapshot: RealSnapshot):
        """Returns (X, objective, status, iters) for one snapshot."""
        C = build_cost_matrix(snapshot)
        self._prob.set_psd_objective(0, C)
        sol = conic.solve(self._prob, self.solver)
        return sol.psd[0], sol.pobj, sol.status, sol.iters


class JointSdrDetector:
    """Joint SDR with the code polytope, template compiled once per code."""

    def __init__(
        self,
        pcm: ParityCheckMatrix,
        n_t: int,
        solver: conic.SolverConfig | None = None,
        degree_cap: int = 16,
    ):
        self.pcm = pcm
        self.n_t = n_t
        self.solver = solver or conic.SolverConfig()
        n_sym = 2 * n_t
        if pcm.n_vars % n_sym:
            raise ValueError("codeword length must tile into snapshots")
        self.n_snapshots = pcm.n_vars // n_sym
        template_snaps = [
            RealSnapshot(
                y=np.zeros(2), H=np.zeros((2, n_sym)), sigma2=0.0
            )
            for _ in range(self.n_snapshots)
        ]
        self._prob = assemble_joint_sdr(template_snaps, pcm, degree_cap)
        self._prob.compile()

    def detect(self, snapshots) -> tuple[list, np.ndarray, float, str, int]:
        """Returns (X blocks, f vector, objective, status, iters)."""
        snapshots = list(snapshots)
        if len(snapshots) != self.n_snapshots:
            raise ValueError(
                f"need {self.n_snapshots} snapshots, got {len(snapshots)}"
            )
        for k, snap in enumerate(snapshots):
            self._prob.set_psd_objective(k, build_cost_matrix(snap))
        sol = conic.solve(self._prob, self.solver)
        f = sol.nonneg[: self.pcm.n_vars].copy()
        return sol.psd, f, sol.pobj, sol.status, sol.iters


_JOINT_CACHE: "weakref.WeakKeyDictionary[ParityCheckMatrix, dict]"
_JOINT_CACHE = weakref.WeakKeyDictionary()
_DISJOINT_CACHE: dict[int, DisjointSdrDetector] = {}


def _joint_detector(pcm, n_t, solver, degree_cap):
    per_code = _JOINT_CACHE.setdefault(pcm, {})
    key = (n_t, degree_cap)
    det = per_code.get(key)
    if det is None:
        det = JointSdrDetector(pcm, n_t, solver, degree_cap)
        per_code[key] = det
    det.solver = solver or det.solver
    return det


def _disjoint_detector(n_t, solver):
    det = _DISJOINT_CACHE.get(n_t)
    if det is None:
        det = DisjointSdrDetector(n_t, solver)
        _DISJOINT_CACHE[n_t] = det
    det.solver = solver or det.solver
    return det


def detect_codeword(
    snapshots,
    pcm: ParityCheckMatrix,
    mode: str = "joint",
    extraction: str = "direct",
    solver: conic.SolverConfig | None = None,
    rand_trials: int = 100,
    rng: np.random.Generator | None = None,
    _for_spa: bool = False,
) -> DetectionResult:
    """Detect one codeword's worth of snapshots via disjoint or joint SDR.

    extraction "randomization" yields hard decisions only and is rejected
    when soft outputs are required downstream (_for_spa).
    """
    if mode not in ("disjoint", "joint"):
        raise ValueError(f"unknown mode {mode!r}")
    if extraction not in ("rank1", "direct", "randomization"):
        raise ValueError(f"unknown extraction {extraction!r}")
    if extraction == "randomization" and _for_spa:
        raise ValueError(
            "randomization produces hard decisions only and cannot feed a "
            "soft-input decoder"
        )
    snapshots = list(snapshots)
    n_sym = snapshots[0].H.shape[1]
    n_t = n_sym // 2
    if len(snapshots) * n_sym != pcm.n_vars:
        raise ValueError("snapshot count does not tile the codeword length")
    if extraction == "randomization" and rng is None:
        rng = np.random.default_rng(0)
    sigma2 = snapshots[0].sigma2

    soft_bits = np.empty(pcm.n_vars)
    low_conf = []
    if mode == "disjoint":
        det = _disjoint_detector(n_t, solver)
        objective = 0.0
        worst_status = "optimal"
        iters = 0
        for k, snap in enumerate(snapshots):
            X, obj, status, its = det.solve_snapshot(snap)
            objective += obj
            iters += its
            if status != "optimal":
                worst_status = status
            sl = slice(k * n_sym, (k + 1) * n_sym)
            soft_bits[sl] = _extract_soft(
                X, snap, extraction, rand_trials, rng, k, low_conf
            )
        status = worst_status
    else:
        det = _joint_detector(pcm, n_t, solver, 16)
        Xs, f, objective, status, iters = det.detect(snapshots)
        for k, snap in enumerate(snapshots):
            sl = slice(k * n_sym, (k + 1) * n_sym)
            soft_bits[sl] = _extract_soft(
                Xs[k], snap, extraction, rand_trials, rng, k, low_conf
            )

    hard = np.empty(pcm.n_vars, dtype=np.uint8)
    llr = np.empty(pcm.n_vars)
    for k in range(len(snapshots)):
        sl = slice(k * n_sym, (k + 1) * n_sym)
        v_sym = bits_to_symbol_order(soft_bits[sl])
        hard[sl] = qpsk_hard_demap(v_sym)
        llr[sl] = llr_from_soft(v_sym, sigma2, n_t)
    return DetectionResult(
        soft=soft_bits,
        hard_bits=hard,
        llr=llr,
        mode=mode,
        extraction=extraction,
        objective=float(objective),
        solver_status=status,
        solver_iters=int(iters),
        low_confidence=tuple(low_conf),
    )


def _extract_soft(X, snap, extraction, rand_trials, rng, k, low_conf):
    """Per-snapshot soft symbol values in bit order."""
    if extraction == "rank1":
        if rank1_confidence(X) > RANK1_CONFIDENCE_RATIO:
            low_conf.append(k)
        v_sym = extract_rank1(X)
    elif extraction == "direct":
        v_sym = extract_direct(X)
    else:
        v_sym = extract_randomization(
            X, build_cost_matrix(snap), rand_trials, rng
        )
    return symbol_to_bit_order(v_sym)
