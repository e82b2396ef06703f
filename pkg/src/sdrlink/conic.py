"""Primal-dual interior-point solver for linear objectives over a product of
small PSD cones, a nonnegative orthant, and free variables, subject to linear
equality constraints:

    minimize    sum_b <C_b, X_b> + c_n . x_n + c_f . x_f
    subject to  sum_b <A_ib, X_b> + a_in . x_n + a_if . x_f = b_i,
                X_b PSD,  x_n >= 0,  x_f free.

Inequalities enter through assemble_with_slacks, which rewrites a.v <= rhs as
a.v + s = rhs with a fresh slack s in the orthant.

Algorithm: infeasible-start path following with Nesterov-Todd scaling and a
Mehrotra predictor-corrector step.  Each iteration factorizes one Schur
complement in the equality multipliers; when every slack-bearing row touches
only orthant variables (true for all problems this package assembles), those
rows are eliminated first through a diagonal-plus-low-rank identity, which is
algebraically the same system at a fraction of the factorization cost.

Symmetric matrices travel through svec coordinates: lower-triangle
column-major order with off-diagonal entries scaled by sqrt(2), so that
svec(A) . svec(B) = <A, B>.

Problem dump format (plain text, one record per line, '#' comments allowed)::

    CONICPROBLEM 1
    PSD <n1> <n2> ...          # omitted when there are no PSD blocks
    NONNEG <len>
    FREE <len>
    NEQ <m>
    OBJ PSD <block> <i> <j> <val>   # i >= j, symmetric entry listed once
    OBJ NN <idx> <val>
    OBJ FREE <idx> <val>
    EQ <row> RHS <val>              # exactly one per row, rows 0..m-1
    EQ <row> PSD <block> <i> <j> <val>
    EQ <row> NN <idx> <val>
    EQ <row> FREE <idx> <val>
    END

Floats are written with repr round-trip precision; load_problem(dump_problem(p))
reproduces the problem exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

__all__ = [
    "SolverConfig",
    "ConicProblem",
    "ConicSolution",
    "assemble_with_slacks",
    "solve",
    "dump_problem",
    "load_problem",
    "svec",
    "smat",
    "svec_dim",
]


# ---------------------------------------------------------------------------
# svec coordinates
# ---------------------------------------------------------------------------

_SVEC_INDEX: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def _svec_index(n: int):
    """(rows, cols, scale) for lower-triangle column-major svec order."""
    cached = _SVEC_INDEX.get(n)
    if cached is None:
        rows, cols = [], []
        for j in range(n):
            for i in range(j, n):
                rows.append(i)
                cols.append(j)
        rows = np.array(rows)
        cols = np.array(cols)
        scale = np.where(rows == cols, 1.0, np.sqrt(2.0))
        cached = (rows, cols, scale)
        _SVEC_INDEX[n] = cached
    return cached


def svec(M: np.ndarray) -> np.ndarray:
    """Symmetric matrix (or stack of them) to svec coordinates."""
    n = M.shape[-1]
    rows, cols, scale = _svec_index(n)
    return M[..., rows, cols] * scale


def smat(v: np.ndarray) -> np.ndarray:
    """Inverse of svec."""
    d = v.shape[-1]
    n = int((np.sqrt(8 * d + 1) - 1) / 2 + 0.5)
    if svec_dim(n) != d:
        raise ValueError(f"length {d} is not a triangular number")
    rows, cols, scale = _svec_index(n)
    M = np.zeros(v.shape[:-1] + (n, n))
    vals = v / scale
    M[..., rows, cols] = vals
    M[..., cols, rows] = vals
    return M


def _nt_congruence(R: np.ndarray) -> np.ndarray:
    """Matrix K with K @ svec(A) = svec(R^T A R), batched over leading axis."""
    n = R.shape[-1]
    rows, cols, scale = _svec_index(n)
    # column q of K is svec(R^T E_q R) with E_q the svec basis element
    ri = R[..., rows, :]  # rows of R indexed by q's i
    rj = R[..., cols, :]
    outer = ri[..., :, :, None] * rj[..., :, None, :]
    sym = outer + np.swapaxes(outer, -1, -2)
    coef = np.where(rows == cols, 0.5, 1.0 / np.sqrt(2.0))
    sym = sym * coef[..., :, None, None]
    K = sym[..., :, rows, cols] * scale  # (..., q, p)
    return np.swapaxes(K, -1, -2)


# ---------------------------------------------------------------------------
# problem container
# ---------------------------------------------------------------------------


@dataclass
class SolverConfig:
    """Interior-point stopping and stepping parameters."""

    gap_tol: float = 1e-7
    feas_tol: float = 1e-7
    max_iters: int = 100
    step_fraction: float = 0.98

    def __post_init__(self):
        if not (0 < self.gap_tol < 1 and 0 < self.feas_tol < 1):
            raise ValueError("tolerances must be in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must be in (0, 1)")


class ConicProblem:
    """Equality-form conic problem over PSD blocks + orthant + free variables.

    Rows are added once with add_eq; objectives may be swapped repeatedly
    (set_psd_objective and friends) without recompiling the constraint matrix,
    which makes repeated solves with fresh data cheap.
    """

    def __init__(self, psd_blocks, nonneg_len: int = 0, free_len: int = 0):
        self.psd_blocks = [int(n) for n in psd_blocks]
        if any(n < 1 for n in self.psd_blocks):
            raise ValueError("PSD block sizes must be positive")
        if nonneg_len < 0 or free_len < 0:
            raise ValueError("cone lengths must be nonnegative")
        self.nonneg_len = int(nonneg_len)
        self.free_len = int(free_len)
        self.svec_offsets = []
        off = 0
        for n in self.psd_blocks:
            self.svec_offsets.append(off)
            off += svec_dim(n)
        self.psd_len = off
        self.nonneg_off = off
        self.free_off = off + self.nonneg_len
        self.n_cols = self.free_off + self.free_len

        self._c_psd = [np.zeros((n, n)) for n in self.psd_blocks]
        self._c_nn = np.zeros(self.nonneg_len)
        self._c_free = np.zeros(self.free_len)
        self._rows_data: list[tuple[np.ndarray, np.ndarray]] = []
        self._rhs: list[float] = []
        self._E = None
        self._structure_version = 0
        self._ws = None
        # bookkeeping filled by assemble_with_slacks
        self.n_user_nonneg = self.nonneg_len
        self.slack_cols: list[int] = []

    # -- construction ------------------------------------------------------

    @property
    def n_eq(self) -> int:
        return len(self._rhs)

    def _check_sym(self, mat, n):
        mat = np.asarray(mat, dtype=float)
        if mat.shape != (n, n):
            raise ValueError(f"expected a ({n}, {n}) matrix")
        if not np.allclose(mat, mat.T, atol=1e-12):
            raise ValueError("PSD coefficients must be symmetric")
        return 0.5 * (mat + mat.T)

    def add_eq(self, rhs: float, psd=None, nn=None, free=None) -> int:
        """Append one equality row; returns its index.

        psd: {block: symmetric matrix}, nn/free: {index: coefficient}.
        """
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        for b, mat in (psd or {}).items():
            n = self.psd_blocks[b]
            v = svec(self._check_sym(mat, n))
            nz = np.nonzero(v)[0]
            cols.append(nz + self.svec_offsets[b])
            vals.append(v[nz])
        for idx, coef in (nn or {}).items():
            if not 0 <= idx < self.nonneg_len:
                raise IndexError("orthant index out of range")
            cols.append(np.array([self.nonneg_off + idx]))
            vals.append(np.array([float(coef)]))
        for idx, coef in (free or {}).items():
            if not 0 <= idx < self.free_len:
                raise IndexError("free index out of range")
            cols.append(np.array([self.free_off + idx]))
            vals.append(np.array([float(coef)]))
        if not cols:
            raise ValueError("empty equality row")
        self._rows_data.append(
            (np.concatenate(cols).astype(np.int64), np.concatenate(vals))
        )
        self._rhs.append(float(rhs))
        self._E = None
        self._structure_version += 1
        return len(self._rhs) - 1

    def set_psd_objective(self, block: int, mat: np.ndarray) -> None:
        self._c_psd[block] = self._check_sym(mat, self.psd_blocks[block])

    def set_nonneg_objective(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.nonneg_len,):
            raise ValueError("objective length mismatch")
        self._c_nn = vec.copy()

    def set_free_objective(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.free_len,):
            raise ValueError("objective length mismatch")
        self._c_free = vec.copy()

    # -- compiled views ----------------------------------------------------

    def compile(self):
        """Constraint matrix as CSR over svec layout, plus the rhs vector."""
        if self._E is None:
            if not self._rows_data:
                raise ValueError("problem has no equality constraints")
            counts = [len(c) for c, _ in self._rows_data]
            indptr = np.concatenate([[0], np.cumsum(counts)])
            indices = np.concatenate([c for c, _ in self._rows_data])
            data = np.concatenate([v for _, v in self._rows_data])
            self._E = sp.csr_matrix(
                (data, indices, indptr), shape=(len(self._rhs), self.n_cols)
            )
            self._b = np.array(self._rhs)
        return self._E, self._b

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_cols)
        for b, C in enumerate(self._c_psd):
            off = self.svec_offsets[b]
            c[off : off + svec_dim(self.psd_blocks[b])] = svec(C)
        c[self.nonneg_off : self.nonneg_off + self.nonneg_len] = self._c_nn
        c[self.free_off :] = self._c_free
        return c


def assemble_with_slacks(
    psd_blocks,
    nonneg_len: int,
    free_len: int,
    objective: dict,
    eq_constraints,
    ineq_constraints,
) -> ConicProblem:
    """Build an equality-form ConicProblem from mixed constraints.

    Constraints are (linmap, rhs) pairs where linmap is a dict with keys
    "psd" ({block: sym matrix}), "nn" and "free" ({index: coef}); objective is
    a linmap.  Each inequality linmap . v <= rhs gains a fresh orthant slack:
    linmap . v + s = rhs.  The i-th inequality's slack column index is
    recorded in problem.slack_cols[i]; user orthant variables keep indices
    0..nonneg_len-1 (problem.n_user_nonneg).
    """
    ineq_constraints = list(ineq_constraints)
    prob = ConicProblem(
        psd_blocks, nonneg_len + len(ineq_constraints), free_len
    )
    prob.n_user_nonneg = nonneg_len
    prob.slack_cols = list(range(nonneg_len, nonneg_len + len(ineq_constraints)))
    for b, mat in objective.get("psd", {}).items():
        prob.set_psd_objective(b, mat)
    c_nn = np.zeros(prob.nonneg_len)
    for idx, coef in objective.get("nn", {}).items():
        if not 0 <= idx < nonneg_len:
            raise IndexError("objective orthant index out of range")
        c_nn[idx] = coef
    prob.set_nonneg_objective(c_nn)
    c_free = np.zeros(free_len)
    for idx, coef in objective.get("free", {}).items():
        c_free[idx] = coef
    prob.set_free_objective(c_free)

    def check_user_nn(linmap):
        for idx in linmap.get("nn", {}):
            if not 0 <= idx < nonneg_len:
                raise IndexError("constraint orthant index out of range")

    for linmap, rhs in eq_constraints:
        check_user_nn(linmap)
        prob.add_eq(
            rhs,
            psd=linmap.get("psd"),
            nn=linmap.get("nn"),
            free=linmap.get("free"),
        )
    for i, (linmap, rhs) in enumerate(ineq_constraints):
        check_user_nn(linmap)
        nn = dict(linmap.get("nn", {}))
        nn[prob.slack_cols[i]] = 1.0
        prob.add_eq(rhs, psd=linmap.get("psd"), nn=nn, free=linmap.get("free"))
    return prob


# ---------------------------------------------------------------------------
# solution container
# ---------------------------------------------------------------------------


@dataclass
class ConicSolution:
    """Solver output; psd/nonneg/free are the primal values, y the equality
    multipliers, s_* the dual cone values."""

    status: str
    psd: list
    nonneg: np.ndarray
    free: np.ndarray
    y: np.ndarray
    s_psd: list
    s_nonneg: np.ndarray
    pobj: float
    dobj: float
    gap: float
    iters: int
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# presolve
# ---------------------------------------------------------------------------


def _presolve(E: sp.csr_matrix, b: np.ndarray, rank_reduce_limit: int = 800):
    """Drop duplicate rows; optionally reduce to an independent row set.

    Returns (row_indices_kept, feasible_flag).  feasible_flag False means two
    identical rows carried different right-hand sides (or a dependent row an
    inconsistent one), which certifies primal infeasibility.
    """
    m = E.shape[0]
    seen: dict[bytes, int] = {}
    keep = []
    for i in range(m):
        sl = slice(E.indptr[i], E.indptr[i + 1])
        key = E.indices[sl].tobytes() + E.data[sl].tobytes()
        j = seen.get(key)
        if j is None:
            seen[key] = i
            keep.append(i)
        elif b[i] != b[j]:
            return np.array(keep), False
    keep = np.array(keep)
    if keep.size > rank_reduce_limit:
        return keep, True
    Ek = E[keep].toarray()
    bk = b[keep]
    # QR with column pivoting on E^T exposes an independent row subset
    _, Rq, piv = scipy.linalg.qr(Ek.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rq))
    tol = max(Ek.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int((diag > tol).sum())
    if rank == keep.size:
        return keep, True
    indep = piv[:rank]
    dep = piv[rank:]
    # dependent rows must be consistent combinations of the kept ones
    coeffs, *_ = np.linalg.lstsq(Ek[indep].T, Ek[dep].T, rcond=None)
    recon = coeffs.T @ bk[indep]
    if not np.allclose(recon, bk[dep], atol=1e-8, rtol=1e-8):
        return keep[np.sort(indep)], False
    return keep[np.sort(indep)], True


# ---------------------------------------------------------------------------
# KKT back-ends
# ---------------------------------------------------------------------------


def _chol_with_bump(M: np.ndarray):
    """Cholesky with escalating diagonal regularization."""
    scale = max(np.trace(M) / max(M.shape[0], 1), 1.0)
    bump = 0.0
    for k in range(4):
        try:
            return scipy.linalg.cho_factor(
                M + bump * np.eye(M.shape[0]) if bump else M, lower=True
            )
        except np.linalg.LinAlgError:
            bump = scale * (1e-12 if k == 0 else bump / scale * 1e3)
    return None


def _apply_schur(ws, V_blocks, w2, dy, dx_f):
    """(M dy + E_f dx_f, E_f^T dy) for the current scaling, matrix-free."""
    out = np.zeros(ws.m)
    for blk, V in zip(ws.blocks, V_blocks):
        if blk.rows.size:
            out[blk.rows] += V @ (V.T @ dy[blk.rows])
    if ws.n_nn:
        out += ws.E_nn @ (w2 * (ws.E_nn.T @ dy))
    if ws.n_free:
        out += ws.E_free_dense @ dx_f
        return out, ws.E_free_dense.T @ dy
    return out, np.zeros(0)


class _DenseKkt:
    """Forms the full Schur complement densely and factors it."""

    def __init__(self, ws):
        self.ws = ws

    def factor(self, V_blocks, w2):
        ws = self.ws
        m = ws.m
        M = np.zeros((m, m))
        for blk, V in zip(ws.blocks, V_blocks):
            M[np.ix_(blk.rows, blk.rows)] += V @ V.T
        if ws.n_nn:
            Ew = ws.E_nn.multiply(w2[None, :])
            M += (Ew @ ws.E_nn.T).toarray()
        if ws.n_free:
            nf = ws.n_free
            A = np.zeros((m + nf, m + nf))
            A[:m, :m] = M
            A[:m, m:] = ws.E_free_dense
            A[m:, :m] = ws.E_free_dense.T
            self._lu = scipy.linalg.lu_factor(A)
            self._mode = "lu"
            return True
        fac = _chol_with_bump(M)
        if fac is None:
            return False
        self._cho = fac
        self._mode = "cho"
        return True

    def solve(self, rhs_y, rhs_f):
        if self._mode == "lu":
            out = scipy.linalg.lu_solve(self._lu, np.concatenate([rhs_y, rhs_f]))
            return out[: self.ws.m], out[self.ws.m :]
        return scipy.linalg.cho_solve(self._cho, rhs_y), np.zeros(0)


class _SlackEliminationKkt:
    """Eliminates slack-bearing rows before the dense factorization.

    Valid when those rows touch orthant columns only.  Writing B = A_g W for
    the scaled general-orthant coefficients and D for the diagonal the slacks
    induce on their rows, the slack block D + B_s B_s^T is inverted through
    G = I + B_s^T D^{-1} B_s, and the remaining dense-row system becomes
    M_psd + B_d G^{-1} B_d^T.  Every matrix formed is a sum of PSD terms, so
    the reduction stays stable as the scalings degenerate near optimality.
    """

    def __init__(self, ws):
        self.ws = ws

    def factor(self, V_blocks, w2):
        ws = self.ws
        w_g = np.sqrt(w2[ws.g_cols])
        d_s = ws.A_ss2 @ w2[ws.s_cols]  # strictly positive on slack rows
        self.dinv = 1.0 / d_s
        n_d, n_g = ws.n_dense, ws.g_cols.size
        self.n_g = n_g
        if n_g:
            self.B_s = ws.A_sg.multiply(w_g[None, :]).tocsr()
            self.B_d = ws.A_dg * w_g[None, :]
            Bsd = self.B_s.multiply(self.dinv[:, None]).tocsr()
            G = np.eye(n_g) + (self.B_s.T @ Bsd).toarray()
            fac = _chol_with_bump(G)
            if fac is None:
                return False
            self._G_cho = fac
        M = np.zeros((n_d, n_d))
        for blk, V in zip(ws.blocks, V_blocks):
            M[np.ix_(blk.dense_rows, blk.dense_rows)] += V @ V.T
        if n_g and n_d:
            Z = scipy.linalg.cho_solve(self._G_cho, self.B_d.T)
            M += self.B_d @ Z
        if n_d == 0:
            self._mode = "none"
            return True
        if ws.n_free:
            nf = ws.n_free
            A = np.zeros((n_d + nf, n_d + nf))
            A[:n_d, :n_d] = M
            A[:n_d, n_d:] = ws.E_free_d
            A[n_d:, :n_d] = ws.E_free_d.T
            self._lu = scipy.linalg.lu_factor(A)
            self._mode = "lu"
            return True
        fac = _chol_with_bump(M)
        if fac is None:
            return False
        self._cho = fac
        self._mode = "cho"
        return True

    def solve(self, rhs_y, rhs_f):
        ws = self.ws
        r_d = rhs_y[ws.dense_rows]
        r_s = rhs_y[ws.slack_rows]
        if self.n_g:
            u = self.B_s.T @ (self.dinv * r_s)
            rhs_dd = r_d - self.B_d @ scipy.linalg.cho_solve(self._G_cho, u)
        else:
            u = np.zeros(0)
            rhs_dd = r_d
        if self._mode == "lu":
            out = scipy.linalg.lu_solve(self._lu, np.concatenate([rhs_dd, rhs_f]))
            x_d, x_f = out[: ws.n_dense], out[ws.n_dense :]
        elif self._mode == "none":
            x_d, x_f = np.zeros(0), np.zeros(0)
        else:
            x_d = scipy.linalg.cho_solve(self._cho, rhs_dd)
            x_f = np.zeros(0)
        if self.n_g:
            t = scipy.linalg.cho_solve(
                self._G_cho, u + (self.B_d.T @ x_d if x_d.size else 0.0)
            )
            x_s = self.dinv * (r_s - self.B_s @ t)
        else:
            x_s = self.dinv * r_s
        dy = np.empty(ws.m)
        dy[ws.dense_rows] = x_d
        dy[ws.slack_rows] = x_s
        return dy, x_f


class _BlockInfo:
    __slots__ = ("n", "rows", "U", "dense_rows")


class _Workspace:
    """Static solve structures: per-block constraint slices and the KKT path."""

    def __init__(self, problem: ConicProblem, E, b, c, row_subset):
        self.E = E = E[row_subset].tocsc()
        self.b = b[row_subset]
        self.m = E.shape[0]
        self.nu = sum(problem.psd_blocks) + problem.nonneg_len
        self.n_nn = problem.nonneg_len
        self.n_free = problem.free_len
        self.blocks = []
        psd_rows_mask = np.zeros(self.m, dtype=bool)
        for bi, n in enumerate(problem.psd_blocks):
            off = problem.svec_offsets[bi]
            sub = E[:, off : off + svec_dim(n)]  # csc: indices are row numbers
            rows = np.unique(sub.indices) if sub.nnz else np.empty(0, dtype=np.int64)
            blk = _BlockInfo()
            blk.n = n
            blk.rows = rows
            blk.U = sub.tocsr()[rows].toarray()
            self.blocks.append(blk)
            psd_rows_mask[rows] = True
        nn0 = problem.nonneg_off
        self.E_nn = E[:, nn0 : nn0 + self.n_nn].tocsr()
        self.E_free_dense = (
            E[:, problem.free_off :].toarray() if self.n_free else np.zeros((self.m, 0))
        )

        # slack columns: orthant, zero objective, single row, on a row free of
        # PSD and free-variable entries
        c_nn = c[nn0 : nn0 + self.n_nn]
        nn_csc = self.E_nn.tocsc()
        support = np.diff(nn_csc.indptr)
        singleton = (support == 1) & (c_nn == 0.0)
        slack_rows_mask = np.zeros(self.m, dtype=bool)
        if singleton.any():
            first_row = np.full(self.n_nn, -1, dtype=np.int64)
            for jj in np.nonzero(singleton)[0]:
                first_row[jj] = nn_csc.indices[nn_csc.indptr[jj]]
            cand_rows = first_row[singleton]
            bad = psd_rows_mask[cand_rows]
            if self.n_free:
                bad |= self.E_free_dense[cand_rows].any(axis=1)
            ok_rows = np.unique(cand_rows[~bad])
            slack_rows_mask[ok_rows] = True
            # a slack whose row was disqualified is just a general column
            col_ok = slack_rows_mask[first_row] & singleton
        else:
            col_ok = np.zeros(self.n_nn, dtype=bool)

        # the structured elimination only pays off on large systems; small
        # ones factor densely in microseconds anyway
        use_fast = (
            self.m >= 500
            and slack_rows_mask.sum() >= 128
            and not psd_rows_mask[slack_rows_mask].any()
        )
        if use_fast:
            self.slack_rows = np.nonzero(slack_rows_mask)[0]
            self.dense_rows = np.nonzero(~slack_rows_mask)[0]
            self.n_dense = self.dense_rows.size
            self.s_cols = np.nonzero(col_ok)[0]
            self.g_cols = np.nonzero(~col_ok)[0]
            row_local = np.full(self.m, -1, dtype=np.int64)
            row_local[self.dense_rows] = np.arange(self.n_dense)
            for blk in self.blocks:
                blk.dense_rows = row_local[blk.rows]
            sub = self.E_nn.tocsc()
            A_s = sub[:, self.s_cols][self.slack_rows].tocsr()
            self.A_ss2 = sp.csr_matrix(
                (A_s.data**2, A_s.indices.copy(), A_s.indptr.copy()), shape=A_s.shape
            )
            self.A_sg = sub[:, self.g_cols][self.slack_rows].tocsr()
            self.A_dg = sub[:, self.g_cols][self.dense_rows].toarray()
            self.E_free_d = self.E_free_dense[self.dense_rows]
            self.kkt = _SlackEliminationKkt(self)
        else:
            self.kkt = _DenseKkt(self)
        self._dense_kkt = None
        self.fast = use_fast

    def dense_kkt(self):
        if self._dense_kkt is None:
            self._dense_kkt = _DenseKkt(self)
        return self._dense_kkt
        self.slack_col_objective_ok = (
            np.nonzero(col_ok)[0] if use_fast else np.empty(0, dtype=np.int64)
        )


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def _group_blocks(ns):
    groups: dict[int, list[int]] = {}
    for i, n in enumerate(ns):
        groups.setdefault(n, []).append(i)
    return groups


def solve(problem: ConicProblem, config: SolverConfig | None = None) -> ConicSolution:
    """Solve the conic problem; deterministic for identical inputs."""
    cfg = config or SolverConfig()
    E_full, b_full = problem.compile()
    c = problem.objective_vector()

    def empty_solution(status):
        return ConicSolution(
            status=status,
            psd=[np.zeros((n, n)) for n in problem.psd_blocks],
            nonneg=np.zeros(problem.nonneg_len),
            free=np.zeros(problem.free_len),
            y=np.zeros(E_full.shape[0]),
            s_psd=[np.zeros((n, n)) for n in problem.psd_blocks],
            s_nonneg=np.zeros(problem.nonneg_len),
            pobj=np.nan,
            dobj=np.nan,
            gap=np.inf,
            iters=0,
        )

    keep, feasible = _presolve(E_full, b_full)
    if not feasible:
        return empty_solution("infeasible-detected")

    ws = problem._ws
    if (
        ws is None
        or ws[0] != problem._structure_version
        or not np.array_equal(ws[1], keep)
        or (ws[2].fast and c[problem.nonneg_off + ws[2].slack_col_objective_ok].any())
    ):
        ws = (
            problem._structure_version,
            keep,
            _Workspace(problem, E_full, b_full, c, keep),
        )
        problem._ws = ws
    ws = ws[2]
    b = ws.b
    m = ws.m
    n_nn, n_free = ws.n_nn, ws.n_free
    nn0, f0 = problem.nonneg_off, problem.free_off
    c_nn = c[nn0 : nn0 + n_nn]
    c_free = c[f0:]
    C_mats = [problem._c_psd[i] for i in range(len(problem.psd_blocks))]
    groups = _group_blocks(problem.psd_blocks)
    nu = max(ws.nu, 1)

    def e_mul_x(X_list, x_nn, x_f):
        """E applied to a full primal point."""
        out = np.zeros(m)
        for blk, X in zip(ws.blocks, X_list):
            if blk.rows.size:
                out[blk.rows] += blk.U @ svec(X)
        if n_nn:
            out += ws.E_nn @ x_nn
        if n_free:
            out += ws.E_free_dense @ x_f
        return out

    def et_mul_y_psd(y):
        """Per-block smat((E^T y)_block)."""
        outs = []
        for blk in ws.blocks:
            if blk.rows.size:
                outs.append(smat(blk.U.T @ y[blk.rows]))
            else:
                outs.append(np.zeros((blk.n, blk.n)))
        return outs

    # initial point
    tau_p = max(1.0, np.abs(b).max() if b.size else 1.0)
    tau_d = max(1.0, np.abs(c).max() if c.size else 1.0)
    X = [tau_p * np.eye(n) for n in problem.psd_blocks]
    S = [tau_d * np.eye(n) for n in problem.psd_blocks]
    x_nn = np.full(n_nn, tau_p)
    s_nn = np.full(n_nn, tau_d)
    x_f = np.zeros(n_free)
    y = np.zeros(m)

    norm_b = 1.0 + np.linalg.norm(b)
    norm_c = 1.0 + np.linalg.norm(c)
    trace: list[dict] = []
    best = None
    best_metric = np.inf
    status = "max_iters"
    iters_done = 0
    tiny_steps = 0

    def snapshot():
        return (
            [Xb.copy() for Xb in X],
            x_nn.copy(),
            x_f.copy(),
            y.copy(),
            [Sb.copy() for Sb in S],
            s_nn.copy(),
        )

    for it in range(cfg.max_iters):
        cgap = sum(float(np.tensordot(Xb, Sb)) for Xb, Sb in zip(X, S))
        cgap += float(x_nn @ s_nn)
        pobj = float(
            sum(np.tensordot(Cb, Xb) for Cb, Xb in zip(C_mats, X))
            + c_nn @ x_nn
            + c_free @ x_f
        )
        dobj = float(b @ y)
        relgap = cgap / max(1.0, 0.5 * (abs(pobj) + abs(dobj)))
        r_p = b - e_mul_x(X, x_nn, x_f)
        Ety_psd = et_mul_y_psd(y)
        r_d_psd = [
            Cb - Eb - Sb for Cb, Eb, Sb in zip(C_mats, Ety_psd, S)
        ]
        r_d_nn = c_nn - (ws.E_nn.T @ y) - s_nn if n_nn else np.zeros(0)
        r_d_free = c_free - ws.E_free_dense.T @ y if n_free else np.zeros(0)
        dres_sq = sum(float(np.sum(Rb * Rb)) for Rb in r_d_psd)
        # svec norm counts off-diagonals twice, matching the Frobenius norm
        dres_sq += float(r_d_nn @ r_d_nn) + float(r_d_free @ r_d_free)
        pres = float(np.linalg.norm(r_p)) / norm_b
        dres = float(np.sqrt(dres_sq)) / norm_c
        trace.append(
            dict(iter=it, pobj=pobj, dobj=dobj, cgap=cgap, relgap=relgap,
                 pres=pres, dres=dres)
        )
        metric = max(relgap, pres, dres)
        if metric < best_metric:
            best_metric = metric
            best = (snapshot(), pobj, dobj, relgap, it)
        if relgap <= cfg.gap_tol and pres <= cfg.feas_tol and dres <= cfg.feas_tol:
            status = "optimal"
            iters_done = it
            break
        if dobj > 1e12 * max(1.0, abs(pobj)) and dres <= 1e-5:
            status = "infeasible-detected"
            iters_done = it
            break
        if pobj < -1e12 * max(1.0, abs(dobj)) and pres <= 1e-5:
            status = "infeasible-detected"
            iters_done = it
            break
        iters_done = it

        # Nesterov-Todd scaling per block group
        R_list: list = [None] * len(X)
        lam_list: list = [None] * len(X)
        try:
            for n, idxs in groups.items():
                Xs = np.stack([X[i] for i in idxs])
                Ss = np.stack([S[i] for i in idxs])
                Lx = np.linalg.cholesky(Xs)
                Ls = np.linalg.cholesky(Ss)
                Um, sv, Vh = np.linalg.svd(np.swapaxes(Ls, -1, -2) @ Lx)
                inv_sqrt = sv ** -0.5
                R = (Lx @ np.swapaxes(Vh, -1, -2)) * inv_sqrt[:, None, :]
                for k, i in enumerate(idxs):
                    R_list[i] = R[k]
                    lam_list[i] = sv[k]
        except np.linalg.LinAlgError:
            status = "numerical-failure"
            break
        w_nn = np.sqrt(x_nn / s_nn) if n_nn else np.zeros(0)
        lam_nn = np.sqrt(x_nn * s_nn) if n_nn else np.zeros(0)
        mu = cgap / nu

        # scaled constraint slices V_b = U_b K(R_b)^T, batched by size
        V_blocks: list = [None] * len(X)
        for n, idxs in groups.items():
            Rs = np.stack([R_list[i] for i in idxs])
            Ks = _nt_congruence(Rs)
            for k, i in enumerate(idxs):
                V_blocks[i] = ws.blocks[i].U @ Ks[k].T
        w2_nn = w_nn**2
        active_kkt = ws.dense_kkt() if use_dense_kkt else ws.kkt
        if not active_kkt.factor(V_blocks, w2_nn):
            if use_dense_kkt:
                status = "numerical-failure"
                break
            use_dense_kkt = True
            active_kkt = ws.dense_kkt()
            if not active_kkt.factor(V_blocks, w2_nn):
                status = "numerical-failure"
                break

        def kkt_solve_refined(rhs_y, rhs_f):
            nonlocal use_dense_kkt, active_kkt
            while True:
                dy, dx_f = active_kkt.solve(rhs_y, rhs_f)
                scale = 1.0 + np.linalg.norm(rhs_y)
                rel = np.inf
                for round_ in range(4):
                    ay, af = _apply_schur(ws, V_blocks, w2_nn, dy, dx_f)
                    res_y = rhs_y - ay
                    res_f = rhs_f - af if n_free else np.zeros(0)
                    rel = np.linalg.norm(res_y) / scale
                    if rel <= 1e-13 or round_ == 3:
                        break
                    ey, ef = active_kkt.solve(res_y, res_f)
                    dy = dy + ey
                    dx_f = dx_f + ef
                if rel <= 1e-7 or use_dense_kkt:
                    return dy, dx_f
                # structured elimination has degraded: redo this and all
                # remaining iterations with the dense factorization
                use_dense_kkt = True
                active_kkt = ws.dense_kkt()
                if not active_kkt.factor(V_blocks, w2_nn):
                    return dy, dx_f

        def newton(D_psd, D_nn):
            """Direction for dx~ + ds~ = D with current residuals."""
            rhs_y = r_p.copy()
            for blk, R, Db, rdb in zip(ws.blocks, R_list, D_psd, r_d_psd):
                if not blk.rows.size:
                    continue
                RDRt = R @ Db @ R.T
                WrW = R @ (R.T @ rdb @ R) @ R.T
                rhs_y[blk.rows] += blk.U @ svec(WrW - RDRt)
            if n_nn:
                rhs_y += ws.E_nn @ (w_nn**2 * r_d_nn - w_nn * D_nn)
            dy, dx_f = kkt_solve_refined(rhs_y, r_d_free)
            dS, dX, dXt, dSt = [], [], [], []
            Ety = et_mul_y_psd(dy)
            for blk, R, Db, rdb, Eb in zip(ws.blocks, R_list, D_psd, r_d_psd, Ety):
                dSb = rdb - Eb
                dSt_b = R.T @ dSb @ R
                dXt_b = Db - dSt_b
                dX_b = R @ dXt_b @ R.T
                dS.append(dSb)
                dX.append(dX_b)
                dXt.append(dXt_b)
                dSt.append(dSt_b)
            if n_nn:
                ds_nn = r_d_nn - (ws.E_nn.T @ dy)
                dst = w_nn * ds_nn
                dxt = D_nn - dst
                dx_nn = w_nn * dxt
            else:
                ds_nn = dst = dxt = dx_nn = np.zeros(0)
            return dy, dx_f, dX, dS, dXt, dSt, dx_nn, ds_nn, dxt, dst

        def max_step(dXt, dSt, dxt, dst):
            ap = ad = np.inf
            for lam, dXtb, dStb in zip(lam_list, dXt, dSt):
                inv = 1.0 / np.sqrt(lam)
                Gp = dXtb * inv[:, None] * inv[None, :]
                Gd = dStb * inv[:, None] * inv[None, :]
                ev_p = np.linalg.eigvalsh(Gp)[0]
                ev_d = np.linalg.eigvalsh(Gd)[0]
                if ev_p < 0:
                    ap = min(ap, -1.0 / ev_p)
                if ev_d < 0:
                    ad = min(ad, -1.0 / ev_d)
            if n_nn:
                neg = dxt < 0
                if neg.any():
                    ap = min(ap, float(np.min(-lam_nn[neg] / dxt[neg])))
                neg = dst < 0
                if neg.any():
                    ad = min(ad, float(np.min(-lam_nn[neg] / dst[neg])))
            return ap, ad

        # predictor
        D_aff_psd = [-np.diag(lam) for lam in lam_list]
        D_aff_nn = -lam_nn
        aff = newton(D_aff_psd, D_aff_nn)
        _, _, _, _, aXt, aSt, _, _, axt, ast = aff
        ap_aff, ad_aff = max_step(aXt, aSt, axt, ast)
        ap_aff = min(1.0, ap_aff)
        ad_aff = min(1.0, ad_aff)
        gap_aff = 0.0
        for lam, dXtb, dStb in zip(lam_list, aXt, aSt):
            gap_aff += float(
                np.sum(lam**2)
                + ap_aff * np.sum(np.diag(dXtb) * lam)
                + ad_aff * np.sum(np.diag(dStb) * lam)
                + ap_aff * ad_aff * np.sum(dXtb * dStb)
            )
        if n_nn:
            gap_aff += float(
                np.sum(lam_nn**2)
                + ap_aff * np.sum(axt * lam_nn)
                + ad_aff * np.sum(ast * lam_nn)
                + ap_aff * ad_aff * np.sum(axt * ast)
            )
        mu_aff = max(gap_aff, 0.0) / nu
        sigma = float(np.clip((mu_aff / mu) ** 3, 0.0, 1.0))

        # corrector
        D_cor_psd = []
        for lam, dXtb, dStb in zip(lam_list, aXt, aSt):
            Hc = 0.5 * (dXtb @ dStb + dStb @ dXtb)
            T = sigma * mu * np.eye(lam.size) - np.diag(lam**2) - Hc
            denom = 0.5 * (lam[:, None] + lam[None, :])
            D_cor_psd.append(T / denom)
        D_cor_nn = (
            (sigma * mu - lam_nn**2 - axt * ast) / lam_nn if n_nn else np.zeros(0)
        )
        dy, dx_f, dX, dS, dXt, dSt, dx_nn, ds_nn, dxt, dst = newton(
            D_cor_psd, D_cor_nn
        )
        ap_max, ad_max = max_step(dXt, dSt, dxt, dst)
        ap = min(1.0, cfg.step_fraction * ap_max)
        ad = min(1.0, cfg.step_fraction * ad_max)
        trace[-1].update(sigma=sigma, alpha_p=ap, alpha_d=ad)
        if max(ap, ad) < 1e-10:
            tiny_steps += 1
            if tiny_steps >= 3:
                status = "numerical-failure"
                break
        else:
            tiny_steps = 0
        for i in range(len(X)):
            X[i] = X[i] + ap * dX[i]
            X[i] = 0.5 * (X[i] + X[i].T)
            S[i] = S[i] + ad * dS[i]
            S[i] = 0.5 * (S[i] + S[i].T)
        if n_nn:
            x_nn = x_nn + ap * dx_nn
            s_nn = s_nn + ad * ds_nn
        x_f = x_f + ap * dx_f
        y = y + ad * dy
    else:
        status = "max_iters"
        iters_done = cfg.max_iters - 1

    if status in ("max_iters", "numerical-failure") and best is not None:
        (Xb, xnnb, xfb, yb, Sb, snnb), pobj, dobj, relgap, bit = best
        X, x_nn, x_f, y, S, s_nn = Xb, xnnb, xfb, yb, Sb, snnb
        gap_out = relgap
    else:
        pobj = trace[-1]["pobj"] if trace else np.nan
        dobj = trace[-1]["dobj"] if trace else np.nan
        gap_out = trace[-1]["relgap"] if trace else np.inf

    y_full = np.zeros(E_full.shape[0])
    y_full[keep] = y
    return ConicSolution(
        status=status,
        psd=X,
        nonneg=x_nn,
        free=x_f,
        y=y_full,
        s_psd=S,
        s_nonneg=s_nn,
        pobj=pobj,
        dobj=dobj,
        gap=gap_out,
        iters=iters_done + 1,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# dump / load
# ---------------------------------------------------------------------------


def dump_problem(problem: ConicProblem, path) -> None:
    """Write the problem in the plain-text format described in the module
    docstring."""
    E, b = problem.compile()
    lines = ["CONICPROBLEM 1"]
    if problem.psd_blocks:
        lines.append("PSD " + " ".join(str(n) for n in problem.psd_blocks))
    lines.append(f"NONNEG {problem.nonneg_len}")
    lines.append(f"FREE {problem.free_len}")
    lines.append(f"NEQ {problem.n_eq}")
    for bi, C in enumerate(problem._c_psd):
        for i in range(C.shape[0]):
            for j in range(i + 1):
                if C[i, j] != 0.0:
                    lines.append(f"OBJ PSD {bi} {i} {j} {C[i, j]!r}")
    for i, v in enumerate(problem._c_nn):
        if v != 0.0:
            lines.append(f"OBJ NN {i} {v!r}")
    for i, v in enumerate(problem._c_free):
        if v != 0.0:
            lines.append(f"OBJ FREE {i} {v!r}")
    for r in range(problem.n_eq):
        lines.append(f"EQ {r} RHS {problem._rhs[r]!r}")
        cols, vals = problem._rows_data[r]
        for col, val in zip(cols, vals):
            col = int(col)
            if col >= problem.free_off:
                lines.append(f"EQ {r} FREE {col - problem.free_off} {val!r}")
            elif col >= problem.nonneg_off:
                lines.append(f"EQ {r} NN {col - problem.nonneg_off} {val!r}")
            else:
                bi = max(
                    i for i, off in enumerate(problem.svec_offsets) if off <= col
                )
                local = col - problem.svec_offsets[bi]
                n = problem.psd_blocks[bi]
                rows, colsx, scale = _svec_index(n)
                i, j = int(rows[local]), int(colsx[local])
                v = val / scale[local]
                lines.append(f"EQ {r} PSD {bi} {i} {j} {v!r}")
    lines.append("END")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_problem(path) -> ConicProblem:
    """Read a problem written by dump_problem."""
    with open(path) as fh:
        raw = [ln.strip() for ln in fh]
    lines = [ln for ln in raw if ln and not ln.startswith("#")]
    if not lines or lines[0].split() != ["CONICPROBLEM", "1"]:
        raise ValueError("not a CONICPROBLEM v1 file")
    if lines[-1] != "END":
        raise ValueError("missing END record")
    psd: list[int] = []
    nonneg = free = neq = 0
    body_start = 1
    for ln in lines[1:]:
        tok = ln.split()
        if tok[0] == "PSD":
            psd = [int(t) for t in tok[1:]]
        elif tok[0] == "NONNEG":
            nonneg = int(tok[1])
        elif tok[0] == "FREE":
            free = int(tok[1])
        elif tok[0] == "NEQ":
            neq = int(tok[1])
            body_start = lines.index(ln) + 1
            break
        else:
            raise ValueError(f"unexpected record before NEQ: {ln}")
    prob = ConicProblem(psd, nonneg, free)
    obj_psd = [np.zeros((n, n)) for n in psd]
    obj_nn = np.zeros(nonneg)
    obj_free = np.zeros(free)
    rows_psd: list[dict] = [dict() for _ in range(neq)]
    rows_nn: list[dict] = [dict() for _ in range(neq)]
    rows_free: list[dict] = [dict() for _ in range(neq)]
    rhs = [None] * neq

    for ln in lines[body_start:-1]:
        tok = ln.split()
        if tok[0] == "OBJ":
            if tok[1] == "PSD":
                bi, i, j = int(tok[2]), int(tok[3]), int(tok[4])
                obj_psd[bi][i, j] = obj_psd[bi][j, i] = float(tok[5])
            elif tok[1] == "NN":
                obj_nn[int(tok[2])] = float(tok[3])
            elif tok[1] == "FREE":
                obj_free[int(tok[2])] = float(tok[3])
            else:
                raise ValueError(f"bad OBJ record: {ln}")
        elif tok[0] == "EQ":
            r = int(tok[1])
            if not 0 <= r < neq:
                raise ValueError(f"row index out of range: {ln}")
            if tok[2] == "RHS":
                rhs[r] = float(tok[3])
            elif tok[2] == "PSD":
                bi, i, j = int(tok[3]), int(tok[4]), int(tok[5])
                mat = rows_psd[r].setdefault(bi, np.zeros((psd[bi], psd[bi])))
                mat[i, j] = mat[j, i] = float(tok[6])
            elif tok[2] == "NN":
                rows_nn[r][int(tok[3])] = float(tok[4])
            elif tok[2] == "FREE":
                rows_free[r][int(tok[3])] = float(tok[4])
            else:
                raise ValueError(f"bad EQ record: {ln}")
        else:
            raise ValueError(f"unexpected record: {ln}")

    for bi, C in enumerate(obj_psd):
        prob.set_psd_objective(bi, C)
    prob.set_nonneg_objective(obj_nn)
    prob.set_free_objective(obj_free)
    for r in range(neq):
        if rhs[r] is None:
            raise ValueError(f"row {r} has no RHS record")
        prob.add_eq(
            rhs[r],
            psd=rows_psd[r] or None,
            nn=rows_nn[r] or None,
            free=rows_free[r] or None,
        )
    return prob
