"""Binary LDPC codes: alist I/O, construction, encoding, decoding, and the
forbidden-set inequalities that carve out the fundamental polytope.

LLR convention: positive means bit 0 is more likely.  A codeword is any 0/1
vector c with H c = 0 over GF(2).
"""

from __future__ import annotations

import itertools
import weakref
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParityCheckMatrix",
    "FsConstraint",
    "load_alist",
    "save_alist",
    "make_regular_code",
    "SystematicEncoder",
    "systematic_encoder",
    "encode",
    "syndrome_check",
    "spa_decode",
    "bf_decode",
    "generate_fs_constraints",
]

LLR_CLAMP = 30.0


class ParityCheckMatrix:
    """Sparse parity-check matrix stored as per-check variable index tuples."""

    def __init__(self, n_vars: int, rows):
        if n_vars < 1:
            raise ValueError("n_vars must be positive")
        clean = []
        for m, row in enumerate(rows):
            idx = tuple(int(i) for i in row)
            if len(idx) == 0:
                raise ValueError(f"check {m} is empty")
            if len(set(idx)) != len(idx):
                raise ValueError(f"check {m} repeats a variable")
            if min(idx) < 0 or max(idx) >= n_vars:
                raise ValueError(f"check {m} has a variable index out of range")
            clean.append(tuple(sorted(idx)))
        self.n_vars = int(n_vars)
        self.rows = tuple(clean)
        self.n_checks = len(self.rows)
        cols: list[list[int]] = [[] for _ in range(n_vars)]
        for m, row in enumerate(self.rows):
            for n in row:
                cols[n].append(m)
        self.cols = tuple(tuple(c) for c in cols)
        self.row_degrees = np.array([len(r) for r in self.rows])
        self.col_degrees = np.array([len(c) for c in self.cols])

    def to_dense(self) -> np.ndarray:
        """Dense uint8 matrix, shape (n_checks, n_vars)."""
        H = np.zeros((self.n_checks, self.n_vars), dtype=np.uint8)
        for m, row in enumerate(self.rows):
            H[m, list(row)] = 1
        return H

    def count_4cycles(self) -> int:
        """Number of check pairs sharing more than one variable."""
        H = self.to_dense().astype(np.int64)
        overlap = H @ H.T
        np.fill_diagonal(overlap, 0)
        return int((overlap[np.triu_indices(self.n_checks, 1)] > 1).sum())

    def __eq__(self, other):
        return (
            isinstance(other, ParityCheckMatrix)
            and self.n_vars == other.n_vars
            and self.rows == other.rows
        )

    def __hash__(self):
        return hash((self.n_vars, self.rows))

    def __repr__(self):
        return f"ParityCheckMatrix(n_vars={self.n_vars}, n_checks={self.n_checks})"


@dataclass(frozen=True)
class FsConstraint:
    """One forbidden-set inequality for a single check.

    sum_{n in subset} f_n - sum_{n in complement} f_n <= len(subset) - 1,
    where subset is an odd-cardinality subset of the check's neighbourhood
    and complement is the rest of that neighbourhood.
    """

    check_index: int
    subset: tuple[int, ...]
    complement: tuple[int, ...]

    @property
    def rhs(self) -> int:
        return len(self.subset) - 1

    def violated_by(self, f: np.ndarray, tol: float = 0.0) -> bool:
        f = np.asarray(f, dtype=float)
        lhs = f[list(self.subset)].sum() - f[list(self.complement)].sum()
        return lhs > self.rhs + tol


# ---------------------------------------------------------------------------
# alist I/O
# ---------------------------------------------------------------------------


def load_alist(text: str) -> ParityCheckMatrix:
    """Parse alist text.

    Indices are 1-based.  Adjacency lines may be zero-padded up to the
    declared maximum degree; padding zeros are ignored, but a 0 among the
    live entries is an error, as is any inconsistency between the variable
    and check adjacency lists.
    """
    lines = [ln.split() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if len(lines) < 4:
        raise ValueError("alist: truncated file")
    try:
        n_vars, n_checks = (int(t) for t in lines[0])
        dmax_var, dmax_check = (int(t) for t in lines[1])
    except (TypeError, ValueError) as exc:
        raise ValueError("alist: malformed header") from exc
    if n_vars < 1 or n_checks < 1:
        raise ValueError("alist: sizes must be positive")
    if len(lines) < 4 + n_vars + n_checks:
        raise ValueError("alist: missing adjacency lines")
    var_degs = [int(t) for t in lines[2]]
    check_degs = [int(t) for t in lines[3]]
    if len(var_degs) != n_vars or len(check_degs) != n_checks:
        raise ValueError("alist: degree list length mismatch")
    if max(var_degs) > dmax_var or max(check_degs) > dmax_check:
        raise ValueError("alist: declared max degree exceeded")

    def parse_adj(line, degree, limit, what, k):
        entries = [int(t) for t in line]
        if len(entries) < degree:
            raise ValueError(f"alist: {what} {k + 1} lists fewer than {degree} entries")
        live, padding = entries[:degree], entries[degree:]
        if any(p != 0 for p in padding):
            raise ValueError(f"alist: {what} {k + 1} has nonzero padding")
        if any(e < 1 or e > limit for e in live):
            raise ValueError(f"alist: {what} {k + 1} has an index out of range")
        return [e - 1 for e in live]

    var_adj = [
        parse_adj(lines[4 + n], var_degs[n], n_checks, "variable", n)
        for n in range(n_vars)
    ]
    check_adj = [
        parse_adj(lines[4 + n_vars + m], check_degs[m], n_vars, "check", m)
        for m in range(n_checks)
    ]
    pcm = ParityCheckMatrix(n_vars, check_adj)
    for n in range(n_vars):
        if tuple(sorted(var_adj[n])) != pcm.cols[n]:
            raise ValueError(f"alist: adjacency lists disagree at variable {n + 1}")
    return pcm


def save_alist(pcm: ParityCheckMatrix) -> str:
    """Serialize to alist text (1-based, rows padded with 0 to max degree)."""
    dmax_var = int(pcm.col_degrees.max())
    dmax_check = int(pcm.row_degrees.max())
    lines = [
        f"{pcm.n_vars} {pcm.n_checks}",
        f"{dmax_var} {dmax_check}",
        " ".join(str(d) for d in pcm.col_degrees),
        " ".join(str(d) for d in pcm.row_degrees),
    ]
    for n in range(pcm.n_vars):
        adj = [m + 1 for m in pcm.cols[n]]
        adj += [0] * (dmax_var - len(adj))
        lines.append(" ".join(str(a) for a in adj))
    for m in range(pcm.n_checks):
        adj = [n + 1 for n in pcm.rows[m]]
        adj += [0] * (dmax_check - len(adj))
        lines.append(" ".join(str(a) for a in adj))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def make_regular_code(
    n_vars: int,
    n_msg: int,
    col_weight: int,
    rng,
    *,
    cycle_passes: int = 200,
) -> ParityCheckMatrix:
    """Build a (col_weight, row_weight)-regular code by socket matching.

    n_vars * col_weight must be divisible by the number of checks
    (n_vars - n_msg).  Duplicate edges are repaired by swaps; 4-cycles are
    then reduced by edge swaps, best effort.  Deterministic given the seed.
    """
    rng = np.random.default_rng(rng)
    n_checks = n_vars - n_msg
    if n_checks < 1:
        raise ValueError("need at least one check")
    if (n_vars * col_weight) % n_checks:
        raise ValueError("row weight is not integral for these parameters")
    row_weight = n_vars * col_weight // n_checks

    edges = np.repeat(np.arange(n_vars), col_weight)
    rng.shuffle(edges)
    rows = edges.reshape(n_checks, row_weight)

    def dup_positions():
        out = []
        for m in range(n_checks):
            seen: dict[int, int] = {}
            for j, v in enumerate(rows[m]):
                if v in seen:
                    out.append((m, j))
                else:
                    seen[v] = j
        return out

    # Repair duplicate sockets: swap a duplicated entry with a random entry
    # of another check, accepting only swaps that create no new duplicate.
    for _ in range(20 * n_vars * col_weight):
        dups = dup_positions()
        if not dups:
            break
        m, j = dups[rng.integers(len(dups))]
        m2 = int(rng.integers(n_checks - 1))
        m2 += m2 >= m
        j2 = int(rng.integers(row_weight))
        v, v2 = rows[m, j], rows[m2, j2]
        if v2 not in rows[m] and v not in rows[m2]:
            rows[m, j], rows[m2, j2] = v2, v
    else:
        raise RuntimeError("could not repair duplicate edges; try another seed")

    # Best-effort 4-cycle removal: for a pair of checks sharing two variables,
    # swap one shared variable into a random other check.
    row_sets = [set(r) for r in rows]
    for _ in range(cycle_passes):
        swapped = False
        for m in range(n_checks):
            for m2 in range(m + 1, n_checks):
                shared = row_sets[m] & row_sets[m2]
                if len(shared) < 2:
                    continue
                v = sorted(shared)[int(rng.integers(len(shared)))]
                j = int(np.nonzero(rows[m2] == v)[0][0])
                for _ in range(50):
                    m3 = int(rng.integers(n_checks))
                    j3 = int(rng.integers(row_weight))
                    v3 = int(rows[m3, j3])
                    if m3 in (m, m2) or v3 in row_sets[m2] or v in row_sets[m3]:
                        continue
                    rows[m2, j], rows[m3, j3] = v3, v
                    row_sets[m2].remove(v)
                    row_sets[m2].add(v3)
                    row_sets[m3].remove(v3)
                    row_sets[m3].add(v)
                    swapped = True
                    break
        if not swapped:
            break

    pcm = ParityCheckMatrix(n_vars, [sorted(r) for r in rows])
    assert (pcm.col_degrees == col_weight).all()
    assert (pcm.row_degrees == row_weight).all()
    return pcm


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def _gf2_eliminate(H: np.ndarray):
    """Gauss-Jordan over GF(2) with column pivoting.

    Returns (reduced, col_perm, rank) with reduced[:rank, col_perm[:rank]]
    the identity and zero rows below.
    """
    H = H.astype(np.uint8).copy()
    m, n = H.shape
    perm = np.arange(n)
    rank = 0
    while rank < m:
        # leftmost remaining column with a 1 at or below the pivot row
        found = False
        for cj in range(rank, n):
            rows_with_one = np.nonzero(H[rank:, perm[cj]])[0]
            if rows_with_one.size:
                perm[[rank, cj]] = perm[[cj, rank]]
                r = rank + rows_with_one[0]
                if r != rank:
                    H[[rank, r]] = H[[r, rank]]
                found = True
                break
        if not found:
            break
        col_idx = perm[rank]
        hits = np.nonzero(H[:, col_idx])[0]
        hits = hits[hits != rank]
        H[hits] ^= H[rank]
        rank += 1
    return H, perm, rank


class SystematicEncoder:
    """Systematic encoder derived from GF(2) elimination of H.

    Message bits occupy `message_positions` of the codeword; the remaining
    positions hold parity.  rank < n_checks means dependent checks; encoding
    still works (message length n_vars - rank) but is refused by encode()
    unless explicitly allowed.
    """

    def __init__(self, pcm: ParityCheckMatrix):
        self.pcm = pcm
        H = pcm.to_dense()
        reduced, perm, rank = _gf2_eliminate(H)
        self.rank = rank
        self.col_perm = perm
        # reduced[:rank, perm] = [I | Q]; parity = Q @ msg (mod 2)
        self._Q = reduced[np.ix_(range(rank), perm[rank:])]
        self.parity_positions = perm[:rank].copy()
        self.message_positions = np.sort(perm[rank:].copy())
        self._msg_src = perm[rank:].copy()
        self.k = pcm.n_vars - rank

    def encode(self, message: np.ndarray) -> np.ndarray:
        message = np.asarray(message)
        if message.shape != (self.k,):
            raise ValueError(f"message must have length {self.k}")
        if not np.isin(message, (0, 1)).all():
            raise ValueError("message bits must be 0/1")
        message = message.astype(np.uint8)
        cw = np.zeros(self.pcm.n_vars, dtype=np.uint8)
        cw[self._msg_src] = message
        cw[self.parity_positions] = (self._Q @ message) % 2
        return cw

    def extract_message(self, bits: np.ndarray) -> np.ndarray:
        """Read the message bits back out of a codeword-length vector."""
        bits = np.asarray(bits).astype(np.uint8)
        if bits.shape != (self.pcm.n_vars,):
            raise ValueError("bits must have codeword length")
        return bits[self._msg_src].copy()


_ENCODER_CACHE: "weakref.WeakKeyDictionary[ParityCheckMatrix, SystematicEncoder]"
_ENCODER_CACHE = weakref.WeakKeyDictionary()


def systematic_encoder(pcm: ParityCheckMatrix) -> SystematicEncoder:
    """Encoder for pcm, cached per matrix object."""
    enc = _ENCODER_CACHE.get(pcm)
    if enc is None:
        enc = SystematicEncoder(pcm)
        _ENCODER_CACHE[pcm] = enc
    return enc


def encode(
    pcm: ParityCheckMatrix,
    message: np.ndarray,
    *,
    allow_rank_deficient: bool = False,
) -> np.ndarray:
    """Systematically encode a message of length n_vars - rank(H).

    Refuses rank-deficient H unless allow_rank_deficient is set, because the
    effective rate then differs from the nominal one.
    """
    enc = systematic_encoder(pcm)
    if enc.rank < pcm.n_checks and not allow_rank_deficient:
        raise ValueError(
            f"H has rank {enc.rank} < {pcm.n_checks} checks; pass "
            "allow_rank_deficient=True to encode at the effective rate"
        )
    return enc.encode(message)


def syndrome_check(pcm: ParityCheckMatrix, bits: np.ndarray) -> bool:
    """True iff H bits = 0 over GF(2)."""
    bits = np.asarray(bits)
    if bits.shape != (pcm.n_vars,):
        raise ValueError("bits must have codeword length")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bits must be 0/1")
    b = bits.astype(np.uint8)
    return all(int(b[list(row)].sum()) % 2 == 0 for row in pcm.rows)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


class _SpaWorkspace:
    """Padded edge structure for the flooding sum-product decoder."""

    def __init__(self, pcm: ParityCheckMatrix):
        dmax = int(pcm.row_degrees.max())
        self.n_checks = pcm.n_checks
        self.dmax = dmax
        self.var_idx = np.zeros((pcm.n_checks, dmax), dtype=np.int64)
        self.mask = np.zeros((pcm.n_checks, dmax), dtype=bool)
        for m, row in enumerate(pcm.rows):
            self.var_idx[m, : len(row)] = row
            self.mask[m, : len(row)] = True
        self.flat_vars = self.var_idx[self.mask]
        self.dense = pcm.to_dense()


_SPA_CACHE: "weakref.WeakKeyDictionary[ParityCheckMatrix, _SpaWorkspace]"
_SPA_CACHE = weakref.WeakKeyDictionary()


def _spa_workspace(pcm: ParityCheckMatrix) -> _SpaWorkspace:
    ws = _SPA_CACHE.get(pcm)
    if ws is None:
        ws = _SpaWorkspace(pcm)
        _SPA_CACHE[pcm] = ws
    return ws


def spa_decode(pcm: ParityCheckMatrix, llr: np.ndarray, max_iters: int = 50):
    """Flooding sum-product decoding.

    Messages and inputs are clamped to +-30.  Returns (bits, converged,
    iters_used); converged means the syndrome is zero and no posterior was an
    exact tie (a tie is quantized to bit 0 but reported as not converged).
    Early exit on convergence.
    """
    llr = np.asarray(llr, dtype=float)
    if llr.shape != (pcm.n_vars,):
        raise ValueError("llr must have codeword length")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    ws = _spa_workspace(pcm)
    llr = np.clip(np.nan_to_num(llr, nan=0.0, posinf=LLR_CLAMP, neginf=-LLR_CLAMP),
                  -LLR_CLAMP, LLR_CLAMP)

    # check-to-variable messages, padded (n_checks, dmax); start at 0
    msg_cv = np.zeros((ws.n_checks, ws.dmax))
    posterior = llr.copy()
    bits = (posterior < 0).astype(np.uint8)
    iters_used = 0
    for it in range(1, max_iters + 1):
        iters_used = it
        # variable-to-check: posterior minus own incoming message
        msg_vc = posterior[ws.var_idx] - msg_cv
        msg_vc = np.clip(msg_vc, -LLR_CLAMP, LLR_CLAMP)
        t = np.where(ws.mask, np.tanh(0.5 * msg_vc), 1.0)
        zero = ws.mask & (t == 0.0)
        n_zero = zero.sum(axis=1, keepdims=True)
        prod_nz = np.prod(np.where(zero, 1.0, t), axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            ext = np.where(
                n_zero == 0,
                prod_nz / t,
                np.where((n_zero == 1) & zero, prod_nz, 0.0),
            )
        ext = np.clip(ext, -1.0 + 1e-15, 1.0 - 1e-15)
        msg_cv = np.clip(2.0 * np.arctanh(ext), -LLR_CLAMP, LLR_CLAMP)
        msg_cv[~ws.mask] = 0.0

        posterior = llr + np.bincount(
            ws.flat_vars, weights=msg_cv[ws.mask], minlength=pcm.n_vars
        )
        bits = (posterior < 0).astype(np.uint8)
        if not (ws.dense @ bits % 2).any() and not (posterior == 0).any():
            return bits, True, iters_used
    return bits, False, iters_used


def bf_decode(pcm: ParityCheckMatrix, bits: np.ndarray, max_iters: int = 50):
    """Gallager bit flipping: flip every bit whose unsatisfied-check count
    strictly exceeds half its degree; ties are not flipped.

    Returns (bits, converged, iters_used); a codeword input returns
    unchanged with 0 iterations.
    """
    bits = np.asarray(bits)
    if bits.shape != (pcm.n_vars,):
        raise ValueError("bits must have codeword length")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bits must be 0/1")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    ws = _spa_workspace(pcm)
    H = ws.dense.astype(np.int64)
    bits = bits.astype(np.uint8).copy()
    deg = pcm.col_degrees
    iters_used = 0
    for it in range(max_iters + 1):
        syn = H @ bits % 2
        if not syn.any():
            return bits, True, iters_used
        if it == max_iters:
            break
        unsat = H.T @ syn
        flip = unsat * 2 > deg
        if not flip.any():
            break  # stalled: every count is at or below the majority threshold
        bits[flip] ^= 1
        iters_used = it + 1
    return bits, False, iters_used


# ---------------------------------------------------------------------------
# fundamental polytope
# ---------------------------------------------------------------------------


def generate_fs_constraints(
    pcm: ParityCheckMatrix, degree_cap: int = 16
) -> list[FsConstraint]:
    """All forbidden-set inequalities of every check: one per odd-cardinality
    subset of the check's neighbourhood, 2^(d-1) per degree-d check.

    Checks with degree above degree_cap raise, since the count is exponential.
    """
    too_big = np.nonzero(pcm.row_degrees > degree_cap)[0]
    if too_big.size:
        raise ValueError(
            f"check {too_big[0]} has degree {pcm.row_degrees[too_big[0]]} "
            f"> degree_cap={degree_cap}"
        )
    out = []
    for m, row in enumerate(pcm.rows):
        d = len(row)
        for size in range(1, d + 1, 2):
            for subset in itertools.combinations(row, size):
                chosen = set(subset)
                comp = tuple(v for v in row if v not in chosen)
                out.append(FsConstraint(m, subset, comp))
    return out
