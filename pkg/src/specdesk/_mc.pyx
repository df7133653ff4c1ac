# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Monte-Carlo kernels; twin of specdesk._mc_py.

Same function signatures, same uniform-draw order, same sequential
floating-point reductions: results are bit-identical to the pure-Python
kernel, only faster.  Keep the two modules in lockstep.
"""

import numpy as np

from libc.stdint cimport int64_t, uint64_t

cdef double DEGENERATE_EPS = 1e-15
cdef uint64_t GOLDEN = <uint64_t>0x9E3779B97F4A7C15


cdef inline uint64_t _mix64(uint64_t z) nogil:
    z ^= z >> 30
    z *= <uint64_t>0xBF58476D1CE4E5B9
    z ^= z >> 27
    z *= <uint64_t>0x94D049BB133111EB
    z ^= z >> 31
    return z


cdef inline uint64_t _next_u64(uint64_t* state) nogil:
    state[0] += GOLDEN
    return _mix64(state[0])


cdef inline double _u01(uint64_t* state) nogil:
    return <double>(_next_u64(state) >> 11) * (1.0 / 9007199254740992.0)


cdef inline uint64_t _derive_seed(uint64_t base, uint64_t index) nogil:
    return _mix64(base + (index + 1) * GOLDEN)


cdef inline long _ipow(long base, long exp) nogil:
    cdef long r = 1
    cdef long i
    for i in range(exp):
        r *= base
    return r


cdef inline long _roll(long code, long tok, long order, long mod, long vocab) nogil:
    if order <= 0:
        return 0
    return (code % mod) * vocab + tok


cdef long _ctx_code(long[::1] tokens, long order, long vocab):
    cdef long code = 0
    cdef Py_ssize_t n = tokens.shape[0]
    cdef Py_ssize_t start, i
    if order <= 0:
        return 0
    start = n - order
    if start < 0:
        start = 0
    for i in range(start, n):
        code = code * vocab + tokens[i]
    return code


cdef inline Py_ssize_t _tail_guard(double[::1] row, Py_ssize_t vocab) nogil:
    cdef Py_ssize_t idx = vocab - 1
    while idx > 0 and row[idx] <= 0.0:
        idx -= 1
    return idx


cdef Py_ssize_t _draw_buf(double[::1] row, Py_ssize_t vocab, uint64_t* state) nogil:
    cdef double u = _u01(state)
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(vocab):
        acc += row[i]
        if u < acc:
            return i
    return _tail_guard(row, vocab)


cdef Py_ssize_t _draw2(double[:, ::1] tab, Py_ssize_t r, uint64_t* state) nogil:
    cdef Py_ssize_t vocab = tab.shape[1]
    cdef double u = _u01(state)
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(vocab):
        acc += tab[r, i]
        if u < acc:
            return i
    cdef Py_ssize_t idx = vocab - 1
    while idx > 0 and tab[r, idx] <= 0.0:
        idx -= 1
    return idx


cdef Py_ssize_t _draw3(double[:, :, ::1] tab, Py_ssize_t r, Py_ssize_t j, uint64_t* state) nogil:
    cdef Py_ssize_t vocab = tab.shape[2]
    cdef double u = _u01(state)
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(vocab):
        acc += tab[r, j, i]
        if u < acc:
            return i
    cdef Py_ssize_t idx = vocab - 1
    while idx > 0 and tab[r, j, idx] <= 0.0:
        idx -= 1
    return idx


cdef void _build_csr(long[::1] parents, long[::1] offsets, long[::1] kidlist):
    cdef Py_ssize_t n = parents.shape[0]
    cdef Py_ssize_t i
    cdef long p
    cdef long total = 0
    for i in range(n + 1):
        offsets[i] = 0
    for i in range(n):
        p = parents[i]
        offsets[(n if p == -1 else p)] += 1
    # prefix sums -> start offsets
    cdef long run = 0, c
    for i in range(n + 1):
        c = offsets[i]
        offsets[i] = run
        run += c
    offsets[n + 1] = run
    cdef long[::1] cursor = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        p = parents[i]
        p = n if p == -1 else p
        kidlist[offsets[p] + cursor[p]] = i
        cursor[p] += 1


cdef long _spec_round_c(
    double[:, ::1] tp, long t_order, long t_mod,
    double[:, :, ::1] dp, long[:, :, ::1] rk, long d_order, long d_mod,
    long[::1] depths, long[::1] ranks,
    long[::1] offsets, long[::1] kidlist, long mode,
    long* t_ctx, long* d_ctx, uint64_t* state,
    double[::1] p_buf, double[::1] pos_buf,
    long[::1] toks, double[::1] qp, long[::1] round_toks,
    int64_t* examined, int64_t* accepted, int64_t* forced,
    bint force_accept,
):
    """One speculative round; returns commit count, tokens in round_toks."""
    cdef Py_ssize_t vocab = tp.shape[1]
    cdef Py_ssize_t n = depths.shape[0]
    cdef Py_ssize_t i, j, ii, m
    cdef long a, b, s, tok, node, d
    cdef long cur_t = t_ctx[0]
    cdef long dctx = d_ctx[0]
    cdef double r, pt, qs, ratio, dd, tot
    cdef long rcount = 0
    cdef bint advanced

    for i in range(n):
        d = depths[i] - 1
        if mode == 0:
            tok = rk[dctx, d, ranks[i]]
        else:
            tok = _draw3(dp, dctx, d, state)
        toks[i] = tok
        qp[i] = dp[dctx, d, tok]

    for j in range(vocab):
        p_buf[j] = tp[cur_t, j]
    node = n  # csr root slot
    while True:
        a = offsets[node]
        b = offsets[node + 1]
        m = b - a
        if m == 0:
            break
        # Children are examined in node-index (sampling) order.  Each
        # examined candidate must be a fresh i.i.d. draw from q_d, so any
        # value-dependent reordering would bias the accepted token.
        advanced = False
        for ii in range(m):
            s = kidlist[a + ii]
            r = _u01(state)
            tok = toks[s]
            pt = p_buf[tok]
            qs = qp[s]
            if pt <= 0.0:
                ratio = 0.0
            elif qs <= 0.0 or pt >= qs:
                ratio = 1.0
            else:
                ratio = pt / qs
            examined[0] += 1
            if force_accept or r < ratio:
                accepted[0] += 1
                advanced = True
            else:
                d = depths[s] - 1
                tot = 0.0
                for j in range(vocab):
                    dd = p_buf[j] - dp[dctx, d, j]
                    pos_buf[j] = dd if dd > 0.0 else 0.0
                    tot += pos_buf[j]
                if tot <= DEGENERATE_EPS:
                    forced[0] += 1
                    accepted[0] += 1
                    advanced = True
                else:
                    for j in range(vocab):
                        p_buf[j] = pos_buf[j] / tot
                    continue
            round_toks[rcount] = tok
            rcount += 1
            cur_t = _roll(cur_t, tok, t_order, t_mod, vocab)
            for j in range(vocab):
                p_buf[j] = tp[cur_t, j]
            node = s
            break
        if not advanced:
            break

    tok = _draw_buf(p_buf, vocab, state)
    round_toks[rcount] = tok
    rcount += 1
    cur_t = _roll(cur_t, tok, t_order, t_mod, vocab)
    for ii in range(rcount):
        dctx = _roll(dctx, round_toks[ii], d_order, d_mod, vocab)
    t_ctx[0] = cur_t
    d_ctx[0] = dctx
    return rcount


def run_speculative_trials(
    double[:, ::1] target_probs, long t_order,
    double[:, :, ::1] drafter_probs, long[:, :, ::1] rank_tokens, long d_order,
    long[::1] parents, long[::1] depths, long[::1] ranks, long mode,
    long[::1] prompt, long min_new, long bin_len,
    long trials, unsigned long long base_seed,
):
    cdef long vocab = target_probs.shape[1]
    cdef long t_mod = _ipow(vocab, max(t_order - 1, 0))
    cdef long d_mod = _ipow(vocab, max(d_order - 1, 0))
    cdef Py_ssize_t n = parents.shape[0]
    cdef long max_depth = int(np.max(depths)) if n else 0

    offsets_a = np.zeros(n + 2, dtype=np.int64)
    kidlist_a = np.zeros(max(n, 1), dtype=np.int64)
    cdef long[::1] offsets = offsets_a
    cdef long[::1] kidlist = kidlist_a
    _build_csr(parents, offsets, kidlist)

    counts_a = np.zeros(_ipow(vocab, bin_len), dtype=np.int64)
    cdef long[::1] counts = counts_a
    cdef double[::1] p_buf = np.empty(vocab, dtype=np.float64)
    cdef double[::1] pos_buf = np.empty(vocab, dtype=np.float64)
    cdef long[::1] toks = np.empty(max(n, 1), dtype=np.int64)
    cdef double[::1] qp = np.empty(max(n, 1), dtype=np.float64)
    cdef long[::1] round_toks = np.empty(max_depth + 2, dtype=np.int64)

    cdef int64_t rounds = 0, committed = 0, examined = 0, accepted = 0
    cdef int64_t forced = 0, violations = 0, min_commit = 0, max_commit = 0
    cdef long t0 = _ctx_code(prompt, t_order, vocab)
    cdef long d0 = _ctx_code(prompt, d_order, vocab)
    cdef uint64_t state
    cdef long trial, t_ctx, d_ctx, produced, code, rc, ii

    for trial in range(trials):
        state = _derive_seed(base_seed, <uint64_t>trial)
        t_ctx = t0
        d_ctx = d0
        produced = 0
        code = 0
        while produced < min_new:
            rc = _spec_round_c(
                target_probs, t_order, t_mod, drafter_probs, rank_tokens,
                d_order, d_mod, depths, ranks, offsets, kidlist, mode,
                &t_ctx, &d_ctx, &state, p_buf, pos_buf, toks, qp,
                round_toks, &examined, &accepted, &forced, False,
            )
            rounds += 1
            committed += rc
            if rounds == 1 or rc < min_commit:
                min_commit = rc
            if rc > max_commit:
                max_commit = rc
            if rc < 1 or rc > max_depth + 1:
                violations += 1
            for ii in range(rc):
                if produced < bin_len:
                    code = code * vocab + round_toks[ii]
                produced += 1
        counts[code] += 1

    stats = np.array(
        [rounds, committed, examined, accepted, forced, violations,
         min_commit, max_commit], dtype=np.int64)
    return counts_a, stats


def run_speculative_trace(
    double[:, ::1] target_probs, long t_order,
    double[:, :, ::1] drafter_probs, long[:, :, ::1] rank_tokens, long d_order,
    long[::1] parents, long[::1] depths, long[::1] ranks, long mode,
    long[::1] prompt, long min_new, unsigned long long seed,
):
    cdef long vocab = target_probs.shape[1]
    cdef long t_mod = _ipow(vocab, max(t_order - 1, 0))
    cdef long d_mod = _ipow(vocab, max(d_order - 1, 0))
    cdef Py_ssize_t n = parents.shape[0]
    cdef long max_depth = int(np.max(depths)) if n else 0

    offsets_a = np.zeros(n + 2, dtype=np.int64)
    kidlist_a = np.zeros(max(n, 1), dtype=np.int64)
    cdef long[::1] offsets = offsets_a
    cdef long[::1] kidlist = kidlist_a
    _build_csr(parents, offsets, kidlist)

    cdef double[::1] p_buf = np.empty(vocab, dtype=np.float64)
    cdef double[::1] pos_buf = np.empty(vocab, dtype=np.float64)
    cdef long[::1] toks = np.empty(max(n, 1), dtype=np.int64)
    cdef double[::1] qp = np.empty(max(n, 1), dtype=np.float64)
    cdef long[::1] round_toks = np.empty(max_depth + 2, dtype=np.int64)

    cdef int64_t examined = 0, accepted = 0, forced = 0
    cdef uint64_t state = seed
    cdef long t_ctx = _ctx_code(prompt, t_order, vocab)
    cdef long d_ctx = _ctx_code(prompt, d_order, vocab)
    cdef long rc, ii
    out = []
    commits = []
    while len(out) < min_new:
        rc = _spec_round_c(
            target_probs, t_order, t_mod, drafter_probs, rank_tokens,
            d_order, d_mod, depths, ranks, offsets, kidlist, mode,
            &t_ctx, &d_ctx, &state, p_buf, pos_buf, toks, qp,
            round_toks, &examined, &accepted, &forced, False,
        )
        for ii in range(rc):
            out.append(round_toks[ii])
        commits.append(rc)
    return np.array(out, dtype=np.int64), np.array(commits, dtype=np.int64)


def run_autoregressive_trials(
    double[:, ::1] target_probs, long t_order,
    long[::1] prompt, long n_new, long bin_len,
    long trials, unsigned long long base_seed,
):
    cdef long vocab = target_probs.shape[1]
    cdef long t_mod = _ipow(vocab, max(t_order - 1, 0))
    counts_a = np.zeros(_ipow(vocab, bin_len), dtype=np.int64)
    cdef long[::1] counts = counts_a
    cdef long t0 = _ctx_code(prompt, t_order, vocab)
    cdef uint64_t state
    cdef long trial, ctx, code, i, tok
    cdef int64_t total = 0
    for trial in range(trials):
        state = _derive_seed(base_seed, <uint64_t>trial)
        ctx = t0
        code = 0
        for i in range(n_new):
            tok = _draw2(target_probs, ctx, &state)
            ctx = _roll(ctx, tok, t_order, t_mod, vocab)
            if i < bin_len:
                code = code * vocab + tok
            total += 1
        counts[code] += 1
    stats = np.array([total, total, 0, 0, 0, 0, 1, 1], dtype=np.int64)
    return counts_a, stats


def run_autoregressive_trace(
    double[:, ::1] target_probs, long t_order,
    long[::1] prompt, long n_new, unsigned long long seed,
):
    cdef long vocab = target_probs.shape[1]
    cdef long t_mod = _ipow(vocab, max(t_order - 1, 0))
    cdef uint64_t state = seed
    cdef long ctx = _ctx_code(prompt, t_order, vocab)
    out_a = np.empty(n_new, dtype=np.int64)
    cdef long[::1] out = out_a
    cdef long i, tok
    for i in range(n_new):
        tok = _draw2(target_probs, ctx, &state)
        ctx = _roll(ctx, tok, t_order, t_mod, vocab)
        out[i] = tok
    return out_a


cdef long _chain_round_c(
    double[:, ::1] tp, long t_order, long t_mod,
    double[:, ::1] cp, long d_order, long d_mod, long gamma,
    long* t_ctx, long* d_ctx, uint64_t* state,
    double[::1] pos_buf, long[::1] drafted, long[::1] qctx, long[::1] round_toks,
    int64_t* examined, int64_t* accepted, int64_t* forced,
):
    cdef Py_ssize_t vocab = tp.shape[1]
    cdef long run_d = d_ctx[0]
    cdef long pctx = t_ctx[0]
    cdef long i, j, tok, x
    cdef double r, pt, qs, ratio, dd, tot
    cdef long rcount = 0
    cdef bint stopped = False

    for i in range(gamma):
        tok = _draw2(cp, run_d, state)
        drafted[i] = tok
        qctx[i] = run_d
        run_d = _roll(run_d, tok, d_order, d_mod, vocab)

    for i in range(gamma):
        tok = drafted[i]
        r = _u01(state)
        pt = tp[pctx, tok]
        qs = cp[qctx[i], tok]
        if pt <= 0.0:
            ratio = 0.0
        elif qs <= 0.0 or pt >= qs:
            ratio = 1.0
        else:
            ratio = pt / qs
        examined[0] += 1
        if r < ratio:
            accepted[0] += 1
        else:
            tot = 0.0
            for j in range(vocab):
                dd = tp[pctx, j] - cp[qctx[i], j]
                pos_buf[j] = dd if dd > 0.0 else 0.0
                tot += pos_buf[j]
            if tot <= DEGENERATE_EPS:
                forced[0] += 1
                accepted[0] += 1
            else:
                for j in range(vocab):
                    pos_buf[j] = pos_buf[j] / tot
                x = _draw_buf(pos_buf, vocab, state)
                round_toks[rcount] = x
                rcount += 1
                pctx = _roll(pctx, x, t_order, t_mod, vocab)
                stopped = True
                break
        round_toks[rcount] = tok
        rcount += 1
        pctx = _roll(pctx, tok, t_order, t_mod, vocab)
    if not stopped:
        x = _draw2(tp, pctx, state)
        round_toks[rcount] = x
        rcount += 1
        pctx = _roll(pctx, x, t_order, t_mod, vocab)
    cdef long dctx = d_ctx[0]
    for i in range(rcount):
        dctx = _roll(dctx, round_toks[i], d_order, d_mod, vocab)
    t_ctx[0] = pctx
    d_ctx[0] = dctx
    return rcount


def run_chain_trials(
    double[:, ::1] target_probs, long t_order,
    double[:, ::1] chain_probs, long d_order, long gamma,
    long[::1] prompt, long min_new, long bin_len,
    long trials, unsigned long long base_seed,
):
    cdef long vocab = target_probs.shape[1]
    cdef long t_mod = _ipow(vocab, max(t_order - 1, 0))
    cdef long d_mod = _ipow(vocab, max(d_order - 1, 0))
    counts_a = np.zeros(_ipow(vocab, bin_len), dtype=np.int64)
    cdef long[::1] counts = counts_a
    cdef double[::1] pos_buf = np.empty(vocab, dtype=np.float64)
    cdef long[::1] drafted = np.empty(gamma, dtype=np.int64)
    cdef long[::1] qctx = np.empty(gamma, dtype=np.int64)
    cdef long[::1] round_toks = np.empty(gamma + 1, dtype=np.int64)
    cdef int64_t rounds = 0, committed = 0, examined = 0, accepted = 0
    cdef int64_t forced = 0, violations = 0, min_commit = 0, max_commit = 0
    cdef long t0 = _ctx_code(prompt, t_order, vocab)
    cdef long d0 = _ctx_code(prompt, d_order, vocab)
    cdef uint64_t state
    cdef long trial, t_ctx, d_ctx, produced, code, rc, ii
    for trial in range(trials):
        state = _derive_seed(base_seed, <uint64_t>trial)
        t_ctx = t0
        d_ctx = d0
        produced = 0
        code = 0
        while produced < min_new:
            rc = _chain_round_c(
                target_probs, t_order, t_mod, chain_probs, d_order, d_mod,
                gamma, &t_ctx, &d_ctx, &state, pos_buf, drafted, qctx,
                round_toks, &examined, &accepted, &forced,
            )
            rounds += 1
            committed += rc
            if rounds == 1 or rc < min_commit:
                min_commit = rc
            if rc > max_commit:
                max_commit = rc
            if rc < 1 or rc > gamma + 1:
                violations += 1
            for ii in range(rc):
                if produced < bin_len:
                    code = code * vocab + round_toks[ii]
                produced += 1
        counts[code] += 1
    stats = np.array(
        [rounds, committed, examined, accepted, forced, violations,
         min_commit, max_commit], dtype=np.int64)
    return counts_a, stats


def run_chain_trace(
    double[:, ::1] target_probs, long t_order,
    double[:, ::1] chain_probs, long d_order, long gamma,
    long[::1] prompt, long min_new, unsigned long long seed,
):
    cdef long vocab = target_probs.shape[1]
    cdef long t_mod = _ipow(vocab, max(t_order - 1, 0))
    cdef long d_mod = _ipow(vocab, max(d_order - 1, 0))
    cdef double[::1] pos_buf = np.empty(vocab, dtype=np.float64)
    cdef long[::1] drafted = np.empty(gamma, dtype=np.int64)
    cdef long[::1] qctx = np.empty(gamma, dtype=np.int64)
    cdef long[::1] round_toks = np.empty(gamma + 1, dtype=np.int64)
    cdef int64_t examined = 0, accepted = 0, forced = 0
    cdef uint64_t state = seed
    cdef long t_ctx = _ctx_code(prompt, t_order, vocab)
    cdef long d_ctx = _ctx_code(prompt, d_order, vocab)
    cdef long rc, ii
    out = []
    commits = []
    while len(out) < min_new:
        rc = _chain_round_c(
            target_probs, t_order, t_mod, chain_probs, d_order, d_mod,
            gamma, &t_ctx, &d_ctx, &state, pos_buf, drafted, qctx,
            round_toks, &examined, &accepted, &forced,
        )
        for ii in range(rc):
            out.append(round_toks[ii])
        commits.append(rc)
    return np.array(out, dtype=np.int64), np.array(commits, dtype=np.int64)
