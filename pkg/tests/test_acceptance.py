"""End-to-end acceptance gates.

Each test covers one numbered criterion and prints a single PASS line so a
verbose run reads as a checklist. Criteria with stated runtime budgets
assert them with a wall clock.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from dcmerge.cli import main
from dcmerge.container import TensorContainer, read_container, write_container
from dcmerge.cover import CoverBasis, build_cover_basis
from dcmerge.linalg import truncated_svd, whiten
from dcmerge.merge import MergeConfig, dc_merge, merge_ta, merge_ties
from dcmerge.metrics import (
    alignment_score,
    cos_sim,
    dir_sim,
    projected_dir_sim,
    r_matrix,
)
from dcmerge.optimizer import OptimizerConfig, optimize_cover_basis
from dcmerge.perturb import direction_perturb, energy_perturb
from dcmerge.task_vector import TaskVector, decompose, reconstruct


def random_orthonormal(rng, d, k):
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return q * np.sign(np.diag(r))


def assert_columns_match(got, expected, tol):
    """Columnwise comparison up to sign."""
    for c in range(expected.shape[1]):
        err_plus = np.abs(got[:, c] - expected[:, c]).max()
        err_minus = np.abs(got[:, c] + expected[:, c]).max()
        assert min(err_plus, err_minus) <= tol


def test_criterion_01_two_dyad_whitening_reproduction():
    start = time.perf_counter()
    u1 = np.array([1.0, 0.0])
    u2 = np.array([0.1104, 0.9939])
    d1 = np.outer(u1, u1)
    d2 = np.outer(u2, u2)

    # (a) the naive sum rotates both directions toward each other
    naive_u = np.linalg.svd(d1 + d2)[0]
    naive_expected = np.array([[0.7451, 0.6669], [0.6669, -0.7451]])
    assert_columns_match(naive_u, naive_expected, 2e-3)

    # (b) whitening the stacked directions keeps them nearly apart
    white = whiten(np.column_stack([u1, u2]))
    white_expected = np.array([[0.9985, 0.0533], [-0.0533, 0.9985]])
    assert_columns_match(white, white_expected, 5e-3)

    # (c) merging with the diagonal mask lands on the whitened columns
    tasks = [TaskVector(name="a", delta=d1), TaskVector(name="b", delta=d2)]
    merged = dc_merge(tasks, MergeConfig(rank=1, mask_block=1))
    merged_u = np.linalg.svd(merged)[0]
    # merged singular values are nearly tied, so match columns by overlap
    taken = set()
    for c in range(2):
        overlaps = np.abs(merged_u.T @ white[:, c])
        pick = int(np.argmax(overlaps))
        assert pick not in taken
        taken.add(pick)
        sign = np.sign(merged_u[:, pick] @ white[:, c])
        assert np.abs(sign * merged_u[:, pick] - white[:, c]).max() <= 1e-6

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    print(f"criterion 01 PASS: two-dyad reproduction in {elapsed:.3f}s")


def test_criterion_02_cosine_formula_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(2, 17))
        n = int(rng.integers(2, 13))
        r = min(m, n)
        a = rng.standard_normal((m, n))
        b = rng.standard_normal((m, n))
        kda = decompose(TaskVector(name="a", delta=a), r)
        kdb = decompose(TaskVector(name="b", delta=b), r)
        rm = r_matrix(kda, kdb).values
        formula = (kda.sigma @ rm @ kdb.sigma) / (
            np.linalg.norm(kda.sigma) * np.linalg.norm(kdb.sigma)
        )
        direct = cos_sim(a, b)
        worst = max(worst, abs(formula - direct))
    assert worst <= 1e-10
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    print(
        f"criterion 02 PASS: 200 cosine oracle pairs, worst gap {worst:.2e}, "
        f"{elapsed:.2f}s"
    )


def test_criterion_03_coefficient_projection_identities():
    rng = np.random.default_rng(30)
    worst_res = 0.0
    worst_tr = 0.0
    for _ in range(200):
        m = int(rng.integers(4, 13))
        n = int(rng.integers(4, 13))
        k = int(rng.integers(1, min(m, n) + 1))
        delta = rng.standard_normal((m, n))
        u = random_orthonormal(rng, m, k)
        v = random_orthonormal(rng, n, k)
        d = np.diag(u.T @ delta @ v)
        best = np.linalg.norm(delta - u @ np.diag(d) @ v.T) ** 2
        expected = np.linalg.norm(delta) ** 2 - np.sum(d**2)
        worst_res = max(worst_res, abs(best - expected))
        worst_tr = max(worst_tr, abs(np.sum(delta * (u @ v.T)) - d.sum()))
    assert worst_res <= 1e-8
    assert worst_tr <= 1e-8
    print(
        f"criterion 03 PASS: 200 projection identities, residual gap "
        f"{worst_res:.2e}, trace gap {worst_tr:.2e}"
    )


def test_criterion_04_perturbation_exactness():
    rng = np.random.default_rng(40)
    grid = np.round(np.linspace(0.0, 1.0, 11), 10)

    sigma = np.sort(rng.uniform(0.5, 4.0, size=6))[::-1].copy()
    for p in grid:
        hat = energy_perturb(sigma, float(p))
        cos = np.dot(hat, sigma) / (np.linalg.norm(hat) * np.linalg.norm(sigma))
        assert abs(cos - p) <= 1e-10
        assert abs(np.linalg.norm(hat) - np.linalg.norm(sigma)) <= 1e-12 * np.linalg.norm(sigma)

    kd = decompose(
        TaskVector(name="t", delta=rng.standard_normal((32, 32))), 4
    )
    for p in grid:
        out = direction_perturb(kd, float(p), seed=4040)
        assert abs(dir_sim(kd, out) - p) <= 1e-8

    print("criterion 04 PASS: energy and direction hit p over the full grid")


def test_criterion_05_alignment_closed_form_and_whitening_dominance():
    rng = np.random.default_rng(50)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(5, 11))
        n = int(rng.integers(5, 11))
        k = int(rng.integers(1, 5))
        decomps = [
            decompose(TaskVector(name="t", delta=rng.standard_normal((m, n))), 2)
            for _ in range(2)
        ]
        u = random_orthonormal(rng, m, k)
        v = random_orthonormal(rng, n, k)
        closed = alignment_score(u, v, decomps)
        by_hand = 0.0
        for kd in decomps:
            for j in range(kd.sigma.size):
                coeffs = (u.T @ kd.U[:, j]) * (v.T @ kd.V[:, j])
                by_hand += float(np.sum(coeffs**2))
        worst = max(worst, abs(closed - by_hand))
    assert worst <= 1e-10

    for seed in (51, 52, 53):
        rng = np.random.default_rng(seed)
        decomps = [
            decompose(TaskVector(name="t", delta=rng.standard_normal((9, 8))), 2)
            for _ in range(3)
        ]
        basis = build_cover_basis(decomps)
        score = alignment_score(basis.U_tilde, basis.V_tilde, decomps)
        for _ in range(500):
            qu = random_orthonormal(rng, 9, 6)
            qv = random_orthonormal(rng, 8, 6)
            assert alignment_score(qu, qv, decomps) < score
    print(
        f"criterion 05 PASS: closed form gap {worst:.2e}, whitening beat "
        f"500 baselines on 3 instances"
    )


def test_criterion_06_shared_geometry_preservation():
    m, n, t, r = 32, 24, 4, 3
    k = t * r
    worst_angle = 0.0
    for trial in range(20):
        rng = np.random.default_rng(300 + trial)
        u0 = random_orthonormal(rng, m, k)
        v0 = random_orthonormal(rng, n, k)
        tasks = []
        for i in range(t):
            sigma = np.sort(rng.uniform(0.5, 2.0, size=r))[::-1]
            sl = slice(i * r, (i + 1) * r)
            delta = (u0[:, sl] * sigma) @ v0[:, sl].T
            tasks.append(TaskVector(name=f"t{i}", delta=delta))
        merged = dc_merge(tasks, MergeConfig(rank=r, mask_block=1))
        mu, ms, mv = np.linalg.svd(merged, full_matrices=False)
        rank = int(np.sum(ms > 1e-10 * ms[0]))
        assert rank == k
        angle = max(
            subspace_angles(mu[:, :rank], u0).max(),
            subspace_angles(mv.T[:, :rank], v0).max(),
        )
        worst_angle = max(worst_angle, angle)
    assert worst_angle <= 1e-6
    print(
        f"criterion 06 PASS: 20 ensembles, worst principal angle "
        f"{worst_angle:.2e}"
    )


def test_criterion_07_directional_consistency_improvement():
    d, t, r = 24, 3, 4
    wins = 0
    gaps = []
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        qu = random_orthonormal(rng, d, 8)
        qv = random_orthonormal(rng, d, 8)
        tasks = []
        for i in range(t):
            shared = rng.uniform(0.8, 1.6, size=2)
            private = rng.uniform(0.3, 0.9, size=2)
            delta = np.zeros((d, d))
            for j in range(2):
                delta += shared[j] * np.outer(qu[:, j], qv[:, j])
            for j in range(2):
                col = 2 + 2 * i + j
                delta += private[j] * np.outer(qu[:, col], qv[:, col])
            delta += 0.02 * rng.standard_normal((d, d))
            tasks.append(TaskVector(name=f"t{i}", delta=delta))
        merged_dc = dc_merge(tasks, MergeConfig(rank=r))
        merged_ta = merge_ta([tv.delta for tv in tasks])
        dc_mean = np.mean(
            [projected_dir_sim(decompose(tv, r), merged_dc) for tv in tasks]
        )
        ta_mean = np.mean(
            [projected_dir_sim(decompose(tv, r), merged_ta) for tv in tasks]
        )
        gaps.append(dc_mean - ta_mean)
        if dc_mean > ta_mean:
            wins += 1
    assert wins >= 16
    print(
        f"criterion 07 PASS: {wins}/20 trials favor the cover-space merge, "
        f"mean gap {np.mean(gaps):+.4f}"
    )


def cone_dirs(rng, d, n, spread):
    center = rng.standard_normal(d)
    center /= np.linalg.norm(center)
    dirs = []
    for _ in range(n):
        raw = rng.standard_normal(d)
        resid = raw - (raw @ center) * center
        resid /= np.linalg.norm(resid)
        v = center + spread * resid
        dirs.append(v / np.linalg.norm(v))
    return np.column_stack(dirs)


def test_criterion_08_optimizer_convergence():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    d = 16
    us = cone_dirs(rng, d, 6, 0.55)
    vs = cone_dirs(rng, d, 6, 0.55)
    weights = 1.0 + 0.5 * rng.uniform(size=6)
    decomps = []
    for i in range(3):
        delta = np.zeros((d, d))
        for j in (2 * i, 2 * i + 1):
            delta += weights[j] * np.outer(us[:, j], vs[:, j])
        decomps.append(decompose(TaskVector(name=f"t{i}", delta=delta), 2))

    white = build_cover_basis(decomps)
    white_score = alignment_score(white.U_tilde, white.V_tilde, decomps)
    total = sum(reconstruct(kd) for kd in decomps)
    trip = truncated_svd(total, 6)
    init = CoverBasis(U_tilde=trip.U, V_tilde=trip.V)
    init_score = alignment_score(init.U_tilde, init.V_tilde, decomps)
    assert init_score < 0.9 * white_score  # genuinely poor start

    cfg = OptimizerConfig(max_iters=500, learning_rate=1e-2, log_every=1)
    _, trace = optimize_cover_basis(decomps, init, cfg)
    scores = trace.scores
    for a, b in zip(scores, scores[1:]):
        assert b >= a - 1e-8
    assert trace.final_score >= 0.98 * white_score
    hit = next(
        it for it, s in zip(trace.iterations, scores) if s >= 0.98 * white_score
    )
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    print(
        f"criterion 08 PASS: reached 0.98x whitening at iteration {hit}, "
        f"final {trace.final_score:.3f} vs whitening {white_score:.3f}, "
        f"{elapsed:.1f}s"
    )


def test_criterion_09_ties_counting_and_election():
    rng = np.random.default_rng(90)

    # trimming keeps exactly ceil(keep * entries) per task
    values = rng.permutation(np.arange(1.0, 43.0)).reshape(6, 7)
    for keep in (0.1, 0.33, 0.5, 0.999, 1.0):
        out = merge_ties([values], keep=keep)
        assert np.count_nonzero(out) == math.ceil(keep * values.size)

    # full oracle on agreeing-sign tasks: union support, per-coordinate mean
    mats = [np.abs(rng.standard_normal((5, 5))) + 0.05 for _ in range(3)]
    keep = 0.4
    n_keep = math.ceil(keep * 25)
    kept_masks = []
    for mat in mats:
        order = np.argsort(-np.abs(mat), axis=None, kind="stable")
        mask = np.zeros(25, dtype=bool)
        mask[order[:n_keep]] = True
        kept_masks.append(mask.reshape(5, 5))
    counts = np.sum(kept_masks, axis=0)
    total = sum(np.where(mask, mat, 0.0) for mask, mat in zip(kept_masks, mats))
    expected = np.divide(
        total, counts, out=np.zeros((5, 5)), where=counts > 0
    )
    np.testing.assert_array_equal(merge_ties(mats, keep=keep), expected)

    # election zeroes coordinates whose elected sign has no support
    out = merge_ties([np.array([[1.0]]), np.array([[-1.0]])], keep=1.0)
    assert out[0, 0] == 0.0
    out = merge_ties([np.array([[2.0]]), np.array([[1.0]])], keep=1.0)
    assert out[0, 0] == 1.5

    # keep = 1 with agreeing signs is the exact entry-wise mean
    agree = [np.abs(rng.standard_normal((4, 6))) + 0.1 for _ in range(4)]
    assert np.array_equal(merge_ties(agree, keep=1.0), np.mean(agree, axis=0))

    print("criterion 09 PASS: trim counts, election zeros, disjoint mean")


def test_criterion_10_container_round_trip_and_rejection(tmp_path):
    rng = np.random.default_rng(95)
    tensors = {}
    for i in range(1000):
        shape = tuple(rng.integers(1, 4, size=int(rng.integers(1, 3))))
        dtype = np.float32 if i % 3 else np.float64
        tensors[f"t{i:04d}"] = rng.standard_normal(shape).astype(dtype)
    p1 = tmp_path / "big1.dcm"
    p2 = tmp_path / "big2.dcm"
    write_container(TensorContainer(tensors=tensors), p1)
    loaded = read_container(p1)
    write_container(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for name, arr in tensors.items():
        got = loaded.tensors[name]
        assert got.dtype == arr.dtype and np.array_equal(got, arr)

    def craft(path, entries, data):
        payload = json.dumps(entries).encode("utf-8")
        path.write_bytes(len(payload).to_bytes(8, "little") + payload + data)

    overlap = tmp_path / "overlap.dcm"
    craft(
        overlap,
        {
            "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
        },
        b"\x00" * 12,
    )
    assert main(["inspect", str(overlap)]) == 2

    truncated = tmp_path / "trunc.dcm"
    truncated.write_bytes((999).to_bytes(8, "little") + b"{}")
    assert main(["inspect", str(truncated)]) == 2

    print("criterion 10 PASS: 1000-tensor bitwise round trip, malformed rejected")
