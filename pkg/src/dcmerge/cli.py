"""Command-line entry points.

Subcommands: merge, report, inspect, perturb, optimize-basis,
accuracy-report. Exit codes: 0 on success, 2 on input validation failure
(including file problems), 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .container import (
    TensorContainer,
    detect_mode,
    extract_task_vectors,
    read_container,
    write_container,
)
from .cover import CoverBasis, build_cover_basis, project
from .errors import NumericalError, ValidationError
from .linalg import truncated_svd
from .merge import MergeConfig, assemble_model, dc_merge
from .metrics import (
    TaskAccuracy,
    accuracy_report,
    alignment_score,
    cos_sim,
    dir_sim,
    projected_dir_sim,
)
from .optimizer import OptimizerConfig, optimize_cover_basis
from .perturb import direction_perturb, energy_perturb
from .task_vector import SmoothingStrategy, decompose, reconstruct

__all__ = ["main"]


def _rank_arg(text: str):
    if text == "auto":
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"rank must be positive, got {value}")
    return value


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _worker_count(flag: int | None) -> int:
    env = os.environ.get("DCMERGE_THREADS")
    if env is not None:
        try:
            count = int(env)
        except ValueError:
            raise ValidationError(f"DCMERGE_THREADS must be an integer, got {env!r}")
        if count < 1:
            raise ValidationError(f"DCMERGE_THREADS must be >= 1, got {count}")
        return count
    if flag is not None:
        if flag < 1:
            raise ValidationError(f"--threads must be >= 1, got {flag}")
        return flag
    return min(4, os.cpu_count() or 1)


def _smoothing_from_flags(args) -> SmoothingStrategy | None:
    if args.smoothing is None:
        return None
    if args.smoothing == "none":
        return SmoothingStrategy.truncate_only()
    if args.smoothing == "avg":
        return SmoothingStrategy.averaging()
    if args.smoothing == "linear":
        return SmoothingStrategy.linear(args.rho)
    return SmoothingStrategy.interpolate(args.tau)


def _auto_rank(tv, n_tasks: int) -> int:
    if tv.lora_rank is not None:
        return tv.lora_rank
    m, n = tv.shape
    return max(1, min(m, n) // max(n_tasks, 1))


def _load_tasks(base, task_paths, mode):
    extracts = []
    for path in task_paths:
        extracts.append(extract_task_vectors(base, read_container(path), mode))
    names = [set(ex.matrices) for ex in extracts]
    if any(s != names[0] for s in names[1:]):
        raise ValidationError(
            "task checkpoints expose different matrix tensors; "
            "they must share one architecture"
        )
    return extracts


def _cmd_merge(args) -> int:
    base = read_container(args.base)
    extracts = _load_tasks(base, args.task, args.mode)
    cfg = MergeConfig(
        mode=args.mode,
        rank=args.rank,
        smoothing=_smoothing_from_flags(args),
        merger=args.merger,
        ties_keep=args.ties_keep,
        mask_block=args.mask_block,
        alpha=args.alpha,
    )
    matrix_names = sorted(extracts[0].matrices)

    def merge_one(name):
        return dc_merge([ex.matrices[name] for ex in extracts], cfg)

    workers = _worker_count(args.threads)
    if workers == 1 or len(matrix_names) <= 1:
        deltas = {name: merge_one(name) for name in matrix_names}
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(merge_one, matrix_names)
            deltas = dict(zip(matrix_names, results))

    shared_vec = set.intersection(*(set(ex.vectors) for ex in extracts)) if extracts else set()
    vector_deltas = {
        name: [ex.vectors[name] for ex in extracts] for name in sorted(shared_vec)
    }
    merged = assemble_model(base, deltas, vector_deltas, alpha=args.alpha)
    write_container(merged, args.out)
    print(
        f"merged {len(matrix_names)} matrix tensors and {len(vector_deltas)} "
        f"1-D tensors from {len(extracts)} tasks -> {args.out}"
    )
    return 0


def _cmd_report(args) -> int:
    base = read_container(args.base)
    merged = read_container(args.merged)
    first = read_container(args.task[0])
    mode = detect_mode(first)
    extracts = _load_tasks(base, args.task, mode)
    matrix_names = sorted(extracts[0].matrices)
    n_tasks = len(extracts)

    rows = []
    per_task_cos = {path: [] for path in args.task}
    per_task_dir = {path: [] for path in args.task}
    align_values = []
    for name in matrix_names:
        if name not in merged.tensors:
            raise ValidationError(f"merged checkpoint is missing tensor {name!r}")
        if name not in base.tensors:
            raise ValidationError(f"base checkpoint is missing tensor {name!r}")
        merged_delta = merged.tensors[name].astype(np.float64) - base.tensors[
            name
        ].astype(np.float64)
        decomps = []
        for path, ex in zip(args.task, extracts):
            tv = ex.matrices[name]
            m, n = tv.shape
            r = min(_auto_rank(tv, n_tasks), max(1, min(m, n) // n_tasks))
            kd = decompose(tv, r)
            decomps.append(kd)
            c = cos_sim(tv.delta, merged_delta)
            try:
                d = projected_dir_sim(kd, merged_delta)
            except NumericalError:
                d = float("nan")
            rows.append((name, path, "cos_sim", c))
            rows.append((name, path, "projected_dir_sim", d))
            per_task_cos[path].append(c)
            per_task_dir[path].append(d)
        basis = build_cover_basis(decomps)
        a = alignment_score(basis.U_tilde, basis.V_tilde, decomps)
        rows.append((name, "", "alignment_score", a))
        align_values.append(a)

        # block structure of the aggregated coordinates: one block per task
        summed = np.zeros((basis.k, basis.k))
        for kd in decomps:
            summed += project(reconstruct(kd), basis)
        bounds = np.cumsum([0] + [kd.rank for kd in decomps])
        for i in range(n_tasks):
            for j in range(n_tasks):
                block = summed[bounds[i] : bounds[i + 1], bounds[j] : bounds[j + 1]]
                rows.append(
                    (name, "", f"block_mean_abs[{i},{j}]", float(np.mean(np.abs(block))))
                )

    for path in args.task:
        rows.append(("ALL", path, "cos_sim", float(np.nanmean(per_task_cos[path]))))
        rows.append(
            ("ALL", path, "projected_dir_sim", float(np.nanmean(per_task_dir[path])))
        )
    rows.append(("ALL", "", "alignment_score", float(np.mean(align_values))))

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["tensor", "task", "metric", "value"])
        for tensor, task, metric, value in rows:
            writer.writerow([tensor, task, metric, _fmt(value)])
    print(f"wrote {len(rows)} metric rows for {len(matrix_names)} tensors -> {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    container = read_container(args.file)
    dtype_names = {np.dtype("float32"): "F32", np.dtype("float64"): "F64"}
    for name in container.names():
        arr = container.tensors[name]
        print(f"{name}  {dtype_names[arr.dtype]}  {tuple(arr.shape)}")
        if arr.ndim != 2 or min(arr.shape) == 0:
            continue
        sigma = np.linalg.svd(arr.astype(np.float64), compute_uv=False)
        total = float(sigma.sum())
        if total == 0.0:
            print("    spectrum: all zero")
            continue
        full = sigma.size
        marks = []
        r = 1
        while r < full:
            marks.append(r)
            r *= 2
        marks.append(full)
        parts = [f"r={r} {float(sigma[:r].sum()) / total:.4f}" for r in marks]
        print("    top-r energy fraction: " + ", ".join(parts))
    if container.metadata:
        print("metadata:")
        for key in sorted(container.metadata):
            print(f"    {key} = {container.metadata[key]}")
    return 0


def _cmd_perturb(args) -> int:
    base = read_container(args.base)
    task = read_container(args.task)
    mode = detect_mode(task)
    extracted = extract_task_vectors(base, task, mode)
    matrix_names = sorted(extracted.matrices)
    if not matrix_names:
        raise ValidationError("no matrix tensors found to perturb")

    out_tensors = {name: arr.copy() for name, arr in task.tensors.items()}
    children = np.random.SeedSequence(args.seed).spawn(len(matrix_names))
    for name, child in zip(matrix_names, children):
        tv = extracted.matrices[name]
        r = args.rank if args.rank is not None else _auto_rank(tv, 4)
        m, n = tv.shape
        r = min(r, min(m, n))
        kd = decompose(tv, r)
        sub_seed = int(child.generate_state(1, dtype=np.uint64)[0])
        if args.kind == "energy":
            sigma_hat = energy_perturb(kd.sigma, args.p, fallback_seed=sub_seed)
            U_new, V_new = kd.U, kd.V
            achieved = float(
                kd.sigma
                @ sigma_hat
                / (np.linalg.norm(kd.sigma) * np.linalg.norm(sigma_hat))
            )
        else:
            kd_new = direction_perturb(kd, args.p, sub_seed)
            U_new, V_new = kd_new.U, kd_new.V
            sigma_hat = kd_new.sigma
            achieved = dir_sim(kd, kd_new)
        print(f"{name}: rank {r}, achieved similarity {achieved:.6f}")

        if mode == "lora":
            prefix = name[: -len(".weight")]
            b_name, a_name = prefix + ".lora_B", prefix + ".lora_A"
            b_dtype = task.tensors[b_name].dtype
            a_dtype = task.tensors[a_name].dtype
            out_tensors[b_name] = (U_new * sigma_hat).astype(b_dtype)
            out_tensors[a_name] = V_new.T.astype(a_dtype)
        else:
            delta_hat = (U_new * sigma_hat) @ V_new.T
            restored = base.tensors[name].astype(np.float64) + delta_hat
            out_tensors[name] = restored.astype(task.tensors[name].dtype)

    metadata = dict(task.metadata)
    metadata.update(
        {
            "dcmerge.perturb.kind": args.kind,
            "dcmerge.perturb.p": repr(args.p),
            "dcmerge.perturb.seed": str(args.seed),
        }
    )
    write_container(TensorContainer(tensors=out_tensors, metadata=metadata), args.out)
    print(f"perturbed {len(matrix_names)} tensors -> {args.out}")
    return 0


def _cmd_optimize_basis(args) -> int:
    base = read_container(args.base)
    first = read_container(args.task[0])
    mode = detect_mode(first)
    extracts = _load_tasks(base, args.task, mode)
    if args.tensor not in extracts[0].matrices:
        raise ValidationError(
            f"tensor {args.tensor!r} not found among merged matrices "
            f"{sorted(extracts[0].matrices)}"
        )
    tvs = [ex.matrices[args.tensor] for ex in extracts]
    m, n = tvs[0].shape
    n_tasks = len(tvs)
    r = args.rank if args.rank is not None else _auto_rank(tvs[0], n_tasks)
    r = min(r, max(1, min(m, n) // n_tasks))
    decomps = [decompose(tv, r) for tv in tvs]
    k = sum(kd.rank for kd in decomps)

    # naive initialization: truncated SVD of the plain task-arithmetic sum
    ta_sum = np.zeros((m, n))
    for tv in tvs:
        ta_sum += tv.delta
    init_svd = truncated_svd(ta_sum, min(k, min(m, n)))
    init = CoverBasis(U_tilde=init_svd.U, V_tilde=init_svd.V)

    whitened = build_cover_basis(decomps)
    score_init = alignment_score(init.U_tilde, init.V_tilde, decomps)
    score_white = alignment_score(whitened.U_tilde, whitened.V_tilde, decomps)

    cfg = OptimizerConfig(
        learning_rate=args.eta, max_iters=args.iters, log_every=args.log_every
    )
    final_basis, trace = optimize_cover_basis(decomps, init, cfg)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "score"])
        for it, score, _elapsed in trace.points:
            writer.writerow([it, _fmt(score)])
    print(f"initial score (naive TA basis): {score_init:.6f}")
    print(f"whitening score:                {score_white:.6f}")
    print(f"optimized score ({args.iters} iters): {trace.final_score:.6f}")
    print(f"trace -> {args.out}")
    return 0


def _cmd_accuracy_report(args) -> int:
    with open(args.table, "r", newline="") as fh:
        reader = csv.reader(fh)
        raw = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not raw:
        raise ValidationError(f"accuracy table {args.table!r} is empty")

    def parse_row(row):
        if len(row) != 4:
            raise ValidationError(
                f"accuracy rows need 4 columns (task, merged, finetuned, "
                f"zeroshot), got {len(row)}: {row!r}"
            )
        return TaskAccuracy(
            task=row[0].strip(),
            merged=float(row[1]),
            finetuned=float(row[2]),
            zeroshot=float(row[3]),
        )

    start = 0
    try:
        float(raw[0][1])
    except (ValueError, IndexError):
        start = 1
    if start == len(raw):
        raise ValidationError("accuracy table has a header but no data rows")
    try:
        table = [parse_row(row) for row in raw[start:]]
    except ValueError as exc:
        raise ValidationError(f"bad number in accuracy table: {exc}") from None

    report = accuracy_report(table)
    print(f"{'task':<24} {'normalized':>12} {'nai':>12}")
    for entry, (_, nai) in zip(table, report.per_task_nai):
        normalized = entry.merged / entry.finetuned
        print(f"{entry.task:<24} {normalized:>12.6f} {nai:>12.6f}")
    nai_values = [v for _, v in report.per_task_nai]
    print(f"{'average':<24} {report.avg_normalized:>12.6f} "
          f"{float(np.mean(nai_values)):>12.6f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcmerge",
        description="Directional-consistent merging of task-adapted model weights.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="merge task checkpoints into one model")
    p.add_argument("--base", required=True, help="base checkpoint container")
    p.add_argument("--task", required=True, nargs="+", action="extend",
                   help="task checkpoint containers")
    p.add_argument("--out", required=True, help="output container path")
    p.add_argument("--mode", required=True, choices=["lora", "fft"])
    p.add_argument("--rank", type=_rank_arg, default=None,
                   help="working rank per task: 'auto' or a positive integer")
    p.add_argument("--smoothing", choices=["none", "avg", "linear", "interp"],
                   default=None,
                   help="energy smoothing (default: avg for lora, none for fft)")
    p.add_argument("--rho", type=float, default=5.0,
                   help="max-to-min ratio clamp for linear smoothing")
    p.add_argument("--tau", type=float, default=0.5,
                   help="blend factor for interpolated smoothing")
    p.add_argument("--merger", choices=["ta", "ties"], default="ta")
    p.add_argument("--ties-keep", type=float, default=0.1)
    p.add_argument("--mask-block", type=_rank_arg, default=None,
                   help="structural mask block size: 'auto' or a positive integer")
    p.add_argument("--alpha", type=float, default=1.0,
                   help="rescaling coefficient applied at assembly")
    p.add_argument("--threads", type=int, default=None,
                   help="per-tensor worker threads (DCMERGE_THREADS overrides)")
    p.add_argument("--seed", type=int, default=None,
                   help="accepted for interface stability; merging is deterministic")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("report", help="similarity metrics for a merged model")
    p.add_argument("--base", required=True)
    p.add_argument("--merged", required=True)
    p.add_argument("--task", required=True, nargs="+", action="extend")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("inspect", help="list tensors and spectrum statistics")
    p.add_argument("file")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("perturb", help="degrade a task checkpoint by a known amount")
    p.add_argument("--task", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--kind", required=True, choices=["energy", "direction"])
    p.add_argument("--p", required=True, type=float,
                   help="similarity retained, in [0, 1]")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--rank", type=_rank_arg, default=None)
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser("optimize-basis",
                       help="gradient-ascend the alignment score from a naive basis")
    p.add_argument("--base", required=True)
    p.add_argument("--task", required=True, nargs="+", action="extend")
    p.add_argument("--tensor", required=True)
    p.add_argument("--eta", required=True, type=float)
    p.add_argument("--iters", required=True, type=int)
    p.add_argument("--out", required=True, help="trace CSV path")
    p.add_argument("--rank", type=_rank_arg, default=None)
    p.add_argument("--log-every", type=int, default=1)
    p.set_defaults(func=_cmd_optimize_basis)

    p = sub.add_parser("accuracy-report",
                       help="normalized accuracy and NAI from a results table")
    p.add_argument("--table", required=True,
                   help="CSV with columns task, merged, finetuned, zeroshot")
    p.set_defaults(func=_cmd_accuracy_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
